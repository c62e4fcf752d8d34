import io
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadtte import roadnet as rn
from roadtte.geodesy import GeoPoint, distance_latlon

from graphs import arcs_of, geometric_network, random_network
from oracles import bellman_ford, brute_force_shortest

FIXTURE = Path(__file__).parent / "fixtures" / "three_nodes.osm"


def _osm(oneway_tag: str = "") -> bytes:
    text = FIXTURE.read_text()
    if oneway_tag:
        text = text.replace('<tag k="highway" v="residential"/>',
                            f'<tag k="highway" v="residential"/>{oneway_tag}')
    return text.encode()


def test_osm_fixture_counts():
    net = rn.parse_osm_xml(io.BytesIO(_osm()))
    assert net.node_ids.tolist() == [101, 102, 103]
    assert net.n_arcs == 4


def test_osm_oneway_gives_single_arc():
    net = rn.parse_osm_xml(_osm('<tag k="oneway" v="yes"/>'))
    assert net.n_arcs == 3
    a, b = net.index_of(101), net.index_of(102)
    assert rn.map_distance(net, 101, 102) < math.inf
    assert rn.map_distance(net, 102, 101) == rn.UNREACHABLE
    assert b in net.neighbors(a)[0].tolist()


def test_osm_reverse_oneway():
    net = rn.parse_osm_xml(_osm('<tag k="oneway" v="-1"/>'))
    assert rn.map_distance(net, 101, 102) == rn.UNREACHABLE
    assert rn.map_distance(net, 102, 101) > 0


def test_osm_edge_lengths_are_vincenty():
    net = rn.parse_osm_xml(_osm())
    for s, d, w in zip(net.link_src, net.link_dst, net.link_len):
        assert abs(w - distance_latlon(net.lats[s], net.lons[s], net.lats[d], net.lons[d])) <= 1e-9


def test_osm_bbox_drops_outside_nodes():
    net = rn.parse_osm_xml(_osm(), (GeoPoint(41.149, -8.611), GeoPoint(41.1515, -8.6095)))
    assert net.node_ids.tolist() == [101, 102]
    assert net.n_arcs == 2


def test_osm_empty_document():
    with pytest.raises(rn.EmptyNetworkError, match="empty network"):
        rn.parse_osm_xml(b"")
    with pytest.raises(rn.EmptyNetworkError, match="empty network"):
        rn.parse_osm_xml(b"<osm version='0.6'></osm>")


def test_osm_malformed_reports_line():
    bad = b"<osm>\n<node id='1' lat='1' lon='2'/>\n<way id='3'>\n</osm>\n"
    with pytest.raises(rn.OSMParseError, match="line") as info:
        rn.parse_osm_xml(bad)
    assert info.value.line == 4


def test_edge_list_round_trip_is_bit_exact(tmp_path, rng):
    net = random_network(rng, 454, p_edge=0.01)
    path = tmp_path / "net.txt"
    rn.save_edge_list(net, path, ["made by a test"])
    back = rn.load_edge_list(path)
    for name in ("node_ids", "lats", "lons", "link_src", "link_dst", "link_len", "link_directed"):
        a, b = getattr(net, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes(), name


def test_edge_list_dangling_endpoint():
    text = "# nodes\n1,41.0,-8.6\n2,41.1,-8.6\n# edges\n1,3,0.5,0\n"
    with pytest.raises(rn.EdgeListFormatError, match="line 5.*dangling.*3"):
        rn.parse_edge_list(text)


@pytest.mark.parametrize("text, pattern", [
    ("# nodes\n1,41.0\n", "line 2.*columns"),
    ("# nodes\n1,nan,-8.6\n", "line 2.*non-finite"),
    ("# nodes\n1,41.0,-8.6\n2,41.1,-8.6\n# edges\n1,2,0.5\n", "line 5.*columns"),
    ("# nodes\n1,41.0,-8.6\n2,41.1,-8.6\n# edges\n1,2,-0.5,0\n", "line 5.*positive"),
    ("# nodes\n1,41.0,-8.6\n1,41.1,-8.6\n", "line 3.*duplicate"),
    ("1,41.0,-8.6\n", "line 1"),
])
def test_edge_list_row_numbered_errors(text, pattern):
    with pytest.raises(rn.EdgeListFormatError, match=pattern):
        rn.parse_edge_list(text)


def test_edge_list_empty_edge_section():
    net = rn.parse_edge_list("# nodes\n1,41.0,-8.6\n2,41.1,-8.6\n# edges\n")
    assert net.n_nodes == 2 and net.n_arcs == 0


def test_network_is_immutable(rng):
    net = random_network(rng, 5, p_edge=0.8)
    with pytest.raises(ValueError):
        net.lats[0] = 0.0
    with pytest.raises(AttributeError):
        net.node_ids = np.zeros(5)


def test_map_distance_basics():
    net = rn.RoadNetwork.build([1, 2, 3, 4], [41.0, 41.01, 41.02, 41.5], [-8.6] * 4,
                               [(0, 1, 1.0, False), (1, 2, 2.0, False)])
    assert rn.map_distance(net, 2, 2) == 0.0
    assert rn.map_distance(net, 1, 3) == 3.0
    assert rn.map_distance(net, 1, 4) == rn.UNREACHABLE
    with pytest.raises(KeyError):
        rn.map_distance(net, 1, 99)


def test_dijkstra_matches_brute_force_on_all_pairs(rng):
    net = random_network(rng, 8, p_edge=0.4)
    arcs = arcs_of(net)
    ids = net.node_ids.tolist()
    for s in range(8):
        for t in range(8):
            ref = brute_force_shortest(8, arcs, s, t)
            got = rn.map_distance(net, ids[s], ids[t])
            assert got == ref or abs(got - ref) <= 1e-9


def test_dijkstra_matches_bellman_ford(rng):
    for _ in range(50):
        n = int(rng.integers(2, 31))
        net = random_network(rng, n, p_edge=float(rng.uniform(0.05, 0.3)))
        arcs = arcs_of(net)
        for s in range(n):
            ref = bellman_ford(n, arcs, s)
            got = rn.single_source_distances(net, int(net.node_ids[s]))
            for a, b in zip(got.tolist(), ref):
                assert (a == b == math.inf) or abs(a - b) <= 1e-9


def test_shortest_path_realizes_the_distance(rng):
    net = random_network(rng, 20, p_edge=0.25)
    ids = net.node_ids.tolist()
    best = {(s, d): w for s, d, w in arcs_of(net)}
    for s in ids[:5]:
        for t in ids[5:10]:
            path = rn.shortest_path(net, s, t)
            d = rn.map_distance(net, s, t)
            if path is None:
                assert d == rn.UNREACHABLE
                continue
            length = 0.0
            for u, v in zip(path, path[1:]):
                length += min(w for (a, b), w in best.items()
                              if (a, b) == (net.index_of(u), net.index_of(v)))
            assert abs(length - d) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_triangle_inequality_and_straight_line_bound(seed):
    r = np.random.default_rng(seed)
    net = geometric_network(r, 25)
    ids = net.node_ids.tolist()
    for _ in range(10):
        a, b, c = (int(x) for x in r.choice(ids, 3))
        ab, bc, ac = rn.map_distance(net, a, b), rn.map_distance(net, b, c), rn.map_distance(net, a, c)
        if math.isfinite(ab) and math.isfinite(bc):
            assert ac <= ab + bc + 1e-9
        if math.isfinite(ac):
            ia, ic = net.index_of(a), net.index_of(c)
            assert ac >= distance_latlon(net.lats[ia], net.lons[ia], net.lats[ic], net.lons[ic]) - 1e-6


def test_trip_map_distances_examples():
    net = rn.RoadNetwork.build([1, 2, 3, 9], [41.0, 41.01, 41.02, 41.5], [-8.6] * 4,
                               [(0, 1, 1.0, False), (1, 2, 2.0, False)])
    single = rn.trip_map_distances(net, [2])
    assert (single.gaps, single.total, single.fallbacks) == ([0.0], 0.0, 0)
    md = rn.trip_map_distances(net, [1, 2, 3])
    assert md.gaps == [0.0, 1.0, 3.0] and md.total == 3.0
    md = rn.trip_map_distances(net, [1, 2, 9])
    assert md.fallbacks == 1
    hop = distance_latlon(41.01, -8.6, 41.5, -8.6)
    assert md.total == 1.0 + hop


def test_restrict_to_bbox(rng):
    net = geometric_network(rng, 40)
    box = (GeoPoint(41.1, -8.7), GeoPoint(41.125, -8.675))
    sub = rn.restrict_to_bbox(net, box)
    assert 0 < sub.n_nodes < net.n_nodes
    assert np.all((sub.lats >= 41.1) & (sub.lats <= 41.125))
