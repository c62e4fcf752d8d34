"""Road-network graph: OSM XML / edge-list ingestion and shortest-path queries."""

from __future__ import annotations

import heapq
import io
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from roadtte.geodesy import GeoPoint, GridSpec, distance_latlon

logger = logging.getLogger(__name__)

EDGE_LIST_VERSION = 1
UNREACHABLE = math.inf
ONEWAY_FORWARD = {"yes", "true", "1"}
ONEWAY_REVERSE = {"-1", "reverse"}


class NetworkError(Exception):
    pass


class EmptyNetworkError(NetworkError):
    pass


class OSMParseError(NetworkError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class EdgeListFormatError(NetworkError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def quantize_km(x: float) -> float:
    # 9 decimals survive a text round-trip bit-exactly
    return round(float(x), 9)


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Immutable road graph.

    Nodes are addressed internally by dense indices ``0..n-1`` in construction
    order; ``node_ids`` is the side table back to the original (OSM) ids.
    ``links`` are the stored road segments; a link with ``directed=False``
    expands into arcs in both directions.
    """

    node_ids: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    link_src: np.ndarray
    link_dst: np.ndarray
    link_len: np.ndarray
    link_directed: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.node_ids)
        index = {}
        for i, nid in enumerate(self.node_ids.tolist()):
            if nid in index:
                raise NetworkError(f"duplicate node id {nid}")
            index[nid] = i
        object.__setattr__(self, "_index", index)
        if len(self.link_src) and (
            self.link_src.min() < 0 or self.link_dst.min() < 0
            or self.link_src.max() >= n or self.link_dst.max() >= n
        ):
            raise NetworkError("edge endpoint outside node range")
        if np.any(self.link_src == self.link_dst):
            raise NetworkError("self-loop edge")
        if not np.all(np.isfinite(self.link_len)) or np.any(self.link_len <= 0):
            raise NetworkError("edge lengths must be finite and positive")

        # CSR adjacency over directed arcs
        src = np.concatenate([self.link_src, self.link_dst[~self.link_directed]])
        dst = np.concatenate([self.link_dst, self.link_src[~self.link_directed]])
        length = np.concatenate([self.link_len, self.link_len[~self.link_directed]])
        order = np.lexsort((dst, src))
        src, dst, length = src[order], dst[order], length[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        object.__setattr__(self, "indptr", np.cumsum(indptr))
        object.__setattr__(self, "arc_dst", dst)
        object.__setattr__(self, "arc_len", length)
        ptr, dl, ll = self.indptr.tolist(), dst.tolist(), length.tolist()
        object.__setattr__(self, "_adj", [list(zip(dl[ptr[i]:ptr[i + 1]], ll[ptr[i]:ptr[i + 1]]))
                                          for i in range(n)])
        for arr in (self.node_ids, self.lats, self.lons, self.link_src, self.link_dst,
                    self.link_len, self.link_directed, self.indptr, self.arc_dst, self.arc_len):
            arr.setflags(write=False)

    @classmethod
    def build(cls, node_ids, lats, lons, links: Iterable[tuple[int, int, float, bool]],
              metadata: dict | None = None) -> "RoadNetwork":
        """Construct from internal-index links ``(src, dst, length_km, directed)``."""
        links = list(links)
        return cls(
            node_ids=np.asarray(node_ids, dtype=np.int64),
            lats=np.asarray(lats, dtype=np.float64),
            lons=np.asarray(lons, dtype=np.float64),
            link_src=np.array([l[0] for l in links], dtype=np.int64),
            link_dst=np.array([l[1] for l in links], dtype=np.int64),
            link_len=np.array([quantize_km(l[2]) for l in links], dtype=np.float64),
            link_directed=np.array([bool(l[3]) for l in links], dtype=bool),
            metadata=dict(metadata or {}),
        )

    @classmethod
    def from_coordinates(cls, node_ids, lats, lons, pairs: Iterable[tuple[int, int, bool]],
                         metadata: dict | None = None) -> "RoadNetwork":
        """Build with each link's length set to the Vincenty distance of its endpoints."""
        links = [
            (s, d, distance_latlon(lats[s], lons[s], lats[d], lons[d]), directed)
            for s, d, directed in pairs
        ]
        return cls.build(node_ids, lats, lons, links, metadata)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_arcs(self) -> int:
        return len(self.arc_dst)

    def index_of(self, node_id: int) -> int:
        try:
            return self._index[int(node_id)]
        except KeyError:
            raise KeyError(f"unknown node id {node_id}") from None

    def has_node(self, node_id: int) -> bool:
        return int(node_id) in self._index

    def location(self, idx: int) -> GeoPoint:
        return GeoPoint(float(self.lats[idx]), float(self.lons[idx]))

    def neighbors(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[idx], self.indptr[idx + 1]
        return self.arc_dst[lo:hi], self.arc_len[lo:hi]

    def bbox(self, cell_deg: float = 0.005) -> GridSpec:
        """Grid over the node bounding box, padded so it is never degenerate."""
        pad = cell_deg * 1e-3
        return GridSpec(
            GeoPoint(float(self.lats.min()), float(self.lons.min())),
            GeoPoint(min(90.0, float(self.lats.max()) + pad), min(180.0, float(self.lons.max()) + pad)),
            cell_deg,
        )

    def undirected_neighbors(self) -> list[list[int]]:
        """Sorted neighbor lists ignoring arc direction."""
        nbrs: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for s, d in zip(self.link_src.tolist(), self.link_dst.tolist()):
            nbrs[s].add(d)
            nbrs[d].add(s)
        return [sorted(s) for s in nbrs]


# ---------------------------------------------------------------------------
# OSM XML


def _oneway(tags: dict) -> int:
    """0 = both directions, 1 = forward only, -1 = reverse only."""
    value = tags.get("oneway", "").strip().lower()
    if value in ONEWAY_FORWARD:
        return 1
    if value in ONEWAY_REVERSE:
        return -1
    if value == "" and tags.get("junction", "").lower() == "roundabout":
        return 1
    return 0


def parse_osm_xml(stream, bbox: tuple[GeoPoint, GeoPoint] | None = None) -> RoadNetwork:
    """Build a network from an OSM XML extract.

    Only ``highway``-tagged ways are kept; every consecutive node pair along a
    way becomes one link. ``bbox`` is a ``(south_west, north_east)`` pair;
    nodes outside it are dropped with their incident links.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    head = stream.read()
    if not head.strip():
        raise EmptyNetworkError("empty network: document contains no ways")
    stream = io.BytesIO(head)

    nodes: dict[int, tuple[float, float]] = {}
    node_order: list[int] = []
    ways: list[tuple[list[int], dict]] = []
    cur_refs: list[int] | None = None
    cur_tags: dict = {}
    try:
        for event, elem in ET.iterparse(stream, events=("start", "end")):
            tag = elem.tag
            if event == "start":
                if tag == "way":
                    cur_refs, cur_tags = [], {}
                continue
            if tag == "node":
                try:
                    nid = int(elem.attrib["id"])
                    lat, lon = float(elem.attrib["lat"]), float(elem.attrib["lon"])
                except (KeyError, ValueError) as exc:
                    raise OSMParseError(f"bad node element: {exc}") from None
                if nid not in nodes:
                    node_order.append(nid)
                nodes[nid] = (lat, lon)
                elem.clear()
            elif tag == "nd" and cur_refs is not None:
                cur_refs.append(int(elem.attrib["ref"]))
            elif tag == "tag" and cur_refs is not None:
                cur_tags[elem.attrib.get("k", "")] = elem.attrib.get("v", "")
            elif tag == "way":
                if "highway" in cur_tags:
                    ways.append((cur_refs, cur_tags))
                cur_refs = None
                elem.clear()
    except ET.ParseError as exc:
        raise OSMParseError(f"malformed XML: {exc}", exc.position[0]) from None

    def inside(nid: int) -> bool:
        if nid not in nodes:
            return False
        if bbox is None:
            return True
        lat, lon = nodes[nid]
        sw, ne = bbox
        return sw.lat <= lat <= ne.lat and sw.lon <= lon <= ne.lon

    segments: list[tuple[int, int, int]] = []
    used: set[int] = set()
    missing_refs = 0
    for refs, tags in ways:
        direction = _oneway(tags)
        for u, v in zip(refs, refs[1:]):
            if u not in nodes or v not in nodes:
                missing_refs += 1
                continue
            if u == v or not (inside(u) and inside(v)):
                continue
            if direction == -1:
                u, v = v, u
            segments.append((u, v, direction))
            used.update((u, v))
    if not segments:
        raise EmptyNetworkError("empty network: no highway ways retained")

    kept = [nid for nid in node_order if nid in used]
    index = {nid: i for i, nid in enumerate(kept)}
    lats = [nodes[nid][0] for nid in kept]
    lons = [nodes[nid][1] for nid in kept]
    links, seen, zero_length = [], set(), 0
    for u, v, direction in segments:
        s, d = index[u], index[v]
        directed = direction != 0
        key = (s, d, True) if directed else (min(s, d), max(s, d), False)
        if key in seen:
            continue
        seen.add(key)
        length = distance_latlon(lats[s], lons[s], lats[d], lons[d])
        if quantize_km(length) <= 0:
            zero_length += 1
            continue
        links.append((s, d, length, directed))
    meta = {
        "source": "osm-xml",
        "highway_ways": len(ways),
        "nodes": len(kept),
        "links": len(links),
        "missing_refs": missing_refs,
        "zero_length_skipped": zero_length,
    }
    net = RoadNetwork.build(kept, lats, lons, links, meta)
    net.metadata["arcs"] = net.n_arcs
    logger.info("parsed OSM network: %d nodes, %d arcs", net.n_nodes, net.n_arcs)
    return net


def restrict_to_bbox(net: RoadNetwork, bbox: tuple[GeoPoint, GeoPoint]) -> RoadNetwork:
    """Sub-network of the nodes inside ``bbox`` (inclusive) and the links between them."""
    sw, ne = bbox
    keep = (net.lats >= sw.lat) & (net.lats <= ne.lat) & (net.lons >= sw.lon) & (net.lons <= ne.lon)
    old = np.flatnonzero(keep)
    if old.size == 0:
        raise EmptyNetworkError("empty network: no nodes inside the bounding box")
    remap = {int(o): i for i, o in enumerate(old.tolist())}
    links = [(remap[s], remap[d], length, bool(dr))
             for s, d, length, dr in zip(net.link_src.tolist(), net.link_dst.tolist(),
                                         net.link_len.tolist(), net.link_directed.tolist())
             if s in remap and d in remap]
    meta = dict(net.metadata, bbox=[sw.lat, sw.lon, ne.lat, ne.lon])
    return RoadNetwork.build(net.node_ids[old].tolist(), net.lats[old].tolist(), net.lons[old].tolist(), links, meta)


# ---------------------------------------------------------------------------
# edge list


def format_edge_list(net: RoadNetwork) -> str:
    lines = ["# nodes"]
    for nid, lat, lon in zip(net.node_ids.tolist(), net.lats.tolist(), net.lons.tolist()):
        lines.append(f"{nid},{lat!r},{lon!r}")
    lines.append("# edges")
    ids = net.node_ids
    for s, d, length, directed in zip(net.link_src.tolist(), net.link_dst.tolist(),
                                      net.link_len.tolist(), net.link_directed.tolist()):
        lines.append(f"{ids[s]},{ids[d]},{length:.9f},{int(directed)}")
    return "\n".join(lines) + "\n"


def save_edge_list(net: RoadNetwork, path, header_lines: Sequence[str] = ()) -> None:
    text = "".join(f"# {h}\n" for h in header_lines) + format_edge_list(net)
    Path(path).write_text(text, encoding="utf-8")


def parse_edge_list(text: str, metadata: dict | None = None) -> RoadNetwork:
    section = None
    ids: list[int] = []
    lats: list[float] = []
    lons: list[float] = []
    index: dict[int, int] = {}
    links = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            marker = line.lstrip("#").strip().lower()
            if marker in ("nodes", "edges"):
                section = marker
            continue
        cols = [c.strip() for c in line.split(",")]
        if section == "nodes":
            if len(cols) != 3:
                raise EdgeListFormatError(f"expected id,lat,lon but got {len(cols)} columns", lineno)
            try:
                nid, lat, lon = int(cols[0]), float(cols[1]), float(cols[2])
            except ValueError as exc:
                raise EdgeListFormatError(str(exc), lineno) from None
            if not (math.isfinite(lat) and math.isfinite(lon)):
                raise EdgeListFormatError(f"non-finite coordinate for node {nid}", lineno)
            if nid in index:
                raise EdgeListFormatError(f"duplicate node id {nid}", lineno)
            index[nid] = len(ids)
            ids.append(nid)
            lats.append(lat)
            lons.append(lon)
        elif section == "edges":
            if len(cols) != 4:
                raise EdgeListFormatError(
                    f"expected src_id,dst_id,length_km,directed but got {len(cols)} columns", lineno)
            try:
                s, d, length, directed = int(cols[0]), int(cols[1]), float(cols[2]), int(cols[3])
            except ValueError as exc:
                raise EdgeListFormatError(str(exc), lineno) from None
            for endpoint in (s, d):
                if endpoint not in index:
                    raise EdgeListFormatError(f"dangling edge endpoint: node {endpoint} not defined", lineno)
            if directed not in (0, 1):
                raise EdgeListFormatError(f"directed flag must be 0 or 1, got {directed}", lineno)
            if not (math.isfinite(length) and length > 0):
                raise EdgeListFormatError(f"edge length must be positive, got {cols[2]}", lineno)
            if s == d:
                raise EdgeListFormatError(f"self-loop on node {s}", lineno)
            links.append((index[s], index[d], length, bool(directed)))
        else:
            raise EdgeListFormatError("data row before '# nodes' header", lineno)
    if not ids:
        raise EmptyNetworkError("empty network: edge list defines no nodes")
    meta = {"source": "edge-list"}
    meta.update(metadata or {})
    return RoadNetwork.build(ids, lats, lons, links, meta)


def load_edge_list(path) -> RoadNetwork:
    return parse_edge_list(Path(path).read_text(encoding="utf-8"), {"path": Path(path).name})


# ---------------------------------------------------------------------------
# shortest paths


def _dijkstra(net: RoadNetwork, s: int, target: int | None = None):
    dist = {s: 0.0}
    prev: dict[int, int] = {}
    done = set()
    heap = [(0.0, s)]
    adj = net._adj
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == target:
            break
        for v, w in adj[u]:
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, prev


def map_distance(net: RoadNetwork, src: int, dst: int) -> float:
    """Shortest directed path length in km between node ids; ``UNREACHABLE`` if none."""
    s, t = net.index_of(src), net.index_of(dst)
    if s == t:
        return 0.0
    dist, _ = _dijkstra(net, s, t)
    return float(dist.get(t, UNREACHABLE))


def shortest_path(net: RoadNetwork, src: int, dst: int) -> list[int] | None:
    """Node ids along one shortest path, or None when unreachable."""
    s, t = net.index_of(src), net.index_of(dst)
    if s == t:
        return [int(src)]
    dist, prev = _dijkstra(net, s, t)
    if t not in dist:
        return None
    path = [t]
    while path[-1] != s:
        path.append(prev[path[-1]])
    return [int(net.node_ids[i]) for i in reversed(path)]


def single_source_distances(net: RoadNetwork, src: int) -> np.ndarray:
    """Distances from one node id to every internal index (inf when unreachable)."""
    dist, _ = _dijkstra(net, net.index_of(src))
    out = np.full(net.n_nodes, math.inf)
    for k, v in dist.items():
        out[k] = v
    return out


@dataclass
class TripDistances:
    gaps: list[float]
    total: float
    fallbacks: int


def trip_map_distances(net: RoadNetwork, node_ids: Sequence[int],
                       cache: dict | None = None) -> TripDistances:
    """Cumulative map distance from the first node along consecutive hops.

    Unreachable hops contribute their Vincenty length instead and are counted
    in ``fallbacks``.
    """
    for nid in node_ids:
        net.index_of(nid)
    gaps = [0.0]
    fallbacks = 0
    for u, v in zip(node_ids, node_ids[1:]):
        key = (int(u), int(v))
        hop = cache.get(key) if cache is not None else None
        if hop is None:
            hop = map_distance(net, u, v)
            if cache is not None:
                cache[key] = hop
        if hop == UNREACHABLE:
            fallbacks += 1
            a, b = net.index_of(u), net.index_of(v)
            hop = distance_latlon(net.lats[a], net.lons[a], net.lats[b], net.lons[b])
        gaps.append(gaps[-1] + hop)
    return TripDistances(gaps, gaps[-1], fallbacks)
