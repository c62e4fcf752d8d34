"""``roadtte`` command line: file-based pipeline stages.

Each stage reads its inputs, computes everything in memory, then writes its
artifacts plus a ``<primary output>.manifest`` JSON sidecar recording input
and output digests, the config digest and the seed. Nothing is written when
a stage fails.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from roadtte import __version__
from roadtte import embeddings as emb
from roadtte import evalreport as ev
from roadtte import matcher
from roadtte import roadnet as rn
from roadtte import synthetic as syn
from roadtte import tensorcore as tc
from roadtte import trips as tr
from roadtte import ttemodel as tm
from roadtte.config import PipelineConfig, PipelineConfigError, load_config
from roadtte.geodesy import GeoPoint

logger = logging.getLogger("roadtte")

MANIFEST_VERSION = 1
FORMAT_VERSIONS = {
    "edge-list": rn.EDGE_LIST_VERSION,
    "trip-records": tr.TRIP_FORMAT_VERSION,
    "embeddings": emb.EMBEDDING_FORMAT_VERSION,
    "tensor-container": tc.CHECKPOINT_VERSION,
    "model-checkpoint": tm.MODEL_FORMAT_VERSION,
    "eval-csv": ev.EVAL_FORMAT_VERSION,
    "manifest": MANIFEST_VERSION,
}


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Stage:
    """Collects a stage's inputs and outputs, then commits them together."""

    def __init__(self, name: str, cfg: PipelineConfig):
        self.name = name
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[tuple[Path, bytes]] = []

    def fail(self, message: str):
        raise StageError(self.name, message)

    def read(self, path, what: str) -> bytes:
        p = Path(path)
        if not p.is_file():
            self.fail(f"missing {what} artifact: {path}")
        data = p.read_bytes()
        self.inputs[p.name] = _sha256(data)
        return data

    def read_text(self, path, what: str) -> str:
        return self.read(path, what).decode("utf-8")

    def header_lines(self, fmt: str) -> list[str]:
        return [f"roadtte {self.name} {fmt} v{FORMAT_VERSIONS[fmt]}"] + [f"config {l}" for l in self.cfg.lines()]

    def emit(self, path, data: bytes | str):
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.outputs.append((Path(path), data))

    def commit(self):
        if not self.outputs:
            return
        for path, data in self.outputs:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        manifest = {
            "format": "roadtte-manifest",
            "version": MANIFEST_VERSION,
            "stage": self.name,
            "seed": self.cfg["seed"],
            "config_digest": self.cfg.digest(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.name: _sha256(d) for p, d in self.outputs},
        }
        primary = self.outputs[0][0]
        Path(str(primary) + ".manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                                    encoding="utf-8")


# ---------------------------------------------------------------------------
# helpers


def _parse_bbox(text: str, stage: Stage) -> tuple[GeoPoint, GeoPoint]:
    try:
        s, w, n, e = (float(x) for x in text.split(","))
        return GeoPoint(s, w), GeoPoint(n, e)
    except (ValueError, TypeError) as exc:
        stage.fail(f"bad bbox {text!r} (want south,west,north,east): {exc}")


def _records_text(trip_list, header: dict) -> str:
    lines = ["# " + json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines += [tr.trip_to_record(t) for t in trip_list]
    return "\n".join(lines) + "\n"


def _trip_header(stage: Stage, **extra) -> dict:
    head = {"format": "roadtte-trips", "version": tr.TRIP_FORMAT_VERSION, "stage": stage.name,
            "config": stage.cfg.lines()}
    head.update(extra)
    return head


def _load_trips(stage: Stage, path) -> list:
    text = stage.read_text(path, "trip records")
    try:
        return [tr.trip_from_record(l) for l in text.splitlines() if l.strip() and not l.startswith("#")]
    except (ValueError, TypeError, KeyError) as exc:
        stage.fail(f"cannot read trip records {path}: {exc}")


def _load_map(stage: Stage, path) -> rn.RoadNetwork:
    text = stage.read_text(path, "road map")
    try:
        return rn.parse_edge_list(text, {"path": Path(path).name})
    except rn.NetworkError as exc:
        stage.fail(f"bad road map {path}: {exc}")


def _walk_config(cfg: PipelineConfig) -> emb.WalkConfig:
    return emb.WalkConfig(seed=cfg["seed"], **cfg.section("embed"))


def _model_config(cfg: PipelineConfig) -> tm.ModelConfig:
    names = {f.name for f in fields(tm.ModelConfig)}
    kw = {k: v for k, v in cfg.section("model").items() if k in names}
    return tm.ModelConfig(seed=cfg["seed"], **kw)


def _splits(cfg: PipelineConfig, trips: list):
    return tr.split_dataset(trips, cfg["trips.split"], cfg["seed"])


# ---------------------------------------------------------------------------
# stages


def cmd_ingest_map(args, cfg: PipelineConfig) -> Stage:
    st = Stage("ingest-map", cfg)
    bbox = _parse_bbox(args.bbox, st) if args.bbox else None
    try:
        if args.osm:
            net = rn.parse_osm_xml(io.BytesIO(st.read(args.osm, "OSM XML")), bbox)
        else:
            net = _load_map(st, args.edges)
            if bbox is not None:
                net = rn.restrict_to_bbox(net, bbox)
    except (rn.NetworkError, ValueError) as exc:
        st.fail(str(exc))
    head = st.header_lines("edge-list") + [f"nodes {net.n_nodes} links {len(net.link_src)} arcs {net.n_arcs}"]
    st.emit(args.out, "".join(f"# {h}\n" for h in head) + rn.format_edge_list(net))
    return st


def cmd_prepare_trips(args, cfg: PipelineConfig) -> Stage:
    st = Stage("prepare-trips", cfg)
    max_points = cfg["trips.max_points"]
    if args.porto:
        lines = st.read_text(args.porto, "Porto CSV").splitlines(keepends=True)
        trips, stats, _ = tr.read_porto_csv(lines, max_points)
        source = "porto"
    else:
        lines = st.read_text(args.beijing, "trip records").splitlines()
        trips, stats = tr.read_beijing_records(lines, max_points)
        source = "records"
    if not trips:
        st.fail(f"no trips accepted from input ({stats.as_dict()})")
    region = None
    dropped = 0
    if args.region == "auto":
        try:
            region = tr.select_dense_region(trips, cfg["trips.region_width_deg"], cfg["trips.region_stride_deg"])
        except tr.ConfigError as exc:
            st.fail(str(exc))
    elif args.region != "none":
        region = _parse_bbox(args.region, st)
    if region is not None:
        trips, dropped = tr.filter_trips_bbox(trips, region)
    try:
        tr.validate_trips(trips, cfg["trips.min_points"])
    except tr.TripError as exc:
        st.fail(str(exc))
    head = _trip_header(st, source=source, timestamps="UTC", parse=stats.as_dict(), region_dropped=dropped,
                        region=None if region is None else [region[0].lat, region[0].lon, region[1].lat,
                                                            region[1].lon])
    st.emit(args.out, _records_text(trips, head))
    return st


def cmd_match(args, cfg: PipelineConfig) -> Stage:
    st = Stage("match", cfg)
    trips = _load_trips(st, args.trips)
    net = _load_map(st, args.map)
    try:
        idx = matcher.build_index(net, cfg["match.cell_deg"])
    except matcher.MatcherConfigError as exc:
        st.fail(str(exc))
    mapped = [matcher.attribute_trip(idx, net, t) for t in trips]
    tr.attach_distances(mapped, net, "coordinate")
    for t in mapped:
        bad = tr.gap_violations(t.coord_gap, t.n_points, name="coord_gap")
        bad += tr.gap_violations(t.map_gap, t.n_points, name="map_gap")
        if bad:
            st.fail(f"trip {t.trip_id}: {'; '.join(bad)}")
    errors = np.concatenate([t.attribution_errors for t in mapped]) if mapped else np.zeros(0)
    fallbacks = int(sum(t.map_fallbacks for t in mapped))
    head = _trip_header(st, points=int(errors.size), map_fallback_hops=fallbacks,
                        max_attribution_km=float(errors.max()) if errors.size else 0.0)
    st.emit(args.out, _records_text(mapped, head))
    hist = matcher.attribution_histogram(errors, cfg["match.histogram_bucket_km"])
    hist_head = [f"roadtte match attribution-histogram bucket_km={cfg['match.histogram_bucket_km']!r}"]
    hist_head += [f"config {l}" for l in cfg.lines()]
    st.emit(args.histogram, "".join(f"# {h}\n" for h in hist_head)
            + matcher.format_histogram_csv(hist))
    return st


def cmd_embed(args, cfg: PipelineConfig) -> Stage:
    st = Stage("embed", cfg)
    net = _load_map(st, args.map)
    try:
        table = emb.embed_network(net, _walk_config(cfg))
    except emb.EmbeddingConfigError as exc:
        st.fail(str(exc))
    # the word-vector text convention has no room for a header; the manifest carries the config
    st.emit(args.out, emb.format_embeddings(table))
    return st


def cmd_train(args, cfg: PipelineConfig) -> Stage:
    st = Stage("train", cfg)
    try:
        mcfg = _model_config(cfg)
    except tm.ModelConfigError as exc:
        st.fail(str(exc))
    if mcfg.uses_embeddings and not args.embeddings:
        st.fail(f"{mcfg.variant} needs the node embeddings artifact (--embeddings), which was not given")
    trips = _load_trips(st, args.trips)
    if not trips or not isinstance(trips[0], tr.MappedTrip):
        st.fail(f"{args.trips} holds no attributed trips; run match first")
    table = None
    if mcfg.uses_embeddings:
        try:
            table = emb.parse_embeddings(st.read_text(args.embeddings, "node embeddings"))
        except emb.EmbeddingFormatError as exc:
            st.fail(f"bad embeddings {args.embeddings}: {exc}")
    if args.map:
        net = _load_map(st, args.map)
        unknown = {int(n) for t in trips for n in t.node_ids} - set(net.node_ids.tolist())
        if unknown:
            st.fail(f"trips reference {len(unknown)} node ids absent from {args.map}")
    for t in trips:
        tr.set_distance_mode(t, mcfg.distance_mode)
    train_set, val_set, _ = _splits(cfg, trips)
    try:
        model = tm.train(train_set, val_set, table, mcfg)
    except (tm.ModelConfigError, tm.TrainingDiverged) as exc:
        st.fail(str(exc))
    extra = {"pipeline_config": cfg.lines(), "split": list(cfg["trips.split"]), "split_seed": cfg["seed"],
             "oov_lookups": table.missing if table is not None else 0}
    st.emit(args.out, tm.model_to_bytes(model, extra))
    return st


def cmd_evaluate(args, cfg: PipelineConfig) -> Stage:
    st = Stage("evaluate", cfg)
    try:
        model, header = tm.model_from_bytes(st.read(args.model, "model checkpoint"))
    except ValueError as exc:
        st.fail(f"bad model checkpoint {args.model}: {exc}")
    trips = _load_trips(st, args.trips)
    if not trips or not isinstance(trips[0], tr.MappedTrip):
        st.fail(f"{args.trips} holds no attributed trips; run match first")
    mode = model.config.distance_mode
    for t in trips:
        tr.set_distance_mode(t, mode)
    if args.split != "all":
        # the split recorded at training time, so evaluation never sees training trips
        parts = tr.split_dataset(trips, tuple(header["split"]), header["split_seed"])
        trips = parts[("train", "val", "test").index(args.split)]
    kept, skipped = tm.usable(trips, model.config.k)
    if not kept:
        st.fail(f"no {args.split} trips with at least k={model.config.k} points")
    pred = tm.predict_many(model, kept)
    records = [ev.EvalRecord(t.trip_id, float(t.total_time), float(p), float(t.coord_gap[-1]),
                             float(t.map_gap[-1]), model.config.variant, mode)
               for t, p in zip(kept, pred.tolist())]
    head = st.header_lines("eval-csv") + [ev.MAPE_FORMULA, f"split {args.split}", f"skipped_short_trips {skipped}"]
    st.emit(args.out, ev.format_eval_csv(records, head))
    return st


def cmd_report(args, cfg: PipelineConfig) -> Stage:
    st = Stage("report", cfg)
    runs = []
    for path in args.evals:
        try:
            runs.append(ev.parse_eval_csv(st.read_text(path, "evaluation CSV")))
        except ev.EvalError as exc:
            st.fail(f"bad evaluation CSV {path}: {exc}")
    try:
        comp = ev.compare_variants(runs, cfg["eval.distance_edges"], cfg["eval.difference_edges"])
    except ev.EvalError as exc:
        st.fail(str(exc))
    head = st.header_lines("eval-csv") + [ev.MAPE_FORMULA]
    st.emit(args.out, ev.format_table_csv(comp.table, head))
    st.emit(args.buckets, ev.format_buckets_csv(comp.buckets, head))
    return st


def cmd_synth(args, cfg: PipelineConfig) -> Stage:
    st = Stage("synth", cfg)
    over = {"n_trips": cfg["synth.n_trips"], "n_drivers": cfg["synth.n_drivers"], "seed": cfg["seed"]}
    for key in ("rows", "cols"):
        if cfg[f"synth.{key}"] is not None:
            over[key] = cfg[f"synth.{key}"]
    try:
        world = syn.preset(args.kind, **over)
        net = syn.grid_network(world)
        records = syn.synthetic_trips(net, world)
    except (ValueError, RuntimeError) as exc:
        st.fail(str(exc))
    meta = json.dumps(syn.world_metadata(world), sort_keys=True, separators=(",", ":"))
    head = st.header_lines("trip-records") + [f"world {meta}"]
    lines = [f"# {h}" for h in head] + [json.dumps(r, separators=(",", ":")) for r in records]
    st.emit(args.out_trips, "\n".join(lines) + "\n")
    map_head = st.header_lines("edge-list") + [f"world {meta}"]
    st.emit(args.out_map, "".join(f"# {h}\n" for h in map_head) + rn.format_edge_list(net))
    return st


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="key = value configuration file")
    p.add_argument("--seed", type=int, default=d, help="master seed (mandatory here or in the config)")
    p.add_argument("--set", action="append", default=d, metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true", default=d or False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadtte", description="Road-network-aware travel-time pipeline.")
    parser.add_argument("--version", action="store_true", help="print artifact format versions and exit")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest-map", parents=[common], help="OSM XML or edge list -> edge list")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--osm")
    src.add_argument("--edges")
    p.add_argument("--bbox", help="south,west,north,east")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest_map)

    p = sub.add_parser("prepare-trips", parents=[common], help="raw trip logs -> validated trip records")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--porto")
    src.add_argument("--beijing", help="line-delimited records in the trip schema")
    p.add_argument("--region", default="none", help="none, auto (densest window) or south,west,north,east")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_trips)

    p = sub.add_parser("match", parents=[common], help="attribute trips to road nodes")
    p.add_argument("--trips", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--histogram", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("embed", parents=[common], help="node embeddings of the road map")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--trips", required=True)
    p.add_argument("--map")
    p.add_argument("--embeddings")
    p.add_argument("--variant", choices=tm.VARIANTS)
    p.add_argument("--distance-mode", choices=tr.DISTANCE_MODES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="per-trip predictions on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--trips", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="variant comparison and bucket tables")
    p.add_argument("--evals", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--buckets", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", parents=[common], help="synthetic road world and trips")
    p.add_argument("--kind", default="grid", choices=("grid", "barrier"))
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-trips", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def version_text() -> str:
    lines = [f"roadtte {__version__}"]
    lines += [f"{name} format v{v}" for name, v in FORMAT_VERSIONS.items()]
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        sys.stdout.write(version_text())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.set or [])
    if getattr(args, "variant", None):
        overrides.append(f"model.variant={args.variant}")
    if getattr(args, "distance_mode", None):
        overrides.append(f"model.distance_mode={args.distance_mode}")
    try:
        cfg = load_config(args.config, overrides, args.seed)
        stage = args.func(args, cfg)
        stage.commit()
    except (PipelineConfigError, OSError) as exc:
        print(f"roadtte {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"roadtte {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
