"""Pipeline configuration: a ``key = value`` file plus command-line overrides.

Every tunable default of the library is a key here. Unknown keys are
rejected and ``seed`` has no default, so a run must state it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping


class PipelineConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _opt_int(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object
    help: str = ""


def _fmt_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


REQUIRED = object()

KEYS: dict[str, Key] = {
    "seed": Key(_seed, REQUIRED, "master seed for every seeded stage"),
    # matching and geodesy
    "match.cell_deg": Key(float, 0.005, "grid cell side in degrees"),
    "match.histogram_bucket_km": Key(float, 0.01, "attribution-error histogram bucket width"),
    # trips
    "trips.max_points": Key(int, 2000, "longer trips are rejected as corrupt"),
    "trips.region_width_deg": Key(float, 0.55, "side of the dense-region window"),
    "trips.region_stride_deg": Key(_opt_float, None, "window stride; auto = width / 10"),
    "trips.split": Key(_floats, (0.79, 0.09, 0.12), "train, validation, test fractions"),
    "trips.min_points": Key(int, 2, "shortest trip kept by the validator"),
    # embeddings
    "embed.walks_per_node": Key(int, 10),
    "embed.walk_length": Key(int, 40),
    "embed.p": Key(float, 1.0),
    "embed.q": Key(float, 1.0),
    "embed.window": Key(int, 5),
    "embed.negatives": Key(int, 5),
    "embed.epochs": Key(int, 5),
    "embed.learning_rate": Key(float, 0.025),
    "embed.dim": Key(int, 128),
    "embed.batch_size": Key(int, 128),
    # model
    "model.variant": Key(str, "L-GC"),
    "model.distance_mode": Key(str, "coordinate"),
    "model.k": Key(int, 3),
    "model.conv_channels": Key(int, 32),
    "model.loc_dim": Key(int, 16),
    "model.rnn_hidden": Key(int, 128),
    "model.rnn_layers": Key(int, 2),
    "model.head_hidden": Key(int, 64),
    "model.beta": Key(float, 0.3),
    "model.driver_dim": Key(int, 16),
    "model.week_dim": Key(int, 3),
    "model.time_dim": Key(int, 8),
    "model.use_date": Key(_bool, False),
    "model.date_dim": Key(int, 3),
    "model.local_eps_s": Key(float, 10.0),
    "model.epochs": Key(int, 30),
    "model.batch_size": Key(int, 32),
    "model.learning_rate": Key(float, 1e-3),
    # evaluation
    "eval.distance_edges": Key(_floats, tuple(float(x) for x in range(0, 21, 2))),
    "eval.difference_edges": Key(_floats, tuple(0.5 * i for i in range(11))),
    # synthetic worlds
    "synth.n_trips": Key(int, 300),
    "synth.rows": Key(_opt_int, None, "lattice rows; auto = world preset"),
    "synth.cols": Key(_opt_int, None, "lattice columns; auto = world preset"),
    "synth.n_drivers": Key(int, 20),
}


class PipelineConfig(Mapping):
    """Immutable, validated mapping of every configuration key to its value."""

    def __init__(self, values: Mapping[str, object]):
        missing = [k for k, spec in KEYS.items() if spec.default is REQUIRED and k not in values]
        if missing:
            raise PipelineConfigError(f"missing required key(s): {', '.join(missing)} (use --seed or the config file)")
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise PipelineConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        self._values = {k: values.get(k, spec.default) for k, spec in KEYS.items()}
        for k, v in self._values.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise PipelineConfigError(f"{k} must be finite")

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def lines(self) -> list[str]:
        """Canonical ``key=value`` lines, sorted by key."""
        return [f"{k}={_fmt_value(self._values[k])}" for k in sorted(self._values)]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode("utf-8")).hexdigest()


def parse_assignments(items: Iterable[tuple[int, str]], source: str) -> dict:
    out = {}
    for lineno, raw in items:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PipelineConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise PipelineConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
        try:
            out[key] = KEYS[key].parse(value)
        except ValueError as exc:
            raise PipelineConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path=None, overrides: Iterable[str] = (), seed: int | None = None) -> PipelineConfig:
    """File values, then ``key=value`` overrides, then an explicit seed."""
    values = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        values.update(parse_assignments(enumerate(text.splitlines(), start=1), str(path)))
    values.update(parse_assignments(((i, s) for i, s in enumerate(overrides, start=1)), "--set"))
    if seed is not None:
        try:
            values["seed"] = _seed(str(seed))
        except ValueError as exc:
            raise PipelineConfigError(f"--seed: {exc}") from None
    return PipelineConfig(values)


def format_config(cfg: PipelineConfig) -> str:
    return "\n".join(cfg.lines()) + "\n"
