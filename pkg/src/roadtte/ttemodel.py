"""Geo-convolutional travel-time models with optional road-network inputs.

Three variants share one architecture and differ only in the per-point input
fed to the location transform:

* ``L-GC``  -- (lat, lon) of the attributed node
* ``E-GC``  -- the node embedding
* ``EL-GC`` -- the node embedding concatenated with (lat, lon)

Per point the input is mapped to a 16-d location feature, a valid 1-D
convolution summarizes each window of ``k`` points (a local path), the
distance covered by the window is appended, and a two-layer LSTM runs over
the local paths with the trip attribute vector added into every first-layer
update. A head on each LSTM state predicts the local-path time; attention
pooling over the states gives the whole-trip prediction.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from roadtte import tensorcore as tc
from roadtte.embeddings import EmbeddingTable
from roadtte.trips import DISTANCE_MODES, SLOTS_PER_DAY, MappedTrip

logger = logging.getLogger(__name__)

VARIANTS = ("L-GC", "E-GC", "EL-GC")
MODEL_MAGIC = b"RTTM"
MODEL_FORMAT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class UnsupportedTripError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "L-GC"
    distance_mode: str = "coordinate"
    k: int = 3
    conv_channels: int = 32
    loc_dim: int = 16
    rnn_hidden: int = 128
    rnn_layers: int = 2
    head_hidden: int = 64
    beta: float = 0.3
    driver_dim: int = 16
    week_dim: int = 3
    time_dim: int = 8
    use_date: bool = False
    date_dim: int = 3
    local_eps_s: float = 10.0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.distance_mode not in DISTANCE_MODES:
            raise ModelConfigError(f"distance_mode must be one of {DISTANCE_MODES}, got {self.distance_mode!r}")
        if self.k < 2:
            raise ModelConfigError(f"k must be >= 2, got {self.k}")
        if not 0.0 <= self.beta <= 1.0:
            raise ModelConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.rnn_layers < 1:
            raise ModelConfigError("rnn_layers must be >= 1")
        for name in ("conv_channels", "loc_dim", "rnn_hidden", "head_hidden", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive")

    @property
    def uses_embeddings(self) -> bool:
        return self.variant != "L-GC"

    @property
    def uses_coordinates(self) -> bool:
        return self.variant != "E-GC"

    @property
    def n_series(self) -> int:
        return 2 if self.distance_mode == "both" else 1


# ---------------------------------------------------------------------------
# normalization and features


@dataclass
class NormStats:
    lat_mean: float
    lat_std: float
    lon_mean: float
    lon_std: float
    window_mean: list
    window_std: list
    total_mean: list
    total_std: list
    log_time_mean: float
    log_time_std: float
    local_time_scale: float

    def as_dict(self) -> dict:
        return asdict(self)


def _std(x) -> float:
    s = float(np.std(x))
    return s if s > 1e-12 else 1.0


def local_targets(time_gap: np.ndarray, k: int) -> np.ndarray:
    """Travel time of each window of k points: ``time_gap[i+k-1] - time_gap[i]``."""
    return time_gap[k - 1:] - time_gap[: len(time_gap) - k + 1]


def window_distances(gaps: np.ndarray, k: int) -> np.ndarray:
    return gaps[k - 1:] - gaps[: len(gaps) - k + 1]


def fit_norm_stats(trips: Sequence[MappedTrip], cfg: ModelConfig) -> NormStats:
    """Normalization statistics, computed from the training split only."""
    lats = np.concatenate([t.node_lats for t in trips])
    lons = np.concatenate([t.node_lons for t in trips])
    win, tot = [], []
    for s in range(cfg.n_series):
        win.append(np.concatenate([window_distances(t.distance_series(cfg.distance_mode)[s], cfg.k) for t in trips]))
        tot.append(np.array([t.distance_series(cfg.distance_mode)[s][-1] for t in trips]))
    log_t = np.log([t.total_time for t in trips])
    loc_t = np.concatenate([local_targets(t.time_gap, cfg.k) for t in trips])
    return NormStats(
        lat_mean=float(lats.mean()), lat_std=_std(lats),
        lon_mean=float(lons.mean()), lon_std=_std(lons),
        window_mean=[float(w.mean()) for w in win], window_std=[_std(w) for w in win],
        total_mean=[float(x.mean()) for x in tot], total_std=[_std(x) for x in tot],
        log_time_mean=float(log_t.mean()), log_time_std=_std(log_t),
        local_time_scale=float(max(loc_t.mean(), 1e-6)),
    )


@dataclass
class TripFeatures:
    x: np.ndarray  # (n, d_in)
    win_dist: np.ndarray  # (m, n_series)
    tot_dist: np.ndarray  # (n_series,)
    local_t: np.ndarray  # (m,)
    driver: int
    week: int
    time: int
    date: int
    total_time: float

    @property
    def n(self) -> int:
        return self.x.shape[0]


def point_inputs(trip: MappedTrip, cfg: ModelConfig, stats: NormStats,
                 table: EmbeddingTable | None) -> np.ndarray:
    """Per-point rows fed to the location transform (n x d_in)."""
    parts = []
    if cfg.uses_embeddings:
        if table is None:
            raise ModelConfigError(f"{cfg.variant} needs an embedding table")
        parts.append(table.lookup(trip.node_ids.tolist()))
    if cfg.uses_coordinates:
        parts.append(np.column_stack([
            (trip.node_lats - stats.lat_mean) / stats.lat_std,
            (trip.node_lons - stats.lon_mean) / stats.lon_std,
        ]))
    return np.concatenate(parts, axis=1)


def trip_features(trip: MappedTrip, cfg: ModelConfig, stats: NormStats, table: EmbeddingTable | None,
                  n_drivers: int) -> TripFeatures:
    if trip.n_points < cfg.k:
        raise UnsupportedTripError(f"trip {trip.trip_id} has {trip.n_points} points, fewer than k={cfg.k}")
    series = trip.distance_series(cfg.distance_mode)
    win = np.column_stack([(window_distances(g, cfg.k) - stats.window_mean[s]) / stats.window_std[s]
                           for s, g in enumerate(series)])
    tot = np.array([(g[-1] - stats.total_mean[s]) / stats.total_std[s] for s, g in enumerate(series)])
    driver = int(trip.driver_id)
    return TripFeatures(
        x=point_inputs(trip, cfg, stats, table),
        win_dist=win,
        tot_dist=tot,
        local_t=local_targets(np.asarray(trip.time_gap, dtype=np.float64), cfg.k),
        driver=driver if 0 <= driver < n_drivers else n_drivers,
        week=int(trip.week_id) % 7,
        time=int(trip.time_id) % SLOTS_PER_DAY,
        date=int(trip.date_id) % 32,
        total_time=float(trip.total_time),
    )


@dataclass
class Batch:
    x: np.ndarray
    win_dist: np.ndarray
    tot_dist: np.ndarray
    local_t: np.ndarray
    mask: np.ndarray
    driver: np.ndarray
    week: np.ndarray
    time: np.ndarray
    date: np.ndarray
    total_time: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]


def collate(feats: Sequence[TripFeatures], k: int) -> Batch:
    """Pad a group of trips to a common length; ``mask`` marks real local paths."""
    B = len(feats)
    n_max = max(f.n for f in feats)
    m_max = n_max - k + 1
    d_in = feats[0].x.shape[1]
    s = feats[0].win_dist.shape[1]
    x = np.zeros((B, n_max, d_in))
    win = np.zeros((B, m_max, s))
    loc = np.ones((B, m_max))
    mask = np.zeros((B, m_max), dtype=bool)
    for b, f in enumerate(feats):
        m = f.n - k + 1
        x[b, :f.n] = f.x
        win[b, :m] = f.win_dist
        loc[b, :m] = f.local_t
        mask[b, :m] = True
    return Batch(
        x=x, win_dist=win, tot_dist=np.stack([f.tot_dist for f in feats]), local_t=loc, mask=mask,
        driver=np.array([f.driver for f in feats]), week=np.array([f.week for f in feats]),
        time=np.array([f.time for f in feats]), date=np.array([f.date for f in feats]),
        total_time=np.array([f.total_time for f in feats]),
    )


# ---------------------------------------------------------------------------
# network


def _input_width(cfg: ModelConfig, emb_dim: int) -> int:
    return (emb_dim if cfg.uses_embeddings else 0) + (2 if cfg.uses_coordinates else 0)


def attr_width(cfg: ModelConfig) -> int:
    return cfg.driver_dim + cfg.week_dim + cfg.time_dim + (cfg.date_dim if cfg.use_date else 0) + cfg.n_series


def init_params(cfg: ModelConfig, n_drivers: int, emb_dim: int = 128) -> dict[str, tc.Parameter]:
    """Glorot-uniform weights, zero biases, drawn from a stream seeded by ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, 0])
    H, C, A, Dh = cfg.rnn_hidden, cfg.conv_channels, attr_width(cfg), cfg.head_hidden
    d_in = _input_width(cfg, emb_dim)
    shapes: dict[str, tuple] = {
        "attr.driver": (n_drivers + 1, cfg.driver_dim),  # last row: unseen drivers
        "attr.week": (7, cfg.week_dim),
        "attr.time": (SLOTS_PER_DAY, cfg.time_dim),
    }
    if cfg.use_date:
        shapes["attr.date"] = (32, cfg.date_dim)
    shapes.update({
        "loc.W": (d_in, cfg.loc_dim),
        "conv.W": (cfg.k, cfg.loc_dim, C),
        "conv.b": (C,),
        "rnn0.W_f": (C + cfg.n_series, 4 * H),
        "rnn0.W_a": (A, 4 * H),
        "rnn0.W_h": (H, 4 * H),
        "rnn0.b": (4 * H,),
    })
    for layer in range(1, cfg.rnn_layers):
        shapes[f"rnn{layer}.W_x"] = (H, 4 * H)
        shapes[f"rnn{layer}.W_h"] = (H, 4 * H)
        shapes[f"rnn{layer}.b"] = (4 * H,)
    shapes.update({
        "local.W1": (H, Dh), "local.b1": (Dh,), "local.W2": (Dh, 1), "local.b2": (1,),
        "attn.W": (A, H), "attn.b": (H,),
        "global.W1": (H + A, Dh), "global.b1": (Dh,), "global.W2": (Dh, 1), "global.b2": (1,),
    })
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            values = np.zeros(shape)
        elif name == "conv.W":
            values = tc.glorot_uniform(rng, shape, fan_in=shape[0] * shape[1], fan_out=shape[2])
        else:
            values = tc.glorot_uniform(rng, shape)
        params[name] = tc.Parameter(values, name)
    return params


@dataclass
class ForwardOutput:
    local: tc.Tensor  # (B, m) seconds
    total: tc.Tensor  # (B,) seconds
    hidden: tc.Tensor  # (B, m, H)
    weights: tc.Tensor  # (B, m) attention weights


def _lstm_layer(pre: tc.Tensor, W_h: tc.Tensor, hidden: int) -> tc.Tensor:
    B, M = pre.shape[0], pre.shape[1]
    h = tc.Tensor(np.zeros((B, hidden)))
    c = tc.Tensor(np.zeros((B, hidden)))
    outs = []
    for t in range(M):
        gates = tc.add(pre[:, t, :], tc.matmul(h, W_h))
        h, c = tc.lstm_cell(gates, c)
        outs.append(h)
    return tc.stack(outs, axis=1)


def attribute_vector(params: dict, cfg: ModelConfig, batch: Batch) -> tc.Tensor:
    parts = [
        tc.gather_rows(params["attr.driver"], batch.driver),
        tc.gather_rows(params["attr.week"], batch.week),
        tc.gather_rows(params["attr.time"], batch.time),
    ]
    if cfg.use_date:
        parts.append(tc.gather_rows(params["attr.date"], batch.date))
    parts.append(tc.Tensor(batch.tot_dist))
    return tc.concat(parts, axis=1)


def loc_transform(params: dict, x) -> tc.Tensor:
    """``tanh(x @ W_loc)`` per point."""
    return tc.tanh(tc.matmul(x, params["loc.W"]))


def forward(params: dict, cfg: ModelConfig, stats: NormStats, batch: Batch) -> ForwardOutput:
    B, H = batch.size, cfg.rnn_hidden
    loc = loc_transform(params, tc.Tensor(batch.x))
    conv = tc.elu(tc.conv1d(loc, params["conv.W"], params["conv.b"]))
    loc_f = tc.concat([conv, tc.Tensor(batch.win_dist)], axis=2)
    attr = attribute_vector(params, cfg, batch)

    attr_term = tc.affine(attr, params["rnn0.W_a"], params["rnn0.b"])
    pre = tc.add(tc.matmul(loc_f, params["rnn0.W_f"]), tc.reshape(attr_term, (B, 1, 4 * H)))
    seq = _lstm_layer(pre, params["rnn0.W_h"], H)
    for layer in range(1, cfg.rnn_layers):
        pre = tc.affine(seq, params[f"rnn{layer}.W_x"], params[f"rnn{layer}.b"])
        seq = _lstm_layer(pre, params[f"rnn{layer}.W_h"], H)

    M = seq.shape[1]
    z_local = tc.affine(tc.elu(tc.affine(seq, params["local.W1"], params["local.b1"])),
                        params["local.W2"], params["local.b2"])
    local = tc.mul(tc.softplus(tc.reshape(z_local, (B, M))), stats.local_time_scale)

    query = tc.tanh(tc.affine(attr, params["attn.W"], params["attn.b"]))
    pooled, weights = tc.attention_pool(seq, query, batch.mask)
    z_total = tc.affine(tc.elu(tc.affine(tc.concat([pooled, attr], axis=1), params["global.W1"],
                                         params["global.b1"])), params["global.W2"], params["global.b2"])
    total = tc.exp(tc.add(tc.mul(tc.reshape(z_total, (B,)), stats.log_time_std), stats.log_time_mean))
    return ForwardOutput(local, total, seq, weights)


# ---------------------------------------------------------------------------
# loss


def blend_loss(local_loss, global_loss, beta: float):
    """``beta * local + (1 - beta) * global`` for floats or tensors."""
    if isinstance(local_loss, tc.Tensor) or isinstance(global_loss, tc.Tensor):
        return tc.add(tc.mul(local_loss, beta), tc.mul(global_loss, 1.0 - beta))
    return beta * local_loss + (1.0 - beta) * global_loss


def loss_terms(local_pred, local_target, total_pred, total_time, mask=None, eps: float = 10.0):
    """Per-trip ``(L_local, L_global)`` tensors of shape ``(B,)``.

    Local term: mean over a trip's local paths of ``|pred - t| / (t + eps)``.
    Global term: ``|pred - T| / T``. Inputs are ``(B, m)`` and ``(B,)``.
    """
    local_pred, total_pred = tc.as_tensor(local_pred), tc.as_tensor(total_pred)
    local_target = np.asarray(local_target, dtype=np.float64)
    total_time = np.asarray(total_time, dtype=np.float64)
    if np.any(total_time <= 0):
        raise ValueError("total_time must be positive")
    if mask is None:
        mask = np.ones(local_target.shape, dtype=bool)
    weights = mask / mask.sum(axis=-1, keepdims=True) / (local_target + eps)
    local_err = tc.sum(tc.mul(tc.absolute(tc.sub(local_pred, local_target)), weights), axis=-1)
    global_err = tc.div(tc.absolute(tc.sub(total_pred, total_time)), total_time)
    return local_err, global_err


def combined_loss(local_pred, local_target, total_pred, total_time, beta: float,
                  mask=None, eps: float = 10.0):
    """Batch mean of the per-trip blend ``beta * L_local + (1 - beta) * L_global``."""
    local_err, global_err = loss_terms(local_pred, local_target, total_pred, total_time, mask, eps)
    return tc.mean(blend_loss(local_err, global_err, beta))


def loss_parts(local_pred, local_target, total_pred, total_time, mask=None, eps: float = 10.0):
    """Batch-mean ``(L_local, L_global)`` as floats, for logging and tests."""
    lp, tp = np.asarray(local_pred, dtype=float), np.asarray(total_pred, dtype=float)
    lt, tt = np.asarray(local_target, dtype=float), np.asarray(total_time, dtype=float)
    mask = np.ones(lt.shape, dtype=bool) if mask is None else mask
    local = (np.abs(lp - lt) / (lt + eps) * mask).sum(-1) / mask.sum(-1)
    return float(local.mean()), float((np.abs(tp - tt) / tt).mean())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict
    stats: NormStats
    n_drivers: int
    embeddings: EmbeddingTable | None = None
    log: list = field(default_factory=list)
    skipped: int = 0

    def features(self, trips: Sequence[MappedTrip]) -> list[TripFeatures]:
        return [trip_features(t, self.config, self.stats, self.embeddings, self.n_drivers) for t in trips]


def _batches(feats: list[TripFeatures], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches of trips with similar lengths."""
    order = rng.permutation(len(feats))
    pool = batch_size * 8
    batches = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool].tolist(), key=lambda i: feats[i].n)
        batches += [chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _eval_batches(feats: list[TripFeatures], batch_size: int) -> list[list[int]]:
    order = sorted(range(len(feats)), key=lambda i: (feats[i].n, i))
    return [order[j:j + batch_size] for j in range(0, len(order), batch_size)]


def predict_features(model: TrainedModel, feats: list[TripFeatures], batch_size: int = 64) -> np.ndarray:
    out = np.zeros(len(feats))
    for idx in _eval_batches(feats, batch_size):
        res = forward(model.params, model.config, model.stats, collate([feats[i] for i in idx], model.config.k))
        out[idx] = res.total.values
    return out


def mape_percent(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - true) / true) * 100.0)


def usable(trips: Sequence[MappedTrip], k: int) -> tuple[list[MappedTrip], int]:
    kept = [t for t in trips if t.n_points >= k and t.total_time > 0]
    return kept, len(trips) - len(kept)


def train(train_trips: Sequence[MappedTrip], val_trips: Sequence[MappedTrip],
          table: EmbeddingTable | None, cfg: ModelConfig) -> TrainedModel:
    """Adam over seeded shuffled batches; keeps the parameters with the best validation MAPE."""
    if cfg.uses_embeddings and table is None:
        raise ModelConfigError(f"{cfg.variant} needs node embeddings")
    train_trips, skipped = usable(train_trips, cfg.k)
    val_trips, skipped_val = usable(val_trips, cfg.k)
    if not train_trips:
        raise ModelConfigError("no usable training trips")
    n_drivers = int(max(t.driver_id for t in train_trips)) + 1
    stats = fit_norm_stats(train_trips, cfg)
    emb_dim = table.dim if table is not None else 128
    params = init_params(cfg, n_drivers, emb_dim)
    model = TrainedModel(cfg, params, stats, n_drivers, table if cfg.uses_embeddings else None,
                         skipped=skipped + skipped_val)
    train_feats = model.features(train_trips)
    val_feats = model.features(val_trips)
    val_true = np.array([f.total_time for f in val_feats])

    opt = tc.Adam(list(params.values()), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    best = (math.inf, None)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(train_feats, cfg.batch_size, rng):
            batch = collate([train_feats[i] for i in idx], cfg.k)
            try:
                out = forward(params, cfg, stats, batch)
                loss = combined_loss(out.local, batch.local_t, out.total, batch.total_time,
                                     cfg.beta, batch.mask, cfg.local_eps_s)
                tc.backward(loss)
            except tc.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            opt.step()
            opt.zero_grad()
            losses.append((loss.item(), len(idx)))
        train_loss = sum(l * n for l, n in losses) / sum(n for _, n in losses)
        entry = {"epoch": epoch, "train_loss": train_loss}
        if val_feats:
            entry["val_mape"] = mape_percent(predict_features(model, val_feats), val_true)
            score = entry["val_mape"]
        else:
            score = train_loss
        if score < best[0]:
            best = (score, {k: p.values.copy() for k, p in params.items()})
            entry["best"] = True
        model.log.append(entry)
        logger.info("epoch %d: train loss %.5f%s", epoch, train_loss,
                    f", val MAPE {entry['val_mape']:.3f}%" if "val_mape" in entry else "")
    for k, v in best[1].items():
        params[k].values = v
    return model


def predict(model: TrainedModel, trip: MappedTrip) -> float:
    """Predicted travel time in seconds (strictly positive)."""
    if trip.n_points < model.config.k:
        raise UnsupportedTripError(
            f"trip {trip.trip_id} has {trip.n_points} points; the model needs at least k={model.config.k}")
    return float(predict_features(model, model.features([trip]))[0])


def predict_many(model: TrainedModel, trips: Sequence[MappedTrip]) -> np.ndarray:
    for t in trips:
        if t.n_points < model.config.k:
            raise UnsupportedTripError(f"trip {t.trip_id} has {t.n_points} points, fewer than k")
    return predict_features(model, model.features(trips))


# ---------------------------------------------------------------------------
# checkpoint: magic, version byte, JSON header length + header, tensor container


def model_to_bytes(model: TrainedModel, extra_header: dict | None = None) -> bytes:
    header = {
        "format": "roadtte-model",
        "version": MODEL_FORMAT_VERSION,
        "config": asdict(model.config),
        "stats": model.stats.as_dict(),
        "n_drivers": model.n_drivers,
        "log": model.log,
        "skipped": model.skipped,
    }
    header.update(extra_header or {})
    tensors = {k: p.values for k, p in model.params.items()}
    if model.embeddings is not None:
        tensors["embedding.ids"] = model.embeddings.ids.astype(np.float64)
        tensors["embedding.vectors"] = model.embeddings.vectors
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MODEL_MAGIC + struct.pack("<BI", MODEL_FORMAT_VERSION, len(raw)) + raw + tc.pack_tensors(tensors)


def model_from_bytes(data: bytes) -> tuple[TrainedModel, dict]:
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    tensors = tc.unpack_tensors(data[9 + hlen:])
    cfg = ModelConfig(**header["config"])
    table = None
    if "embedding.ids" in tensors:
        table = EmbeddingTable(tensors.pop("embedding.ids").astype(np.int64), tensors.pop("embedding.vectors"))
    params = {k: tc.Parameter(v, k) for k, v in tensors.items()}
    model = TrainedModel(cfg, params, NormStats(**header["stats"]), header["n_drivers"], table,
                         header.get("log", []), header.get("skipped", 0))
    return model, header


def save_model(model: TrainedModel, path, extra_header: dict | None = None) -> None:
    Path(path).write_bytes(model_to_bytes(model, extra_header))


def load_model(path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())[0]


def with_overrides(cfg: ModelConfig, **kwargs) -> ModelConfig:
    return replace(cfg, **kwargs)
