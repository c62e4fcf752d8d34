"""Node2Vec-style node embeddings: second-order biased walks + skip-gram with negative sampling."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from roadtte.roadnet import RoadNetwork

logger = logging.getLogger(__name__)

EMBEDDING_FORMAT_VERSION = 1


class EmbeddingConfigError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 10
    walk_length: int = 40
    p: float = 1.0
    q: float = 1.0
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    dim: int = 128
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("walks_per_node", "walk_length", "window", "negatives", "epochs", "dim", "batch_size"):
            if getattr(self, name) < 1:
                raise EmbeddingConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("p", "q", "learning_rate"):
            if not getattr(self, name) > 0:
                raise EmbeddingConfigError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass
class EmbeddingTable:
    ids: np.ndarray
    vectors: np.ndarray
    metadata: dict = field(default_factory=dict)
    missing: int = 0  # out-of-vocabulary lookups served as zero vectors

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape[0] != len(self.ids):
            raise EmbeddingFormatError("one vector per id required")
        self._index = {int(n): i for i, n in enumerate(self.ids.tolist())}
        if len(self._index) != len(self.ids):
            raise EmbeddingFormatError("duplicate node ids in table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, node_id) -> bool:
        return int(node_id) in self._index

    def vector(self, node_id) -> np.ndarray:
        return self.vectors[self._index[int(node_id)]]

    def lookup(self, node_ids: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(node_ids), self.dim))
        for k, nid in enumerate(node_ids):
            i = self._index.get(int(nid))
            if i is None:
                self.missing += 1
            else:
                out[k] = self.vectors[i]
        return out


# ---------------------------------------------------------------------------
# walks


def _walk(start: int, nbrs: list[list[int]], nbr_sets: list[set], cfg: WalkConfig,
          rng: np.random.Generator) -> list[int]:
    walk = [start]
    inv_p, inv_q = 1.0 / cfg.p, 1.0 / cfg.q
    while len(walk) < cfg.walk_length:
        cur = walk[-1]
        options = nbrs[cur]
        if not options:
            break
        if len(walk) == 1:
            walk.append(options[int(rng.integers(len(options)))])
            continue
        prev = walk[-2]
        prev_set = nbr_sets[prev]
        cum, total = [], 0.0
        for x in options:
            if x == prev:
                total += inv_p
            elif x in prev_set:
                total += 1.0
            else:
                total += inv_q
            cum.append(total)
        k = bisect.bisect_right(cum, rng.random() * total)
        walk.append(options[min(k, len(options) - 1)])
    return walk


def walks_from_neighbors(nbrs: list[list[int]], cfg: WalkConfig) -> list[list[int]]:
    """Walks over an adjacency list of internal indices, ordered (round, start)."""
    nbr_sets = [set(n) for n in nbrs]
    walks = []
    for rnd in range(cfg.walks_per_node):
        for start in range(len(nbrs)):
            rng = np.random.default_rng([cfg.seed, rnd, start])
            walks.append(_walk(start, nbrs, nbr_sets, cfg, rng))
    return walks


def generate_walks(net: RoadNetwork, cfg: WalkConfig) -> list[list[int]]:
    """Biased random walks over the road graph (directions ignored), as node ids."""
    if net.n_nodes == 0:
        raise EmbeddingConfigError("cannot walk an empty network")
    ids = net.node_ids.tolist()
    return [[ids[i] for i in w] for w in walks_from_neighbors(net.undirected_neighbors(), cfg)]


# ---------------------------------------------------------------------------
# skip-gram with negative sampling


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sgns_loss_grad(center: np.ndarray, context: np.ndarray, negatives: np.ndarray):
    """Negative-sampling loss and gradients for a batch of examples.

    Shapes: ``center (b, d)``, ``context (b, d)``, ``negatives (b, K, d)``.
    Loss per example is ``-log s(u_o.v) - sum_k log s(-u_k.v)``. Returns the
    summed loss and gradients w.r.t. each input.
    """
    pos = (center * context).sum(axis=1)
    neg = np.matmul(negatives, center[:, :, None])[..., 0]
    loss = -(_log_sigmoid(pos).sum() + _log_sigmoid(-neg).sum())
    g_pos = 0.5 * (1 + np.tanh(0.5 * pos)) - 1.0  # s(pos) - 1
    g_neg = 0.5 * (1 + np.tanh(0.5 * neg))  # s(neg)
    g_center = g_pos[:, None] * context + np.matmul(g_neg[:, None, :], negatives)[:, 0]
    g_context = g_pos[:, None] * center
    g_negatives = g_neg[:, :, None] * center[:, None, :]
    return float(loss), g_center, g_context, g_negatives


def _pairs(walks_idx: list[np.ndarray], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for w in walks_idx:
        for o in range(1, min(window, len(w) - 1) + 1):
            centers += [w[:-o], w[o:]]
            contexts += [w[o:], w[:-o]]
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _scatter_add(table: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    # flat 1-D add.at is several times faster than the 2-D form
    d = table.shape[1]
    flat = (rows[:, None] * d + np.arange(d)).ravel()
    np.add.at(table.reshape(-1), flat, values.ravel())


def train_skipgram(walks: Sequence[Sequence[int]], cfg: WalkConfig,
                   node_ids: Sequence[int] | None = None) -> EmbeddingTable:
    """Train input vectors by minibatch SGD on the negative-sampling objective.

    Every id in ``node_ids`` (default: ids seen in the corpus) gets a vector;
    ids never seen keep their random initialization.
    """
    if not walks:
        raise EmbeddingConfigError("empty walk corpus")
    if cfg.window >= cfg.walk_length:
        raise EmbeddingConfigError(f"window {cfg.window} must be shorter than walk_length {cfg.walk_length}")
    vocab = np.array(sorted({int(x) for w in walks for x in w} | set(int(x) for x in (node_ids or ()))),
                     dtype=np.int64)
    index = {nid: i for i, nid in enumerate(vocab.tolist())}
    V, d = len(vocab), cfg.dim
    rng = np.random.default_rng(cfg.seed)
    w_in = (rng.random((V, d)) - 0.5) / d
    w_out = np.zeros((V, d))

    walks_idx = [np.array([index[int(x)] for x in w], dtype=np.int64) for w in walks]
    centers, contexts = _pairs(walks_idx, cfg.window)
    counts = np.bincount(np.concatenate(walks_idx), minlength=V).astype(np.float64)
    noise = counts**0.75
    noise_cdf = np.cumsum(noise / noise.sum())
    noise_cdf[-1] = 1.0

    n_pairs = len(centers)
    total_steps = max(1, cfg.epochs * n_pairs)
    done = 0
    epoch_loss = []
    for _ in range(cfg.epochs if n_pairs else 0):
        perm = rng.permutation(n_pairs)
        loss_sum = 0.0
        for start in range(0, n_pairs, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            c, o = centers[sel], contexts[sel]
            negs = np.searchsorted(noise_cdf, rng.random((len(sel), cfg.negatives)), side="right")
            lr = cfg.learning_rate * max(1e-4, 1.0 - done / total_steps)
            loss, g_c, g_o, g_n = sgns_loss_grad(w_in[c], w_out[o], w_out[negs])
            _scatter_add(w_in, c, -lr * g_c)
            _scatter_add(w_out, np.concatenate([o, negs.ravel()]),
                         -lr * np.concatenate([g_o, g_n.reshape(-1, d)]))
            loss_sum += loss
            done += len(sel)
        epoch_loss.append(loss_sum / n_pairs)
        logger.info("skip-gram epoch %d: mean loss %.6f", len(epoch_loss), epoch_loss[-1])
    meta = {k: v for k, v in asdict(cfg).items()}
    meta.update({"pairs_per_epoch": int(n_pairs), "epoch_loss": epoch_loss, "undirected_walks": True})
    return EmbeddingTable(vocab, w_in, meta)


def embed_network(net: RoadNetwork, cfg: WalkConfig) -> EmbeddingTable:
    return train_skipgram(generate_walks(net, cfg), cfg, net.node_ids.tolist())


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# text format: "count dim", then "node_id v1 ... vdim" at 6 decimals


def format_embeddings(table: EmbeddingTable) -> str:
    lines = [f"{len(table.ids)} {table.dim}"]
    for nid, vec in zip(table.ids.tolist(), table.vectors):
        lines.append(str(nid) + " " + " ".join(f"{v:.6f}" for v in vec.tolist()))
    return "\n".join(lines) + "\n"


def save_embeddings(table: EmbeddingTable, path) -> None:
    Path(path).write_text(format_embeddings(table), encoding="utf-8")


def parse_embeddings(text: str) -> EmbeddingTable:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise EmbeddingFormatError("line 1: missing 'count dim' header")
    try:
        count, dim = (int(x) for x in lines[0].split())
    except ValueError:
        raise EmbeddingFormatError(f"line 1: bad header {lines[0]!r}") from None
    ids, vecs, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise EmbeddingFormatError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
        nid = int(parts[0])
        if nid in seen:
            raise EmbeddingFormatError(f"line {lineno}: duplicate node id {nid}")
        seen.add(nid)
        vals = [float(x) for x in parts[1:]]
        if not all(math.isfinite(v) for v in vals):
            raise EmbeddingFormatError(f"line {lineno}: non-finite value")
        ids.append(nid)
        vecs.append(vals)
    if len(ids) != count:
        raise EmbeddingFormatError(f"header declares {count} rows but file has {len(ids)}")
    return EmbeddingTable(np.array(ids, dtype=np.int64), np.array(vecs).reshape(len(ids), dim))


def load_embeddings(path) -> EmbeddingTable:
    return parse_embeddings(Path(path).read_text(encoding="utf-8"))
