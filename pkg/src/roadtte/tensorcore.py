"""Small reverse-mode autodiff engine on top of numpy (float64 throughout).

A ``Tensor`` records the op that produced it and a closure that pushes its
gradient into its parents. ``backward`` runs those closures in reverse
topological order. A graph can be differentiated once; parameters must have
their gradients reset (``zero_grad``) before the next backward pass.
"""

from __future__ import annotations

import io
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"RTTC"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "parents", "_backward", "op", "requires_grad", "name", "_done")

    def __init__(self, values, parents: tuple = (), backward: Callable | None = None,
                 op: str = "leaf", requires_grad: bool | None = None, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.parents = parents
        self._backward = backward
        self.op = op
        self.grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.name = name
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A named leaf tensor updated by an optimizer."""

    __slots__ = ()

    def __init__(self, values, name: str):
        super().__init__(np.array(values, dtype=DTYPE), requires_grad=True, name=name, op="param")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False, op="const")


def _check(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return values


def _node(values, parents, backward, op) -> Tensor:
    out = Tensor(_check(values, op), parents, backward, op)
    if not out.requires_grad:
        out.parents, out._backward = (), None
    return out


def _accum(t: Tensor, g: np.ndarray, op: str = "") -> None:
    if not t.requires_grad:
        return
    _check(g, f"backward of {op}")
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape), "add")
        _accum(b, _unbroadcast(g, b.shape), "add")

    return _node(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape), "sub")
        _accum(b, _unbroadcast(-g, b.shape), "sub")

    return _node(a.values - b.values, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.values, a.shape), "mul")
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.values, b.shape), "mul")

    return _node(a.values * b.values, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.values / b.values

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.values, a.shape), "div")
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.values, b.shape), "div")

    return _node(out, (a, b), backward, "div")


def _unary(x, values, local_grad: Callable[[], np.ndarray], op: str) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, g * local_grad(), op)

    return _node(values, (x,), backward, op)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.values)
    return _unary(x, y, lambda: 1.0 - y * y, "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _unary(x, y, lambda: y * (1.0 - y), "sigmoid")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = x.values < 0
    em1 = np.expm1(np.minimum(x.values, 0.0))
    y = np.where(neg, alpha * em1, x.values)
    return _unary(x, y, lambda: np.where(neg, alpha * (em1 + 1.0), 1.0), "elu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _unary(x, y, lambda: 0.5 * (1.0 + np.tanh(0.5 * v)), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.values)
    return _unary(x, y, lambda: y, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.values), lambda: 1.0 / x.values, "log")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.abs(x.values), lambda: np.sign(x.values), "abs")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(x, W) -> Tensor:
    """``x (..., k) @ W (k, m)``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {W.shape}")

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ W.values.T, "matmul")
        if W.requires_grad:
            k, m = W.shape
            _accum(W, x.values.reshape(-1, k).T @ g.reshape(-1, m), "matmul")

    return _node(x.values @ W.values, (x, W), backward, "matmul")


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` as a single graph node."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {W.shape}")
    b = as_tensor(b) if b is not None else None
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match {W.shape}")
    out = x.values @ W.values
    if b is not None:
        out = out + b.values
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        k, m = W.shape
        if x.requires_grad:
            _accum(x, g @ W.values.T, "affine")
        if W.requires_grad:
            _accum(W, x.values.reshape(-1, k).T @ g.reshape(-1, m), "affine")
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, m).sum(axis=0), "affine")

    return _node(out, parents, backward, "affine")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape), "sum")

    return _node(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, g.reshape(x.shape), "reshape")

    return _node(x.values.reshape(shape), (x,), backward, "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if not x.requires_grad:
            return
        _check(g, "backward of getitem")
        if x.grad is None:
            x.grad = np.zeros(x.shape, dtype=DTYPE)
        if _is_fancy(index):
            np.add.at(x.grad, index, g)
        else:
            x.grad[index] += g

    return _node(x.values[index], (x,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece, "concat")

    return _node(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis), "stack")

    return _node(out, tuple(tensors), backward, "stack")


def gather_rows(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` (embedding tables)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if not table.requires_grad:
            return
        _check(g, "backward of gather_rows")
        if table.grad is None:
            table.grad = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(table.grad, idx, g)

    return _node(table.values[idx], (table,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# sequence ops


def conv1d(seq, W, b=None) -> Tensor:
    """Valid 1-D convolution over the time axis.

    ``seq`` is ``(batch, n, c_in)`` (or ``(n, c_in)``), ``W`` is
    ``(k, c_in, c_out)``; output has ``n - k + 1`` steps and entry ``i`` is
    ``sum_j seq[i + j] @ W[j] + b``.
    """
    seq, W = as_tensor(seq), as_tensor(W)
    squeeze = seq.ndim == 2
    x = seq.values[None] if squeeze else seq.values
    if W.ndim != 3 or x.ndim != 3 or x.shape[2] != W.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {seq.shape} and {W.shape}")
    k, c_in, c_out = W.shape
    n = x.shape[1]
    m = n - k + 1
    if m < 1:
        raise ShapeError(f"conv1d: sequence length {n} shorter than kernel {k}")
    b = as_tensor(b) if b is not None else None
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)  # (B, m, c_in, k)
    windows = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(x.shape[0], m, k * c_in)
    Wf = W.values.reshape(k * c_in, c_out)
    out = windows @ Wf
    if b is not None:
        out = out + b.values
    parents = (seq, W) if b is None else (seq, W, b)

    def backward(g):
        g3 = g[None] if squeeze else g
        if W.requires_grad:
            _accum(W, (windows.reshape(-1, k * c_in).T @ g3.reshape(-1, c_out)).reshape(k, c_in, c_out), "conv1d")
        if b is not None and b.requires_grad:
            _accum(b, g3.reshape(-1, c_out).sum(axis=0), "conv1d")
        if seq.requires_grad:
            gw = (g3 @ Wf.T).reshape(x.shape[0], m, k, c_in)
            gx = np.zeros_like(x)
            for j in range(k):
                gx[:, j:j + m, :] += gw[:, :, j, :]
            _accum(seq, gx[0] if squeeze else gx, "conv1d")

    return _node(out[0] if squeeze else out, parents, backward, "conv1d")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Normalized exponential; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    v = x.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        v = np.where(mask, v, -np.inf)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)), "softmax")

    return _node(y, (x,), backward, "softmax")


def attention_pool(h_seq, query, mask=None) -> tuple[Tensor, Tensor]:
    """Pool ``h_seq (B, m, H)`` with weights ``softmax_i(<h_i, query>)``.

    ``query`` is ``(B, H)``; returns ``(pooled (B, H), weights (B, m))``.
    """
    h_seq, query = as_tensor(h_seq), as_tensor(query)
    if h_seq.ndim != 3 or h_seq.shape[1] == 0:
        raise ShapeError(f"attention_pool: need a non-empty (B, m, H) sequence, got {h_seq.shape}")
    if query.shape != (h_seq.shape[0], h_seq.shape[2]):
        raise ShapeError(f"attention_pool: query shape {query.shape} does not match {h_seq.shape}")
    scores = sum(mul(h_seq, reshape(query, (query.shape[0], 1, query.shape[1]))), axis=2)
    weights = softmax(scores, axis=1, mask=mask)
    pooled = sum(mul(h_seq, reshape(weights, weights.shape + (1,))), axis=1)
    return pooled, weights


def lstm_cell(gates, c) -> tuple[Tensor, Tensor]:
    """LSTM state update from pre-activation gates ``(B, 4H)`` laid out i, f, g, o."""
    gates, c = as_tensor(gates), as_tensor(c)
    H = c.shape[-1]
    if gates.shape[-1] != 4 * H:
        raise ShapeError(f"lstm_cell: gates width {gates.shape[-1]} != 4 * hidden {H}")
    i = sigmoid(gates[..., :H])
    f = sigmoid(gates[..., H:2 * H])
    g = tanh(gates[..., 2 * H:3 * H])
    o = sigmoid(gates[..., 3 * H:])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_step(x_t, state, W_x, W_h, b) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """One LSTM step; ``state`` is ``(h, c)``. Returns ``(h_new, (h_new, c_new))``."""
    h, c = state
    x_t, h, W_x, W_h = as_tensor(x_t), as_tensor(h), as_tensor(W_x), as_tensor(W_h)
    if W_x.shape[0] != x_t.shape[-1] or W_h.shape[0] != h.shape[-1] or W_x.shape[1] != W_h.shape[1]:
        raise ShapeError(f"lstm_step: input {x_t.shape} / state {h.shape} do not match weights "
                         f"{W_x.shape}, {W_h.shape}")
    gates = add(affine(x_t, W_x, b), matmul(h, W_h))
    h_new, c_new = lstm_cell(gates, c)
    return h_new, (h_new, c_new)


# ---------------------------------------------------------------------------
# differentiation


def _topo(loss: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already called on this graph")
    order = _topo(loss)
    for node in order:
        if node._backward is None and node.requires_grad and node.grad is not None:
            raise GraphError(f"stale gradient on {node.name or node.op}; call zero_grad() first")
    loss._done = True
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int | None = None,
                   fan_out: int | None = None) -> np.ndarray:
    fan_in = fan_in if fan_in is not None else shape[0]
    fan_out = fan_out if fan_out is not None else shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# parameter container: magic, version byte, count, then per tensor
# (name, ndim, dims, little-endian float64 data)


def pack_tensors(named: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(named)))
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def unpack_tensors(data: bytes) -> dict:
    view = memoryview(data)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    version, count = struct.unpack_from("<BI", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    pos = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * size
    if pos != len(data):
        raise ValueError("trailing bytes after tensor container")
    return out
