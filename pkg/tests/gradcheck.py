"""Central finite-difference gradient checking for the autodiff engine."""

import numpy as np

from roadtte import tensorcore as tc


def close(analytic, numeric, rtol, atol):
    """Pass when |a - n| <= max(rtol * max(|a|, |n|), atol) elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) <= np.maximum(rtol * np.maximum(np.abs(a), np.abs(n)), atol)


def scalarize(out, proj):
    return float(np.sum(np.asarray(out) * proj))


def check_op(fn, inputs, rtol=1e-4, atol=1e-7, eps=1e-6, seed=0):
    """Compare autodiff and finite-difference gradients of ``sum(fn(*inputs) * R)``.

    ``fn`` returns a Tensor (or a tuple whose first item is one). Returns the
    worst violation ratio; below 1 means every entry passed.
    """
    params = [tc.Parameter(np.array(x, dtype=float), f"in{i}") for i, x in enumerate(inputs)]

    def forward(ps):
        out = fn(*ps)
        return out[0] if isinstance(out, tuple) else out

    out = forward(params)
    proj = np.random.default_rng(seed).normal(size=out.shape)
    loss = tc.sum(tc.mul(out, proj))
    tc.backward(loss)
    worst = 0.0
    for p, x in zip(params, inputs):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        numeric = np.zeros_like(analytic)
        base = np.array(x, dtype=float)
        for j in np.ndindex(base.shape):
            for sign in (1, -1):
                pert = [q.values.copy() for q in params]
                k = params.index(p)
                pert[k][j] += sign * eps
                val = scalarize(forward([tc.Tensor(v) for v in pert]).values, proj)
                numeric[j] += sign * val / (2 * eps)
        tol = np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / tol)) if analytic.size else 0.0)
    return worst


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _lstm_unrolled(x, W_x, W_h, b):
    h = tc.Tensor(np.zeros((x.shape[0], W_h.shape[0])))
    c = tc.Tensor(np.zeros((x.shape[0], W_h.shape[0])))
    outs = []
    for t in range(x.shape[1]):
        out, (h, c) = tc.lstm_step(x[:, t, :], (h, c), W_x, W_h, b)
        outs.append(out)
    return tc.stack(outs, axis=1)


# name -> rng -> (fn, inputs)
GRAD_CASES = {
    "add": lambda r: (tc.add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (tc.sub, [r.normal(size=(3, 1)), r.normal(size=(3, 4))]),
    "mul": lambda r: (tc.mul, [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "div": lambda r: (tc.div, [r.normal(size=(2, 3)), _away_from_zero(r, (2, 3), 0.5)]),
    "tanh": lambda r: (tc.tanh, [r.normal(size=(3, 4))]),
    "sigmoid": lambda r: (tc.sigmoid, [r.normal(size=(3, 4)) * 2]),
    "elu": lambda r: (tc.elu, [_away_from_zero(r, (3, 4), 0.05)]),
    "softplus": lambda r: (tc.softplus, [r.normal(size=(3, 4)) * 3]),
    "exp": lambda r: (tc.exp, [r.normal(size=(3, 4))]),
    "log": lambda r: (tc.log, [r.uniform(0.3, 3.0, size=(3, 4))]),
    "absolute": lambda r: (tc.absolute, [_away_from_zero(r, (3, 4), 0.05)]),
    "matmul": lambda r: (tc.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "affine": lambda r: (tc.affine, [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=(2,))]),
    "sum": lambda r: (lambda x: tc.sum(x, axis=1), [r.normal(size=(3, 4, 2))]),
    "mean": lambda r: (lambda x: tc.mean(x, axis=0, keepdims=True), [r.normal(size=(3, 4))]),
    "reshape": lambda r: (lambda x: tc.reshape(x, (4, 3)), [r.normal(size=(2, 6))]),
    "getitem": lambda r: (lambda x: tc.getitem(x, (slice(None), [0, 2, 2])), [r.normal(size=(3, 4))]),
    "concat": lambda r: (lambda a, b: tc.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "stack": lambda r: (lambda a, b: tc.stack([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "gather_rows": lambda r: (lambda t: tc.gather_rows(t, np.array([1, 0, 1, 3])), [r.normal(size=(4, 3))]),
    "conv1d": lambda r: (tc.conv1d, [r.normal(size=(2, 6, 3)), r.normal(size=(3, 3, 4)), r.normal(size=(4,))]),
    "softmax": lambda r: (lambda x: tc.softmax(x, axis=1, mask=np.array([[1, 1, 0, 1], [1, 1, 1, 1]], bool)),
                          [r.normal(size=(2, 4))]),
    "attention_pool": lambda r: (lambda h, q: tc.attention_pool(h, q)[0], [r.normal(size=(2, 4, 3)),
                                                                          r.normal(size=(2, 3))]),
    "lstm_cell": lambda r: (lambda g, c: tc.lstm_cell(g, c)[1] * 0.5 + tc.lstm_cell(g, c)[0],
                            [r.normal(size=(2, 12)), r.normal(size=(2, 3))]),
    "lstm_step_x5": lambda r: (_lstm_unrolled, [r.normal(size=(2, 5, 3)), r.normal(size=(3, 8)) * 0.5,
                                                r.normal(size=(2, 8)) * 0.5, r.normal(size=(8,)) * 0.1]),
}


def model_gradcheck(params, loss_fn, rtol=1e-3, atol=1e-6, eps=1e-6, max_entries=200, seed=0):
    """Central differences for every parameter of a model loss.

    Large tables are sampled: entries with a nonzero analytic gradient (the
    rows a lookup touched) plus a random subset of the rest. Returns the worst
    violation ratio (< 1 passes) and the number of entries checked.
    """
    from roadtte import tensorcore as tc

    for p in params.values():
        p.grad = None
    tc.backward(loss_fn())
    grads = {k: p.grad.copy() for k, p in params.items()}
    r = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        g = grads[name].reshape(-1)
        if flat.size <= max_entries:
            picks = np.arange(flat.size)
        else:
            nz = np.flatnonzero(g)[: max_entries // 2]
            picks = np.unique(np.concatenate([nz, r.choice(flat.size, max_entries // 2, replace=False)]))
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            allowed = max(rtol * max(abs(g[i]), abs(num)), atol)
            worst = max(worst, abs(g[i] - num) / allowed)
            checked += 1
    return worst, checked
