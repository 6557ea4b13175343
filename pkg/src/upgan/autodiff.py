"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` objects.
``Tape.backward`` replays the records in reverse and accumulates gradients,
writing the ones that belong to parameters into their :class:`ParameterStore`
slots. Only the operations the models need are provided; there is no general
broadcasting.
"""
import numpy as np

from . import kernels


class ContractError(ValueError):
    """Shape mismatch or misuse of the tape."""


class NonFiniteGradient(FloatingPointError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape", "param")

    def __init__(self, value, tape=None, param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, param={self.param!r})"


class Param:
    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParameterStore:
    """Named arrays with gradient and Adam moment slots."""

    def __init__(self):
        self.params = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        self.params[name] = Param(value)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name].value

    def __setitem__(self, name, value):
        p = self.params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise ContractError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value[...] = value

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def grad(self, name):
        return self.params[name].grad

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def state(self):
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, v in state.items():
            self[n] = v

    def copy(self):
        other = ParameterStore()
        for n, p in self.params.items():
            q = other.add(n, p.value)
            q.m[...] = p.m
            q.v[...] = p.v
        other.step_count = self.step_count
        return other


class Tape:
    def __init__(self):
        self.records = []
        self._leaves = []

    # leaves

    def param(self, store, name):
        v = Var(store.params[name].value, self, param=(store, name))
        self._leaves.append(v)
        return v

    def const(self, value):
        return Var(value, self)

    def _record(self, out_value, inputs, backward_fn):
        out = Var(out_value, self)
        self.records.append((out, inputs, backward_fn))
        return out

    def backward(self, loss, loss_grad=1.0):
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ContractError("backward needs a scalar loss")
        if not self.records:
            raise ContractError("backward without forward")
        loss.grad = np.full(loss.value.shape, float(loss_grad))
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for var, g in zip(inputs, grads):
                if g is None or var.tape is not self:
                    continue
                if var.grad is None:
                    var.grad = np.array(g, dtype=np.float64)
                else:
                    var.grad = var.grad + g
        for leaf in self._leaves:
            if leaf.grad is not None:
                store, name = leaf.param
                store.params[name].grad += leaf.grad


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _tape(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    raise ContractError("no tape among inputs")


# elementwise

def add(a, b):
    _check_same(a, b, "add")
    return _tape(a, b)._record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same(a, b, "sub")
    return _tape(a, b)._record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product."""
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _tape(a, b)._record(av * bv, (a, b), lambda g: (g * bv, g * av))


elementwise_mul = mul


def scale(a, c):
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def add_const(a, c):
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ContractError("add_const: shape mismatch")
    return a.tape._record(a.value + c, (a,), lambda g: (g,))


def scale_rows(x, w):
    """x[i, :] * w[i] for a matrix x and vector w."""
    if x.value.ndim != 2 or w.value.shape != (x.shape[0],):
        raise ContractError("scale_rows: expects (n, k) and (n,)")
    xv, wv = x.value, w.value
    return _tape(x, w)._record(
        xv * wv[:, None], (x, w), lambda g: (g * wv[:, None], np.sum(g * xv, axis=1))
    )


def tanh(a):
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = _stable_sigmoid(a.value)
    return a.tape._record(y, (a,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(a, slope=0.2):
    x = a.value
    d = np.where(x > 0, 1.0, slope)
    return a.tape._record(x * d, (a,), lambda g: (g * d,))


def relu(a):
    x = a.value
    d = (x > 0).astype(np.float64)
    return a.tape._record(x * d, (a,), lambda g: (g * d,))


# linear algebra

def matvec_affine(W, x, b=None):
    """Row-batched affine map: y = x @ W.T + b for x of shape (n, in) or (in,)."""
    Wv, xv = W.value, x.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1]:
        raise ContractError(f"matvec_affine: W {Wv.shape} incompatible with x {xv.shape}")
    y = xv @ Wv.T
    if b is not None:
        if b.value.shape != (Wv.shape[0],):
            raise ContractError("matvec_affine: bias shape")
        y = y + b.value
    inputs = (W, x) if b is None else (W, x, b)

    def back(g):
        if xv.ndim == 1:
            gW = np.outer(g, xv)
            gb = g
        else:
            gW = g.T @ xv
            gb = g.sum(axis=0)
        gx = g @ Wv
        return (gW, gx) if b is None else (gW, gx, gb)

    return _tape(W, x)._record(y, inputs, back)


def matmul(a, b):
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractError(f"matmul: {av.shape} @ {bv.shape}")
    return _tape(a, b)._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    return a.tape._record(a.value.T, (a,), lambda g: (g.T,))


def rel_matvec(W, rel, x):
    """Per-row relation transform: y[e] = W[rel[e]] @ x[e]."""
    Wv, xv = W.value, x.value
    rel = np.asarray(rel, dtype=np.int64)
    if Wv.ndim != 3 or xv.ndim != 2 or xv.shape[0] != rel.shape[0] or xv.shape[1] != Wv.shape[2]:
        raise ContractError("rel_matvec: shape mismatch")
    # one matmul per relation present instead of an (E, K, K) gather
    order = np.argsort(rel, kind="stable")
    ids, starts = np.unique(rel[order], return_index=True)
    groups = [(int(r), order[s:e]) for r, s, e in zip(ids, starts, list(starts[1:]) + [rel.size])]
    y = np.empty((xv.shape[0], Wv.shape[1]))
    for r, sel in groups:
        y[sel] = xv[sel] @ Wv[r].T

    def back(g):
        gx = np.empty_like(xv)
        gW = np.zeros_like(Wv)
        for r, sel in groups:
            gx[sel] = g[sel] @ Wv[r]
            gW[r] = g[sel].T @ xv[sel]
        return gW, gx

    return _tape(W, x)._record(y, (W, x), back)


def rowdot(a, b):
    """Per-row inner product of two (n, k) matrices."""
    _check_same(a, b, "rowdot")
    av, bv = a.value, b.value
    return _tape(a, b)._record(
        np.sum(av * bv, axis=-1), (a, b), lambda g: (g[..., None] * bv, g[..., None] * av)
    )


def row_norm(a, eps=1e-12):
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=-1))
    safe = np.maximum(n, eps)
    return a.tape._record(n, (a,), lambda g: (g[..., None] * av / safe[..., None],))


# structure

def concat(xs, axis=-1):
    xs = list(xs)
    vals = [x.value for x in xs]
    try:
        y = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    ax = axis % y.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _tape(*xs)._record(y, tuple(xs), back)


def gather(table, idx):
    """Row lookup; idx may be any integer array shape."""
    tv = table.value
    idx = np.asarray(idx, dtype=np.int64)
    y = tv[idx]

    def back(g):
        flat = g.reshape((-1,) + tv.shape[1:])
        return (kernels.segment_sum(flat, idx.reshape(-1), tv.shape[0]),)

    return table.tape._record(y, (table,), back)


def reshape(a, shape):
    old = a.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def mean_over_set(x, segment_ids, n_segments):
    """Mean of the rows of x within each segment; empty segments give zeros."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.value.shape[0] != seg.shape[0]:
        raise ContractError("mean_over_set: one segment id per row")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    s = kernels.segment_sum(x.value, seg, n_segments) * inv[:, None]

    def back(g):
        return ((g * inv[:, None])[seg],)

    return x.tape._record(s, (x,), back)


def segment_sum(x, segment_ids, n_segments):
    seg = np.asarray(segment_ids, dtype=np.int64)
    s = kernels.segment_sum(x.value, seg, n_segments)
    return x.tape._record(s, (x,), lambda g: (g[seg],))


def segment_softmax(scores, segment_ids, n_segments):
    seg = np.asarray(segment_ids, dtype=np.int64)
    y = kernels.segment_softmax(scores.value, seg, n_segments)

    def back(g):
        dot = kernels.segment_sum(g * y, seg, n_segments)
        return (y * (g - dot[seg]),)

    return scores.tape._record(y, (scores,), back)


def segment_log_softmax(scores, segment_ids, n_segments):
    seg = np.asarray(segment_ids, dtype=np.int64)
    x = scores.value
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, seg, x)
    shifted = x - peak[seg]
    lse = np.log(kernels.segment_sum(np.exp(shifted), seg, n_segments))
    y = shifted - lse[seg]
    p = np.exp(y)

    def back(g):
        return (g - p * kernels.segment_sum(g, seg, n_segments)[seg],)

    return scores.tape._record(y, (scores,), back)


def softmax(a, axis=-1):
    x = a.value
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return a.tape._record(y, (a,), back)


def log_softmax(a, axis=-1):
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return a.tape._record(y, (a,), back)


def take_along(a, idx):
    """a[b, idx[b, j]] for a 2-D a and integer idx of shape (B, S)."""
    av = a.value
    idx = np.asarray(idx, dtype=np.int64)
    y = np.take_along_axis(av, idx, axis=1)

    def back(g):
        out = np.zeros_like(av)
        rows = np.repeat(np.arange(av.shape[0]), idx.shape[1])
        np.add.at(out, (rows, idx.reshape(-1)), g.reshape(-1))
        return (out,)

    return a.tape._record(y, (a,), back)


# reductions and losses

def total(a):
    return a.tape._record(np.sum(a.value), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a):
    n = a.value.size
    return a.tape._record(np.mean(a.value), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def sumsq(a):
    av = a.value
    return a.tape._record(np.sum(av * av), (a,), lambda g: (2.0 * float(g) * av,))


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of sigmoid(logits) against soft targets."""
    x = logits.value
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), x.shape)
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def back(g):
        return (float(g) * (_stable_sigmoid(x) - t) / n,)

    return logits.tape._record(np.mean(loss), (logits,), back)


def _stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid_value = _stable_sigmoid


# optimisation

def adam_step(store, lr, betas=(0.9, 0.999), eps=1e-8, names=None):
    """Bias-corrected Adam update followed by zeroing the gradients.

    Raises NonFiniteGradient (and leaves every value untouched) if any
    gradient contains NaN or inf.
    """
    names = list(store.params) if names is None else list(names)
    for n in names:
        if not np.all(np.isfinite(store.params[n].grad)):
            raise NonFiniteGradient(f"non-finite gradient in {n!r}")
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in names:
        p = store.params[n]
        p.m *= b1
        p.m += (1.0 - b1) * p.grad
        p.v *= b2
        p.v += (1.0 - b2) * p.grad * p.grad
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.grad[...] = 0.0


def _fallback_direction(dim, seed):
    d = np.random.default_rng(seed).standard_normal(dim)
    return d / np.linalg.norm(d)


def project_min_norm(v, min_norm=1.0, seed=0):
    """Scale v up so that its L2 norm is at least min_norm.

    Works on a single vector or row-wise on a matrix. Zero rows are replaced
    by a fixed random unit direction (from ``seed``) scaled to min_norm.
    """
    if min_norm <= 0:
        raise ValueError("min_norm must be positive")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        raise ValueError("project_min_norm needs a vector or matrix")
    rows = v.reshape(-1, v.shape[-1])
    out = rows.copy()
    norms = np.linalg.norm(rows, axis=1)
    # slack keeps the projection idempotent under rounding
    short = norms < min_norm * (1.0 - 1e-12)
    zero = norms == 0.0
    fix = short & ~zero
    out[fix] = rows[fix] * (min_norm / norms[fix])[:, None]
    if np.any(zero):
        out[zero] = _fallback_direction(rows.shape[1], seed) * min_norm
    return out.reshape(v.shape)


def project_rows_inplace(store, name, min_norm=1.0, seed=0):
    store.params[name].value[...] = project_min_norm(store.params[name].value, min_norm, seed)


def grad_check(model_loss, store, step=1e-5, names=None, max_coords=None, seed=0):
    """Worst relative error between tape gradients and central differences.

    ``model_loss(tape, store)`` must build a scalar loss Var on the given tape.
    With ``max_coords`` only that many randomly chosen coordinates per array
    are probed.
    """
    names = list(store.params) if names is None else list(names)
    store.zero_grad()
    tape = Tape()
    loss = model_loss(tape, store)
    tape.backward(loss)
    analytic = {n: store.grad(n).copy() for n in names}
    store.zero_grad()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in names:
        value = store.params[n].value
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(model_loss(Tape(), store).value)
            flat[i] = orig - step
            down = float(model_loss(Tape(), store).value)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[n].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
