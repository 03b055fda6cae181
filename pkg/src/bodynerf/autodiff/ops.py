"""Differentiable operations over Tensors.

Every op computes its value with plain numpy and records a backward closure
only when a tape is active and some input is tracked, so forward values are
bit-identical with tracking on or off.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _OPS, active_tape, as_tensor


def _check_broadcast(sa, sb, opname):
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}") from None


def _unbroadcast(g, shape):
    """Sum `g` over broadcast axes so it matches `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _op(out_data, *pairs):
    """Wrap `out_data`, recording (tensor, grad_fn) parents when tracked."""
    tape = active_tape()
    if tape is None:
        return Tensor(out_data)
    pids = []
    fns = []
    for t, fn in pairs:
        pids.append(tape.node_of(t) if isinstance(t, Tensor) else None)
        fns.append(fn)
    if all(p is None for p in pids):
        return Tensor(out_data)

    def bw(g):
        return tuple(fn(g) if pid is not None else None for pid, fn in zip(pids, fns))

    return tape.record(Tensor(out_data), pids, bw)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    ad, bd = a.data, b.data
    return _op(ad + bd,
               (a, lambda g: _unbroadcast(g, ad.shape)),
               (b, lambda g: _unbroadcast(g, bd.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    ad, bd = a.data, b.data
    return _op(ad - bd,
               (a, lambda g: _unbroadcast(g, ad.shape)),
               (b, lambda g: _unbroadcast(-g, bd.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _op(ad * bd,
               (a, lambda g: _unbroadcast(g * bd, ad.shape)),
               (b, lambda g: _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    return _op(ad / bd,
               (a, lambda g: _unbroadcast(g / bd, ad.shape)),
               (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _op(-a.data, (a, lambda g: -g))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _op(ad @ bd,
               (a, lambda g: g @ bd.T),
               (b, lambda g: ad.T @ g))


# ---------------------------------------------------------------------------
# pointwise nonlinearities

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a, lambda g: g * out))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _op(np.log(ad), (a, lambda g: g / ad))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _op(out, (a, lambda g: g * (0.5 / out)))


def relu(a):
    a = as_tensor(a)
    ad = a.data
    mask = ad > 0.0
    return _op(np.maximum(ad, 0.0), (a, lambda g: g * mask))


def sigmoid(a):
    a = as_tensor(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (a, lambda g: g * out * (1.0 - out)))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = np.empty_like(ad)
    pos = ad >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    sig[~pos] = ex / (1.0 + ex)
    return _op(out, (a, lambda g: g * sig))


def absolute(a):
    a = as_tensor(a)
    ad = a.data
    return _op(np.abs(ad), (a, lambda g: g * np.sign(ad)))


def square(a):
    return mul(a, a)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, ad.shape)

    return _op(out, (a, bw))


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    n = ad.size if axis is None else np.prod(
        [ad.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, ad.shape)

    return _op(out, (a, bw))


def l2norm(a, axis=-1, keepdims=False):
    """Euclidean norm along `axis`; gradient is 0 where the norm is 0."""
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=keepdims))

    def bw(g):
        nrm = out
        if not keepdims:
            g = np.expand_dims(g, axis)
            nrm = np.expand_dims(out, axis)
        safe = np.where(nrm == 0.0, 1.0, nrm)
        return np.where(nrm == 0.0, 0.0, g / safe) * ad

    return _op(out, (a, bw))


# ---------------------------------------------------------------------------
# softmax

def softmax(a, mask=None):
    """Softmax over the last axis, numerically shifted by the row max.

    `mask` (boolean, same shape) marks valid entries; invalid entries get
    weight exactly 0 and rows with no valid entry come back all-zero.
    """
    a = as_tensor(a)
    ad = a.data
    if ad.ndim == 0 or ad.shape[-1] == 0:
        raise ShapeError(f"softmax: empty reduction axis for shape {ad.shape}")
    if mask is None:
        shift = ad - ad.max(axis=-1, keepdims=True)
        e = np.exp(shift)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != ad.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {ad.shape}")
        neg_inf = np.float64(-np.inf)
        masked = np.where(mask, ad, neg_inf)
        rowmax = masked.max(axis=-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.exp(np.where(mask, ad - rowmax, neg_inf))
        denom = e.sum(axis=-1, keepdims=True)
        y = np.where(denom > 0.0, e / np.where(denom > 0.0, denom, 1.0), 0.0)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return _op(y, (a, bw))


# ---------------------------------------------------------------------------
# shape surgery

def reshape(a, shape):
    a = as_tensor(a)
    ad = a.data
    return _op(ad.reshape(shape), (a, lambda g: g.reshape(ad.shape)))


def broadcast_to(a, shape):
    a = as_tensor(a)
    ad = a.data
    _check_broadcast(ad.shape, shape, "broadcast_to")
    return _op(np.broadcast_to(ad, shape).copy(),
               (a, lambda g: _unbroadcast(g, ad.shape)))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _op(np.transpose(a.data, axes), (a, lambda g: np.transpose(g, inv)))


def getitem(a, key):
    a = as_tensor(a)
    ad = a.data
    out = ad[key]

    def bw(g):
        z = np.zeros_like(ad)
        z[key] = g
        return z

    return _op(np.asarray(out), (a, bw))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _op(out, *((t, make_fn(i)) for i, t in enumerate(tensors)))


# ---------------------------------------------------------------------------
# gather / scatter

class RowGather:
    """Differentiable `x[idx]` over rows of a 2-D array.

    The scatter-add plan for the backward pass (a stable sort of the flat
    indices plus segment boundaries) is built on first use and reused, which
    matters when the same index map is applied every training step.
    """

    def __init__(self, idx, num_rows):
        self.idx = np.ascontiguousarray(idx, dtype=np.int64)
        self.num_rows = int(num_rows)
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= num_rows):
            raise IndexError("gather index out of range")
        self._plan = None

    def _scatter(self, g, ncols):
        if self._plan is None:
            from scipy.sparse import coo_matrix
            flat = self.idx.reshape(-1)
            self._plan = coo_matrix(
                (np.ones(flat.size), (flat, np.arange(flat.size))),
                shape=(self.num_rows, flat.size)).tocsr()
        return self._plan @ g.reshape(-1, ncols)

    def __call__(self, x):
        x = as_tensor(x)
        xd = x.data
        if xd.ndim != 2 or xd.shape[0] != self.num_rows:
            raise ShapeError(f"gather: expected ({self.num_rows}, C), got {xd.shape}")
        out = xd[self.idx]
        ncols = xd.shape[1]
        return _op(out, (x, lambda g: self._scatter(g, ncols)))


def take_rows(x, idx):
    """One-shot row gather (plan not cached across calls)."""
    x = as_tensor(x)
    return RowGather(idx, x.shape[0])(x)


def weighted_rows(x, idx, weights):
    """out[k] = sum_t weights[k,t] * x[idx[k,t]] for x:(R,C), idx/weights:(K,T).

    Linear in x (differentiable); implemented as a sparse-matrix product so
    both directions run at C speed and each output row is computed
    independently of the batch it sits in.
    """
    from scipy.sparse import csr_matrix

    x = as_tensor(x)
    xd = x.data
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if idx.shape != weights.shape or idx.ndim != 2:
        raise ShapeError(f"weighted_rows: idx {idx.shape} and weights {weights.shape} must match, 2-D")
    k, t = idx.shape
    indptr = np.arange(0, k * t + 1, t, dtype=np.int64)
    a = csr_matrix((weights.ravel(), idx.ravel(), indptr), shape=(k, xd.shape[0]))
    out = a @ xd

    def bw(g):
        return a.T @ g

    return _op(out, (x, bw))


def scatter_rows(base, idx, rows):
    """Copy of constant `base` with `base[idx] = rows`; idx must be unique.

    Gradients flow only to `rows`; `base` is a plain array by contract.
    """
    if isinstance(base, Tensor):
        raise TypeError("scatter_rows base must be a constant array")
    rows = as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.array(base, dtype=np.float64, copy=True)
    out[idx] = rows.data
    return _op(out, (rows, lambda g: g[idx]))


def segment_mean_rows(x, row_idx, num_rows):
    """Scatter rows of x:(K,C) into `num_rows` slots, averaging collisions.

    Rows with no contribution stay zero. Differentiable in x.
    """
    x = as_tensor(x)
    xd = x.data
    row_idx = np.asarray(row_idx, dtype=np.int64)
    order = np.argsort(row_idx, kind="stable")
    srt = row_idx[order]
    starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    uniq = srt[starts]
    counts = np.diff(np.r_[starts, len(srt)]).astype(np.float64)
    out = np.zeros((num_rows, xd.shape[1]), dtype=np.float64)
    out[uniq] = np.add.reduceat(xd[order], starts, axis=0) / counts[:, None]
    inv_count = np.zeros(num_rows, dtype=np.float64)
    inv_count[uniq] = 1.0 / counts

    def bw(g):
        return g[row_idx] * inv_count[row_idx, None]

    return _op(out, (x, bw))


# ---------------------------------------------------------------------------
# scans and normalization

def exclusive_cumsum(a):
    """y[..., i] = sum of x[..., :i] along the last axis."""
    a = as_tensor(a)
    ad = a.data
    c = np.cumsum(ad, axis=-1)
    out = np.empty_like(ad)
    out[..., 0] = 0.0
    out[..., 1:] = c[..., :-1]

    def bw(g):
        rc = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return rc - g

    return _op(out, (a, bw))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    red = tuple(range(xd.ndim - 1))

    def bw_x(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m1 - xhat * m2) * inv

    return _op(out,
               (x, bw_x),
               (gamma, lambda g: (g * xhat).sum(axis=red)),
               (beta, lambda g: g.sum(axis=red)))


_OPS.update({
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "getitem": getitem, "reshape": reshape,
    "tsum": tsum, "tmean": tmean,
})
