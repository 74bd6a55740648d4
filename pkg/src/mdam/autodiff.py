"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is numpy-backed, double precision and single threaded: story
tensors are small (tens of rows, a few thousand columns at most), so the
engine optimizes for low per-op overhead rather than throughput. Gradients
accumulate additively into leaves; the caller zeroes them between steps.
A graph is consumed by its backward pass and cannot be replayed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "constant", "parameter", "no_grad", "backward",
    "DimensionError", "DegenerateMaskError", "EmptySequenceError",
    "GraphStateError",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose",
    "tanh", "relu", "log", "reshape", "concat_lastdim", "concat_rows",
    "stack_rows", "take_row", "gather_rows", "scatter_rows", "tile_rows",
    "sliding_windows", "reduce_max_axis0", "segment_max_rows",
    "softmax_lastdim", "layer_norm_lastdim", "dropout",
    "mean_all", "sum_all", "conv1d_maxpool", "finite_diff_check",
    "FiniteDiffReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A softmax row has no unmasked entry."""


class EmptySequenceError(ValueError):
    """An aggregation was asked to reduce over zero valid positions."""


class GraphStateError(RuntimeError):
    """The computation graph was used after being consumed."""


_GRAD_ENABLED = True


class no_grad:
    """Disable graph construction; ops return plain value tensors."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x):
    if type(x) is np.ndarray and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A dense array plus its place in the reverse-mode graph.

    ``modality`` is an optional provenance tag (a frozenset of stream names)
    used by the graph audit; it has no effect on computation.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn",
                 "op", "modality", "consumed")

    def __init__(self, data, requires_grad=False, parents=(),
                 backward_fn=None, op="leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.modality = None
        self.consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x):
    return Tensor(x)


def parameter(x):
    return Tensor(x, requires_grad=True, op="param")


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                return Tensor(data, requires_grad=True, parents=parents,
                              backward_fn=backward_fn, op=op)
        # keep the links for graph inspection even when nothing needs grad
        return Tensor(data, requires_grad=False, parents=parents, op=op)
    return Tensor(data, op=op)


def _topo(root):
    # Mark visited at expansion, not discovery: a node reachable through
    # several consumers must still be appended before every consumer.
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be a single-element tensor. The traversed graph is marked
    consumed; a second backward through it raises GraphStateError.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise GraphStateError("backward already called on this graph")
    loss.consumed = True
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node.consumed = True
        fn = node.backward_fn
        if fn is None:
            continue
        grads = fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                p.grad += g
        node.grad = None
        node.backward_fn = None
        node.parents = ()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _result(data, (a, b), bw, "add")


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _result(data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data
    sa, sb = a.shape, b.shape
    da, db = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb))

    return _result(data, (a, b), bw, "mul")


def neg(a):
    a = _coerce(a)

    def bw(g):
        return (-g,)

    return _result(-a.data, (a,), bw, "neg")


def scale(a, s):
    a = _coerce(a)
    s = float(s)

    def bw(g):
        return (g * s,)

    return _result(a.data * s, (a,), bw, "scale")


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    da, db = a.data, b.data
    if da.ndim not in (1, 2) or db.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {da.shape} and {db.shape}")
    if da.shape[-1] != (db.shape[0] if db.ndim > 0 else None):
        raise DimensionError(f"matmul inner dimensions differ: {da.shape} by {db.shape}")
    data = da @ db
    na, nb = da.ndim, db.ndim

    def bw(g):
        if na == 2 and nb == 2:
            return (g @ db.T, da.T @ g)
        if na == 1 and nb == 2:
            return (db @ g, np.outer(da, g))
        if na == 2 and nb == 1:
            return (np.outer(g, db), da.T @ g)
        return (g * db, g * da)

    return _result(data, (a, b), bw, "matmul")


def transpose(a):
    a = _coerce(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def bw(g):
        return (g.T,)

    return _result(a.data.T, (a,), bw, "transpose")


def _tanh_grad(y, g):
    return g * (1.0 - y * y)


def tanh(a):
    a = _coerce(a)
    y = np.tanh(a.data)

    def bw(g):
        return (_tanh_grad(y, g),)

    return _result(y, (a,), bw, "tanh")


def relu(a):
    a = _coerce(a)
    pos = a.data > 0
    y = np.where(pos, a.data, 0.0)

    def bw(g):
        return (g * pos,)

    return _result(y, (a,), bw, "relu")


def log(a, floor=None):
    """Natural log; with ``floor`` the input is clamped from below first."""
    a = _coerce(a)
    if floor is None:
        x = a.data
        live = None
    else:
        x = np.maximum(a.data, floor)
        live = a.data >= floor
    y = np.log(x)

    def bw(g):
        gx = g / x
        if live is not None:
            gx = gx * live
        return (gx,)

    return _result(y, (a,), bw, "log")


def reshape(a, shape):
    a = _coerce(a)
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def concat_lastdim(tensors):
    ts = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=-1)
    widths = [t.shape[-1] for t in ts]

    def bw(g):
        out, pos = [], 0
        for w in widths:
            out.append(g[..., pos:pos + w])
            pos += w
        return out

    return _result(data, tuple(ts), bw, "concat_lastdim")


def concat_rows(tensors):
    ts = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=0)
    counts = [t.shape[0] for t in ts]

    def bw(g):
        out, pos = [], 0
        for n in counts:
            out.append(g[pos:pos + n])
            pos += n
        return out

    return _result(data, tuple(ts), bw, "concat_rows")


def stack_rows(tensors):
    ts = [_coerce(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=0)

    def bw(g):
        return [g[i] for i in range(len(ts))]

    return _result(data, tuple(ts), bw, "stack_rows")


def take_row(a, i):
    a = _coerce(a)
    i = int(i)
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        z[i] = g
        return (z,)

    return _result(a.data[i], (a,), bw, "take_row")


def gather_rows(a, idx):
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), bw, "gather_rows")


def scatter_rows(a, idx, total_rows):
    """Place rows of ``a`` at positions ``idx`` in a zero matrix."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((total_rows,) + a.shape[1:])
    data[idx] = a.data

    def bw(g):
        return (g[idx],)

    return _result(data, (a,), bw, "scatter_rows")


def tile_rows(a, n):
    a = _coerce(a)
    if a.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got shape {a.shape}")
    data = np.repeat(a.data[None, :], n, axis=0)

    def bw(g):
        return (g.sum(axis=0),)

    return _result(data, (a,), bw, "tile_rows")


def sliding_windows(a, width, starts):
    """Rows ``a[s:s+width]`` flattened, one output row per start index."""
    a = _coerce(a)
    starts = np.asarray(starts, dtype=np.intp)
    d = a.shape[1]
    idx = starts[:, None] + np.arange(width)
    data = a.data[idx].reshape(len(starts), width * d)
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g.reshape(len(starts), width, d))
        return (z,)

    return _result(data, (a,), bw, "sliding_windows")


def reduce_max_axis0(a):
    a = _coerce(a)
    da = a.data
    if da.ndim == 1:
        am = int(np.argmax(da))
        size = da.shape[0]

        def bw(g):
            z = np.zeros(size)
            z[am] = g
            return (z,)

        return _result(da[am], (a,), bw, "reduce_max_axis0")
    am = np.argmax(da, axis=0)
    cols = np.arange(da.shape[1])
    shape = da.shape

    def bw(g):
        z = np.zeros(shape)
        z[am, cols] = g
        return (z,)

    return _result(da[am, cols], (a,), bw, "reduce_max_axis0")


def segment_max_rows(a, bounds):
    """Per-segment column-wise max over contiguous, non-empty row ranges."""
    a = _coerce(a)
    da = a.data
    rows = []
    arg = []
    for lo, hi in bounds:
        seg = da[lo:hi]
        am = np.argmax(seg, axis=0)
        arg.append(am + lo)
        rows.append(seg[am, np.arange(seg.shape[1])])
    data = np.stack(rows, axis=0)
    cols = np.arange(da.shape[1])
    shape = da.shape

    def bw(g):
        z = np.zeros(shape)
        for i, am in enumerate(arg):
            z[am, cols] += g[i]
        return (z,)

    return _result(data, (a,), bw, "segment_max_rows")


def _softmax_grad(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_lastdim(x, mask=None):
    """Numerically stabilized softmax over the last axis.

    Masked-out entries are exactly zero in the output (additive -inf before
    the softmax). Every row must keep at least one unmasked entry.
    """
    x = _coerce(x)
    dx = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != dx.shape:
            mask = np.broadcast_to(mask, dx.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("softmax row with every entry masked")
        z = np.where(mask, dx, -np.inf)
    else:
        z = dx
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (_softmax_grad(y, g),)

    return _result(y, (x,), bw, "softmax")


def _layer_norm_grad(y, s, g):
    gm = g.mean(axis=-1, keepdims=True)
    ym = (g * y).mean(axis=-1, keepdims=True)
    return (g - gm - y * ym) / s


def layer_norm_lastdim(x, eps=1e-5):
    """Zero-mean, unit-variance rows (before any learnable gain/bias)."""
    x = _coerce(x)
    if x.shape[-1] < 2:
        raise DimensionError(f"layer norm needs width >= 2, got shape {x.shape}")
    dx = x.data
    mu = dx.mean(axis=-1, keepdims=True)
    var = ((dx - mu) ** 2).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    y = (dx - mu) / s

    def bw(g):
        return (_layer_norm_grad(y, s, g),)

    return _result(y, (x,), bw, "layer_norm")


def dropout(x, rate, rng):
    """Inverted dropout: scales kept entries by 1/(1-rate); eval is a no-op."""
    x = _coerce(x)
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    m = (rng.random(x.shape) < keep) / keep

    def bw(g):
        return (g * m,)

    return _result(x.data * m, (x,), bw, "dropout")


def mean_all(x):
    x = _coerce(x)
    n = x.size

    def bw(g):
        return (np.full(x.shape, float(g) / n),)

    return _result(x.data.mean(), (x,), bw, "mean_all")


def sum_all(x):
    x = _coerce(x)

    def bw(g):
        return (np.full(x.shape, float(g)),)

    return _result(x.data.sum(), (x,), bw, "sum_all")


def valid_window_starts(pos_mask, width):
    """Start indices whose windows touch only unmasked positions."""
    pos_mask = np.asarray(pos_mask, dtype=bool)
    t = len(pos_mask)
    if width > t:
        return np.empty(0, dtype=np.intp)
    if width == 1:
        return np.nonzero(pos_mask)[0]
    ok = np.convolve(pos_mask.astype(np.intp), np.ones(width, dtype=np.intp), "valid") == width
    return np.nonzero(ok)[0]


def conv1d_maxpool(x, filters, pos_mask):
    """Multi-width 1-D convolution with ReLU and masked max-over-positions.

    ``filters`` is a list of (weight, bias) tensor pairs, one per window
    width starting at 1; weight for width w has shape (w * d_in, channels).
    Windows touching a masked position are excluded; a width with no valid
    window contributes a zero vector. Output is the channel concatenation
    over widths.
    """
    x = _coerce(x)
    pos_mask = np.asarray(pos_mask, dtype=bool)
    if not pos_mask.any():
        raise EmptySequenceError("conv1d_maxpool over a fully masked sequence")
    d_in = x.shape[1]
    pieces = []
    for width, (w, b) in enumerate(filters, start=1):
        channels = w.shape[1]
        if w.shape[0] != width * d_in:
            raise DimensionError(
                f"width-{width} filter expects {width * d_in} inputs, got {w.shape[0]}")
        starts = valid_window_starts(pos_mask, width)
        if len(starts) == 0:
            pieces.append(constant(np.zeros(channels)))
            continue
        win = sliding_windows(x, width, starts)
        act = relu(add(matmul(win, w), b))
        pieces.append(reduce_max_axis0(act))
    return concat_lastdim(pieces)


class FiniteDiffReport:
    """Result of a finite-difference gradient check."""

    def __init__(self, max_rel_err, worst_path, per_path):
        self.max_rel_err = max_rel_err
        self.worst_path = worst_path
        self.per_path = per_path

    def __repr__(self):
        return f"FiniteDiffReport(max_rel_err={self.max_rel_err:.3e}, worst_path={self.worst_path!r})"


def finite_diff_check(loss_fn, params, eps=1e-5, samples_per_tensor=50, seed=0):
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be deterministic (no dropout, fixed seeds) and rebuild
    its graph on every call. ``params`` maps path -> Tensor. Returns the max
    over sampled coordinates of |analytic - central| / max(|analytic|,
    |central|, 1e-8), sampling at least min(size, samples_per_tensor)
    coordinates per tensor.
    """
    items = sorted(params.items())
    if not items:
        return FiniteDiffReport(0.0, None, {})
    for _, t in items:
        t.grad = None
    out = loss_fn()
    backward(out)
    analytic = {path: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
                for path, t in items}
    rng = np.random.default_rng(seed)
    per_path = {}
    worst = (0.0, None)
    for path, t in items:
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=samples_per_tensor, replace=False))
        aflat = analytic[path].reshape(-1)
        path_worst = 0.0
        with no_grad():
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = float(loss_fn().data)
                flat[c] = orig - eps
                fm = float(loss_fn().data)
                flat[c] = orig
                num = (fp - fm) / (2.0 * eps)
                a = aflat[c]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                if err > path_worst:
                    path_worst = err
        per_path[path] = path_worst
        if path_worst > worst[0]:
            worst = (path_worst, path)
    return FiniteDiffReport(worst[0], worst[1], per_path)
