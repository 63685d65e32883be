"""Dense tensors with a reverse-mode gradient tape.

Everything downstream (UNet blocks, attention fusion, the training loop)
runs on this module. Arrays are row-major numpy buffers; the tape records
operations in execution order and backward walks it in exact reverse.

Training runs in float32. Gradient checking switches the whole module to
float64 via `precision("float64")` because central differences are not
trustworthy in single precision.
"""

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


class NumericsError(ArithmeticError):
    """A kernel produced NaN/Inf, or was fed a non-finite gradient."""


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.finite_checks = True


_state = _State()


def current_dtype():
    return _state.dtype


@contextmanager
def precision(name):
    """Switch leaf/parameter dtype: 'float32' (training) or 'float64' (checks)."""
    table = {"float32": np.float32, "float64": np.float64}
    if name not in table:
        raise ValueError(f"unknown precision {name!r}")
    prev = _state.dtype
    _state.dtype = table[name]
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable tape recording (sampling / evaluation paths)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks(enabled):
    prev = _state.finite_checks
    _state.finite_checks = enabled
    try:
        yield
    finally:
        _state.finite_checks = prev


def _assert_finite(arr, op):
    if not _state.finite_checks:
        return
    # One vectorized reduction; cheaper than isfinite().all() on large buffers
    # and catches any NaN/Inf since the sum of a finite array is finite here.
    with np.errstate(over="ignore", invalid="ignore"):
        s = float(np.sum(arr, dtype=np.float64))
    if not np.isfinite(s):
        raise NumericsError(f"non-finite values produced by {op}")


class GradTape:
    """Execution-ordered record of differentiable ops.

    Backward visits nodes in exact reverse execution order; nodes whose
    gradient never materialized are skipped (they belong to other graphs
    or dead branches).
    """

    def __init__(self):
        self.nodes = []

    def append(self, node):
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward()


_tape = GradTape()


def tape():
    return _tape


class Tensor:
    """Dense n-d array plus optional gradient buffer.

    Value-semantic: ops never alias their inputs' storage for writing.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_state.dtype)
        _assert_finite(arr, "tensor init")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        _tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_builder, op):
    """Create an op output and register it on the tape when recording."""
    _assert_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    out._parents = ()
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_builder(out)
        _tape.append(out)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.data.shape))

        return run

    return _node(data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.data.shape))

        return run

    return _node(data, (a, b), bwd, "sub")


def mul(a, b):
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return scale(_wrap(a), float(b))
    if isinstance(a, (int, float)):
        return scale(_wrap(b), float(a))
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

        return run

    return _node(data, (a, b), bwd, "mul")


def scale(a, c):
    a = _wrap(a)
    c = float(c)
    data = a.data * c

    def bwd(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad * c)

        return run

    return _node(data, (a,), bwd, "scale")


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accumulate_grad(out.grad * (sig * (1.0 + x.data * (1.0 - sig))))

        return run

    return _node(data, (x,), bwd, "silu")


def square(x):
    return mul(x, x)


# -- shape moves ------------------------------------------------------


def reshape(x, shape):
    data = x.data.reshape(shape)

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accumulate_grad(out.grad.reshape(x.data.shape))

        return run

    return _node(data, (x,), bwd, "reshape")


def permute(x, axes):
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accumulate_grad(np.ascontiguousarray(out.grad.transpose(inverse)))

        return run

    return _node(data, (x,), bwd, "permute")


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def bwd(out):
        def run():
            g = out.grad
            sl = [slice(None)] * g.ndim
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl[axis] = slice(int(lo), int(hi))
                    t.accumulate_grad(np.ascontiguousarray(g[tuple(sl)]))

        return run

    return _node(data, tuple(tensors), bwd, "concat")


def stack0(tensors):
    return concat([reshape(t, (1,) + t.data.shape) for t in tensors], axis=0)


def slice_rows(x, start, stop):
    data = np.ascontiguousarray(x.data[start:stop])

    def bwd(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[start:stop] = out.grad
                x.accumulate_grad(g)

        return run

    return _node(data, (x,), bwd, "slice_rows")


def slice_cols(x, start, stop):
    data = np.ascontiguousarray(x.data[..., start:stop])

    def bwd(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[..., start:stop] = out.grad
                x.accumulate_grad(g)

        return run

    return _node(data, (x,), bwd, "slice_cols")


def gather_rows(table, indices):
    """Row lookup for embedding tables; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather_rows index out of range for table with {table.data.shape[0]} rows"
        )
    data = table.data[idx].copy()

    def bwd(out):
        def run():
            if table.requires_grad:
                g = np.zeros_like(table.data)
                np.add.at(g, idx, out.grad)
                table.accumulate_grad(g)

        return run

    return _node(data, (table,), bwd, "gather_rows")


# -- contractions -----------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        return run

    return _node(data, (a, b), bwd, "matmul")


def transpose2d(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d expects 2-d input, got {x.data.shape}")
    return permute(x, (1, 0))


def linear(x, w, b=None):
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# -- softmax ----------------------------------------------------------


def _softmax_forward(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    return e / z, (m + np.log(z)).squeeze(-1)


def softmax_lastdim(x):
    """Rows sum to one; computed with max subtraction for stability."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    s, _ = _softmax_forward(x.data)

    def bwd(out):
        def run():
            if x.requires_grad:
                g = out.grad
                dot = np.sum(g * s, axis=-1, keepdims=True)
                x.accumulate_grad((g - dot) * s)

        return run

    return _node(s, (x,), bwd, "softmax")


def softmax_lastdim_with_lse(x):
    """Softmax plus the per-row logsumexp of the raw logits.

    The logsumexp comes back as a plain array (it only feeds numerical
    decomposition checks, never the graph).
    """
    out = softmax_lastdim(x)
    _, lse = _softmax_forward(x.data)
    return out, lse


# -- reductions -------------------------------------------------------


def sum_all(x):
    data = np.asarray(x.data.sum()).reshape(())

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accumulate_grad(np.broadcast_to(out.grad, x.data.shape).copy())

        return run

    return _node(data, (x,), bwd, "sum_all")


def mean_all(x):
    n = x.data.size
    data = np.asarray(x.data.mean()).reshape(())

    def bwd(out):
        def run():
            if x.requires_grad:
                x.accumulate_grad(np.broadcast_to(out.grad / n, x.data.shape).copy())

        return run

    return _node(data, (x,), bwd, "mean_all")


def mse(a, b):
    return mean_all(square(sub(a, b)))


# -- convolution ------------------------------------------------------


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
    # -> [b*ho*wo, c*kh*kw] so the filter bank is one GEMM away
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(
        b * ho * wo, c * kh * kw
    )


def _col2im(gcols, xp_shape, kh, kw, stride, ho, wo):
    b, c, hp, wp = xp_shape
    g6 = np.ascontiguousarray(
        gcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    )
    dxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += g6[
                :, :, i, j
            ]
    return dxp


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation over [B,C,H,W] with an [O,C,kh,kw] filter bank."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and weight, got {x.data.shape} and {w.data.shape}"
        )
    b, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {cw}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(
            f"conv2d bias shape {bias.data.shape} does not match {o} output channels"
        )
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty for input {x.data.shape} and kernel {kh}x{kw}"
        )
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(o, c * kh * kw)
    out2 = cols @ w2.T
    if bias is not None:
        out2 += bias.data
    data = np.ascontiguousarray(out2.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(out):
        def run():
            g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(
                b * ho * wo, o
            )
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g2.sum(axis=0))
            if w.requires_grad:
                w.accumulate_grad((g2.T @ cols).reshape(o, c, kh, kw))
            if x.requires_grad:
                dxp = _col2im(g2 @ w2, xp.shape, kh, kw, stride, ho, wo)
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                x.accumulate_grad(np.ascontiguousarray(dxp))

        return run

    return _node(data, parents, bwd, "conv2d")


# -- normalization ----------------------------------------------------


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-(sample, group) standardization followed by channel affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects [B,C,H,W], got {x.data.shape}")
    b, c, h, w = x.data.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"group_norm affine shapes {gamma.data.shape}/{beta.data.shape} need ({c},)"
        )
    m = (c // groups) * h * w
    xg = x.data.reshape(b, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bwd(out):
        def run():
            g = out.grad
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(b, groups, m)
                xh = xhat.reshape(b, groups, m)
                mean_d = dxhat.mean(axis=2, keepdims=True)
                mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
                dx = inv * (dxhat - mean_d - xh * mean_dx)
                x.accumulate_grad(dx.reshape(b, c, h, w))

        return run

    return _node(data, (x, gamma, beta), bwd, "group_norm")


# -- resampling -------------------------------------------------------


def avg_pool2d(x):
    """2x2 mean pooling, stride 2; spatial extents must be even."""
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial extents, got {h}x{w}")
    data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(out):
        def run():
            if x.requires_grad:
                g = out.grad * 0.25
                g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
                x.accumulate_grad(g)

        return run

    return _node(data, (x,), bwd, "avg_pool2d")


def upsample_nearest2(x):
    b, c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(out):
        def run():
            if x.requires_grad:
                g = out.grad.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
                x.accumulate_grad(g)

        return run

    return _node(data, (x,), bwd, "upsample_nearest2")
