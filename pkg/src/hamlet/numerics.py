"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array-valued quantity in the model is a :class:`Tensor`. Operations
build a dynamic graph (each output keeps its parents and a local gradient
rule); :func:`backward` walks that graph in reverse topological order and
accumulates ``dLoss/dLeaf`` into every leaf that requires a gradient.

Broadcasting follows numpy: shapes are aligned on trailing dimensions and
size-1 (or missing) leading dimensions are stretched. Gradients flowing back
into a broadcast operand are summed over the stretched axes.
"""
from __future__ import annotations

import contextlib
import contextvars
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_CHECK_FINITE: contextvars.ContextVar[bool] = contextvars.ContextVar("check_finite", default=False)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op produces NaN or Inf."""
    token = _CHECK_FINITE.set(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


class Rng:
    """Seeded random stream backed by numpy's Philox4x64 counter-based generator.

    Philox output depends only on (key, counter), so identical seeds yield
    identical streams on every platform. ``child(name)`` derives an
    independent stream keyed by ``(seed, crc32(name))``.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def child(self, name: str) -> "Rng":
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, zlib.crc32(name.encode())])
        rng._gen = np.random.Generator(np.random.Philox(ss))
        return rng

    def uniform(self, low, high, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def random(self, size) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    if _CHECK_FINITE.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ----------------------------------------------------------------------------
# linear algebra and reductions
# ----------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable") from None

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def amax(a, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def rule(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (grad,)

    return _make(out, (a,), rule, "amax")


# ----------------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def rule(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[idx] += g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return _make(np.array(a.data[idx]), (a,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


def pad(a, widths) -> Tensor:
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


# ----------------------------------------------------------------------------
# neural-network primitives
# ----------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), rule, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), rule, "log_softmax")


def dropout(x, p: float, training: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


class BatchNormState:
    """Learnable scale/shift plus running statistics for one batch-norm layer."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        self.gamma = Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, state: BatchNormState, training: bool, mode: str = "1d") -> Tensor:
    """Batch norm over ``(B, F)`` (mode "1d") or ``(B, C, H, W)`` (mode "2d").

    Training mode normalizes with the biased batch variance and updates the
    running variance with the unbiased estimate; eval mode uses running stats.
    """
    x = as_tensor(x)
    if mode == "1d":
        if x.ndim != 2:
            raise ShapeError(f"batch_norm 1d expects (B, F), got {x.shape}")
        axes, bshape = (0,), (1, -1)
    elif mode == "2d":
        if x.ndim != 4:
            raise ShapeError(f"batch_norm 2d expects (B, C, H, W), got {x.shape}")
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    if x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch_norm: {x.shape[1]} features, layer has {state.gamma.shape[0]}")

    gamma = reshape(state.gamma, bshape)
    beta = reshape(state.beta, bshape)
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        mu = mean(x, axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axes, keepdims=True)
        xhat = centered / sqrt(var + state.eps)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(-1)
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        rm = state.running_mean.reshape(bshape)
        rv = state.running_var.reshape(bshape)
        xhat = (x - rm) * (1.0 / np.sqrt(rv + state.eps))
    return xhat * gamma + beta


def conv2d(x, w, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D cross-correlation, stride 1. ``x``: (N, C, H, W); ``w``: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    O, C, kh, kw = w.shape
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: padded input {xp.shape} smaller than kernel {w.shape}")
    N, Ho, Wo = x.shape[0], xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(N, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        return gx, gw

    return _make(out, (x, w), rule, "conv2d")


def max_pool1d(x, kernel: int, stride: int, axis: int) -> Tensor:
    """Sliding-window max along ``axis``; output length ``(L - kernel) // stride + 1``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    L = x.shape[axis]
    if L < kernel:
        raise ShapeError(f"max_pool1d: length {L} shorter than kernel {kernel}")
    moved = np.moveaxis(x.data, axis, -1)
    win = sliding_window_view(moved, kernel, axis=-1)[..., ::stride, :]  # ..., n_out, kernel
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], -1)[..., 0]
    src = arg + np.arange(arg.shape[-1]) * stride  # frame index of each max

    def rule(g):
        gm = np.zeros_like(moved)
        gmv = np.moveaxis(g, axis, -1)
        flat_g = gm.reshape(-1, L)
        flat_src = src.reshape(-1, src.shape[-1])
        rows = np.repeat(np.arange(flat_g.shape[0]), flat_src.shape[1])
        np.add.at(flat_g, (rows, flat_src.reshape(-1)), gmv.reshape(-1))
        return (np.moveaxis(flat_g.reshape(moved.shape), -1, axis),)

    return _make(np.moveaxis(out, -1, axis), (x,), rule, "max_pool1d")


# ----------------------------------------------------------------------------
# backward pass and gradient checking
# ----------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``dloss/dleaf`` into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error is ``||a - n|| / max(||a||, ||n||, 1e-12)`` with all inputs'
    gradients concatenated into one vector. A per-element (or per-input)
    ratio would be dominated by finite-difference roundoff on entries whose
    true gradient is zero or nearly so.
    ``f`` must be deterministic in its inputs and return a scalar.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    diff_sq = a_sq = n_sq = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*inputs).item()
            flat[i] = orig - eps
            fm = f(*inputs).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)
        diff_sq += float(np.sum((a - numeric) ** 2))
        a_sq += float(np.sum(a ** 2))
        n_sq += float(np.sum(numeric ** 2))
    return float(np.sqrt(diff_sq) / max(np.sqrt(a_sq), np.sqrt(n_sq), 1e-12))
