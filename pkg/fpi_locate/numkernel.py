"""Differentiable numeric kernel.

A small reverse-mode automatic differentiation engine over numpy arrays.
Only the operations the localisation model needs are provided:

  - elementwise add / sub / mul / scale, sum / mean, reshape / permute / index
  - batched matmul, conv2d (stride, asymmetric padding, groups)
  - layernorm, softmax, gelu, sigmoid, log_sigmoid, clamped log
  - bilinear resize (align-corners)

Every op records a closure that maps the output gradient to the gradients
of its parents.  ``Tensor.backward`` walks the graph in reverse topological
order.  Computation runs in float32; ``precision(np.float64)`` switches the
whole kernel to 64-bit for gradient checks.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .validation import DimensionError, GradientError

logger = logging.getLogger("fpi_locate.numkernel")

_state = threading.local()

DEFAULT_DTYPE = np.float32


def get_dtype() -> type:
    """Return the dtype new tensors are created with."""
    return getattr(_state, "dtype", DEFAULT_DTYPE)


@contextmanager
def precision(dtype):
    """Switch the kernel to *dtype* for the duration of the block."""
    previous = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


# ---------------------------------------------------------------------------
# Random state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngState:
    """Seeded PCG64 stream (numpy's bit generator, identical on all platforms).

    ``generator(*keys)`` derives an independent stream per key tuple through
    ``SeedSequence`` spawn keys, so weight init, augmentation and shuffling
    never share state.
    """

    seed: int
    algorithm: str = "PCG64"

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported PRNG {self.algorithm!r}")

    def generator(self, *keys: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in keys))
        return np.random.Generator(np.random.PCG64(seq))


def trunc_normal(
    rng: np.random.Generator,
    shape: Sequence[int],
    std: float = 0.02,
) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    values = stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=tuple(shape), random_state=rng)
    return np.asarray(values, dtype=get_dtype())


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Backward | None = None
        self._op = "leaf"
        self._consumed = False

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- array-like surface ---------------------------------------------------

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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ------------------------------------------------------------

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

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass ---------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        The tensor must be a scalar produced by tracked ops.  A graph can be
        walked once; build a new forward pass before calling again.
        """
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("backward on a tensor that does not require grad")
        if self._consumed:
            raise GradientError("backward already ran on this graph")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            node._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum *grad* down to *shape* after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result(x.data * factor, (x,), backward, "scale")


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so no overflow for large |x|
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), backward, "sigmoid")


def log_sigmoid(x: Tensor, floor: float | None = None) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x).

    With *floor* the value is clamped below at ``floor``; the gradient
    ``sigmoid(-x)`` is kept everywhere, so saturated logits still learn.
    """
    y = special.log_expit(x.data)
    if floor is not None:
        y = np.maximum(y, floor)
    y = y.astype(x.data.dtype)

    def backward(g):
        return ((g * special.expit(-x.data)).astype(g.dtype),)

    return _result(y, (x,), backward, "log_sigmoid")


def log(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped below at *eps*."""
    clamped = np.maximum(x.data, eps)

    def backward(g):
        return (np.where(x.data > eps, g / clamped, 0.0).astype(g.dtype),)

    return _result(np.log(clamped), (x,), backward, "log")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layernorm(
    x: Tensor,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-6,
) -> Tensor:
    """Normalise over the last axis, then apply the optional affine transform."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gamma = weight.data if weight is not None else None
    y = xhat * gamma if gamma is not None else xhat
    if bias is not None:
        y = y + bias.data

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def backward(g):
        dxhat = g * gamma if gamma is not None else g
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _result(y, parents, backward, "layernorm")


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)]
    )
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "permute")


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), backward, "getitem")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _normalize_padding(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        pads = (padding,) * 4
    else:
        pads = tuple(int(p) for p in padding)
        if len(pads) != 4:
            raise DimensionError(f"padding must be an int or (top, bottom, left, right), got {padding!r}")
    if any(p < 0 for p in pads):
        raise DimensionError(f"padding must be >= 0, got {padding!r}")
    return pads


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding=0,
    groups: int = 1,
) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    *x* is C_in x H x W or N x C_in x H x W; *kernel* is
    C_out x (C_in / groups) x kh x kw.  *padding* is an int or a
    (top, bottom, left, right) tuple.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects CHW/NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    n, c_in, h, w = xd.shape
    c_out, c_per_group, kh, kw = kernel.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise DimensionError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_per_group * groups != c_in:
        raise DimensionError(f"kernel expects {c_per_group * groups} input channels, input has {c_in}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    top, bottom, left, right = _normalize_padding(padding)
    span_h, span_w = h + top + bottom - kh, w + left + right - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"non-integer output size for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {(top, bottom, left, right)}"
        )
    out_h, out_w = span_h // stride + 1, span_w // stride + 1
    o_per_group = c_out // groups

    xp = np.pad(xd, ((0, 0), (0, 0), (top, bottom), (left, right)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # (n, g, cg, oh, ow, kh, kw) -> (g, n*oh*ow, cg*kh*kw)
    cols = windows.reshape(n, groups, c_per_group, out_h, out_w, kh, kw)
    cols = cols.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * out_h * out_w, -1)
    kmat = kernel.data.reshape(groups, o_per_group, -1).transpose(0, 2, 1)

    out = cols @ kmat  # (g, n*oh*ow, og)
    out = out.reshape(groups, n, out_h, out_w, o_per_group).transpose(1, 0, 4, 2, 3)
    out = out.reshape(n, c_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    if unbatched:
        out = out[0]

    parents = [x, kernel] + ([bias] if bias is not None else [])

    def backward(g):
        gd = g[None] if unbatched else g
        gmat = gd.reshape(n, groups, o_per_group, out_h, out_w)
        gmat = gmat.transpose(1, 0, 3, 4, 2).reshape(groups, n * out_h * out_w, o_per_group)

        gk = (np.swapaxes(cols, 1, 2) @ gmat).transpose(0, 2, 1).reshape(kernel.shape)

        gcols = gmat @ np.swapaxes(kmat, 1, 2)  # (g, n*oh*ow, cg*kh*kw)
        gcols = gcols.reshape(groups, n, out_h, out_w, c_per_group, kh, kw)
        gcols = gcols.transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, c_in, out_h, out_w, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += gcols[..., i, j]
        gx = gxp[:, :, top:top + h, left:left + w]
        grads = [gx[0] if unbatched else gx, gk]
        if bias is not None:
            grads.append(gd.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Linear interpolation weights (size_out x size_in), align-corners convention.

    Output sample i sits at input coordinate i * (size_in - 1) / (size_out - 1),
    so the first and last samples coincide with the input corners.
    """
    if size_in < 1 or size_out < 1:
        raise DimensionError(f"resize sizes must be >= 1, got {size_in} -> {size_out}")
    m = np.zeros((size_out, size_in), dtype=np.float64)
    if size_in == 1 or size_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), size_in - 2)
    frac = pos - lo
    rows = np.arange(size_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align-corners = true)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be >= 1, got {out_h}x{out_w}")
    ry = interpolation_matrix(x.shape[-2], out_h).astype(x.data.dtype)
    rx = interpolation_matrix(x.shape[-1], out_w).astype(x.data.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _result(out, (x,), backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def numeric_gradient(
    fn: Callable[[], Tensor],
    target: Tensor,
    step: float = 1e-4,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to *target*.

    When *indices* is given only those entries are perturbed; the returned
    array holds their derivatives in the same order.
    """
    if not target.data.flags.c_contiguous:
        target.data = np.ascontiguousarray(target.data)
    flat = target.data.reshape(-1)
    positions = (
        range(flat.size)
        if indices is None
        else [int(np.ravel_multi_index(ix, target.shape)) for ix in indices]
    )
    out = []
    for pos in positions:
        original = flat[pos]
        flat[pos] = original + step
        plus = float(fn().data.sum())
        flat[pos] = original - step
        minus = float(fn().data.sum())
        flat[pos] = original
        out.append((plus - minus) / (2.0 * step))
    result = np.asarray(out, dtype=np.float64)
    return result.reshape(target.shape) if indices is None else result


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale_)


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and numeric gradients of ``fn()``.

    With *max_entries* only a random subset of each input's entries is
    perturbed, which keeps checks on full models affordable.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn()
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is not None and t.size > max_entries:
            picks = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(int(p), t.shape) for p in picks]
            numeric = numeric_gradient(fn, t, step, indices)
            analytic = np.array([analytic[ix] for ix in indices])
        else:
            numeric = numeric_gradient(fn, t, step)
        err = relative_error(analytic, numeric)
        logger.debug("gradient check %s: rel err %.3e", t.shape, err)
        worst = max(worst, err)
    return worst
