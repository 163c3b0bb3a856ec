"""Dense float tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output adjoint to input adjoints.
``Tensor.backward`` orders the recorded graph topologically and replays the
closures in reverse, so each recorded op is visited exactly once.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_mac_counter: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar(
    "mac_counter", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MacCounter:
    """Tally of multiply-accumulates executed by matmul and conv2d."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every matmul/conv2d executed in the block."""
    counter = MacCounter()
    token = _mac_counter.set(counter)
    try:
        yield counter
    finally:
        _mac_counter.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _tally(op: str, n: int) -> None:
    counter = _mac_counter.get()
    if counter is not None:
        counter.add(op, n)


class Tensor:
    """An n-dimensional array that optionally tracks gradients.

    ``data`` is a numpy array (float64 unless constructed otherwise). ``grad``
    is populated by :meth:`backward` for leaves with ``requires_grad`` and
    accumulates across calls until :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _op: str = "",
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- introspection -----------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        tape = _topological_order(self)
        adjoints: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(tape):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    parents = tuple(parents)
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, dtype=data.dtype, _op=op)
    return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), backward, "gelu")


# -- reductions / shape ------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"{axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (g.transpose(inverse),), "permute")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _tally("matmul", int(np.prod(batch, dtype=np.int64)) * m * k * n)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- softmax / losses ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, K) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / labels.shape[0]),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- normalization -------------------------------------------------------------


def _bcast_param(p: Tensor, ndim: int, axis: int) -> Tensor:
    shape = [1] * ndim
    shape[axis] = p.shape[0]
    return reshape(p, shape)


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize each slice along ``axis`` to zero mean / unit variance, then scale and shift."""
    (axis,) = _norm_axes(axis, x.ndim)
    n = x.shape[axis]
    if n == 0:
        raise ShapeError("layer_norm over a zero-length axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in (gamma, beta):
        if p is not None and p.shape != (n,):
            raise ShapeError(f"norm parameter shape {p.shape} does not match axis length {n}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    out = _result(xhat, (x,), backward, "layer_norm")
    if gamma is not None:
        out = mul(out, _bcast_param(gamma, x.ndim, axis))
    if beta is not None:
        out = add(out, _bcast_param(beta, x.ndim, axis))
    return out


class RunningStats:
    """Per-channel running mean/variance buffers of a batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=DEFAULT_DTYPE) -> None:
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean[...] = (1.0 - m) * self.mean + m * batch_mean
        self.var[...] = (1.0 - m) * self.var + m * batch_var_unbiased


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    stats: RunningStats,
    training: bool,
    axis: int = 1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over every axis except the channel ``axis``.

    In training mode the batch statistics normalize and (if ``update_stats``)
    fold into ``stats`` with its momentum; the running variance uses the
    unbiased estimate. Eval mode normalizes with the stored statistics.
    """
    (axis,) = _norm_axes(axis, x.ndim)
    c = x.shape[axis]
    if stats.mean.shape != (c,):
        raise ShapeError(f"running stats for {stats.mean.shape[0]} channels, input has {c}")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = c
    if training:
        n = x.size // c
        if n <= 1:
            raise ValueError("batch_norm in train mode needs more than one value per channel")
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc**2).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_stats:
            stats.update(mu.reshape(c), var.reshape(c) * n / (n - 1))

        def backward(g):
            return (inv * (g - g.mean(axis=red, keepdims=True) - xhat * (g * xhat).mean(axis=red, keepdims=True)),)

    else:
        inv = 1.0 / np.sqrt(stats.var.reshape(bshape) + eps)
        xhat = (x.data - stats.mean.reshape(bshape)) * inv

        def backward(g):
            return (g * inv,)

    out = _result(xhat.astype(x.dtype, copy=False), (x,), backward, "batch_norm")
    if gamma is not None:
        out = mul(out, _bcast_param(gamma, x.ndim, axis))
    if beta is not None:
        out = add(out, _bcast_param(beta, x.ndim, axis))
    return out


# -- convolution / pooling -----------------------------------------------------


def _out_size(size: int, k: int, stride: int, pad: int, what: str) -> int:
    if size + 2 * pad < k:
        raise ShapeError(f"{what} kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    return win[..., : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :, :]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``x[B, Cin, H, W]`` with ``weight[Cout, Cin/groups, kh, kw]``.

    ``groups == Cin`` gives a depth-wise convolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise ShapeError(f"weight expects {cin_g} input channels per group, input gives {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match Cout={cout}")
    ho = _out_size(h, kh, stride, padding, "conv2d")
    wo = _out_size(w, kw, stride, padding, "conv2d")
    cout_g = cout // groups
    _tally("conv2d", b * cout * ho * wo * cin_g * kh * kw)

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads) if padding else x.data
    win = _windows(xp, kh, kw, stride, ho, wo).reshape(b, groups, cin_g, ho, wo, kh, kw)
    wg = weight.data.reshape(groups, cout_g, cin_g, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", win, wg, optimize=True).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gg = g.reshape(b, groups, cout_g, ho, wo)
        gw = np.einsum("bgohw,bgchwij->gocij", gg, win, optimize=True).reshape(weight.shape)
        gwin = np.einsum("bgohw,gocij->bgchwij", gg, wg, optimize=True).reshape(b, cin, ho, wo, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gwin[..., i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Per-window maximum; ties route the gradient to the lowest linear index."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-d input, got {x.shape}")
    stride = kernel if stride is None else stride
    b, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, "max_pool2d")
    wo = _out_size(w, kernel, stride, padding, "max_pool2d")
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads, constant_values=-np.inf) if padding else x.data
    win = _windows(xp, kernel, kernel, stride, ho, wo).reshape(b, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(ho)[:, None] * stride + arg // kernel
        cols = np.arange(wo)[None, :] * stride + arg % kernel
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        bi, ci = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
        np.add.at(gxp, (bi[..., None, None], ci[..., None, None], rows, cols), g)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")
