"""
A small dense tensor with reverse-mode automatic differentiation.

Only the operations the refinement networks need are provided: 2-D
convolution, nearest-neighbour upsampling, a handful of elementwise ops,
masked reductions and a few shape helpers. Every op records its parents and a
closure that pushes the output gradient back to them; ``backward`` walks the
graph in reverse topological order exactly once per node.

Broadcasting follows numpy rules but is only relied on for trailing-dim cases
such as adding a (C, 1, 1) bias to an (N, C, H, W) activation.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ContractError, DomainError, EmptyReductionError, ShapeError

SOFTPLUS_LINEAR_ABOVE = 30.0


class Tensor:
    """A node in the computation graph holding an ndarray value."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[], None] = _noop
        self.op = "leaf"

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A constant copy that blocks gradient flow."""
        out = Tensor(self.data, dtype=self.data.dtype)
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(as_tensor(other, self.dtype)))

    def backward(self) -> dict:
        return backward(self)


def _noop() -> None:
    return None


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    grad = _unbroadcast(grad, node.shape).astype(node.dtype, copy=False)
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# one flag per thread
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = _result(a.data + b.data, (a, b), "add")

    def _backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = _result(a.data * b.data, (a, b), "mul")

    def _backward():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out._backward = _backward
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = _result(a.data * factor, (a,), "scale")

    def _backward():
        _accumulate(a, out.grad * factor)

    out._backward = _backward
    return out


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    out = _result(value, (a,), "exp")

    def _backward():
        _accumulate(a, out.grad * value)

    out._backward = _backward
    return out


def expm1(a: Tensor) -> Tensor:
    out = _result(np.expm1(a.data), (a,), "expm1")

    def _backward():
        _accumulate(a, out.grad * np.exp(a.data))

    out._backward = _backward
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    out = _result(np.log(a.data), (a,), "log")

    def _backward():
        _accumulate(a, out.grad / a.data)

    out._backward = _backward
    return out


def log1p(a: Tensor) -> Tensor:
    if np.any(a.data <= -1):
        raise DomainError("log1p of a value at or below -1")
    out = _result(np.log1p(a.data), (a,), "log1p")

    def _backward():
        _accumulate(a, out.grad / (1.0 + a.data))

    out._backward = _backward
    return out


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise DomainError("reciprocal of zero")
    value = 1.0 / a.data
    out = _result(value, (a,), "reciprocal")

    def _backward():
        _accumulate(a, -out.grad * value * value)

    out._backward = _backward
    return out


def square(a: Tensor) -> Tensor:
    out = _result(a.data * a.data, (a,), "square")

    def _backward():
        _accumulate(a, 2.0 * out.grad * a.data)

    out._backward = _backward
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), linear above x = 30."""
    x = a.data
    linear = x > SOFTPLUS_LINEAR_ABOVE
    safe = np.where(linear, 0.0, x)
    value = np.where(linear, x, np.log1p(np.exp(safe)))
    out = _result(value.astype(x.dtype), (a,), "softplus")

    def _backward():
        sig = np.where(linear, 1.0, 1.0 / (1.0 + np.exp(-safe)))
        _accumulate(a, out.grad * sig)

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    positive = a.data > 0
    out = _result(np.where(positive, a.data, 0.0).astype(a.dtype), (a,), "relu")

    def _backward():
        _accumulate(a, out.grad * positive)

    out._backward = _backward
    return out


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip into [low, high]; no gradient flows from clipped entries."""
    inside = (a.data >= low) & (a.data <= high)
    out = _result(np.clip(a.data, low, high), (a,), "clamp")

    def _backward():
        _accumulate(a, out.grad * inside)

    out._backward = _backward
    return out


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    out = _result(a.data * keep, (a,), "dropout")

    def _backward():
        _accumulate(a, out.grad * keep)

    out._backward = _backward
    return out


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "exp": exp,
    "expm1": expm1,
    "log": log,
    "log1p": log1p,
    "softplus": softplus,
    "relu": relu,
    "square": square,
    "scale": scale,
}


def elementwise(op_kind: str, *operands) -> Tensor:
    """Dispatch an elementwise op by name (add, mul, exp, log1p, softplus, relu, scale, ...)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), (a,), "sum")

    def _backward():
        _accumulate(a, np.broadcast_to(out.grad, a.shape))

    out._backward = _backward
    return out


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise EmptyReductionError("mean of an empty tensor")
    return scale(sum_all(a), 1.0 / a.size)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = _result(a.data.sum(axis=axis), (a,), "sum_axis")

    def _backward():
        _accumulate(a, np.broadcast_to(np.expand_dims(out.grad, axis), a.shape))

    out._backward = _backward
    return out


def masked_reduce(values: Tensor, mask, kind: str = "sum") -> Tensor:
    """
    Sum or mean over the entries where ``mask`` is true.

    Raises:
        ShapeError: mask and values differ in shape
        EmptyReductionError: kind='mean' with an all-false mask
    """
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if mask.shape != values.shape:
        raise ShapeError(f"mask shape {mask.shape} differs from values {values.shape}")
    count = int(mask.sum())
    if kind == "mean" and count == 0:
        raise EmptyReductionError("mean over an empty mask")
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {kind!r}")

    factor = 1.0 / count if kind == "mean" else 1.0
    out = _result(np.asarray(np.where(mask, values.data, 0.0).sum() * factor, dtype=values.dtype), (values,), "masked_" + kind)

    def _backward():
        _accumulate(values, np.where(mask, out.grad * factor, 0.0))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """
    Same-padded 2-D cross-correlation.

    Args:
        x: Input of shape (N, C, H, W)
        w: Kernel of shape (O, C, k, k) with odd k
        b: Optional bias of shape (O,)
        stride: 1 or 2; stride 2 gives ceil(H/2) x ceil(W/2) outputs

    Returns:
        Tensor: Output of shape (N, O, H', W')
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d needs odd kernel sizes, got {kh}x{kw}")

    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    value = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True)
    parents = (x, w)
    if b is not None:
        value = value + b.data[None, :, None, None]
        parents = (x, w, b)
    out = _result(value.astype(x.dtype, copy=False), parents, "conv2d")

    def _backward():
        g = out.grad
        if w.requires_grad:
            _accumulate(w, np.einsum("nohw,nchwij->ocij", g, windows, optimize=True))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.einsum(
                        "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True
                    )
            _accumulate(x, gpad[:, :, ph:ph + h, pw:pw + wd])

    out._backward = _backward
    return out


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every cell into a factor x factor block."""
    if factor < 1:
        raise ContractError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    value = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = _result(value, (x,), "upsample")

    def _backward():
        n, c, h, w = x.shape
        g = out.grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        _accumulate(x, g)

    out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.data for t in tensors], axis=axis)
    out = _result(value, tensors, "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, out.grad[tuple(index)])

    out._backward = _backward
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = _result(x.data[:, start:stop], (x,), "slice")

    def _backward():
        g = np.zeros_like(x.data)
        g[:, start:stop] = out.grad
        _accumulate(x, g)

    out._backward = _backward
    return out


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the bottom and right edges of an (N, C, H, W) tensor."""
    if bottom == 0 and right == 0:
        return x
    out = _result(np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right))), (x,), "pad")
    h, w = x.shape[2], x.shape[3]

    def _backward():
        _accumulate(x, out.grad[:, :, :h, :w])

    out._backward = _backward
    return out


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    if x.shape[2] == height and x.shape[3] == width:
        return x
    out = _result(x.data[:, :, :height, :width], (x,), "crop")

    def _backward():
        g = np.zeros_like(x.data)
        g[:, :, :height, :width] = out.grad
        _accumulate(x, g)

    out._backward = _backward
    return out


def take_cells(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """
    Gather values of an (N, 1, H, W) map (batch item 0) at cell indices.

    Repeated cells are allowed; their gradients add up.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = _result(x.data[0, 0, rows, cols], (x,), "take")

    def _backward():
        g = np.zeros_like(x.data)
        np.add.at(g[0, 0], (rows, cols), out.grad)
        _accumulate(x, g)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# backward and gradient checking


def _topological(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict:
    """
    Back-propagate from a scalar loss.

    Returns:
        dict: Leaf tensors that require grad mapped to their gradients

    Raises:
        ContractError: ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._parents and node.grad is not None:
            node._backward()
    return {node: node.grad for node in order if not node._parents and node.requires_grad and node.grad is not None}


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_coords: int = 64,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """
    Compare analytic gradients with central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar. For each parameter up to ``n_coords`` random coordinates are
    checked. A coordinate is skipped when the perturbation moves some ReLU or
    clamp input across its kink (including an input sitting exactly on it).

    Returns:
        float: The largest relative error |a - n| / max(|a|, |n|, floor)
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    base_pattern = _kink_pattern(loss)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        count = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for k in coords:
            original = flat[k]
            flat[k] = original + eps
            plus_loss = f()
            plus = plus_loss.item()
            flat[k] = original - eps
            minus_loss = f()
            minus = minus_loss.item()
            flat[k] = original
            if not (_same_pattern(base_pattern, _kink_pattern(plus_loss))
                    and _same_pattern(base_pattern, _kink_pattern(minus_loss))):
                continue
            numeric = (plus - minus) / (2 * eps)
            a = grad.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def _kink_pattern(loss: Tensor) -> list:
    """Side-of-kink masks of every ReLU and clamp input, in graph order."""
    pattern = []
    for node in _topological(loss):
        if node.op == "relu":
            pattern.append(node._parents[0].data > 0)
        elif node.op == "clamp":
            src = node._parents[0].data
            pattern.append(np.sign(src - node.data))
    return pattern


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
