"""Float64 arrays with a define-by-run reverse-mode differentiation tape.

Every primitive returns a new :class:`Tensor`. When any input is tracked
(``requires_grad=True``) the result remembers its parents and a closure that
maps the output gradient to input gradients. :func:`backward` linearises the
graph into a :class:`Tape` and walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = next(_node_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


@contextlib.contextmanager
def no_grad():
    """Forward-only region: results are never tracked."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out.node_id = next(_node_ids) if tracked else None
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward_fn if tracked else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _result(
        a.data - b.data, "subtract", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _result(
        a.data * b.data, "multiply", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    out = a.data / b.data
    return _result(
        out, "divide", (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _result(a.data * k, "scale", (a,), lambda g: (g * k,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    return _result(
        np.where(pos, a.data, slope * a.data), "leaky_relu", (a,),
        lambda g: (np.where(pos, g, slope * g),),
    )


def _stable_sigmoid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # e = exp(-|x|) never overflows; returns (sigma, sigma * (1 - sigma))
    e = np.exp(-np.abs(x))
    denom = 1.0 + e
    s = np.where(x >= 0, 1.0 / denom, e / denom)
    return s, e / (denom * denom)


def sigmoid(a: Tensor) -> Tensor:
    s, ds = _stable_sigmoid(a.data)
    return _result(s, "sigmoid", (a,), lambda g: (g * ds,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# shape ops


def take(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[:2]`` to slice a batch."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(out, dtype=np.float64), "take", (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate ``N x C_i x H x W`` tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise _shape_error("channel_concat", ref, t.shape)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _result(out, "channel_concat", tensors, lambda g: tuple(np.split(g, splits, axis=1)))


def max_pool2d(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    if a.data.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise _shape_error("max_pool2d", a.shape, ("N", "C", "2h", "2w"))
    n, c, h, w = a.shape
    win = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return _result(out, "max_pool2d", (a,), backward)


def nearest_upsample2x(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise _shape_error("nearest_upsample2x", a.shape, ("N", "C", "H", "W"))
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    return _result(
        out, "nearest_upsample2x", (a,),
        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C*kh*kw, ho*wo); channel-major keeps the copy cheap
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of ``N x C x H x W`` input with ``O x C x kh x kw`` kernel.

    ``padding`` defaults to ``(k - 1) // 2`` zeros per side, which preserves the
    spatial size at stride 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    o, c, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    ph = (kh - 1) // 2 if padding is None else padding
    pw = (kw - 1) // 2 if padding is None else padding
    n, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(n, o, ho, wo)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of the (dilated) output gradient with the flipped kernel
            if stride > 1:
                gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * kh * kw)
            gcols, gh, gw = _im2col(gd, kh, kw, 1)
            gxp = (flipped @ gcols).reshape(n, c, gh, gw)
            if gh < hp or gw < wp:
                gxp = np.pad(gxp, ((0, 0), (0, 0), (0, hp - gh), (0, wp - gw)))
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gk

    return _result(out, "conv2d", (x, kernel), backward)


# ---------------------------------------------------------------------------
# tape + backward


@dataclass
class TapeEntry:
    op: str
    node_id: int
    input_ids: tuple[int | None, ...]


@dataclass
class Tape:
    """Topologically ordered record of the primitives leading to one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
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
        return cls(order)

    @property
    def entries(self) -> list[TapeEntry]:
        return [TapeEntry(t.op, t.node_id, tuple(p.node_id for p in t._parents)) for t in self.nodes]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.op == "leaf"]


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    If ``inputs`` is given, their gradients are returned in order; a tracked
    input that ``loss`` does not depend on gets zeros, an untracked one ``None``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("backward: loss is not finite")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        tape = Tape.record(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node)) if node._backward is not None else grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if inputs is None:
        return None
    result = []
    for t in inputs:
        if not t.requires_grad:
            result.append(None)
        else:
            result.append(t.grad if t.grad is not None else np.zeros_like(t.data))
    return result


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Largest ``|analytic - central| / max(1, |analytic|, |central|)`` over all input elements."""
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = backward(fn(*leaves), leaves)

    def evaluate(values):
        return fn(*[Tensor(v) for v in values]).item()

    worst = 0.0
    for which, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate(arrays)
            flat[i] = orig - step
            down = evaluate(arrays)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[which].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
