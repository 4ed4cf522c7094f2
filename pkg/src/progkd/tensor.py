"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` when
at least one operand requires a gradient. Outside a tape nothing is
recorded, which is how frozen-teacher forwards and evaluation run.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """Row-major real array of rank <= 4.

    Args:
        data: Array-like payload. Floating inputs keep their precision;
            anything else is cast to float32.
        requires_grad: Whether backward should populate ``grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)


class Parameter(Tensor):
    """Trainable leaf tensor.

    A frozen parameter never requires a gradient, so backward leaves its
    ``grad`` untouched and optimizers skip it.
    """

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data,
                         requires_grad=not frozen)
        self.name = name

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.requires_grad = not value
        if value:
            self.grad = None

    @property
    def value(self) -> Tensor:
        return self


class Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[GradTape] = []


@contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Lift both operands; a bare Python number takes the other operand's dtype."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    return as_tensor(a), as_tensor(b)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and tape it if any input needs a gradient.

    ``backward(g)`` returns one gradient array (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and bool(_TAPES))
    if out.requires_grad:
        _TAPES[-1].nodes.append(Node(out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


def backward(loss: Tensor, tape: GradTape) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad.

    Leaves are tensors not produced by a node on ``tape``; parameters and
    user-created tensors with ``requires_grad`` both qualify.

    Raises:
        ValueError: If ``loss`` is not a single finite element.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ValueError("backward called on a non-finite loss")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
            key = id(inp)
            if key in produced:
                grads[key] = gi if key not in grads else grads[key] + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(x: Tensor, exponent: float) -> Tensor:
    return _record(x.data ** exponent, (x,),
                   lambda g: (g * exponent * x.data ** (exponent - 1),))


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x: Tensor) -> Tensor:
    return _record(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z)).astype(z.dtype, copy=False)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """Elementwise ``max(x, slope * x)``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.data.dtype)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    return _record(np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits; ``target`` is constant."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.data.dtype)
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _record(out, (logits,), lambda g: (g * (_sigmoid(z) - t),))


# ----------------------------------------------------------------------------
# reductions and reshaping


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice channels ``start:stop`` of an NCHW tensor."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop], (x,), bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index."""

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N,H,W differ between {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _record(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


# ----------------------------------------------------------------------------
# spatial


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Patch matrix of shape ``(C*K*K, N*Ho*Wo)``.

    Output positions are the fast axis, so the gather copies mostly
    contiguous runs.
    """
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, shape=(c, k, k, n, ho, wo), strides=(s1, s2, s3, s0, s2 * stride, s3 * stride))
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with an OIKK kernel.

    Output spatial size is ``floor((H + 2*pad - K) / stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, k, k2 = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = _im2col(np.ascontiguousarray(xp), k, stride)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            # accumulate in (C, N, H, W) so every slice add is layout-aligned
            gxp = np.zeros((c, n, hp, wp), dtype=x.data.dtype)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    return _record(out, inputs, bw)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))

    def bw(g):
        mask = blocks == out[:, :, :, None, :, None]
        # first maximum only, so ties do not double-count
        flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        first = np.zeros_like(flat)
        idx = flat.argmax(axis=-1)
        np.put_along_axis(first, idx[..., None], True, axis=-1)
        first = first.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return ((first * g[:, :, :, None, :, None]).reshape(x.shape),)

    return _record(out, (x,), bw)


def upsample2_nearest(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _record(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))
