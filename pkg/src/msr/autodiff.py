"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable computation in the package goes through :func:`apply`,
which evaluates a registered primitive and, when any input requires a
gradient, appends a node to the active :class:`Tape`.  :func:`backward`
walks that tape in reverse.  The tape keeps two counters (forward ops and
backward passes) so training code can assert how much work a step did.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float64
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Input shapes are invalid for the requested op."""


class DomainError(ValueError):
    """Input values fall outside an op's numeric domain."""


class TapeError(RuntimeError):
    """Backward was requested for something the tape cannot differentiate."""


def set_default_dtype(dtype) -> None:
    """Set the float width used when tensors are built from Python data."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float width {dtype}")
    DEFAULT_DTYPE = dtype.type


_ids = itertools.count()


class Tensor:
    """An n-dimensional float array with an optional link into the tape.

    ``data`` is treated as immutable once the tensor exists; only ``grad``
    is written after construction (by :func:`backward`).
    """

    __slots__ = ("id", "data", "grad", "node", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.id = next(_ids)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return apply("add", [self, _lift(other, self)])

    def __radd__(self, other):
        return apply("add", [_lift(other, self), self])

    def __sub__(self, other):
        return apply("sub", [self, _lift(other, self)])

    def __rsub__(self, other):
        return apply("sub", [_lift(other, self), self])

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply("mul", [self, other])
        return apply("scalar_mul", [self], scalar=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return apply("scalar_mul", [self], scalar=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    @property
    def T(self):
        return apply("transpose", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    attrs: dict
    tape: "Tape"
    index: int
    generation: int


@dataclass
class Tape:
    """Append-only record of differentiable ops plus work counters."""

    nodes: list[Node] = field(default_factory=list)
    forward_ops: int = 0
    backward_passes: int = 0
    generation: int = 0

    def reset(self) -> None:
        self.nodes.clear()
        self.forward_ops = 0
        self.backward_passes = 0
        self.generation += 1

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


@contextlib.contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Record everything inside the block on a new, empty tape.

    The tape is cleared when the block exits, so results computed inside can
    no longer be differentiated afterwards.
    """
    tape = Tape()
    stack = _stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()
        tape.nodes.clear()
        tape.generation += 1


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]
    # backward accepts ``needs=`` (per-input requires_grad flags) to skip work
    masked: bool = False
    # forward accepts ``record=`` and may skip saving state when it is False
    hinted: bool = False


OPS: dict[str, OpDef] = {}


def _register(name: str):
    def deco(cls):
        OPS[name] = OpDef(cls.forward, cls.backward, getattr(cls, "masked", False),
                          getattr(cls, "hinted", False))
        return cls

    return deco


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``op_kind`` and record it on the active tape."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    inputs = tuple(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op_kind}: inputs must be Tensors, got {type(t).__name__}")
    needs = op_kind != "stop_gradient" and any(t.requires_grad for t in inputs)
    extra = {"record": needs} if op.hinted else {}
    out_data, saved = op.forward(*[t.data for t in inputs], **attrs, **extra)
    tape = current_tape()
    tape.forward_ops += 1
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = Node(op_kind, inputs, out, saved, attrs, tape, len(tape.nodes), tape.generation)
        tape.nodes.append(node)
        out.node = node
    return out


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from scalar ``root``.

    Sets ``.grad`` on every requires-grad tensor reachable from ``root``
    (overwriting previous values) and returns the map ``tensor id -> grad``.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    node = root.node
    if node is None or node.generation != node.tape.generation:
        raise TapeError("root was not produced on a live tape")
    tape = node.tape
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    touched: dict[int, Tensor] = {root.id: root}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = grads.get(n.output.id)
        if g is None:
            continue
        op = OPS[n.op]
        extra = {"needs": tuple(t.requires_grad for t in n.inputs)} if op.masked else {}
        in_grads = op.backward(g, n.saved, *[t.data for t in n.inputs], **n.attrs, **extra)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
                touched[t.id] = t
    for tid, t in touched.items():
        t.grad = grads[tid]
    tape.backward_passes += 1
    return grads


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_register("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _check_broadcast("sub", a, b)
        return a - b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("mul", a, b)
        return a * b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("scalar_mul")
class _ScalarMul:
    @staticmethod
    def forward(a, scalar):
        return a * a.dtype.type(scalar), None

    @staticmethod
    def backward(g, saved, a, scalar):
        return (g * g.dtype.type(scalar),)


@_register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]}) "
                f"for shapes {a.shape} @ {b.shape}"
            )
        return a @ b, None

    @staticmethod
    def backward(g, saved, a, b):
        return g @ b.T, a.T @ g


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(a, axes=None):
        if axes is None:
            if a.ndim != 2:
                raise ShapeError(f"transpose: expected 2-d operand, got {a.shape}")
            return a.T, None
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
        return np.ascontiguousarray(a.transpose(axes)), None

    @staticmethod
    def backward(g, saved, a, axes=None):
        if axes is None:
            return (g.T,)
        return (g.transpose(np.argsort(axes)),)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_layout(op: str, layout: str) -> None:
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"{op}: unknown layout {layout!r}")


_CONV_CHUNK_VALUES = 1 << 20


def _im2col_into(cols, xp, i0, n, Ho, Wo, kh, kw, stride):
    """Fill cols[:n] ([n, Ho, Wo, kh*kw*C]) from padded channels-last images xp[i0:i0+n]."""
    xc = xp[i0 : i0 + n]
    C = xc.shape[3]
    sb, sh, sw, sc = xc.strides
    run = kw * C
    for i in range(kh):
        # each kernel row is a contiguous run of kw*C values in channels-last memory
        rows = as_strided(xc[:, i:], shape=(n, Ho, Wo, run), strides=(sb, sh * stride, sw * stride, sc))
        cols[:n, ..., i * run : (i + 1) * run] = rows


@_register("conv2d")
class _Conv2d:
    """im2col convolution with kernel [O, C, kh, kw].

    ``layout`` selects the activation layout: "NCHW" ([B, C, H, W]) or
    "NHWC" ([B, H, W, C]); both run through a channels-last im2col that is
    processed in cache-sized batch chunks.  Backward rebuilds the columns
    from the saved padded input instead of keeping them.
    """

    masked = True

    @staticmethod
    def forward(x, w, stride=1, padding=0, layout="NCHW"):
        _check_layout("conv2d", layout)
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {w.shape}")
        xh = x.transpose(0, 2, 3, 1) if layout == "NCHW" else x
        B, H, W, C = xh.shape
        O, Cw, kh, kw = w.shape
        if C != Cw:
            raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Cw}")
        Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
        xp[:, padding : padding + H, padding : padding + W] = xh
        K = kh * kw * C
        wmat = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(K, O))
        chunk = max(1, min(B, _CONV_CHUNK_VALUES // (Ho * Wo * K)))
        cols = np.empty((chunk, Ho, Wo, K), dtype=x.dtype)
        out = np.empty((B, Ho, Wo, O), dtype=np.result_type(x, w))
        for b0 in range(0, B, chunk):
            n = min(chunk, B - b0)
            _im2col_into(cols, xp, b0, n, Ho, Wo, kh, kw, stride)
            np.matmul(cols[:n].reshape(-1, K), wmat, out=out[b0 : b0 + n].reshape(-1, O))
        if layout == "NCHW":
            out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        return out, (xp, wmat)

    @staticmethod
    def backward(g, saved, x, w, stride=1, padding=0, layout="NCHW", needs=(True, True)):
        xp, wmat = saved
        O, C, kh, kw = w.shape
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1)) if layout == "NCHW" else g
        B, Ho, Wo, _ = gh.shape
        H, W = xp.shape[1] - 2 * padding, xp.shape[2] - 2 * padding
        K = kh * kw * C
        chunk = max(1, min(B, _CONV_CHUNK_VALUES // (Ho * Wo * K)))
        cols = np.empty((chunk, Ho, Wo, K), dtype=xp.dtype)
        dwmat = np.zeros((K, O), dtype=g.dtype)
        dxp = np.zeros_like(xp, dtype=g.dtype) if needs[0] else None
        for b0 in range(0, B, chunk):
            n = min(chunk, B - b0)
            gc = gh[b0 : b0 + n].reshape(-1, O)
            _im2col_into(cols, xp, b0, n, Ho, Wo, kh, kw, stride)
            dwmat += cols[:n].reshape(-1, K).T @ gc
            if dxp is None:
                continue
            dcols = (gc @ wmat.T).reshape(n, Ho, Wo, K)
            dxc = dxp[b0 : b0 + n]
            for i in range(kh):
                for j in range(kw):
                    c0 = (i * kw + j) * C
                    dxc[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[..., c0 : c0 + C]
        dw = np.ascontiguousarray(dwmat.reshape(kh, kw, C, O).transpose(3, 2, 0, 1))
        if dxp is None:
            return None, dw
        dx = dxp[:, padding : padding + H, padding : padding + W]
        if layout == "NCHW":
            dx = dx.transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw


def _pool_slices(x, kernel, layout):
    """Strided views of every offset inside the pooling window."""
    Ho, Wo = (x.shape[2] // kernel, x.shape[3] // kernel) if layout == "NCHW" else (
        x.shape[1] // kernel, x.shape[2] // kernel)
    views = []
    for i in range(kernel):
        for j in range(kernel):
            if layout == "NCHW":
                views.append(x[:, :, i : i + kernel * Ho : kernel, j : j + kernel * Wo : kernel])
            else:
                views.append(x[:, i : i + kernel * Ho : kernel, j : j + kernel * Wo : kernel])
    return views, Ho, Wo


@_register("max_pool2d")
class _MaxPool2d:
    """Non-overlapping max pooling (stride == kernel); trailing rows/cols dropped.

    Ties route the gradient to the first offset in row-major window order.
    """

    hinted = True

    @staticmethod
    def forward(x, kernel=2, layout="NCHW", record=True):
        _check_layout("max_pool2d", layout)
        if x.ndim != 4:
            raise ShapeError(f"max_pool2d: expected 4-d input, got {x.shape}")
        views, Ho, Wo = _pool_slices(x, kernel, layout)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {x.shape}")
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        if not record:
            return out, None
        winner = np.full(out.shape, len(views) - 1, dtype=np.int8)
        for k in range(len(views) - 2, -1, -1):
            winner = np.where(views[k] == out, np.int8(k), winner)
        return out, winner

    @staticmethod
    def backward(g, saved, x, kernel=2, layout="NCHW"):
        winner = saved
        dx = np.zeros_like(x, dtype=g.dtype)
        dviews, _, _ = _pool_slices(dx, kernel, layout)
        for k, dv in enumerate(dviews):
            np.multiply(g, winner == k, out=dv)
        return (dx,)


@_register("global_avg_pool")
class _GlobalAvgPool:
    @staticmethod
    def forward(x, layout="NCHW"):
        _check_layout("global_avg_pool", layout)
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
        axes = (2, 3) if layout == "NCHW" else (1, 2)
        return x.mean(axis=axes), None

    @staticmethod
    def backward(g, saved, x, layout="NCHW"):
        if layout == "NCHW":
            H, W = x.shape[2], x.shape[3]
            gx = g[:, :, None, None]
        else:
            H, W = x.shape[1], x.shape[2]
            gx = g[:, None, None, :]
        return (np.broadcast_to(gx / (H * W), x.shape).copy(),)


@_register("relu")
class _Relu:
    @staticmethod
    def forward(x):
        y = np.maximum(x, 0)
        return y, y

    @staticmethod
    def backward(g, y, x):
        return (g * (y > 0),)


def _bn_axes(x: np.ndarray, channel_axis: int) -> tuple[int, ...]:
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    c = channel_axis % x.ndim
    return tuple(a for a in range(x.ndim) if a != c)


def _bn_view(v: np.ndarray, ndim: int, channel_axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[channel_axis % ndim] = -1
    return v.reshape(shape)


def _channel_sum(a: np.ndarray, channel_axis: int) -> np.ndarray:
    if channel_axis % a.ndim == a.ndim - 1:
        a2 = a.reshape(-1, a.shape[-1])
        return np.ones(a2.shape[0], dtype=a.dtype) @ a2
    return a.sum(axis=_bn_axes(a, channel_axis))


def _channel_dot(a: np.ndarray, b: np.ndarray, channel_axis: int) -> np.ndarray:
    """Per-channel sum of a*b without materializing the product when channels are last."""
    if channel_axis % a.ndim == a.ndim - 1:
        C = a.shape[-1]
        return np.einsum("ij,ij->j", a.reshape(-1, C), b.reshape(-1, C))
    return (a * b).sum(axis=_bn_axes(a, channel_axis))


@_register("batch_norm")
class _BatchNorm:
    """Batch normalization over every axis except ``channel_axis``.

    In training mode batch statistics are used and, when ``running_mean`` /
    ``running_var`` arrays are supplied, they are updated in place (unbiased
    variance, PyTorch-style momentum).  In eval mode the running statistics
    normalize the input.
    """

    @staticmethod
    def forward(x, gamma, beta, training=True, running_mean=None, running_var=None,
                momentum=0.1, eps=1e-5, channel_axis=1):
        _bn_axes(x, channel_axis)
        C = x.shape[channel_axis]
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ShapeError(
                f"batch_norm: scale/shift shapes {gamma.shape}/{beta.shape} do not match {C} channels"
            )
        view = lambda v: _bn_view(v, x.ndim, channel_axis)  # noqa: E731
        if training:
            n = x.size // C
            if n < 2:
                raise ShapeError(f"batch_norm: training mode needs more than one value per channel, got {x.shape}")
            mu = _channel_sum(x, channel_axis) / n
            centered = x - view(mu)
            var = _channel_dot(centered, centered, channel_axis) / n
            if running_mean is not None:
                m = running_mean.dtype.type(momentum)
                running_mean *= 1 - m
                running_mean += m * mu.astype(running_mean.dtype)
                running_var *= 1 - m
                running_var += m * (var * (n / (n - 1))).astype(running_var.dtype)
        else:
            if running_mean is None or running_var is None:
                raise ValueError("batch_norm: eval mode needs running statistics")
            mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
            centered = x - view(mu)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        out = centered * view(gamma * inv_std)
        out += view(beta)
        return out, (centered, inv_std)

    @staticmethod
    def backward(g, saved, x, gamma, beta, training=True, running_mean=None, running_var=None,
                 momentum=0.1, eps=1e-5, channel_axis=1):
        centered, inv_std = saved
        view = lambda v: _bn_view(v, x.ndim, channel_axis)  # noqa: E731
        dgamma = _channel_dot(g, centered, channel_axis) * inv_std
        dbeta = _channel_sum(g, channel_axis)
        scale = gamma * inv_std
        if training:
            n = x.size // x.shape[channel_axis]
            dx = centered * view(-scale * inv_std * dgamma / n)
            dx += view(-scale * dbeta / n)
            dx += g * view(scale)
        else:
            dx = g * view(scale)
        return dx, dgamma, dbeta


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, saved, x, axis=None, keepdims=False):
        if not keepdims:
            g = np.expand_dims(g, _norm_axis(axis, x.ndim))
        return (np.broadcast_to(g, x.shape).copy(),)


@_register("mean")
class _Mean:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, saved, x, axis=None, keepdims=False):
        axes = _norm_axis(axis, x.ndim)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)


@_register("l2_normalize")
class _L2Normalize:
    @staticmethod
    def forward(x, axis=-1):
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        if np.any(norm <= NORM_FLOOR):
            raise DomainError(f"l2_normalize: vector with norm <= {NORM_FLOOR:g} along axis {axis}")
        y = x / norm
        return y, (y, norm)

    @staticmethod
    def backward(g, saved, x, axis=-1):
        y, norm = saved
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)


@_register("dot")
class _Dot:
    """Inner product over the last axis, broadcasting leading axes."""

    @staticmethod
    def forward(a, b):
        if a.shape[-1:] != b.shape[-1:]:
            raise ShapeError(f"dot: last dimensions differ for shapes {a.shape} and {b.shape}")
        _check_broadcast("dot", a, b)
        return (a * b).sum(axis=-1), None

    @staticmethod
    def backward(g, saved, a, b):
        g = g[..., None]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("log")
class _Log:
    @staticmethod
    def forward(x):
        if np.any(x <= 0):
            raise DomainError("log: input contains non-positive values")
        return np.log(x), None

    @staticmethod
    def backward(g, saved, x):
        return (g / x,)


@_register("exp")
class _Exp:
    @staticmethod
    def forward(x):
        y = np.exp(x)
        return y, y

    @staticmethod
    def backward(g, y, x):
        return (g * y,)


@_register("logsumexp")
class _LogSumExp:
    @staticmethod
    def forward(x, axis=-1, keepdims=False):
        if x.shape[axis] == 0:
            raise ShapeError("logsumexp: reduction over an empty axis")
        m = x.max(axis=axis, keepdims=True)
        lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
        soft = np.exp(x - lse)
        out = lse if keepdims else np.squeeze(lse, axis=axis)
        return out, soft

    @staticmethod
    def backward(g, soft, x, axis=-1, keepdims=False):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)


@_register("stop_gradient")
class _StopGradient:
    @staticmethod
    def forward(x):
        return x, None

    @staticmethod
    def backward(g, saved, x):
        return (None,)


@_register("concat")
class _Concat:
    @staticmethod
    def forward(*xs, axis=0):
        if not xs:
            raise ShapeError("concat: no inputs")
        ref = list(xs[0].shape)
        for x in xs[1:]:
            other = list(x.shape)
            if len(other) != len(ref) or any(
                i != axis % len(ref) and a != b for i, (a, b) in enumerate(zip(ref, other))
            ):
                raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {axis}")
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]

    @staticmethod
    def backward(g, sizes, *xs, axis=0):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(x, shape):
        target = tuple(shape)
        known = [s for s in target if s != -1]
        if target.count(-1) > 1 or (
            -1 not in target and int(np.prod(target)) != x.size
        ) or (-1 in target and (not known or x.size % int(np.prod(known)))):
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {target}")
        return x.reshape(target), None

    @staticmethod
    def backward(g, saved, x, shape):
        return (g.reshape(x.shape),)


# ---------------------------------------------------------------------------
# Functional front end
# ---------------------------------------------------------------------------


def add(a, b): return apply("add", [a, b])
def sub(a, b): return apply("sub", [a, b])
def mul(a, b): return apply("mul", [a, b])
def scalar_mul(a, c): return apply("scalar_mul", [a], scalar=c)
def matmul(a, b): return apply("matmul", [a, b])
def transpose(a, axes=None): return apply("transpose", [a], axes=axes)
def relu(x): return apply("relu", [x])
def log(x): return apply("log", [x])
def exp(x): return apply("exp", [x])
def stop_gradient(x): return apply("stop_gradient", [x])
def dot(a, b): return apply("dot", [a, b])


def global_avg_pool(x, layout="NCHW"):
    return apply("global_avg_pool", [x], layout=layout)


def conv2d(x, w, stride=1, padding=0, layout="NCHW"):
    return apply("conv2d", [x, w], stride=stride, padding=padding, layout=layout)


def max_pool2d(x, kernel=2, layout="NCHW"):
    return apply("max_pool2d", [x], kernel=kernel, layout=layout)


def batch_norm(x, gamma, beta, training=True, running_mean=None, running_var=None,
               momentum=0.1, eps=1e-5, channel_axis=1):
    return apply("batch_norm", [x, gamma, beta], training=training, running_mean=running_mean,
                 running_var=running_var, momentum=momentum, eps=eps, channel_axis=channel_axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return apply("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", [x], axis=axis, keepdims=keepdims)


def l2_normalize(x, axis=-1):
    return apply("l2_normalize", [x], axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    return apply("logsumexp", [x], axis=axis, keepdims=keepdims)


def concat(xs, axis=0):
    return apply("concat", list(xs), axis=axis)


def reshape(x, shape):
    return apply("reshape", [x], shape=tuple(shape))


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(scalar_fn: Callable[[Tensor], Tensor], point, fd_step: float = 1e-5,
               reference: Callable[[Tensor], Tensor] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``scalar_fn`` maps a Tensor shaped like ``point`` to a scalar Tensor.
    Differences are taken on ``reference`` when given: a stop-gradient-free
    function whose true derivative the analytic gradient should equal.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with fresh_tape():
        x = Tensor(base.copy(), requires_grad=True)
        y = scalar_fn(x)
        if y.size != 1:
            raise TapeError(f"grad_check needs a scalar function, got shape {y.shape}")
        if y.node is None:
            analytic = np.zeros_like(base)
        else:
            backward(y)
            analytic = np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    if not np.all(np.isfinite(analytic)):
        raise DomainError("grad_check: non-finite analytic gradient")

    fd_fn = scalar_fn if reference is None else reference

    def value(arr: np.ndarray) -> float:
        with fresh_tape():
            return float(fd_fn(Tensor(arr)).data.reshape(-1)[0])

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += fd_step
        hi = value(probe.reshape(base.shape))
        probe[i] -= 2 * fd_step
        lo = value(probe.reshape(base.shape))
        num_flat[i] = (hi - lo) / (2 * fd_step)
    if not np.all(np.isfinite(numeric)):
        raise DomainError("grad_check: non-finite function value")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
