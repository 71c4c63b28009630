"""Dense tensors with reverse-mode automatic differentiation.

Every tensor produced by a differentiable operation remembers its parents and
a closure that maps the output gradient to parent gradients. ``backward``
walks the resulting DAG in reverse topological order. Node creation order is
monotonic (``Tensor._id``), which gives a deterministic traversal.

Images and feature maps use the NCHW layout; convolution kernels are
``[Cout, Cin, kH, kW]`` and transposed-convolution kernels ``[Cin, Cout, 2, 2]``.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "get_dtype",
    "set_precision",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "transpose_conv2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "pointwise_activation",
    "softmax_channels",
    "concat_channels",
    "mul_elementwise",
    "log",
    "backward",
]


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_PRECISIONS = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32, "grad": True}
_counter = itertools.count()


def get_dtype() -> type:
    return _state["dtype"]


def set_precision(mode: str) -> None:
    """Select ``"single"`` (training default) or ``"double"`` (gradient checks)."""
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; operations return constant tensors."""
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __array_ufunc__ = None  # make ``ndarray * Tensor`` dispatch to Tensor.__rmul__

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or get_dtype(), copy=True)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._id = next(_counter)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_counter)
        out.op = op
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        backward(self, seed)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise algebra ------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return Tensor._result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._result(data, (a, b), grad_fn, "div")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    if data.ndim == 0:
        data = data.reshape(())
    return Tensor._result(data, (a,), grad_fn, "sum")


def take(a: Tensor, index) -> Tensor:
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.data.dtype)
    shape, dtype = a.shape, a.data.dtype

    def grad_fn(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._result(data.copy(), (a,), grad_fn, "take")


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; ``b`` may be an ``[N,1,H,W]`` map broadcast over channels."""
    if a.shape != b.shape:
        gate_like = (
            a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1
            and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3])
        )
        if not gate_like:
            raise ShapeError(f"mul_elementwise: shapes {a.shape} and {b.shape} are not broadcastable")
    return mul(a, b)


# -- activations ----------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    info = np.finfo(xd.dtype)
    # keep the output strictly inside (0, 1) even where it saturates
    s = np.clip(s, info.tiny, 1.0 - info.epsneg)
    return Tensor._result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def softmax_channels(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels expects [N,C>=2,H,W], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._result(p, (x,), grad_fn, "softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    return Tensor._result(
        np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat"
    )


# -- convolution family -----------------------------------------------------
def _pad_amount(padding: str, kh: int, kw: int) -> tuple[int, int, int, int]:
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding requires odd kernel sizes, got {kh}x{kw}")
        return kh // 2, kh // 2, kw // 2, kw // 2
    raise ContractError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same", stride: int = 1) -> Tensor:
    """Cross-correlation of ``x [N,Cin,H,W]`` with ``kernel [Cout,Cin,kH,kW]``.

    ``stride`` defaults to 1; the stride-2 form exists so the transposed
    convolution can be checked as its adjoint.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    top, bottom, left, right = _pad_amount(padding, kh, kw)
    xp = x.data
    if top or bottom or left or right:
        xp = np.pad(xp, ((0, 0), (0, 0), (top, bottom), (left, right)))
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {kernel.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    kd = kernel.data

    if kh == 1 and kw == 1 and stride == 1:
        cols = None
        out = (kd[:, :, 0, 0] @ xp.reshape(n, cin, h * w)).reshape(n, cout, h, w)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # [N, Ho, Wo, Cin, kH, kW]; one GEMM per sample keeps results independent of N
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
        out = cols.reshape(n, ho * wo, cin * kh * kw) @ kd.reshape(cout, -1).T
        out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        if cols is None:
            gk = np.tensordot(g, xp, axes=([0, 2, 3], [0, 2, 3])).reshape(cout, cin, 1, 1)
            gxp = np.tensordot(kd[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gk = (g2.T @ cols.reshape(n * ho * wo, -1)).reshape(cout, cin, kh, kw)
            gcols = (g2 @ kd.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
        gx = gxp[:, :, top:hp - bottom, left:wp - right]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out, parents, grad_fn, "conv2d")


def transpose_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 / stride-2 transposed convolution; ``kernel`` is ``[Cin, Cout, 2, 2]``."""
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2:] != (2, 2) or x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"transpose_conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, cin, h, w = x.shape
    cout = kernel.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"transpose_conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    kd = kernel.data
    xd = x.data
    # [N,H,W,Cin] @ [Cin, Cout*4] -> [N,H,W,Cout,2,2]
    xm = np.ascontiguousarray(xd.transpose(0, 2, 3, 1)).reshape(n * h * w, cin)
    y = (xm.reshape(n, h * w, cin) @ kd.reshape(cin, cout * 4)).reshape(n, h, w, cout, 2, 2)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        gm = np.ascontiguousarray(g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)).reshape(n * h * w, cout * 4)
        gx = (gm @ kd.reshape(cin, cout * 4).T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        gk = (xm.T @ gm).reshape(cin, cout, 2, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out, parents, grad_fn, "transpose_conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Gradient goes to the first maximal element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d requires even H and W, got {x.shape}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        routed = (np.arange(4) == arg[..., None]) * g[..., None]
        gx = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx.astype(g.dtype, copy=False),)

    return Tensor._result(np.ascontiguousarray(out), (x,), grad_fn, "maxpool2d")


# -- backpropagation ----------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent._id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | float | None = None) -> None:
    """Accumulate ``d loss / d node`` into ``node.grad`` for every reachable node.

    Without an explicit ``seed`` the loss must be a scalar. Gradients are
    accumulated, so callers zero them between steps.
    """
    if seed is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed_arr = np.ones_like(loss.data)
    else:
        seed_arr = np.broadcast_to(np.asarray(seed, dtype=loss.data.dtype), loss.shape).copy()
    if not loss.requires_grad:
        return
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {loss._id: seed_arr}
    for node in reversed(order):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = np.asarray(pg, dtype=parent.data.dtype)
