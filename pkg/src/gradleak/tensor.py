"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive below computes its forward value with numpy and, when any
input requires a gradient, records a node on the active :class:`Tape`.
:meth:`Tape.backward` walks the recorded nodes once, newest first, and
accumulates gradients into the leaves.

Only first-order derivatives are supported. Quantities such as parameter
gradients that must themselves be differentiated are written out as forward
compositions of these primitives (see :mod:`gradleak.models.vit`).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "NumericError",
    "TapeError",
    "Tensor",
    "Tape",
    "astensor",
    "backward",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "swapaxes",
    "reshape",
    "getitem",
    "concat",
    "sum",
    "mean",
    "variance",
    "sqrt",
    "exp",
    "log",
    "tanh",
    "softmax",
    "log_softmax",
    "gelu",
    "relu",
    "layer_norm",
    "conv2d",
    "batch_stats",
    "max",
    "argsort",
    "l2_norm",
]

LAYER_NORM_EPS = 1e-6
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


class TapeError(RuntimeError):
    """Misuse of a tape (double backward, recording on a frozen tape)."""


class _Node:
    __slots__ = ("op", "inputs", "out", "backward", "tape", "index")

    def __init__(self, op, inputs, out, backward, tape, index):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.tape = tape
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape for the current
    thread. Outside any ``with Tape()`` block a per-thread implicit tape is
    used; it is replaced automatically once it has been consumed by
    :func:`backward`.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.frozen = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, op, inputs, out, rule) -> _Node:
        if self.frozen:
            raise TapeError(f"cannot record '{op}': tape is frozen, call reset() first")
        node = _Node(op, inputs, out, rule, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def reset(self) -> None:
        """Drop every recorded node and unfreeze."""
        self.nodes = []
        self.frozen = False

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if self.frozen:
            raise TapeError("tape already consumed by backward (double backward is unsupported)")
        node = root._node
        if node is None and not root.requires_grad:
            # a constant root: every leaf gradient is zero, nothing to accumulate
            self.frozen = True
            return
        if node is None or node.tape is not self:
            raise ContractError("root was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for n in reversed(self.nodes[: node.index + 1]):
            g = grads.pop(id(n.out), None)
            if g is None:
                continue
            for t, gi in zip(n.inputs, n.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad = Tensor(gi.copy()) if t.grad is None else Tensor(t.grad.data + gi)
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.frozen = True


_local = threading.local()


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _active_tape() -> Tape:
    s = _stack()
    if s:
        return s[-1]
    tape = getattr(_local, "implicit", None)
    if tape is None or tape.frozen:
        tape = _local.implicit = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A float64 ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ContractError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``root`` depends on."""
    if root._node is None:
        raise ContractError("root is not the output of a recorded operation")
    root._node.tape.backward(root)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output in '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _active_tape().record(op, tuple(inputs), out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_shapes("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def rule(g):
        gb = -g * out / bd
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("div", out, (a, b), rule)


def neg(a) -> Tensor:
    a = astensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = astensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad**p
    return _make("power", out, (a,), lambda g: (g * p * ad ** (p - 1),))


def sqrt(a) -> Tensor:
    a = astensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = astensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = astensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make("log", out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = astensor(a)
    on = a.data > 0
    return _make("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def gelu(a) -> Tensor:
    """GELU, tanh approximation, with its exact derivative."""
    a = astensor(a)
    u = a.data
    th = np.tanh(GELU_C * (u + GELU_K * u**3))
    out = 0.5 * u * (1.0 + th)

    def rule(g):
        d = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
        return (g * d,)

    return _make("gelu", out, (a,), rule)


# -------------------------------------------------------------------- shapes


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ContractError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", out, (a, b), rule)


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = astensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    """Slice or gather. Integer-array indices may repeat; gradients add up."""
    a = astensor(a)
    try:
        out = a.data[idx]
    except IndexError as e:
        raise ContractError(f"slice: {e}") from None
    if out.size == 0:
        raise ContractError(f"slice: index {idx!r} selects nothing from shape {a.shape}")
    src = a.shape
    basic = _is_basic_index(idx)

    def rule(g):
        z = np.zeros(src)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make("slice", np.array(out, dtype=np.float64), (a,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ContractError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand(g, axes, keepdims, shape):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make("sum", np.asarray(out), (a,), lambda g: (_expand(g, axes, keepdims, src).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    src = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make("mean", np.asarray(out), (a,), lambda g: (_expand(g, axes, keepdims, src) / n,))


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (population) variance over ``axis``."""
    a = astensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)
    src = a.shape
    return _make(
        "variance",
        np.asarray(out),
        (a,),
        lambda g: (_expand(g, axes, keepdims, src) * (2.0 / n) * centered,),
    )


def max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first maximal entry."""
    a = astensor(a)
    ad = a.data
    if axis is None:
        flat = int(np.argmax(ad))
        out = np.asarray(ad.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * ad.ndim)

        def rule(g):
            z = np.zeros(ad.size)
            z[flat] = g.reshape(())
            return (z.reshape(ad.shape),)

        return _make("max", out, (a,), rule)
    if not isinstance(axis, int):
        raise ContractError("max: axis must be None or a single int")
    ax = axis % ad.ndim
    idx = np.expand_dims(np.argmax(ad, axis=ax), ax)
    out = np.take_along_axis(ad, idx, axis=ax)

    def rule(g):
        z = np.zeros_like(ad)
        gg = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(z, idx, gg, axis=ax)
        return (z,)

    return _make("max", out if keepdims else np.squeeze(out, ax), (a,), rule)


def argsort(a, axis: int = -1) -> np.ndarray:
    """Stable ascending sort order. Not differentiable; returns plain ints."""
    return np.argsort(astensor(a).data, axis=axis, kind="stable")


def l2_norm(a) -> Tensor:
    """Frobenius norm of the whole tensor. The gradient at zero is taken as zero."""
    a = astensor(a)
    ad = a.data
    n = float(np.sqrt(np.sum(ad * ad)))

    def rule(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / n,)

    return _make("l2_norm", np.asarray(n), (a,), rule)


# ------------------------------------------------------------ normalizations


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make("log_softmax", out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, weight=None, bias=None, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over ``axis`` and apply an optional affine map."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    a = astensor(a)
    ad = a.data
    mu = ad.mean(axis=axis, keepdims=True)
    xc = ad - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    inputs = [a]
    out = xhat
    w = b = None
    if weight is not None:
        w = astensor(weight)
        inputs.append(w)
        out = out * w.data
    if bias is not None:
        b = astensor(bias)
        inputs.append(b)
        out = out + b.data

    def rule(g):
        gx = g if w is None else g * w.data
        m1 = gx.mean(axis=axis, keepdims=True)
        m2 = (gx * xhat).mean(axis=axis, keepdims=True)
        grads = [inv * (gx - m1 - xhat * m2)]
        if w is not None:
            grads.append(_unbroadcast(g * xhat, w.shape))
        if b is not None:
            grads.append(_unbroadcast(g, b.shape))
        return tuple(grads)

    return _make("layer_norm", out, inputs, rule)


def batch_stats(x, axes=(0, 1, 2)) -> tuple[Tensor, Tensor]:
    """Per-channel mean and biased variance, differentiable in ``x``."""
    x = astensor(x)
    if x.shape[0] == 0:
        raise ContractError("batch_stats: empty batch")
    return mean(x, axes), variance(x, axes)


# ---------------------------------------------------------------- convolution


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with an HWIO kernel."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ContractError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # n, ho, wo, cin, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm).reshape(n, ho, wo, cout)

    def rule(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + h, padding : padding + wd, :] if padding else gxp
        return gx, gw

    return _make("conv2d", out, (x, w), rule)
