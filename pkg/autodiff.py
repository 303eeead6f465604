"""autodiff.py

Dense float64 tensors with a reverse-mode gradient tape.

Tensor values are numpy arrays frozen at creation. An operation records a
node on the active Tape whenever one of its inputs requires a gradient;
outside a ``with Tape()`` block operations only compute values (inference).

    with Tape() as tape:
        loss = mse(sigmoid(matmul(x, w)), y)
    grads = tape.backward(loss)
    dw = grads[tape.node_of(w)]

Only scalar-with-tensor broadcasting is supported; every other shape
alignment is explicit. Convolutions and reductions run in a fixed order so
repeated runs are bit-identical.
"""

import logging
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

Scalar = Union[int, float]


class AutodiffError(RuntimeError):
    pass


class DimensionError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, ArithmeticError):
    pass


class Tensor:
    """Immutable float64 array, optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def with_grad(self, requires_grad: bool) -> "Tensor":
        """Same values, new trainability flag. The array is shared, not copied."""
        return Tensor._wrap(self.data, requires_grad=requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)


VJP = Callable[[np.ndarray, tuple, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]


class Node(NamedTuple):
    kind: str
    inputs: Tuple[Optional[int], ...]
    saved: tuple
    vjp: Optional[VJP]
    shape: Tuple[int, ...]


_ACTIVE: List["Tape"] = []


class Tape:
    """Append-only record of differentiable operations.

    Leaves are registered the first time a requires_grad tensor feeds an
    operation; ``node_of`` maps a tensor back to its node id.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._leaf_ids: Dict[int, int] = {}
        self._leaves: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def _input_id(self, t: Tensor) -> Optional[int]:
        if not t.requires_grad:
            return None
        if t._tape is self:
            return t.node_id
        if t.node_id is not None:
            raise AutodiffError("tensor was produced on a different tape")
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), (), None, t.shape))
            self._leaf_ids[id(t)] = nid
            self._leaves.append(t)
        return nid

    def _record(self, kind: str, inputs: Sequence[Tensor], saved: tuple, vjp: VJP, out: np.ndarray) -> Tensor:
        ids = tuple(self._input_id(t) for t in inputs)
        result = Tensor._wrap(out, requires_grad=True)
        result.node_id = len(self.nodes)
        result._tape = self
        self.nodes.append(Node(kind, ids, saved, vjp, result.shape))
        return result

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """Gradients of a scalar loss, keyed by leaf node id.

        The tape is left untouched, so calling backward twice yields the
        same map.
        """
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise AutodiffError("loss is not recorded on this tape")

        pending: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        leaf_grads: Dict[int, np.ndarray] = {}
        for nid in range(loss.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                leaf_grads[nid] = g
                continue
            needs = tuple(i is not None for i in node.inputs)
            for i, gi in zip(node.inputs, node.vjp(g, node.saved, needs)):
                if i is None or gi is None:
                    continue
                pending[i] = pending[i] + gi if i in pending else gi
        return {nid: Tensor._wrap(np.ascontiguousarray(g)) for nid, g in sorted(leaf_grads.items())}

    def gradients(self, loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        """Name-keyed gradients for the trainable entries of ``params`` reachable from ``loss``."""
        grads = self.backward(loss)
        out: Dict[str, np.ndarray] = {}
        for name, p in params.items():
            nid = self.node_of(p)
            if p.requires_grad and nid in grads:
                out[name] = grads[nid].data
        return out


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VJP, saved: tuple = ()) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape._record(kind, inputs, saved, vjp, out)
    return Tensor._wrap(out)


def _check_tensor(name: str, t) -> None:
    if not isinstance(t, Tensor):
        raise TypeError(f"{name} expects a Tensor, got {type(t).__name__}")


# ---------------------------------------------------------------- matmul

def _matmul_vjp(g, saved, needs):
    a, b = saved
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("matmul", a)
    _check_tensor("matmul", b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, _matmul_vjp, (a.data, b.data))


# ---------------------------------------------------------------- conv2d

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    batch, channels = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (B, C, oh, ow, kh, kw) -> (B, C*kh*kw, oh*ow), rows ordered (c, i, j)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(batch, channels * kh * kw, oh * ow)


def _conv2d_vjp(g, saved, needs):
    cols, wmat, x_shape, k_shape, stride, pad = saved
    batch, cin, h, w = x_shape
    cout, _, kh, kw = k_shape
    oh, ow = g.shape[2], g.shape[3]
    g2 = g.reshape(batch, cout, oh * ow)

    gx = gk = gb = None
    if needs[0]:
        gxp = np.zeros((batch, cin, h + 2 * pad, w + 2 * pad))
        dcols = np.stack([wmat.T @ g2[b] for b in range(batch)]).reshape(batch, cin, kh, kw, oh, ow)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += dcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w]
    if needs[1]:
        acc = np.zeros_like(wmat)
        for b in range(batch):
            acc += g2[b] @ cols[b].T
        gk = acc.reshape(k_shape)
    if len(needs) > 2 and needs[2]:
        gb = g.sum(axis=(0, 2, 3))
    grads = (gx, gk)
    return grads + (gb,) if len(needs) > 2 else grads


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    _check_tensor("conv2d", input)
    _check_tensor("conv2d", kernel)
    if input.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {input.shape} and {kernel.shape}")
    batch, cin, h, w = input.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input {input.shape} has {cin} channels, kernel {kernel.shape} expects {kcin}")
    if int(stride) != stride or stride < 1 or int(pad) != pad or pad < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} pad={pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {input.shape} (pad={pad})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(input.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else input.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    # one (1,K)x(K,P) product per (image, output channel): an output value never
    # depends on how many images or channels share the call
    out = np.matmul(wmat[None, :, None, :], cols[:, None]).reshape(batch, cout, oh, ow)
    inputs: Tuple[Tensor, ...] = (input, kernel)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs = inputs + (bias,)
    saved = (cols, wmat, input.shape, kernel.shape, stride, pad)
    return _emit("conv2d", inputs, out, _conv2d_vjp, saved)


# ---------------------------------------------------------------- elementwise

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unary(kind: str, x: np.ndarray) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    if kind == "relu":
        return np.maximum(x, 0.0), lambda g: g * (x > 0)
    if kind == "sigmoid":
        s = _stable_sigmoid(x)
        return s, lambda g: g * s * (1.0 - s)
    if kind == "softplus":
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return out, lambda g: g * _stable_sigmoid(x)
    if kind == "square":
        return x * x, lambda g: g * 2.0 * x
    if kind == "smooth_l1":
        ax = np.abs(x)
        out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
        return out, lambda g: g * np.where(ax < 1.0, x, np.sign(x))
    if kind == "neg":
        return -x, lambda g: -g
    raise AutodiffError(f"unknown unary kind {kind!r}")


UNARY_KINDS = ("relu", "sigmoid", "softplus", "square", "smooth_l1", "neg")
BINARY_KINDS = ("add", "sub", "mul")


def _unary_vjp(g, saved, needs):
    (back,) = saved
    return (back(g),)


def _binary_vjp(g, saved, needs):
    kind, a, b = saved
    if kind == "add":
        return (g if needs[0] else None, g if needs[1] else None)
    if kind == "sub":
        return (g if needs[0] else None, -g if needs[1] else None)
    return (g * b if needs[0] else None, g * a if needs[1] else None)


def _scalar_vjp(g, saved, needs):
    kind, s = saved
    if kind in ("add", "sub"):
        return (g,)
    return (g * s,)


def _is_scalar(b) -> bool:
    return isinstance(b, (int, float, np.number)) and not isinstance(b, bool)


def elementwise(kind: str, a: Tensor, b: Union[Tensor, Scalar, None] = None) -> Tensor:
    """Pointwise operation. Binary kinds take a same-shape tensor or a scalar."""
    _check_tensor(kind, a)
    if kind in UNARY_KINDS:
        if b is not None:
            raise AutodiffError(f"{kind} takes a single operand")
        out, back = _unary(kind, a.data)
        return _emit(kind, (a,), out, _unary_vjp, (back,))
    if kind == "scale":
        if not _is_scalar(b):
            raise AutodiffError("scale needs a scalar factor")
        return _emit("scale", (a,), a.data * float(b), _scalar_vjp, ("mul", float(b)))
    if kind not in BINARY_KINDS:
        raise AutodiffError(f"unknown elementwise kind {kind!r}")

    if _is_scalar(b):
        s = float(b)
        out = {"add": a.data + s, "sub": a.data - s, "mul": a.data * s}[kind]
        return _emit(kind, (a,), out, _scalar_vjp, (kind, s))
    _check_tensor(kind, b)
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    out = {"add": a.data + b.data, "sub": a.data - b.data, "mul": a.data * b.data}[kind]
    return _emit(kind, (a, b), out, _binary_vjp, (kind, a.data, b.data))


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def softplus(a: Tensor) -> Tensor:
    return elementwise("softplus", a)


def square(a: Tensor) -> Tensor:
    return elementwise("square", a)


def smooth_l1(a: Tensor) -> Tensor:
    return elementwise("smooth_l1", a)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, factor: Scalar) -> Tensor:
    return elementwise("scale", a, factor)


# ---------------------------------------------------------------- reductions

def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    out = []
    for ax in axes:
        if int(ax) != ax or not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(int(ax) % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {list(axes)}")
    return tuple(out)


def _reduce_vjp(g, saved, needs):
    shape, axes, count = saved
    keep = tuple(1 if i in axes else d for i, d in enumerate(shape))
    grad = np.broadcast_to(np.reshape(g, keep), shape)
    return (grad / count if count != 1 else grad.copy(),)


def reduce(kind: str, a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """sum or mean over ``axes`` (all axes when None); reduced axes are dropped."""
    _check_tensor(kind, a)
    if kind not in ("sum", "mean"):
        raise AutodiffError(f"unknown reduction {kind!r}")
    norm = _normalize_axes(axes, a.ndim)
    out = np.asarray(np.sum(a.data, axis=norm))
    count = 1
    if kind == "mean":
        count = int(np.prod([a.shape[i] for i in norm])) if norm else 1
        out = out / count
    return _emit(kind, (a,), out, _reduce_vjp, (a.shape, norm, count))


def sum_(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return reduce("sum", a, axes)


def mean(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return reduce("mean", a, axes)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------- structure

def _reshape_vjp(g, saved, needs):
    (shape,) = saved
    return (g.reshape(shape),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    return _emit("reshape", (a,), a.data.reshape(shape), _reshape_vjp, (a.shape,))


def _take_channels_vjp(g, saved, needs):
    shape, start, stop = saved
    full = np.zeros(shape)
    full[:, start:stop] = g
    return (full,)


def take_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of axis 1; the rest of the axis gets zero gradient."""
    if a.ndim < 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"channel slice [{start}, {stop}) invalid for shape {a.shape}")
    out = np.ascontiguousarray(a.data[:, start:stop])
    return _emit("take_channels", (a,), out, _take_channels_vjp, (a.shape, start, stop))


def _concat_vjp(g, saved, needs):
    axis, sizes = saved
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or any(d != e for i, (d, e) in enumerate(zip(t.shape, first)) if i != axis):
            raise DimensionError(f"concat: shape {t.shape} does not align with {first} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", tuple(tensors), out, _concat_vjp, (axis, sizes))


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data)


def zeros(*shape: int) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return Tensor._wrap(np.ones(shape))


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data)

    with Tape() as tape:
        xt = Tensor(base, requires_grad=True)
        out = f(xt)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out._tape is tape:
        g_ad = tape.backward(out).get(tape.node_of(xt))
        g_ad = g_ad.data if g_ad is not None else np.zeros_like(base)
    else:
        g_ad = np.zeros_like(base)

    g_fd = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        xp = base.copy()
        xp[idx] += eps
        xm = base.copy()
        xm[idx] -= eps
        g_fd[idx] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)

    if not (np.all(np.isfinite(g_ad)) and np.all(np.isfinite(g_fd)) and np.isfinite(out.item())):
        raise NumericError("grad_check encountered non-finite values")
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    err = float(np.max(np.abs(g_ad - g_fd) / denom)) if base.size else 0.0
    logger.debug("grad_check over %d entries: max relative error %.3e", base.size, err)
    return err
