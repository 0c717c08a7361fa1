"""Dense tensors with define-by-run reverse-mode differentiation.

Every model equation is assembled from the ops in this module. A graph is
recorded implicitly through parent links as ops execute; ``backward`` sorts it
topologically (the tape) and walks it once in reverse.

Feature maps are laid out ``(..., H, W, C)``; leading axes are batch axes.
"""
from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericDomainError(FloatingPointError):
    pass


class EmptyAttentionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


# relative-error tolerances for gradient checks, keyed by dtype
GRAD_TOLERANCE = {np.dtype(np.float64): 1e-4, np.dtype(np.float32): 5e-2}

_DEFAULT_DTYPE = np.float64

_counter_lock = threading.Lock()
_op_counts: Counter = Counter()


def op_counts() -> dict:
    with _counter_lock:
        return dict(_op_counts)


def reset_op_counts() -> None:
    with _counter_lock:
        _op_counts.clear()


@contextlib.contextmanager
def count_ops():
    """Yield a Counter filled with the ops executed inside the block."""
    before = Counter(op_counts())
    delta: Counter = Counter()
    try:
        yield delta
    finally:
        after = Counter(op_counts())
        delta.update(after)
        delta.subtract(before)


def _count(name: str) -> None:
    with _counter_lock:
        _op_counts[name] += 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), op: str = ""):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype.kind == "f" else _DEFAULT_DTYPE))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _pair(a, b) -> tuple:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _wrap(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _wrap(a, b.dtype), b
    return _wrap(a), _wrap(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _count("add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _count("sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _count("mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), "mul", bw)


def relu(x: Tensor) -> Tensor:
    _count("relu")
    _check_finite(x.data, "relu input")
    on = x.data > 0

    def bw(g):
        x._accumulate(g * on)
    return _result(np.where(on, x.data, 0.0).astype(x.dtype, copy=False), (x,), "relu", bw)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _count("sigmoid")
    _check_finite(x.data, "sigmoid input")
    s = _sigmoid_np(x.data)

    def bw(g):
        x._accumulate(g * s * (1.0 - s))
    return _result(s, (x,), "sigmoid", bw)


def elementwise(op: str, x: Tensor) -> Tensor:
    if op == "relu":
        return relu(x)
    if op == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise op {op!r}")


def log(x: Tensor) -> Tensor:
    _count("log")
    if np.any(x.data <= 0):
        raise NumericDomainError("log of non-positive value")

    def bw(g):
        x._accumulate(g / x.data)
    return _result(np.log(x.data), (x,), "log", bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the value was inside the range."""
    _count("clip")
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        x._accumulate(g * inside)
    return _result(np.clip(x.data, lo, hi), (x,), "clip", bw)


# ---------------------------------------------------------------------------
# shape / reductions

def reshape(x: Tensor, shape) -> Tensor:
    _count("reshape")
    shape = tuple(shape)

    def bw(g):
        x._accumulate(g.reshape(x.shape))
    return _result(x.data.reshape(shape), (x,), "reshape", bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _count("sum")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))
    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis), 1.0 / float(n))


def take(x: Tensor, index) -> Tensor:
    """Gather along axis 0; repeated indices accumulate gradient."""
    _count("take")
    idx = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)
    return _result(x.data[idx], (x,), "take", bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of no tensors")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat extents disagree: {[t.shape for t in tensors]} on axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    _count("concat")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            if t.requires_grad:
                t._accumulate(piece)
    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``(..., m, k)`` by ``(k, n)`` (or batched ``(..., k, n)``)."""
    _count("matmul")
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if bd.ndim == 1:
                gb = np.tensordot(g, ad, axes=(range(g.ndim), range(g.ndim)))
            elif ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
            b._accumulate(gb)
    return _result(out, (a, b), "matmul", bw)


def _pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple:
    if padding == "valid":
        if k > size:
            raise ShapeError(f"kernel {k} larger than input extent {size}")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        if k > size + total:
            raise ShapeError(f"kernel {k} larger than padded extent {size + total}")
        return total // 2, total - total // 2, out
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Rows are output positions, columns ordered (ky, kx, cin)."""
    n, cin = xp.shape[0], xp.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, k * k * cin)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of ``(..., H, W, Cin)`` with ``(k, k, Cin, Cout)`` kernels."""
    _count("conv2d")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[0] != kd.shape[1]:
        raise ShapeError(f"kernels must be k×k×cin×cout, got {kd.shape}")
    k, _, cin, cout = kd.shape
    xd = x.data
    if xd.ndim < 3 or xd.shape[-1] != cin:
        raise ShapeError(f"input {xd.shape} does not match kernel channels {cin}")
    lead = xd.shape[:-3]
    xb = xd.reshape((-1,) + xd.shape[-3:])
    n, H, W, _ = xb.shape
    pt, pb, oh = _pad_amounts(H, k, stride, padding)
    pl, pr, ow = _pad_amounts(W, k, stride, padding)
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xb
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = kd.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(lead + (oh, ow, cout))

    def bw(g):
        g2 = g.reshape(n * oh * ow, cout)
        if kernels.requires_grad:
            kernels._accumulate((cols.T @ g2).reshape(kd.shape))
        if not x.requires_grad:
            return
        if stride == 1:
            # input gradient = correlation of g with the flipped, transposed kernel
            gp = np.pad(g.reshape(n, oh, ow, cout),
                        ((0, 0), (k - 1 - pt, k - 1 - pb), (k - 1 - pl, k - 1 - pr), (0, 0)))
            flipped = kd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = (_im2col(gp, k, 1, H, W) @ flipped).reshape(xd.shape)
            x._accumulate(gx)
            return
        gcols = np.ascontiguousarray(
            (g2 @ wmat.T).reshape(n, oh, ow, k, k, cin).transpose(3, 4, 0, 1, 2, 5))
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, dy:dy + stride * (oh - 1) + 1:stride,
                    dx:dx + stride * (ow - 1) + 1:stride, :] += gcols[dy, dx]
        x._accumulate(gxp[:, pt:pt + H, pl:pl + W, :].reshape(xd.shape))
    return _result(out, (x, kernels), "conv2d", bw)


def global_pool(op: str, F: Tensor) -> Tensor:
    """Squeeze the spatial axes of ``(..., H, W, C)`` to ``(..., C)``."""
    if F.data.ndim < 3:
        raise ShapeError(f"global_pool needs (..., H, W, C), got {F.shape}")
    _count(f"global_{op}_pool")
    lead, (H, W, C) = F.shape[:-3], F.shape[-3:]
    flat = F.data.reshape(lead + (H * W, C))
    if op == "avg":
        def bw(g):
            F._accumulate(np.broadcast_to(np.expand_dims(g, -2) / (H * W), flat.shape).reshape(F.shape))
        return _result(flat.mean(axis=-2), (F,), "global_avg_pool", bw)
    if op == "max":
        arg = flat.argmax(axis=-2)  # first occurrence in row-major order

        def bw(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, np.expand_dims(arg, -2), np.expand_dims(g, -2), axis=-2)
            F._accumulate(gf.reshape(F.shape))
        return _result(np.take_along_axis(flat, np.expand_dims(arg, -2), axis=-2)[..., 0, :],
                       (F,), "global_max_pool", bw)
    raise ValueError(f"unknown pooling op {op!r}")


def channel_scale(F: Tensor, M: Tensor) -> Tensor:
    """out[..., y, x, k] = F[..., y, x, k] * M[..., k]."""
    if F.shape[-1] != M.shape[-1] or F.data.ndim != M.data.ndim + 2:
        raise ShapeError(f"channel_scale mismatch: F {F.shape}, M {M.shape}")
    _count("channel_scale")
    Mb = M.data[..., None, None, :]

    def bw(g):
        if F.requires_grad:
            F._accumulate(g * Mb)
        if M.requires_grad:
            M._accumulate((g * F.data).sum(axis=(-3, -2)))
    return _result(F.data * Mb, (F, M), "channel_scale", bw)


def softmax(scores: Tensor, mask=None, allow_empty: bool = False) -> Tensor:
    """Masked softmax along the last axis.

    Masked positions are exactly zero. A row with no unmasked entry raises
    ``EmptyAttentionError`` unless ``allow_empty``, in which case it is all zeros.
    """
    _count("softmax")
    s = scores.data
    m = np.ones(s.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    live = m.any(axis=-1, keepdims=True)
    if not allow_empty and not live.all():
        raise EmptyAttentionError("softmax over an all-masked row")
    shifted = np.where(m, s, -np.inf)
    top = np.where(live, shifted.max(axis=-1, keepdims=True), 0.0)
    e = np.where(m, np.exp(np.where(m, s - top, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = np.where(live, e / np.where(live, denom, 1.0), 0.0)

    def bw(g):
        scores._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _result(p, (scores,), "softmax", bw)


# ---------------------------------------------------------------------------
# reverse pass

def topo_order(root: Tensor) -> list:
    """The recorded tape reachable from ``root``: operands precede their results."""
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    _check_finite(root.data, "backward root")
    if not root.requires_grad:
        return
    tape = topo_order(root)
    root._accumulate(np.ones_like(root.data))
    for node in reversed(tape):
        if node._backward is None:
            continue
        g = node.grad
        node.grad = None  # intermediates keep no gradient
        if g is not None:
            node._backward(g)
    for node in tape:
        if node._backward is None and node.grad is not None:
            _check_finite(node.grad, "gradient")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle

def numerical_grad(f: Callable[[], float], theta: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``theta``."""
    flat = theta.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericDomainError(f"objective not finite near coordinate {i}")
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(theta.shape)


def grad_check(f: Callable[[], Tensor], theta, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar Tensor. ``theta`` is one Tensor or a sequence of them.
    """
    params = [theta] if isinstance(theta, Tensor) else list(theta)
    for p in params:
        p.grad = None
    root = f()
    backward(root)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    def scalar() -> float:
        return float(f().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        num = numerical_grad(scalar, p, eps)
        err = np.abs(a - num) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
