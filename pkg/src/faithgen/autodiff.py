"""Dense float64 tensors with reverse-mode automatic differentiation.

A define-by-run tape: operations executed while a :class:`ComputeGraph`
is active append backward rules to it, and ``backward`` walks the tape
once in reverse append order, accumulating gradients into leaf tensors.
Without an active graph every operation is a plain numpy evaluation,
which is what evaluation-mode model code uses.

Everything is float64. Shapes are whatever the model needs; broadcasting
support is limited to trailing-axis bias adds and mask multiplies.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError

_LOCAL = threading.local()


def _graph_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_graph() -> Optional["ComputeGraph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Enable per-operation NaN/Inf scans (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A float64 ndarray plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_track")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._track = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants (floats/ndarrays) are allowed on either side
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputeGraph:
    """Append-only operation tape; freed after one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "ComputeGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def emit(self, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
            raise NumericError("operation produced non-finite values")
        out = Tensor(out_data)
        out._track = True
        self.nodes.append(Node(tuple(inputs), out, backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        The tape is traversed in reverse append order exactly once and
        freed afterwards; a second call is an error.
        """
        if self._consumed:
            raise RuntimeError("graph already consumed by a previous backward")
        if not self.nodes:
            raise RuntimeError("backward on an empty graph")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data):
            raise NumericError("loss is non-finite")

        # Accumulation is out-of-place: backward rules may return views or
        # shared buffers, so an existing entry is never mutated.
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            gins = node.backward_fn(gout)
            for tensor, gin in zip(node.inputs, gins):
                if gin is None:
                    continue
                if tensor.requires_grad:
                    if tensor.grad is None:
                        tensor.grad = np.array(gin, dtype=np.float64)
                    else:
                        tensor.grad += gin
                elif tensor._track:
                    acc = grads.get(id(tensor))
                    grads[id(tensor)] = gin if acc is None else acc + gin
        self.nodes.clear()
        self._consumed = True


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and (x.requires_grad or x._track)


def _graph_if_tracked(*xs) -> Optional[ComputeGraph]:
    g = active_graph()
    if g is None:
        return None
    return g if any(_tracked(x) for x in xs) else None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd
    g = _graph_if_tracked(a, b)
    if g is None:
        return Tensor(out)
    a_shape, b_shape = ad.shape, bd.shape

    def bwd(go):
        ga = unbroadcast(go, a_shape) if _tracked(a) else None
        gb = unbroadcast(go, b_shape) if _tracked(b) else None
        return ga, gb

    return g.emit(out, [x for x in (a, b) if _is_tensor(x)],
                  _bind2(bwd, a, b))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad - bd
    g = _graph_if_tracked(a, b)
    if g is None:
        return Tensor(out)
    a_shape, b_shape = ad.shape, bd.shape

    def bwd(go):
        ga = unbroadcast(go, a_shape) if _tracked(a) else None
        gb = -unbroadcast(go, b_shape) if _tracked(b) else None
        return ga, gb

    return g.emit(out, [x for x in (a, b) if _is_tensor(x)],
                  _bind2(bwd, a, b))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd
    g = _graph_if_tracked(a, b)
    if g is None:
        return Tensor(out)
    a_shape, b_shape = ad.shape, bd.shape

    def bwd(go):
        ga = unbroadcast(go * bd, a_shape) if _tracked(a) else None
        gb = unbroadcast(go * ad, b_shape) if _tracked(b) else None
        return ga, gb

    return g.emit(out, [x for x in (a, b) if _is_tensor(x)],
                  _bind2(bwd, a, b))


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd
    if not np.all(np.isfinite(out)):
        raise NumericError("division produced non-finite values")
    g = _graph_if_tracked(a, b)
    if g is None:
        return Tensor(out)
    a_shape, b_shape = ad.shape, bd.shape

    def bwd(go):
        ga = unbroadcast(go / bd, a_shape) if _tracked(a) else None
        gb = unbroadcast(-go * ad / (bd * bd), b_shape) if _tracked(b) else None
        return ga, gb

    return g.emit(out, [x for x in (a, b) if _is_tensor(x)],
                  _bind2(bwd, a, b))


def _bind2(bwd, a, b):
    """Adapt a two-gradient backward to the recorded (tensor-only) inputs."""
    if _is_tensor(a) and _is_tensor(b):
        return bwd

    if _is_tensor(a):
        def only_a(go):
            return (bwd(go)[0],)
        return only_a

    def only_b(go):
        return (bwd(go)[1],)
    return only_b


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    g = _graph_if_tracked(a, b)
    if g is None:
        return Tensor(out)

    def bwd(go):
        ga = gb = None
        if _tracked(a):
            ga = go @ np.swapaxes(bd, -1, -2)
            ga = unbroadcast(ga, ad.shape)
        if _tracked(b):
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                m = go.shape[-1]
                gb = ad.reshape(-1, k).T @ go.reshape(-1, m)
            else:
                gb = np.swapaxes(ad, -1, -2) @ go
                gb = unbroadcast(gb, bd.shape)
        return ga, gb

    return g.emit(out, [x for x in (a, b) if _is_tensor(x)],
                  _bind2(bwd, a, b))


def exp(a: Tensor) -> Tensor:
    ad = _data(a)
    out = np.exp(ad)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflow")
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)

    def bwd(go):
        return (go * out,)

    return g.emit(out, [a], bwd)


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clipped from below."""
    ad = _data(a)
    if floor is not None:
        clipped = np.maximum(ad, floor)
    else:
        clipped = ad
        if np.any(clipped <= 0.0):
            raise NumericError("log of non-positive value (use floor=...)")
    out = np.log(clipped)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)

    def bwd(go):
        grad = go / clipped
        if floor is not None:
            grad = np.where(ad >= floor, grad, 0.0)
        return (grad,)

    return g.emit(out, [a], bwd)


def sqrt(a: Tensor) -> Tensor:
    ad = _data(a)
    if np.any(ad < 0.0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(ad)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)

    def bwd(go):
        return (go / (2.0 * out),)

    return g.emit(out, [a], bwd)


def relu(a: Tensor) -> Tensor:
    ad = _data(a)
    out = np.maximum(ad, 0.0)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)

    def bwd(go):
        return (go * (ad > 0.0),)

    return g.emit(out, [a], bwd)


def sigmoid(a: Tensor) -> Tensor:
    ad = _data(a)
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)

    def bwd(go):
        return (go * out * (1.0 - out),)

    return g.emit(out, [a], bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (subtracts the axis max)."""
    ad = _data(a)
    out = ad - ad.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)

    def bwd(go):
        dot = (go * out).sum(axis=axis, keepdims=True)
        grad = go - dot
        grad *= out
        return (grad,)

    return g.emit(out, [a], bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    out = ad.sum(axis=axis, keepdims=keepdims)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)
    shape = ad.shape

    def bwd(go):
        if axis is None:
            return (np.broadcast_to(go, shape),)
        go_exp = go if keepdims else np.expand_dims(go, axis)
        return (np.broadcast_to(go_exp, shape),)

    return g.emit(out, [a], bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    out = ad.mean(axis=axis, keepdims=keepdims)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)
    shape = ad.shape
    count = ad.size if axis is None else ad.shape[axis]

    def bwd(go):
        if axis is None:
            return (np.broadcast_to(go / count, shape),)
        go_exp = go if keepdims else np.expand_dims(go, axis)
        return (np.broadcast_to(go_exp / count, shape),)

    return g.emit(out, [a], bwd)


def sum_squares(a: Tensor) -> Tensor:
    """Squared L2 norm of all entries."""
    return tsum(mul(a, a))


def reshape(a: Tensor, shape) -> Tensor:
    ad = _data(a)
    out = ad.reshape(shape)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)
    orig = ad.shape

    def bwd(go):
        return (go.reshape(orig),)

    return g.emit(out, [a], bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    ad = _data(a)
    if axes is None:
        axes = tuple(reversed(range(ad.ndim)))
    out = ad.transpose(axes)
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)
    inverse = np.argsort(axes)

    def bwd(go):
        return (go.transpose(inverse),)

    return g.emit(out, [a], bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    g = _graph_if_tracked(*tensors)
    if g is None:
        return Tensor(out)
    sizes = [d.shape[axis] for d in datas]
    inputs = [t for t in tensors if _is_tensor(t)]
    tensor_flags = [_is_tensor(t) for t in tensors]

    def bwd(go):
        pieces = np.split(go, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(p for p, flag in zip(pieces, tensor_flags) if flag)

    return g.emit(out, inputs, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ad = _data(a)
    index = [slice(None)] * ad.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = ad[index]
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)
    shape = ad.shape

    def bwd(go):
        grad = np.zeros(shape, dtype=np.float64)
        grad[index] = go
        return (grad,)

    return g.emit(out, [a], bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    td = _data(table)
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise ValueError("embedding id out of range")
    out = td[ids]
    g = _graph_if_tracked(table)
    if g is None:
        return Tensor(out)
    vocab_shape = td.shape

    def bwd(go):
        grad = np.zeros(vocab_shape, dtype=np.float64)
        np.add.at(grad, ids.reshape(-1), go.reshape(-1, vocab_shape[-1]))
        return (grad,)

    return g.emit(out, [table], bwd)


def take_along_last(a: Tensor, ids) -> Tensor:
    """out[...] = a[..., ids[...]] with one index per leading position."""
    ids = np.asarray(ids, dtype=np.int64)
    ad = _data(a)
    out = np.take_along_axis(ad, ids[..., None], axis=-1)[..., 0]
    g = _graph_if_tracked(a)
    if g is None:
        return Tensor(out)
    shape = ad.shape

    def bwd(go):
        grad = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(grad, ids[..., None], go[..., None], axis=-1)
        return (grad,)

    return g.emit(out, [a], bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    xd = _data(x)
    mu = xd.mean(axis=-1, keepdims=True)
    xhat = xd - mu
    var = np.mean(xhat * xhat, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    gd, bd = _data(gain), _data(bias)
    out = xhat * gd
    out += bd
    g = _graph_if_tracked(x, gain, bias)
    if g is None:
        return Tensor(out)

    def bwd(go):
        gx = ggain = gbias = None
        if _tracked(x):
            dxhat = go * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = dxhat
            gx -= m1
            gx -= xhat * m2
            gx *= inv
        if _tracked(gain):
            ggain = unbroadcast(go * xhat, gd.shape)
        if _tracked(bias):
            gbias = unbroadcast(go, bd.shape)
        return gx, ggain, gbias

    return g.emit(out, [x, gain, bias], bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``x``. The relative
    error per coordinate is |analytic - central| / (|analytic| + |central|
    + 1e-12); the maximum over coordinates is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    was_requiring = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with ComputeGraph() as g:
        out = f(x)
        g.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was_requiring

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function non-finite at finite-difference probe")
        central = (fp - fm) / (2.0 * step)
        ana = analytic.reshape(-1)[i]
        rel = abs(ana - central) / (abs(ana) + abs(central) + 1e-12)
        worst = max(worst, rel)
    return worst
