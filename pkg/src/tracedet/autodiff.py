"""A small dense-tensor reverse-mode autodiff engine on top of numpy.

Every primitive returns a ``Tensor`` that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. ``backward`` walks
either an explicit ``Tape`` (recording order) or a topological sort of the
graph from the root.

Broadcasting is limited to what numpy does for leading batch axes and
size-1 axes; gradients are summed back onto the parent shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ShapeError, ValidationError

LAYER_NORM_EPS = 1e-5

_state = threading.local()
# primitive names whose adjoint is deliberately scaled wrong (negative-control tests)
_CORRUPTED: set = set()


def corrupt_adjoint(name: Optional[str]) -> None:
    """Debug hook: scale the adjoint of primitive ``name`` by 1.1 (``None`` resets)."""
    _CORRUPTED.clear()
    if name:
        _CORRUPTED.add(name)


def _maybe_corrupt(name, grads):
    if name in _CORRUPTED:
        return tuple(None if g is None else g * 1.1 for g in grads)
    return grads


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records primitive applications in execution order while active."""

    def __init__(self):
        self.nodes: list = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op) -> Tensor:
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _maybe_corrupt("add", (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _maybe_corrupt("sub", (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _maybe_corrupt("mul", (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    return _node(a.data * b.data, (a, b), bw, "mul")


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return _maybe_corrupt("scalar_mul", (g * c,))

    return _node(a.data * c, (a,), bw, "scalar_mul")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _maybe_corrupt("matmul", (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)))

    return _node(out, (a, b), bw, "matmul")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if axis != -1 and axis != ts[0].ndim - 1:
        raise ValidationError("axis", "concat supports the last axis only")
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in ts):
        raise ShapeError("concat", *[t.shape for t in ts])
    widths = [t.shape[-1] for t in ts]
    cuts = np.cumsum(widths)[:-1]

    def bw(g):
        return _maybe_corrupt("concat", tuple(np.split(g, cuts, axis=-1)))

    return _node(np.concatenate([t.data for t in ts], axis=-1), ts, bw, "concat")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return _maybe_corrupt("sum", (np.broadcast_to(g, a.shape).copy(),))

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return _maybe_corrupt("mean", (np.broadcast_to(g / count, a.shape).copy(),))

    return _node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return _maybe_corrupt("softmax", (s * (g - (g * s).sum(axis=axis, keepdims=True)),))

    return _node(s, (a,), bw, "softmax")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bw(g):
        return _maybe_corrupt("sigmoid", (g * s * (1.0 - s),))

    return _node(s, (a,), bw, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def bw(g):
        return _maybe_corrupt("relu", (g * on,))

    return _node(np.where(on, a.data, 0.0), (a,), bw, "relu")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValidationError("log", "argument must be strictly positive")

    def bw(g):
        return _maybe_corrupt("log", (g / a.data,))

    return _node(np.log(a.data), (a,), bw, "log")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return _maybe_corrupt("layer_norm", (inv * (g - gm - xhat * gx),))

    return _node(xhat, (a,), bw, "layer_norm")


def dropout(a, rate: float, train: bool, rng=None) -> Tensor:
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValidationError("rate", "dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return _maybe_corrupt("dropout", (g * keep,))

    return _node(a.data * keep, (a,), bw, "dropout")


# ------------------------------------------------------------ structural ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), bw, "transpose")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return _node(np.clip(a.data, lo, hi), (a,), bw, "clip")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; backward passes the gradient to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", hard.shape, soft.shape)

    def bw(g):
        return (g,)

    return _node(hard, (soft,), bw, "straight_through")


# ------------------------------------------------------------------ backward


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor, tape: Optional[Tape] = None) -> dict:
    """Reverse-mode sweep from scalar ``root``.

    Returns a dict keyed by tensor identity (the tensors themselves) holding
    the gradient array of ``root`` with respect to every node reached,
    including ``root`` itself (ones) and all leaves that require grad.
    """
    if root.data.size != 1:
        raise ValidationError("root", f"backward needs a scalar root, got shape {root.shape}")
    if tape is not None:
        if root._backward is not None and root not in tape.nodes:
            raise ValidationError("root", "root was not recorded on the given tape")
        order = tape.nodes
    else:
        order = _toposort(root)
    grads = {id(root): np.ones_like(root.data)}
    owners = {id(root): root}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                owners[key] = parent
    return {owners[k]: v for k, v in grads.items()}


def finite_diff_check(f: Callable[[], Tensor], params, eps: float = 1e-5, return_worst: bool = False):
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar objective from the current values of
    ``params`` (a list of leaf tensors or a name -> tensor mapping); entries
    are perturbed in place and restored. Error per coordinate is
    ``|g_analytic - g_central| / max(1, |g_central|)``.
    """
    if eps <= 0:
        raise ValidationError("eps", "must be positive")
    named = list(params.items()) if isinstance(params, dict) else [(p.name or f"p{i}", p) for i, p in enumerate(params)]
    root = f()
    grads = backward(root)
    worst, worst_name = 0.0, None
    for name, p in named:
        analytic = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            central = (up - down) / (2.0 * eps)
            err = abs(ga[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    if return_worst:
        return worst, worst_name
    return worst
