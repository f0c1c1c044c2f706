"""Dense tensors with tape-based reverse-mode differentiation.

Every operation evaluates eagerly with numpy. When a :class:`Tape` is active
and at least one operand is differentiable, the operation appends a node to
the tape holding its vector-Jacobian product. ``Tape.backward`` walks the
nodes in strict reverse creation order.

Outside of an active tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NumericDomainError",
    "ShapeError",
    "as_tensor",
    "get_dtype",
    "set_dtype",
    "precision",
    "apply_op",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ArithmeticError):
    """An operation was evaluated outside its numeric domain."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_local = threading.local()
_DEFAULT_DTYPE = np.float32


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", _DEFAULT_DTYPE)


def set_dtype(dtype) -> None:
    """Set the working float precision for newly created tensors (per thread)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _local.dtype = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch precision, e.g. ``with precision("float64"):``."""
    old = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


def _as_array(x) -> np.ndarray:
    dtype = get_dtype()
    if isinstance(x, np.ndarray) and x.dtype == dtype:
        return x
    return np.asarray(x, dtype=dtype)


class Tensor:
    """A dense array, optionally attached to the active tape.

    ``requires_grad`` leaves are parameters or inputs we differentiate with
    respect to. Results of recorded operations carry the tape and node id that
    produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape = None
        self._node = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "backward", "leaf")

    def __init__(self, op, inputs, backward, leaf=None):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations evaluated inside are recorded::

        with Tape() as tape:
            loss = model_loss(params)
        grads = tape.backward(loss)

    A tape can be run backward once. Call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self._leaf_ids = {}
        self._consumed = False

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad and t._tape is None:
            key = id(t)
            nid = self._leaf_ids.get(key)
            if nid is None:
                nid = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, leaf=t))
                self._leaf_ids[key] = nid
            return nid
        return None

    def _append(self, op: str, inputs: tuple, backward: Callable) -> int:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.nodes.append(_Node(op, inputs, backward))
        return len(self.nodes) - 1

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(root)/d(node) to every reachable differentiable leaf.

        Returns a mapping from leaf tensors to their gradients; each leaf's
        ``grad`` attribute is set as well.
        """
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        if not isinstance(root, Tensor) or root._tape is not self:
            raise TapeError("root is not attached to this tape")
        if root.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        self._consumed = True
        grads: list = [None] * (root._node + 1)
        grads[root._node] = np.ones_like(root.data)
        out: dict[Tensor, np.ndarray] = {}
        for nid in range(root._node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            grads[nid] = None
            node = self.nodes[nid]
            if node.leaf is not None:
                node.leaf.grad = g
                out[node.leaf] = g
                continue
            in_grads = node.backward(g)
            for src, ig in zip(node.inputs, in_grads):
                if src is None or ig is None:
                    continue
                prev = grads[src]
                grads[src] = ig if prev is None else prev + ig
        return out


def apply_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the result of ``op`` over ``parents``.

    ``backward(g)`` must return one gradient (or None) per parent, each shaped
    like that parent. Nothing is recorded when no tape is active or when no
    parent is differentiable.
    """
    out = Tensor.__new__(Tensor)
    dtype = get_dtype()
    if data.dtype != dtype and data.dtype.kind == "f":
        data = data.astype(dtype)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    out._node = None
    tape = _active_tape()
    if tape is None:
        return out
    ids = tuple(tape._node_of(p) for p in parents)
    if all(i is None for i in ids):
        return out
    out._node = tape._append(op, ids, backward)
    out._tape = tape
    out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b),
                    lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return apply_op("div", out, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "maximum")
    ad, bd = a.data, b.data
    take_a = ad >= bd

    def backward(g):
        return (_unbroadcast(np.where(take_a, g, 0), ad.shape),
                _unbroadcast(np.where(take_a, 0, g), bd.shape))

    return apply_op("maximum", np.where(take_a, ad, bd), (a, b), backward)


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return apply_op("where", np.where(cond, a.data, b.data), (a, b),
                    lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                               _unbroadcast(np.where(cond, 0, g), sb)))


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if not float(p).is_integer() and np.any(x < 0):
        raise NumericDomainError(f"non-integer power {p} of negative values")
    return apply_op("pow", x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericDomainError("log of non-positive value")
    return apply_op("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise NumericDomainError("sqrt of negative value")
    out = np.sqrt(x)
    return apply_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return apply_op("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(x/2)) is overflow-free for any x.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return apply_op("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return apply_op("silu", x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1 + t)

    def backward(g):
        du = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)

    return apply_op("gelu", out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op("softplus", np.logaddexp(0, x), (a,), lambda g: (g * _sigmoid(x),))


def logsigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op("logsigmoid", -np.logaddexp(0, -x), (a,), lambda g: (g * _sigmoid(-x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return apply_op("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {ad.shape} and {bd.shape}")
    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {ad.shape} and {bd.shape} "
                         "are not broadcastable") from None

    if bd.ndim == 2 and ad.ndim > 2:
        # batched input times a single matrix: fold batch axes into rows
        rows = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), rows.T @ g2

        return apply_op("matmul", (rows @ bd).reshape(*ad.shape[:-1], bd.shape[-1]), (a, b), backward)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return apply_op("matmul", np.matmul(ad, bd), (a, b), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    a = as_tensor(a)
    x = a.data
    axes = _norm_axis(axis, a.ndim)
    m = x.max(axis=axes, keepdims=True)
    hit = x == m
    count = hit.sum(axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (hit * (g / count),)

    out = m if keepdims else np.squeeze(m, axis=axes)
    return apply_op("max", out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return apply_op("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    parts = idx if isinstance(idx, tuple) else (idx,)
    # basic slicing never repeats an element, so plain assignment suffices
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return apply_op("getitem", a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op("concat", out, tuple(tensors),
                    lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {e}") from None
    n = len(tensors)
    return apply_op("stack", out, tuple(tensors),
                    lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)))


def pad_axis(a, before: int, after: int = 0, axis: int = 0) -> Tensor:
    """Zero-pad one axis."""
    a = as_tensor(a)
    width = [(0, 0)] * a.ndim
    width[axis] = (before, after)
    n = a.shape[axis]
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return apply_op("pad", np.pad(a.data, width), (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax. ``mask`` (bool, broadcastable) marks allowed
    entries; disallowed entries get exactly zero probability."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return apply_op("log_softmax", out, (a,),
                    lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit (population) variance along ``axis``.

    No affine parameters; callers apply their own scale and shift.
    """
    a = as_tensor(a)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (rstd * (g - gm - y * gym),)

    return apply_op("layer_norm", y, (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable, x, h: float = 1e-5, *, max_coords: int | None = None,
               rng: np.random.Generator | None = None, stencil: int = 3) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` maps the tensor(s) in ``x`` to a scalar tensor. ``x`` is a Tensor or a
    sequence of Tensors; each is differentiated in place (their data are
    perturbed and restored). For each probed coordinate the error is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    With ``max_coords`` only that many randomly chosen coordinates per tensor
    are probed. ``stencil=5`` uses the fourth-order five-point difference,
    which resolves gradients far below the round-off floor of the
    three-point rule at the same ``h``.
    """
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with Tape() as tape:
            y = f(*xs) if not isinstance(x, Tensor) else f(x)
        if y.size != 1:
            raise TapeError("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(y.data)):
            raise NumericDomainError("function value is not finite")
        grads = tape.backward(y) if y._tape is tape else {}
        worst = 0.0
        for t in xs:
            analytic = grads.get(t)
            if analytic is None:
                analytic = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            an = analytic.reshape(-1)
            for i in coords:
                old = flat[i]
                vals = {}
                for k in ((-2, -1, 1, 2) if stencil == 5 else (-1, 1)):
                    flat[i] = old + k * h
                    vals[k] = _value(f, x, xs)
                flat[i] = old
                if stencil == 5:
                    num = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * h)
                else:
                    num = (vals[1] - vals[-1]) / (2 * h)
                if not (np.isfinite(num) and np.isfinite(an[i])):
                    raise NumericDomainError("non-finite value during gradient check")
                err = abs(an[i] - num) / (abs(an[i]) + abs(num) + 1e-12)
                worst = max(worst, float(err))
        return worst
    finally:
        for t, fl in zip(xs, flags):
            t.requires_grad = fl
            t.grad = None


def _value(f, x, xs) -> float:
    y = f(x) if isinstance(x, Tensor) else f(*xs)
    return float(np.asarray(y.data).reshape(-1)[0])


def no_grad_params(params: Iterable[Tensor]) -> None:
    for p in params:
        p.requires_grad = False
