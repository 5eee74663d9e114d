"""Reverse-mode autodiff tape over numpy arrays.

Single-sample, single-threaded by design: a forward pass builds a DAG of
`Tensor` nodes, `backward()` walks it once in reverse topological order.
Gradients are kept only on leaves (parameters and explicitly created
tensors); intermediate grads are freed as soon as they have been consumed.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray):
            if dtype is not None and data.dtype != dtype:
                data = data.astype(dtype)
            elif data.dtype not in (np.float32, np.float64):
                data = data.astype(DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # ------------------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p._backward is not None or p.requires_grad):
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward
            if fn is not None:
                if node.grad is not None:
                    fn(node.grad)
                node.grad = None  # free intermediate grads; leaves keep theirs

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable tensor with a stable name path and a freeze switch.

    Freezing clears ``requires_grad`` so frozen parameters drop out of the
    graph entirely: their reported gradient is identically zero and the
    optimizer never touches them.
    """

    __slots__ = ("_frozen",)

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool):
        self._frozen = bool(value)
        self.requires_grad = not self._frozen


# ---------------------------------------------------------------------------
# op plumbing


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    out.name = None
    return out


def _plain(data):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.name = None
    return out


def _tracked(*tensors) -> bool:
    if not _grad_enabled:
        return False
    for t in tensors:
        if t.requires_grad or t._backward is not None:
            return True
    return False


def accumulate_grad(t: Tensor, g: np.ndarray):
    if t.requires_grad or t._backward is not None:
        if t.grad is None:
            t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data + b.data
    if not _tracked(a, b):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data - b.data
    if not _tracked(a, b):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bv = np.asarray(b, dtype=a.dtype)
        data = a.data * bv
        if not _tracked(a):
            return _plain(data)

        def backward_scalar(g):
            accumulate_grad(a, _unbroadcast(g * bv, a.data.shape))

        return _make(data, (a,), backward_scalar)

    data = a.data * b.data
    if not _tracked(a, b):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data / b.data
    if not _tracked(a, b):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g / b.data, a.data.shape))
        accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    data = -a.data
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, -g)

    return _make(data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, g * data)

    return _make(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, g / a.data)

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    data = a.data * s
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, g * 0.5 / data)

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)
    if not _tracked(a):
        return _plain(data)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)

    def backward(g):
        accumulate_grad(a, g * inside)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions / shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return _plain(np.asarray(data))

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(gg, ax)
        accumulate_grad(a, np.broadcast_to(gg, a.data.shape))

    return _make(np.asarray(data), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    if not _tracked(a):
        return _plain(data)

    def backward(g):
        accumulate_grad(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)
    if not _tracked(a):
        return _plain(data)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        accumulate_grad(a, g.transpose(inv))

    return _make(data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    if not _tracked(a):
        return _plain(np.asarray(data))

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        accumulate_grad(a, buf)

    return _make(np.asarray(data), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return _plain(data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            accumulate_grad(t, g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data
    if not _tracked(a, b):
        return _plain(data)

    def backward(g):
        av, bv = a.data, b.data
        if av.ndim == 1 and bv.ndim >= 2:  # vector @ matrix
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = av[:, None] * (g[None, :] if g.ndim == 1 else g)
        elif bv.ndim == 1 and av.ndim >= 2:  # matrix @ vector
            ga = g[..., None] * bv
            gb = np.swapaxes(av, -1, -2) @ g
        elif av.ndim == 1 and bv.ndim == 1:  # dot product
            ga = g * bv
            gb = g * av
        else:
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
        accumulate_grad(a, _unbroadcast(ga, av.shape))
        accumulate_grad(b, _unbroadcast(gb, bv.shape))

    return _make(data, (a, b), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; scatter-add on the way back."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]
    if not _tracked(table):
        return _plain(data)

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        accumulate_grad(table, buf)

    return _make(data, (table,), backward)
