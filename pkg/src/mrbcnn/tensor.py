"""Dense float64 tensors with a small reverse-mode autodiff graph.

A :class:`Tensor` wraps a C-contiguous float64 ``numpy`` array.  Operations
that take a tensor requiring gradients return a new tensor that remembers its
parents and a backward rule; :func:`backward` walks that implicit graph in
reverse topological order.  Broadcasting is limited to scalar-tensor
arithmetic; every other shape change is explicit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """An immutable n-d array of 64-bit reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, name or "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, f"output of {op}")
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out.name = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return add(a, -float(b))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, float(b))
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# --- reductions and shape ----------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(np.sum(x.data), (x,), lambda g: (np.full(shape, np.reshape(g, ())),), "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,), "transpose")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous window ``start:stop`` along one axis."""
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start},{stop}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._from_op(x.data[idx], (x,), back, "slice")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor._from_op(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    xs = list(xs)
    if not xs:
        raise ContractError("stack of an empty list")
    for t in xs[1:]:
        _same_shape(xs[0], t, "stack")
    return Tensor._from_op(
        np.stack([t.data for t in xs]), xs, lambda g: tuple(g[i] for i in range(len(xs))), "stack"
    )


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# --- graph traversal ---------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every leaf that requires gradients.

    Returns a map from leaf tensor to gradient array and also stores each
    gradient on the leaf's ``grad`` attribute (replacing any previous value).
    A root that does not depend on any trainable leaf yields an empty map.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise DimensionError(f"backward of {node._op} produced {pg.shape} for input {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


def grad_of(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to ``wrt`` (zeros where unreachable)."""
    gm = backward(root)
    return [gm.get(t, np.zeros(t.shape)) for t in wrt]


# --- finite differences -----------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], object], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` receives a fresh constant :class:`Tensor` per evaluation and may
    return a Tensor or a float.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(flat.size)

    def call(arr):
        v = f(Tensor(arr.reshape(base.shape)))
        v = float(v.item() if isinstance(v, Tensor) else v)
        if not np.isfinite(v):
            raise NonFiniteError("finite-difference oracle hit a non-finite function value")
        return v

    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        out[i] = (call(xp) - call(xm)) / (2.0 * eps)
    return out.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise relative error, with a floor tied to the gradient scale.

    Entries are compared as ``|a - n| / max(|a|, |n|, floor)`` where the floor
    is ``1e-3`` times the largest magnitude in ``numeric`` (plus ``1e-12``), so
    near-zero coordinates dominated by differencing noise are not amplified.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes {a.shape} and {n.shape} differ")
    if a.size == 0:
        return 0.0
    floor = 1e-3 * float(np.max(np.abs(n))) + 1e-12
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
