"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value eagerly with numpy and, when any
input participates in differentiation, records a closure that maps the
upstream gradient to one gradient per input.  :func:`backward` replays those
closures in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional array that may take part in gradient computation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        """Wrap the result of a primitive; the tape entry is kept only if needed."""
        out = cls(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ----------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(out, (a, b), backward)


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == a.ndim - 1 and a.shape[1:] == b.shape:
        return "row"
    raise DimensionError(f"{op}: shape {b.shape} does not broadcast against {a.shape}")


def _elementwise(op: str, a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        # python scalar constant
        c = float(b)
        if op == "add":
            return Tensor.from_op(a.data + c, (a,), lambda g: (g,))
        if op == "sub":
            return Tensor.from_op(a.data - c, (a,), lambda g: (g,))
        return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))

    kind = _broadcast_kind(op, a, b)

    def reduce_b(gb):
        return gb.sum(axis=0) if kind == "row" else gb

    if op == "add":
        out = a.data + b.data
        backward = lambda g: (g, reduce_b(g))
    elif op == "sub":
        out = a.data - b.data
        backward = lambda g: (g, reduce_b(-g))
    elif op == "mul":
        out = a.data * b.data
        backward = lambda g: (g * b.data, reduce_b(g * a.data))
    else:
        raise ContractError(f"unknown elementwise op {op!r}")
    return Tensor.from_op(out, (a, b), backward)


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """``op`` in {add, sub, mul}; ``b`` may be same-shaped, a single row
    broadcast over the leading axis of ``a``, or a python scalar."""
    return _elementwise(op, a, b)


def add(a: Tensor, b) -> Tensor:
    return _elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return _elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return _elementwise("mul", a, b)


def _check_axis(a: Tensor, axis):
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ContractError(f"axis {axis} out of range for rank {a.ndim}")


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    if op == "sum":
        scale = 1.0
    elif op == "mean":
        scale = 1.0 / (a.size if axis is None else a.shape[axis])
    else:
        raise ContractError(f"unknown reduction {op!r}")
    out = a.data.sum(axis=axis) * a.data.dtype.type(scale)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, a.shape).astype(a.dtype),)

    return Tensor.from_op(np.asarray(out, dtype=a.dtype), (a,), backward)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return reduce("mean", a, axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return Tensor.from_op(out, (a,), backward)


# ----------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every differentiable ancestor of ``root``.

    Gradients of all tensors reached from ``root`` are reset before
    accumulation, so calling this twice gives the same result as once.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward() root does not depend on any differentiable tensor")
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad += g


# ----------------------------------------------------------------------------
# finite-difference oracle


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(f: Callable[[], float], arrays: Iterable[np.ndarray], step: float) -> list[np.ndarray]:
    """Central differences of ``f`` with respect to each array, perturbing in
    place and restoring the original value afterwards."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing coordinate {i}")
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central finite differences.  ``x`` itself is left untouched."""
    if step <= 0:
        raise ContractError("step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("f(x) is not finite")
    backward(out)
    analytic = probe.grad.copy()

    work = x.data.copy()

    def evaluate():
        return float(f(Tensor(work, dtype=work.dtype)).data.reshape(-1)[0])

    (numeric,) = numeric_gradient(evaluate, [work], step)
    return _relative_error(analytic, numeric)


def check_parameter_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                              step: float = 1e-6) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against several parameter
    tensors at once; returns the max relative error per parameter."""
    out = loss_fn()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("loss is not finite")
    backward(out)
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_gradient(lambda: float(loss_fn().data.reshape(-1)[0]), [p.data for p in params], step)
    return {
        (p.name or f"param{i}"): _relative_error(a, n)
        for i, (p, a, n) in enumerate(zip(params, analytic, numeric))
    }
