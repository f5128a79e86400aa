"""Dense tensors with reverse-mode automatic differentiation.

Every value in the model (activations, parameters, losses) is a ``Tensor``
wrapping a numpy array.  Operations record how they were computed; calling
``backward`` on a scalar result walks the recorded graph in reverse creation
order and accumulates gradients into every tensor that requires them.

Float32 is the working precision; pass ``dtype=np.float64`` wherever extra
headroom is needed (gradient checking runs in 64-bit only).
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

_seq = itertools.count()

# When False, ops skip recording backward closures (inference fast path).
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-dimensional array with an optional gradient.

    Activations follow the (batch, channels, height, width) layout.  A tensor
    created by an operation carries the operation name, references to its
    inputs and a closure implementing the backward rule; leaves carry none.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "_backward",
                 "_seq_id", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: Optional[str] = None,
                 inputs: Sequence["Tensor"] = (),
                 backward_fn: Optional[Callable] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.inputs = tuple(inputs)
        self._backward = backward_fn
        self._seq_id = next(_seq)
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # -- graph plumbing ------------------------------------------------------

    def _needs_graph(self) -> bool:
        return self.requires_grad or self._backward is not None

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every tensor this scalar depends on.

        Gradients of independent paths accumulate by summation.  Calling
        backward twice on the same result is rejected: it would silently
        double-accumulate into leaf gradients.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError(
                "backward already ran for this tensor; re-run the forward pass")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for t in order:
            if t._backward is None:
                continue
            grads = t._backward(t.grad)
            for inp, g in zip(t.inputs, grads):
                if g is None or not inp._needs_graph():
                    continue
                if inp.grad is None:
                    inp.grad = g.astype(inp.data.dtype, copy=False)
                else:
                    inp.grad = inp.grad + g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return reduce_sum(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _toposort(root: Tensor) -> list[Tensor]:
    # Reverse creation order restricted to the reachable subgraph is a valid
    # reverse topological order: inputs always predate their consumers.
    seen = {id(root): root}
    stack = [root]
    while stack:
        t = stack.pop()
        for inp in t.inputs:
            if id(inp) not in seen:
                seen[id(inp)] = inp
                stack.append(inp)
    return sorted(seen.values(), key=lambda t: t._seq_id, reverse=True)


def make_op(data: np.ndarray, op: str, inputs: Sequence[Tensor],
            backward_fn: Callable) -> Tensor:
    """Wrap an operation result, recording the backward rule when needed."""
    if _grad_enabled and any(t._needs_graph() for t in inputs):
        return Tensor(data, op=op, inputs=inputs, backward_fn=backward_fn)
    return Tensor(data)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# -- elementwise ops (no broadcasting beyond python scalars) -----------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return make_op(a.data + s, "add_scalar", (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return make_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return make_op(a.data - s, "sub_scalar", (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return make_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_op(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        return (g * (ad > 0),)  # subgradient at 0 is 0

    return make_op(np.maximum(ad, 0), "relu", (a,), backward)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return make_op(np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(()),
                 "sum", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return make_op(a.data.reshape(shape), "reshape", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner extents differ, {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T, ad.T @ g)

    return make_op(ad @ bd, "matmul", (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise ValueError(
                f"concat: incompatible shapes {[d.shape for d in datas]}")
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate(datas, axis=axis), "concat", tuple(tensors),
                 backward)


# -- gradient checking --------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            epsilon: float = 1e-5,
                            max_elements: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.  Runs in
    64-bit only; the returned value is the maximum over checked elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  When
    ``max_elements`` is given, a deterministic random subset of coordinates is
    checked instead of every element (needed for large inputs, where a full
    sweep of 2 forward passes per element is unaffordable).
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_difference_check requires a float64 tensor")
    if not (1e-6 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    out.backward()
    analytic = probe.grad.reshape(-1).copy()

    n = x.data.size
    if max_elements is not None and max_elements < n:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(n, size=max_elements, replace=False)
    else:
        idx = np.arange(n)

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in idx:
            bumped = flat.copy()
            bumped[i] = flat[i] + epsilon
            hi = f(Tensor(bumped.reshape(x.data.shape), dtype=np.float64)).item()
            bumped[i] = flat[i] - epsilon
            lo = f(Tensor(bumped.reshape(x.data.shape), dtype=np.float64)).item()
            numeric = (hi - lo) / (2.0 * epsilon)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
