"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record `TapeNode`s on a per-graph tape (nodes link to their
input tensors, so independent graphs share no state). `backward` walks the
graph once in reverse topological order and writes `.grad` on every tensor
that requires gradients, accumulating additively across fan-out.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or the smaller shape must be a trailing suffix of the larger one
(leading-axis batch broadcast). Anything else is a shape error.

The spike threshold is the one non-smooth operation: `heaviside_surrogate`
computes an exact binary step forward and registers a rectangular (boxcar)
pseudo-derivative backward, so threshold crossings stay trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation."""


class TapeNode:
    """One recorded operation: inputs, op id, and its backward rule.

    Saved forward context (anything the backward rule needs) lives in the
    closure of `backward_fn`. `backward_fn(grad_out)` returns one gradient
    array (or None) per input, already shaped like that input.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, severed from the tape (constant from here on)."""
        return Tensor(self.values)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, values: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn) -> Tensor:
    out = Tensor(values)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def custom_op(op: str, inputs: Sequence[Tensor], values: np.ndarray,
              backward_fn) -> Tensor:
    """Record an operation with a hand-written backward rule.

    Layers use this for kernels that are cheaper fused (convolution,
    sequence reversal, CTC) than as chains of primitives.
    """
    return _result(op, values, tuple(inputs), backward_fn)


# ---------------------------------------------------------------------------
# broadcasting helpers (equal shapes or trailing-suffix broadcast only)

def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeMismatchError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------------------
# primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.values + b.values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.values - b.values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _result("mul", av * bv, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if bv.ndim != 2 or av.ndim not in (2, 3):
        raise ShapeMismatchError(
            f"matmul: unsupported ranks {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ bv.T
        if av.ndim == 2:
            gb = av.T @ g
        else:
            gb = np.einsum("bti,bto->io", av, g)
        return ga, gb

    return _result("matmul", av @ bv, (a, b), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.values)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result("sigmoid", y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result("tanh", y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    av = a.values

    def backward(g):
        return (g * (av > 0.0),)

    return _result("relu", np.maximum(av, 0.0), (a,), backward)


def log(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av <= 0.0):
        raise DomainError("log: input must be strictly positive")

    def backward(g):
        return (g / av,)

    return _result("log", np.log(av), (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)

    def backward(g):
        return (g * y,)

    return _result("exp", y, (a,), backward)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        gk = np.asarray(g)
        if not keepdims:
            shape = list(in_shape)
            for ax in axes:
                shape[ax] = 1
            gk = gk.reshape(shape)
        return (np.broadcast_to(gk, in_shape).copy(),)

    return _result("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    s = sum(a, axis=axes, keepdims=keepdims)
    return mul(s, Tensor(1.0 / count))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeMismatchError(f"transpose: needs ndim >= 2, got {a.shape}")
    y = np.swapaxes(a.values, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _result("transpose", y, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat: no inputs")
    ndim = parts[0].ndim
    axis = axis % ndim
    for p in parts:
        if p.ndim != ndim:
            raise ShapeMismatchError("concat: rank mismatch")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    values = np.concatenate([p.values for p in parts], axis=axis)
    return _result("concat", values, tuple(parts), backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof) with scatter backward."""
    av = a.values
    out = av[key]
    in_shape = a.shape

    def backward(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[key] = g
        return (gx,)

    return _result("slice", out, (a,), backward)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul-elementwise": mul,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "transpose": transpose,
    "concat": concat,
    "slice": slice_,
}


def eval_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (the stable operation vocabulary)."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# spike threshold with rectangular pseudo-derivative

@dataclass(frozen=True)
class SurrogateSpec:
    """Threshold step forward, boxcar pseudo-derivative backward.

    The backward pass multiplies incoming gradients by `slope` wherever the
    membrane potential is within `half_width` of `threshold` (boundary
    included) and by zero elsewhere.
    """

    threshold: float = 1.0
    half_width: float = 0.5
    slope: float = 0.5

    def __post_init__(self):
        if not self.half_width > 0.0:
            raise ValueError("half_width must be > 0")
        if self.slope < 0.0:
            raise ValueError("slope must be >= 0")


def heaviside_surrogate(u: Tensor, spec: SurrogateSpec) -> Tensor:
    uv = u.values
    spikes = np.where(uv >= spec.threshold, 1.0, 0.0)
    window = np.abs(uv - spec.threshold) <= spec.half_width

    def backward(g):
        return (g * (spec.slope * window),)

    return _result("heaviside_surrogate", spikes, (u,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax along `axis`."""
    av = a.values
    shifted = av - av.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", y, (a,), backward)


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Deterministic: repeated calls on the same graph overwrite gradients
    with bitwise-identical values.
    """
    if loss.values.size != 1:
        raise ShapeMismatchError(
            f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for tensor in reversed(order):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.requires_grad:
            tensor.grad = g
        node = tensor.node
        if node is None:
            continue
        input_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor,
                      epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map one tensor to a scalar through smooth operations only;
    threshold nodes have no meaningful finite-difference signal.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    probe = Tensor(point.values.copy(), requires_grad=True)
    out = f(probe)
    if out.values.size != 1:
        raise ShapeMismatchError("finite_diff_check: f must return a scalar")
    backward(out)
    analytic = probe.grad
    assert analytic is not None
    worst = 0.0
    base = point.values
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] = base[idx] + epsilon
        hi = f(Tensor(bumped)).item()
        bumped[idx] = base[idx] - epsilon
        lo = f(Tensor(bumped)).item()
        numeric = (hi - lo) / (2.0 * epsilon)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        worst = max(worst, err)
    return worst
