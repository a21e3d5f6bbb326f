"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything learned in this package flows through :class:`Tensor`. Tensors are
numpy ``float64`` arrays plus an optional tape record (parents + a closure
computing parent gradients). Ops are eager; calling an op both computes values
and, when any input requires gradients, extends the tape. ``backward`` walks
the tape in reverse topological order.

Tensors are immutable after construction as far as the public API is
concerned: ops never write into their inputs, so evaluation is reentrant and
safe to run concurrently on disjoint inputs. Gradients accumulate into the
``grad`` attribute of the tensors participating in one ``backward`` call;
don't share a live backward pass across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AutodiffError",
    "ShapeMismatchError",
    "UnboundLeafError",
    "NonFiniteError",
    "ExpressionGraph",
    "evaluate",
    "backward",
    "gradient_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "bce_with_logits",
    "tensor_sum",
    "tensor_mean",
    "concat",
    "slice_axis",
    "take_rows",
    "scatter_mean",
    "reshape",
    "transpose",
    "conv3d",
    "layer_norm",
]


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeMismatchError(AutodiffError):
    """Raised when an op's input shapes are inconsistent; names the op."""

    def __init__(self, node: str, detail: str):
        self.node = node
        super().__init__(f"shape mismatch in '{node}': {detail}")


class UnboundLeafError(AutodiffError):
    """Raised when a graph evaluation is missing a leaf binding."""

    def __init__(self, leaf: str):
        self.leaf = leaf
        super().__init__(f"unbound leaf '{leaf}'")


class NonFiniteError(AutodiffError):
    """Raised by gradient_check when a value or derivative is not finite."""

    def __init__(self, coordinate: int, what: str):
        self.coordinate = coordinate
        super().__init__(f"non-finite {what} at coordinate {coordinate}")


class Tensor:
    """Dense n-d double-precision array, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars / arrays auto-wrap as constants.
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

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Populates ``grad`` on every ``requires_grad`` tensor reachable from
        this one. Grad arrays always match the tensor's shape.
        """
        if self.shape != ():
            raise ShapeMismatchError("backward", f"output must be scalar, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs from long training loops exceed the recursion limit.
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(node: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(node, f"{a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _make(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    return _make(
        a.values / b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bwd)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |x|.

    value = max(x, 0) - x*t + log(1 + exp(-|x|)); d/dx = sigmoid(x) - t.
    Targets are treated as constants.
    """
    if logits.shape != targets.shape:
        raise ShapeMismatchError("bce_with_logits", f"{logits.shape} vs {targets.shape}")
    x = logits.values
    t = targets.values
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-x))
        return (g * (s - t), None)

    return _make(out, (logits, targets), bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.values.ndim)

    def bwd(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _make(a.values.sum(axis=axes if axes else None), (a,), bwd)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.values.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def bwd(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded, a.shape) / count,)

    return _make(a.values.mean(axis=axes if axes else None), (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeMismatchError("concat", "no inputs")
    try:
        values = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError("concat", str(exc)) from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(values, ts, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    key = [slice(None)] * a.values.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)

    def bwd(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _make(a.values[key].copy(), (a,), bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.values[idx], (a,), bwd)


def scatter_mean(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Per-segment mean of rows; empty segments come out as zero rows."""
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape != (a.shape[0],):
        raise ShapeMismatchError("scatter_mean", f"{ids.shape} ids for {a.shape[0]} rows")
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    sums = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(sums, ids, a.values)
    safe = np.maximum(counts, 1.0)
    out = sums / safe.reshape((-1,) + (1,) * (a.values.ndim - 1))

    def bwd(g):
        per_row = g / safe.reshape((-1,) + (1,) * (g.ndim - 1))
        return (per_row[ids],)

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeMismatchError("reshape", f"{a.shape} -> {shape}")
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeMismatchError("transpose", f"needs a matrix, got shape {a.shape}")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", f"{a.shape} @ {b.shape}")
    return _make(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


# ---------------------------------------------------------------------------
# conv / norm


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense 3x3x3 convolution, stride 1, zero padding (SAME).

    x: (g1, g2, g3, Cin); weight: (3, 3, 3, Cin, Cout); bias: (Cout,).
    """
    if x.values.ndim != 4:
        raise ShapeMismatchError("conv3d", f"input must be 4-d, got {x.shape}")
    if weight.shape[:3] != (3, 3, 3) or weight.shape[3] != x.shape[3]:
        raise ShapeMismatchError("conv3d", f"weight {weight.shape} vs input {x.shape}")
    if bias.shape != (weight.shape[4],):
        raise ShapeMismatchError("conv3d", f"bias {bias.shape} vs Cout {weight.shape[4]}")
    g1, g2, g3, _ = x.shape
    padded = np.pad(x.values, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.tile(bias.values, (g1, g2, g3, 1)).astype(np.float64)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                patch = padded[dx : dx + g1, dy : dy + g2, dz : dz + g3, :]
                out += patch @ weight.values[dx, dy, dz]

    def bwd(g):
        gx_pad = np.zeros_like(padded)
        gw = np.zeros(weight.shape)
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    patch = padded[dx : dx + g1, dy : dy + g2, dz : dz + g3, :]
                    gw[dx, dy, dz] = np.einsum("xyzc,xyzd->cd", patch, g)
                    gx_pad[dx : dx + g1, dy : dy + g2, dz : dz + g3, :] += g @ weight.values[dx, dy, dz].T
        gb = g.sum(axis=(0, 1, 2))
        return (gx_pad[1:-1, 1:-1, 1:-1, :], gw, gb)

    return _make(out, (x, weight, bias), bwd)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, with optional learned gain/bias."""
    d = x.shape[-1]
    if gain is not None and gain.shape != (d,):
        raise ShapeMismatchError("layer_norm", f"gain {gain.shape} vs feature dim {d}")
    if bias is not None and bias.shape != (d,):
        raise ShapeMismatchError("layer_norm", f"bias {bias.shape} vs feature dim {d}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    gv = gain.values if gain is not None else 1.0
    out = norm * gv
    if bias is not None:
        out = out + bias.values

    parents = [x] + ([gain] if gain is not None else []) + ([bias] if bias is not None else [])

    def bwd(g):
        gy = g * gv
        # d/dx of (x - mu) * inv with mu, var functions of x.
        gnorm_mean = gy.mean(axis=-1, keepdims=True)
        gnorm_norm_mean = (gy * norm).mean(axis=-1, keepdims=True)
        gx = inv * (gy - gnorm_mean - norm * gnorm_norm_mean)
        grads: list[np.ndarray | None] = [gx]
        if gain is not None:
            grads.append((g * norm).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# named expression graphs


@dataclass(frozen=True)
class ExpressionGraph:
    """A reusable expression: declared leaves plus a builder function.

    The builder receives bound leaf tensors by name and returns named output
    tensors; calling it traces the op tape for that evaluation. Graphs are
    immutable; each evaluation is independent.
    """

    leaves: tuple[str, ...]
    build: Callable[[dict[str, Tensor]], dict[str, Tensor]]


def evaluate(graph: ExpressionGraph, bindings: dict[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate every output of the graph for the given leaf bindings."""
    for leaf in graph.leaves:
        if leaf not in bindings:
            raise UnboundLeafError(leaf)
    return graph.build(bindings)


def backward(graph: ExpressionGraph, bindings: dict[str, Tensor], output: str) -> dict[str, np.ndarray]:
    """Gradients of a scalar graph output w.r.t. every requires_grad leaf.

    Leaves not reachable from the output get zero gradients.
    """
    for leaf in graph.leaves:
        if leaf not in bindings:
            raise UnboundLeafError(leaf)
    for t in bindings.values():
        t.zero_grad()
    outputs = graph.build(bindings)
    if output not in outputs:
        raise KeyError(f"graph has no output named '{output}'")
    out = outputs[output]
    out.backward()
    grads: dict[str, np.ndarray] = {}
    for leaf in graph.leaves:
        t = bindings[leaf]
        if t.requires_grad:
            grads[leaf] = t.grad if t.grad is not None else np.zeros(t.shape)
    return grads


def gradient_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|,
    |numeric|); the max over coordinates is returned.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    x = Tensor(point.values.copy(), requires_grad=True)
    out = f(x)
    if out.shape != ():
        raise ShapeMismatchError("gradient_check", f"f must return a scalar, got {out.shape}")
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros(x.shape)).ravel()

    flat = point.values.ravel().copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(Tensor(flat.reshape(point.shape))).item()
        flat[i] = orig - epsilon
        lo = f(Tensor(flat.reshape(point.shape))).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(i, "function value")
        numeric[i] = (hi - lo) / (2.0 * epsilon)

    worst = 0.0
    for i in range(flat.size):
        if not np.isfinite(analytic[i]):
            raise NonFiniteError(i, "analytic gradient")
        denom = max(1.0, abs(analytic[i]), abs(numeric[i]))
        worst = max(worst, abs(analytic[i] - numeric[i]) / denom)
    return worst
