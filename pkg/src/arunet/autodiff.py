"""Reverse-mode differentiation over an explicitly recorded tape.

Operations append nodes in execution order, so the tape is topologically
sorted by construction and backward is a single reverse sweep. A parameter
used in several places receives the sum of all its contributions, which the
attention module's shared MLP relies on; calling backward again without a
reset adds the same gradients a second time. One tape serves one training
step and is single-threaded; independent tapes may run on separate threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

__all__ = [
    "Parameter",
    "Node",
    "Tape",
    "backward",
    "FiniteDiffReport",
    "finite_diff_check",
]


class Parameter:
    """Named leaf tensor with a same-shaped gradient accumulator."""

    __slots__ = ("name", "_value", "grad", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool = True):
        self.name = name
        self._value = value
        self.trainable = trainable
        self.grad = np.zeros(value.dims, dtype=value.dtype)

    @property
    def value(self) -> Tensor:
        return self._value

    def assign(self, value: Tensor):
        if value.dims != self._value.dims:
            raise ShapeError(f"{self.name}: cannot assign shape {value.dims} "
                             f"over {self._value.dims}")
        if value.dtype != self._value.dtype:
            raise ShapeError(f"{self.name}: cannot assign float{value.precision} "
                             f"over float{self._value.precision}")
        self._value = value

    def zero_grad(self):
        self.grad = np.zeros(self._value.dims, dtype=self._value.dtype)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self._value.dims})"


class Node:
    """One recorded operation: its output value and its backward rule."""

    __slots__ = ("tape", "value", "parents", "backward_fn", "op", "requires_grad",
                 "index", "grad")

    def __init__(self, tape, value, parents, backward_fn, op, requires_grad, index):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.index = index
        self.grad = None

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.dims})"


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, tuple[Parameter, Node]] = {}

    def record(self, op: str, value: Tensor, parents: tuple[Node, ...],
               backward_fn) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, parents, backward_fn, op, requires, len(self.nodes))
        self.nodes.append(node)
        return node

    def constant(self, value: Tensor) -> Node:
        """Leaf that participates in the forward pass but receives no gradient."""
        node = Node(self, value, (), None, "constant", False, len(self.nodes))
        self.nodes.append(node)
        return node

    def input(self, value: Tensor) -> Node:
        """Leaf whose gradient is kept, for gradient checks on inputs."""
        node = Node(self, value, (), None, "input", True, len(self.nodes))
        self.nodes.append(node)
        return node

    def watch(self, param: Parameter) -> Node:
        """Leaf for a parameter; one shared node per parameter per tape."""
        key = id(param)
        hit = self._watched.get(key)
        if hit is not None:
            return hit[1]
        node = Node(self, param.value, (), None, f"param:{param.name}",
                    param.trainable, len(self.nodes))
        self.nodes.append(node)
        self._watched[key] = (param, node)
        return node


def backward(loss: Node):
    """Accumulate d(loss)/d(param) into every reachable Parameter's grad.

    The loss must be scalar-shaped. Node gradients are cleared afterwards,
    so a second call without zero_grad adds the same contributions again.
    """
    tape = loss.tape
    if not tape.nodes:
        raise ConfigError("backward on an empty tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar-shaped, got {loss.value.dims}")
    loss.grad = np.ones(loss.value.dims, dtype=loss.value.dtype)
    # Non-finite gradients are legal here; Adam and the FD harness check them.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in reversed(tape.nodes[: loss.index + 1]):
            if node.grad is None or not node.requires_grad:
                continue
            if not node.parents:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                # Accumulation always allocates; rules may share arrays.
                parent.grad = g if parent.grad is None else parent.grad + g
    watched_leaves = set()
    for param, leaf in tape._watched.values():
        watched_leaves.add(id(leaf))
        if leaf.grad is not None:
            param.grad = param.grad + leaf.grad
    # Interior and parameter-leaf grads reset so a second backward adds the
    # same contributions once more; input-leaf grads stay readable (and
    # accumulate across calls, mirroring Parameter semantics).
    for node in tape.nodes[: loss.index + 1]:
        if node.parents or id(node) in watched_leaves:
            node.grad = None


@dataclass
class FiniteDiffReport:
    """Outcome of comparing analytic gradients with central differences."""

    passed: bool
    tol: float
    max_rel_error: float
    worst_coord: tuple[int, ...] | None = None
    analytic_at_worst: float = 0.0
    numeric_at_worst: float = 0.0
    nan_coords: list[tuple[int, ...]] = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        msg = f"{status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e})"
        if self.worst_coord is not None:
            msg += (f" at {self.worst_coord}: analytic {self.analytic_at_worst:.6e}"
                    f" vs fd {self.numeric_at_worst:.6e}")
        if self.nan_coords:
            msg += f"; NaN probes at {self.nan_coords[:4]}"
        return msg


def _eval_scalar(f, at: Tensor) -> float:
    tape = Tape()
    node = f(tape, tape.input(at))
    if node.value.size != 1:
        raise ShapeError(f"finite_diff_check target must be scalar, got {node.value.dims}")
    return node.value.item()


def finite_diff_check(f, at: Tensor, tol: float = 1e-4,
                      step: float = 1e-4) -> FiniteDiffReport:
    """Compare analytic gradients of f at `at` with central differences.

    f must be a pure function (tape, input node) -> scalar node, evaluated
    in 64-bit mode. The step is scaled per coordinate by |value| + 1. The
    relative discrepancy uses max(|analytic|, |numeric|, 1e-6) as the
    denominator so near-zero gradients are compared absolutely.
    """
    if at.precision != 64:
        raise ConfigError("finite_diff_check requires 64-bit tensors")
    tape = Tape()
    x = tape.input(at)
    loss = f(tape, x)
    if loss.value.size != 1:
        raise ShapeError(f"finite_diff_check target must be scalar, got {loss.value.dims}")
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros(at.dims, dtype=at.dtype)
    analytic = np.asarray(analytic).reshape(at.dims)

    base = at.data.ravel()
    flat_analytic = analytic.ravel()
    max_rel = 0.0
    worst = None
    worst_pair = (0.0, 0.0)
    nan_coords: list[tuple[int, ...]] = []
    for i in range(base.size):
        h = step * (abs(float(base[i])) + 1.0)
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        try:
            fp = _eval_scalar(f, Tensor(plus.reshape(at.dims), precision=64))
            fm = _eval_scalar(f, Tensor(minus.reshape(at.dims), precision=64))
        except NumericError:
            # The engine refuses to build non-finite tensors, so a NaN/Inf
            # met while probing surfaces here; report the coordinate.
            nan_coords.append(at.shape.coords(i))
            continue
        if not (np.isfinite(fp) and np.isfinite(fm)):
            nan_coords.append(at.shape.coords(i))
            continue
        fd = (fp - fm) / (2.0 * h)
        a = float(flat_analytic[i])
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        if rel > max_rel:
            max_rel = rel
            worst = at.shape.coords(i)
            worst_pair = (a, fd)
    passed = (max_rel < tol) and not nan_coords
    return FiniteDiffReport(passed=passed, tol=tol, max_rel_error=max_rel,
                            worst_coord=worst, analytic_at_worst=worst_pair[0],
                            numeric_at_worst=worst_pair[1], nan_coords=nan_coords)
