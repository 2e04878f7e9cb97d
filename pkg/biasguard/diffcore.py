"""Reverse-mode differentiation over dense float64 tensors, Adam, and a finite-difference oracle.

Every primitive writes its vector-Jacobian product with other primitives, so the
gradient graph is itself differentiable (``grad(..., create_graph=True)``).
"""
import itertools
import logging
import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from biasguard import config
from biasguard.errors import ContractViolation, DimensionError, NumericalFailure

logger = logging.getLogger(__name__)

_STATE = threading.local()
_UIDS = itertools.count()


def _recording() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    previous = _recording()
    _STATE.enabled = enabled
    try:
        yield
    finally:
        _STATE.enabled = previous


def no_grad():
    """Context in which operations record no parents."""
    return _grad_mode(False)


def enable_grad():
    """Context that re-enables recording inside a no_grad block."""
    return _grad_mode(True)


@dataclass(frozen=True)
class OpEntry:
    """One primitive application inside a ComputationRecord."""
    op: str
    inputs: Tuple[int, ...]
    output: int


class Tensor:
    """Immutable dense float64 array that remembers how it was produced."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "uid", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure("tensor constructed with non-finite values", primitive="leaf")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: Tuple["Tensor", ...] = ()
        self.vjp: Optional[Callable] = None
        self.op = "leaf"
        self.uid = next(_UIDS)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _const(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def _const(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    t.data = arr
    t.requires_grad = False
    t.parents = ()
    t.vjp = None
    t.op = "const"
    t.uid = next(_UIDS)
    return t


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap a value as a constant Tensor; Tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(op: str, out: np.ndarray, parents: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure(f"primitive '{op}' produced a non-finite value", primitive=op)
    t = Tensor.__new__(Tensor)
    if out.flags.writeable:
        out.setflags(write=False)
    t.data = out
    tracked = _recording() and any(p.requires_grad for p in parents)
    t.requires_grad = tracked
    t.parents = parents if tracked else ()
    t.vjp = vjp if tracked else None
    t.op = op
    t.uid = next(_UIDS)
    tape = getattr(_STATE, "tape", None)
    if tape is not None:
        tape.append(OpEntry(op, tuple(p.uid for p in parents), t.uid))
    return t


def _unbroadcast(g: Tensor, shape: Tuple[int, ...]) -> Tensor:
    while g.ndim > len(shape):
        g = sum_(g, axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = sum_(g, axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(mul(g, -1.0), b.shape) if needs[1] else None)
    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)
    return _make("mul", a.data * b.data, (a, b), vjp)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def vjp(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)
    return _make("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g, needs):
        return (transpose(g),)
    return _make("transpose", a.data.T, (a,), vjp)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    source = a.shape

    def vjp(g, needs):
        return (reshape(g, source),)
    return _make("reshape", a.data.reshape(tuple(shape)), (a,), vjp)


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = _const((a.data > 0).astype(np.float64))

    def vjp(g, needs):
        return (mul(g, mask),)
    return _make("relu", np.maximum(a.data, 0.0), (a,), vjp)


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        # sigmoid(a) = exp(a - softplus(a))
        return (mul(g, exp(sub(a, out))),)
    out = _make("softplus", np.logaddexp(0.0, a.data), (a,), vjp)
    return out


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, out),)
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    out = _make("exp", value, (a,), vjp)
    return out


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        # 1/a = exp(-log a)
        return (mul(g, exp(mul(out, -1.0))),)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    out = _make("log", value, (a,), vjp)
    return out


def sum_(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    source = a.shape
    kept = np.sum(a.data, axis=axis, keepdims=True).shape

    def vjp(g, needs):
        return (add(reshape(g, kept), _const(np.zeros(source))),)
    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(parts: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(p) for p in parts)
    if not tensors:
        raise ContractViolation("concat of nothing")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(index(g, tuple(key)))
        return tuple(grads)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    return _make("concat", value, tensors, vjp)


def index(a: TensorLike, key: Any) -> Tensor:
    """Basic slicing or row gather; the adjoint scatters back."""
    a = as_tensor(a)
    source = a.shape

    def vjp(g, needs):
        return (_scatter(g, key, source),)
    return _make("slice", a.data[key], (a,), vjp)


def _scatter(g: Tensor, key: Any, shape: Tuple[int, ...]) -> Tensor:
    value = np.zeros(shape)
    np.add.at(value, key, g.data)

    def vjp(gg, needs):
        return (index(gg, key),)
    return _make("scatter", value, (g,), vjp)


def quadform(d: TensorLike, m: TensorLike) -> Tensor:
    """Batched quadratic form: row i of the result is d_i^T m d_i."""
    d, m = as_tensor(d), as_tensor(m)
    if d.ndim != 2 or m.shape != (d.shape[1], d.shape[1]):
        raise DimensionError(f"quadform shapes {d.shape} and {m.shape} disagree")
    n = d.shape[0]

    def vjp(g, needs):
        gcol = reshape(g, (n, 1))
        gd = mul(gcol, matmul(d, add(m, transpose(m)))) if needs[0] else None
        gm = matmul(transpose(mul(d, gcol)), d) if needs[1] else None
        return (gd, gm)
    value = np.einsum("ij,jk,ik->i", d.data, m.data, d.data)
    return _make("quadform", value, (d, m), vjp)


def custom(op: str, value: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Register an operation whose adjoint is supplied by the caller."""
    return _make(op, value, tuple(parents), vjp)


# ----------------------------------------------------------------------------
# Differentiation
# ----------------------------------------------------------------------------

def _topological_order(output: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in visited:
            continue
        visited.add(node.uid)
        stack.append((node, True))
        for parent in node.parents:
            if parent.uid not in visited:
                stack.append((parent, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
         seed: Optional[Tensor] = None) -> List[Tensor]:
    """
    Gradients of ``output`` with respect to each tensor in ``wrt``.

    Args:
        output: Tensor to differentiate (scalar unless ``seed`` is given)
        wrt: Tensors to differentiate against
        create_graph: Record the backward pass so the result can be differentiated again
        seed: Upstream adjoint; defaults to ones

    Returns:
        One gradient per entry of ``wrt``, shape-matched; zeros where unreachable
    """
    order = _topological_order(output)
    targets = {t.uid for t in wrt}
    relevant = set()
    for node in order:
        if node.uid in targets or any(p.uid in relevant for p in node.parents):
            relevant.add(node.uid)

    adjoints: Dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        adjoints[output.uid] = seed if seed is not None else _const(np.ones(output.shape))
        for node in reversed(order):
            g = adjoints.get(node.uid)
            if g is None or node.vjp is None:
                continue
            needs = tuple(p.uid in relevant for p in node.parents)
            if not any(needs):
                continue
            for parent, need, pg in zip(node.parents, needs, node.vjp(g, needs)):
                if not need or pg is None:
                    continue
                prev = adjoints.get(parent.uid)
                adjoints[parent.uid] = pg if prev is None else add(prev, pg)

    result = []
    for t in wrt:
        g = adjoints.get(t.uid)
        if g is None:
            g = _const(np.zeros(t.shape))
        elif not create_graph:
            g = _const(g.data)
        result.append(g)
    return result


class ComputationRecord:
    """
    A traced computation: ``fn`` maps input Tensors to one Tensor or a tuple of them.

    Each trace returns the ordered primitive list it applied; replaying with the
    same inputs reproduces the outputs bit for bit.
    """

    def __init__(self, fn: Callable[..., Any], name: str = "record"):
        self.fn = fn
        self.name = name
        self.ops: List[OpEntry] = []

    def trace(self, inputs: Sequence[Tensor]) -> Tuple[Tuple[Tensor, ...], List[OpEntry]]:
        tape: List[OpEntry] = []
        previous = getattr(_STATE, "tape", None)
        _STATE.tape = tape
        try:
            out = self.fn(*inputs)
        finally:
            _STATE.tape = previous
        outputs = tuple(out) if isinstance(out, (tuple, list)) else (out,)
        self.ops = tape
        return outputs, tape

    def replay(self, inputs: Sequence[TensorLike]) -> Tuple[np.ndarray, ...]:
        with no_grad():
            outputs, _ = self.trace([as_tensor(x) for x in inputs])
        return tuple(o.data for o in outputs)


class GradientResult(NamedTuple):
    loss: float
    gradients: List[Tensor]
    outputs: Tuple[Tensor, ...]


def evaluate_with_gradients(record: ComputationRecord, inputs: Sequence[TensorLike],
                            loss_index: int = 0) -> GradientResult:
    """
    Run a record forward and differentiate the selected scalar output.

    Args:
        record: Computation to evaluate
        inputs: Input values; each becomes a fresh differentiable leaf
        loss_index: Which output is the loss

    Returns:
        GradientResult with the loss value, one gradient per input, and all outputs
    """
    leaves = [Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True) for x in inputs]
    outputs, _ = record.trace(leaves)
    if not 0 <= loss_index < len(outputs):
        raise ContractViolation(f"{record.name}: loss index {loss_index} out of range ({len(outputs)} outputs)")
    loss = outputs[loss_index]
    if loss.size != 1:
        raise ContractViolation(f"{record.name}: selected output has shape {loss.shape}, expected a scalar")
    gradients = grad(loss, leaves)
    return GradientResult(loss.item(), gradients, outputs)


def finite_difference_check(record: ComputationRecord, inputs: Sequence[TensorLike],
                            h: float = 1e-5, loss_index: int = 0, atol: float = 1e-12,
                            sample: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    Args:
        record: Computation to check
        inputs: Point at which to check
        h: Central-difference step
        loss_index: Which output is the loss
        atol: Floor on the denominator for near-zero gradient entries
        sample: Check only this many coordinates, drawn with ``rng``; None checks all
        rng: Generator for the coordinate draw

    Returns:
        max |analytic - central| / max(|analytic|, |central|, atol)
    """
    if h <= 0:
        raise ContractViolation(f"finite-difference step must be positive, got {h}")
    base = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    analytic = evaluate_with_gradients(record, base, loss_index).gradients

    def loss_at(values: List[np.ndarray]) -> float:
        return float(record.replay(values)[loss_index].reshape(()))

    coords = [(i, idx) for i, x in enumerate(base) for idx in np.ndindex(x.shape)]
    if sample is not None and sample < len(coords):
        picks = (rng or np.random.default_rng(0)).choice(len(coords), size=sample, replace=False)
        coords = [coords[p] for p in sorted(picks)]
    worst = 0.0
    for i, idx in coords:
        plus = [v.copy() for v in base]
        minus = [v.copy() for v in base]
        plus[i][idx] += h
        minus[i][idx] -= h
        central = (loss_at(plus) - loss_at(minus)) / (2.0 * h)
        a = float(analytic[i].data[idx])
        err = abs(a - central) / max(abs(a), abs(central), atol)
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments for one group of named parameters."""
    lr: float = config.DEFAULT_LR
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_init(params: Mapping[str, Tensor], lr: float = config.DEFAULT_LR) -> AdamState:
    return AdamState(
        lr=lr,
        m={name: np.zeros(p.shape) for name, p in params.items()},
        v={name: np.zeros(p.shape) for name, p in params.items()},
    )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, TensorLike],
              state: AdamState) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    One bias-corrected Adam update.

    Args:
        params: Named parameters
        grads: Gradients with the same names and shapes
        state: Moments from the previous step

    Returns:
        (updated parameters, new state with the step counter incremented)
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractViolation("adam_step: parameter, gradient and state names differ")
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractViolation(f"adam_step: shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = Tensor(p.data - update)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, new_m, new_v, step)


def seeded_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose, derived from the run seed."""
    if seed < 0:
        raise ContractViolation(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode("utf-8"))]))
