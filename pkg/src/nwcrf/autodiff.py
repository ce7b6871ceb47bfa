"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  A
:class:`Variable` wraps one tensor together with its accumulated gradient.
Operations executed while a :class:`Tape` is active are recorded in order,
and :func:`backward` replays them in reverse to populate gradients::

    x = Variable(np.array([1.0, 2.0]))
    with Tape() as tape:
        loss = ops.sum(x * x)
    backward(tape, loss)
    x.grad  # -> [2., 4.]

Outside a tape, operations still compute values but record nothing, which
is what inference and finite-difference probes use.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "nwcrf_active_tape", default=None
)
_ID_COUNTER = itertools.count()


class Variable:
    """A tensor value plus a gradient of identical extents."""

    __slots__ = ("value", "_grad", "requires_grad", "id", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = True, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ID_COUNTER)
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ValueError(f"gradient extents {g.shape} != value extents {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the real work lives in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Record:
    output: Variable
    inputs: tuple[Variable, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered log of differentiable operations executed while active."""

    records: list[Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def produced(self, var: Variable) -> bool:
        return any(r.output is var for r in self.records)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_variable(x) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(x, requires_grad=False)


def emit(value: np.ndarray, inputs: Sequence[Variable], backward_fn: BackwardFn) -> Variable:
    """Wrap an operation result and record it on the active tape if needed."""
    needs_grad = any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=needs_grad)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and needs_grad:
        tape.records.append(Record(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every Variable on the tape.

    Gradients add onto whatever is already stored, so two calls without
    ``zero_grad`` in between double the result.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got extents {loss.shape}")
    if loss.requires_grad and not tape.produced(loss):
        # A leaf loss is its own gradient; anything else must come from this tape.
        if tape.records:
            raise ContractError("loss was not produced on this tape")

    adjoint: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    touched: dict[int, Variable] = {loss.id: loss}
    for rec in reversed(tape.records):
        g_out = adjoint.pop(rec.output.id, None)
        if g_out is None:
            continue
        rec.output.grad = rec.output.grad + g_out
        grads = rec.backward(g_out)
        for var, g in zip(rec.inputs, grads):
            if g is None or not var.requires_grad:
                continue
            if g.shape != var.shape:
                raise AssertionError(f"backward produced {g.shape} for input {var.shape}")
            if var.id in adjoint:
                adjoint[var.id] = adjoint[var.id] + g
            else:
                adjoint[var.id] = g
                touched[var.id] = var
    # Whatever is left belongs to leaves (parameters and inputs).
    for vid, g in adjoint.items():
        var = touched[vid]
        if var.requires_grad:
            var.grad = var.grad + g


def gradcheck(
    fn: Callable[[], Variable],
    params: Sequence[Variable],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Worst elementwise |g_ad - g_fd| / max(1, |g_fd|) over ``params``.

    ``fn`` must rebuild the scalar loss from the current parameter values on
    every call.  With ``max_entries`` only that many randomly chosen entries
    per parameter are probed by central differences.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().value)
            flat[i] = orig - eps
            f_minus = float(fn().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
