"""Dense float64 tensors with a reverse-mode tape, Adam, and a gradient oracle.

Every value is a 2-D ``float64`` array wrapped in :class:`Tensor`.  Vectors
are ``1 x n`` rows and scalars are ``1 x 1``.  Operations record themselves
on the innermost active :class:`GradTape` whenever one of their inputs is
tracked (a leaf with ``requires_grad`` or the output of a recorded op);
outside a tape they are plain numpy evaluations.

    >>> w = Tensor([[3.0]], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = reduce("sum_all", w * w)
    >>> backward(tape, loss, [w])[w]
    array([[6.]])
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


# ------------------------------------------------------------------ RNG


def rng(seed: int, *names: str | int) -> np.random.Generator:
    """Independent PCG64 stream derived from ``seed`` and a name path.

    Streams are keyed by stable CRC32 hashes, so ``rng(0, "head")`` is the
    same on every platform and unaffected by draws from ``rng(0, "prompt")``.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            words.append(zlib.crc32(name.encode("utf-8")))
        else:
            words.append(int(name) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


# ------------------------------------------------------------------ tensors


class Tensor:
    """A 2-D float64 array, optionally tracked for differentiation.

    Identity semantics: tensors hash and compare by object identity, so they
    can key gradient and optimizer-state dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy, no validation; for internal results
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return elementwise("scale", self, other)
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return elementwise("scale", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ------------------------------------------------------------------ tape

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@dataclass(eq=False)
class _Op:
    out: Tensor
    parents: tuple
    grad_fn: Callable[[np.ndarray], tuple]
    name: str


class GradTape:
    """Records primitive operations in execution order.

    A tape is confined to the thread that entered it.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def __len__(self) -> int:
        return len(self.ops)


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(name: str, out: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    result = Tensor.wrap(out)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        result._tape = tape
        tape.ops.append(_Op(result, parents, grad_fn, name))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    (ar, ac), (br, bc) = a.shape, b.shape
    ok = (br == ar or br == 1) and (bc == ac or bc == 1)
    if not ok:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


# ------------------------------------------------------------------ primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", ad @ bd, (a, b), grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Entrywise ``add | sub | mul | scale | sigmoid | relu | softplus``.

    Binary kinds accept equal shapes or a ``1 x c`` row / ``r x 1`` column
    operand broadcast against ``a``.  ``scale`` takes a Python scalar.
    """
    a = as_tensor(a)
    ad = a.data
    if kind in ("add", "sub", "mul"):
        b = as_tensor(b)
        _check_broadcast(a, b, kind)
        bd = b.data
        if kind == "add":
            out = ad + bd

            def grad_fn(g):
                return g, _unbroadcast(g, bd.shape)

        elif kind == "sub":
            out = ad - bd

            def grad_fn(g):
                return g, _unbroadcast(-g, bd.shape)

        else:
            out = ad * bd

            def grad_fn(g):
                return g * bd, _unbroadcast(g * ad, bd.shape)

        return _record(kind, out, (a, b), grad_fn)

    if kind == "scale":
        s = float(b)

        def grad_fn(g):
            return (g * s,)

        return _record("scale", ad * s, (a,), grad_fn)
    if kind == "sigmoid":
        out = _sigmoid(ad)

        def grad_fn(g):
            return (g * out * (1.0 - out),)

        return _record("sigmoid", out, (a,), grad_fn)
    if kind == "relu":
        pos = ad > 0

        def grad_fn(g):
            return (g * pos,)

        return _record("relu", np.where(pos, ad, 0.0), (a,), grad_fn)
    if kind == "softplus":

        def grad_fn(g):
            return (g * _sigmoid(ad),)

        return _record("softplus", _softplus(ad), (a,), grad_fn)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def softplus(a: Tensor) -> Tensor:
    return elementwise("softplus", a)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        return (g.T,)

    return _record("transpose", a.data.T.copy(), (a,), grad_fn)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax across the columns of each row, with max subtraction."""
    a = as_tensor(a)
    if a.cols < 1:
        raise ShapeError("row_softmax needs at least one column")
    s = _softmax_rows(a.data)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", s, (a,), grad_fn)


def segment_col_softmax(a: Tensor, ptr: np.ndarray) -> Tensor:
    """Softmax down each column, separately inside every row segment."""
    a = as_tensor(a)
    s = np.empty_like(a.data)
    for lo, hi in zip(ptr[:-1], ptr[1:]):
        s[lo:hi] = _softmax_rows(a.data[lo:hi].T).T

    def grad_fn(g):
        out = np.empty_like(g)
        for lo, hi in zip(ptr[:-1], ptr[1:]):
            sg, gg = s[lo:hi], g[lo:hi]
            out[lo:hi] = sg * (gg - (gg * sg).sum(axis=0, keepdims=True))
        return (out,)

    return _record("segment_col_softmax", s, (a,), grad_fn)


def reduce(kind: str, a: Tensor) -> Tensor:
    """``sum_all`` (1x1), ``sum_rows`` (r x 1, one sum per row),
    ``sum_cols`` (1 x c, one sum per column) or ``frobenius`` (1x1)."""
    a = as_tensor(a)
    ad = a.data
    shape = ad.shape
    if kind == "sum_all":
        out = np.array([[ad.sum()]])

        def grad_fn(g):
            return (np.full(shape, g[0, 0]),)

    elif kind == "sum_rows":
        out = ad.sum(axis=1, keepdims=True)

        def grad_fn(g):
            return (np.broadcast_to(g, shape).copy(),)

    elif kind == "sum_cols":
        out = ad.sum(axis=0, keepdims=True)

        def grad_fn(g):
            return (np.broadcast_to(g, shape).copy(),)

    elif kind == "frobenius":
        norm = float(np.sqrt((ad * ad).sum()))
        out = np.array([[norm]])

        def grad_fn(g):
            # subgradient 0 at the origin
            if norm == 0.0:
                return (np.zeros(shape),)
            return (g[0, 0] * ad / norm,)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _record(kind, out, (a,), grad_fn)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]`` (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", a.data[idx], (a,), grad_fn)


def add_rows(a: Tensor, delta: Tensor, rows: np.ndarray) -> Tensor:
    """``a`` with ``delta[i]`` added on the boolean-selected rows only.

    Unselected rows are copied, never touched by arithmetic, so they stay
    bit-identical to the input.
    """
    a, delta = as_tensor(a), as_tensor(delta)
    if a.shape != delta.shape:
        raise ShapeError(f"add_rows: shapes {a.shape} and {delta.shape} differ")
    rows = np.asarray(rows, dtype=bool)
    out = a.data.copy()
    out[rows] += delta.data[rows]
    sel = rows[:, None]

    def grad_fn(g):
        return g, np.where(sel, g, 0.0)

    return _record("add_rows", out, (a, delta), grad_fn)


def propagate(a: Tensor, src, dst, w_edge, w_self) -> Tensor:
    """Multiply by the symmetric matrix ``diag(w_self) + sum_e w_e (E_uv + E_vu)``.

    The matrix is never formed; the edge list drives a scatter kernel.  It is
    symmetric, so the backward pass is the same kernel applied to the cotangent.
    """
    a = as_tensor(a)
    kern = _kernels.propagate

    def grad_fn(g):
        return (kern(np.ascontiguousarray(g), src, dst, w_edge, w_self),)

    return _record("propagate", kern(a.data, src, dst, w_edge, w_self), (a,), grad_fn)


def segment_sum(a: Tensor, ptr: np.ndarray) -> Tensor:
    """Per-segment column sums: row ``g`` of the result sums rows ``ptr[g]:ptr[g+1]``."""
    a = as_tensor(a)
    counts = np.diff(ptr)

    def grad_fn(g):
        return (np.repeat(g, counts, axis=0),)

    return _record("segment_sum", _kernels.segment_sum(a.data, ptr), (a,), grad_fn)


# ------------------------------------------------------------------ backward


def backward(tape: GradTape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Gradients of the scalar ``loss`` for the tensors in ``wrt``.

    With ``wrt=None`` every ``requires_grad`` leaf reached on the tape is
    returned.  Tensors in ``wrt`` that the loss does not depend on get zeros.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, Tensor] = {}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        for parent, pg in zip(op.parents, op.grad_fn(g)):
            if not tape.tracks(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.requires_grad:
                leaves[key] = parent
    if loss.requires_grad:
        leaves[id(loss)] = loss
    if wrt is None:
        wrt = list(leaves.values())
    out = {}
    for t in wrt:
        g = grads.get(id(t))
        out[t] = np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64)
    return out


# ------------------------------------------------------------------ parameters

FROZEN = "frozen"
TUNABLE = "tunable"


@dataclass(frozen=True)
class ParamEntry:
    name: str
    tensor: Tensor
    role: str


class ParamGroup:
    """Named tensors tagged ``frozen`` or ``tunable``.

    Roles are fixed at construction; tensors are marked ``requires_grad``
    exactly when tunable.
    """

    def __init__(self, entries: Iterable[tuple[str, Tensor, str]] = ()):
        self._entries: dict[str, ParamEntry] = {}
        for name, tensor, role in entries:
            self._add(name, tensor, role)

    def _add(self, name: str, tensor: Tensor, role: str) -> None:
        if role not in (FROZEN, TUNABLE):
            raise ValueError(f"role must be 'frozen' or 'tunable', got {role!r}")
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = role == TUNABLE
        tensor.name = name
        self._entries[name] = ParamEntry(name, tensor, role)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], role: str) -> "ParamGroup":
        return cls((name, Tensor(arr), role) for name, arr in arrays.items())

    def merged(self, other: "ParamGroup") -> "ParamGroup":
        return ParamGroup(
            [(e.name, e.tensor, e.role) for e in self] + [(e.name, e.tensor, e.role) for e in other]
        )

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def role(self, name: str) -> str:
        return self._entries[name].role

    def names(self) -> list[str]:
        return list(self._entries)

    def tunable(self) -> list[ParamEntry]:
        return [e for e in self if e.role == TUNABLE]

    def frozen(self) -> list[ParamEntry]:
        return [e for e in self if e.role == FROZEN]

    def count(self, which: str = "all") -> int:
        if which == "all":
            entries = list(self)
        elif which == TUNABLE:
            entries = self.tunable()
        elif which == FROZEN:
            entries = self.frozen()
        else:
            raise ValueError(f"filter must be all|tunable|frozen, got {which!r}")
        return sum(e.tensor.data.size for e in entries)

    def arrays(self) -> dict[str, np.ndarray]:
        return {e.name: e.tensor.data for e in self}


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamGroup, grads: dict) -> None:
    """One Adam update of every tunable entry, in place.

    ``grads`` maps tensor -> gradient.  With ``decoupled=False`` the weight
    decay term is added to the gradient before the moment updates (Adam+L2);
    otherwise it is applied directly to the weights (AdamW).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for entry in params.tunable():
        p = entry.tensor
        g = grads.get(p)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ContractError(
                f"gradient for {entry.name!r} has shape {g.shape}, parameter has {p.shape}"
            )
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m = state.m.get(entry.name)
        if m is None:
            m = state.m[entry.name] = np.zeros(p.shape)
            state.v[entry.name] = np.zeros(p.shape)
        v = state.v[entry.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            update = update + state.lr * state.weight_decay * p.data
        p.data -= update


# ------------------------------------------------------------------ gradient oracle


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: str | None
    checked: int
    tol: float
    message: str = ""


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamGroup,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    analytic: dict | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must rebuild the scalar loss from the current contents of
    ``params`` on every call.  The relative error of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor
    keeps entries whose true gradient is ~0 from dividing by roundoff.
    Passing ``analytic`` (tensor -> gradient) checks those gradients instead
    of the tape's.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"step must lie in [1e-7, 1e-3], got {step}")
    entries = params.tunable()
    if analytic is None:
        with GradTape() as tape:
            loss = f()
        analytic = backward(tape, loss, [e.tensor for e in entries])
    worst_err, worst_name, checked = 0.0, None, 0
    for entry in entries:
        data = entry.tensor.data
        grad = analytic[entry.tensor]
        for idx in np.ndindex(data.shape):
            orig = data[idx]
            data[idx] = orig + step
            fp = f().item()
            data[idx] = orig - step
            fm = f().item()
            data[idx] = orig
            label = f"{entry.name}[{idx[0]},{idx[1]}]"
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(False, np.inf, label, checked, tol, f"non-finite loss probing {label}")
            numeric = (fp - fm) / (2.0 * step)
            a = grad[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst_err or worst_name is None:
                worst_err, worst_name = err, label
    passed = worst_err <= tol
    msg = "" if passed else f"max relative error {worst_err:.3e} at {worst_name}"
    return GradCheckReport(passed, worst_err, worst_name, checked, tol, msg)


def check_finite(t: Tensor | np.ndarray, what: str) -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")


def stack_params(groups: Sequence[ParamGroup]) -> ParamGroup:
    out = ParamGroup()
    for g in groups:
        out = out.merged(g)
    return out
