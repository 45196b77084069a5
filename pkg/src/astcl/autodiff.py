"""Dense 2-D float64 kernels with tape-based reverse-mode differentiation.

Every value is a ``Tensor`` holding a 2-D ``float64`` array. Operations record
themselves on the active ``Tape`` (if any) together with a vector-Jacobian
product; ``backward`` replays the tape in reverse recording order and
accumulates gradients into leaf ``Param`` objects.

    with Tape() as tape:
        loss = sum_all(mul(w, w))
    backward(tape, loss)
    w.grad  # == 2 * w.value
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    pass


def _as_2d(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got {arr.ndim}")
    return arr


class Tensor:
    """Immutable 2-D value, optionally tracked for differentiation."""

    __slots__ = ("value", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_2d(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"<Tensor{tag} {self.rows}x{self.cols}>"

    # operator sugar; all routes go through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """Learnable leaf tensor; ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; while active, every op whose inputs require
    gradients is appended. A tape belongs to one thread of execution.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=tracked)
    tape = _ACTIVE_TAPE.get()
    if tracked and tape is not None:
        tape.records.append(_Record(out, inputs, vjp))
    return out


def backward(tape: Tape, output: Tensor, seed_grad=None) -> None:
    """Propagate ``seed_grad`` (ones for a 1x1 output) back through ``tape``.

    Gradients accumulate into ``Param.grad``; callers reset them between steps.
    """
    if not tape.records:
        return
    seed = np.ones_like(output.value) if seed_grad is None else _as_2d(seed_grad)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if isinstance(inp, Param):
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = leaf.grad + grads[key]


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same("add", a, b)
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same("sub", a, b)
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product. A 1x1 operand broadcasts over the other."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if a.shape == b.shape:
        return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))
    if a.shape == (1, 1):
        return _emit(av * bv, (a, b),
                     lambda g: (np.sum(g * bv).reshape(1, 1), g * av))
    if b.shape == (1, 1):
        return _emit(av * bv, (a, b),
                     lambda g: (g * bv, np.sum(g * av).reshape(1, 1)))
    raise ShapeError(f"mul: {a.shape} vs {b.shape}")


def add_row(x, row) -> Tensor:
    """Add a 1xC row vector to every row of an NxC matrix."""
    x, row = _lift(x), _lift(row)
    if row.rows != 1 or row.cols != x.cols:
        raise ShapeError(f"add_row: {x.shape} + {row.shape}")
    return _emit(x.value + row.value, (x, row),
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def add_const(a, c: float) -> Tensor:
    a = _lift(a)
    return _emit(a.value + float(c), (a,), lambda g: (g,))


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]``; repeated indices scatter-add on the way back."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(x.value[idx], (x,), vjp)


# --- reductions -------------------------------------------------------------


def sum_all(x) -> Tensor:
    x = _lift(x)
    shape = x.shape
    return _emit(np.array([[x.value.sum()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0]),))


def sum_cols(x) -> Tensor:
    """Per-row sum: NxH -> Nx1."""
    x = _lift(x)
    cols = x.cols
    return _emit(x.value.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.repeat(g, cols, axis=1),))


def mean_rows(x) -> Tensor:
    """Column-wise mean over rows: NxH -> 1xH."""
    x = _lift(x)
    n = x.rows
    if n == 0:
        raise ShapeError("mean_rows of an empty matrix")
    return _emit(x.value.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.repeat(g / n, n, axis=0),))


# --- elementwise nonlinearities ---------------------------------------------


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.value > 0  # subgradient at 0 is 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.value)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def identity(x) -> Tensor:
    return _lift(x)


def exp(x) -> Tensor:
    x = _lift(x)
    y = np.exp(x.value)
    return _emit(y, (x,), lambda g: (g * y,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": identity,
    "relu": relu,
    "tanh": tanh,
}


# --- row-wise normalizations ------------------------------------------------


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x) -> Tensor:
    x = _lift(x)
    s = _softmax(x.value)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _emit(s, (x,), vjp)


def layer_norm_rows(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize each row, then apply ``gain`` and ``bias`` (1xH each)."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    h = x.cols
    if gain.shape != (1, h) or bias.shape != (1, h):
        raise ShapeError(f"layer_norm_rows: gain {gain.shape}, bias {bias.shape}, x {x.shape}")
    mu = x.value.mean(axis=1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gv = gain.value

    def vjp(g):
        dxhat = g * gv
        dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
        return (dx,
                np.sum(g * xhat, axis=0, keepdims=True),
                g.sum(axis=0, keepdims=True))

    return _emit(xhat * gv + bias.value, (x, gain, bias), vjp)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Summed cross-entropy of row-softmax(logits) against target distributions.

    ``targets`` is a constant NxC array of per-row class weights (one-hot or
    smoothed). Returns a 1x1 tensor.
    """
    logits = _lift(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: {logits.shape} vs targets {t.shape}")
    v = logits.value
    z = v - v.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -np.sum(t * log_p)
    p = np.exp(log_p)
    mass = t.sum(axis=1, keepdims=True)

    def vjp(g):
        return (g[0, 0] * (p * mass - t),)

    return _emit(np.array([[loss]]), (logits,), vjp)


# --- gradient checking ------------------------------------------------------


def numeric_gradients(f: Callable[[], Tensor], params: Sequence[Param],
                      h: float = 1e-5) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tape gradients and central differences, one ``(analytic, numeric)`` pair per param.

    ``f`` rebuilds a 1x1 scalar from the current values of ``params``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    backward(tape, out)
    pairs = []
    for p in params:
        numeric = np.zeros_like(p.value)
        flat, nflat = p.value.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        pairs.append((p.grad.copy(), numeric))
    return pairs


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5,
                      floor: float = 1e-6) -> float:
    """Max coordinate-wise relative error between tape gradients and central differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is ~0 from dividing by
    round-off.
    """
    worst = 0.0
    for a, n in numeric_gradients(f, params, h):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst

