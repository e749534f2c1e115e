"""Dense float64 tensors, a reverse-mode gradient tape, and the
differentiable primitives every model in this package is built from.

Values are numpy float64 arrays wrapped in :class:`Tensor`. A bare
Tensor is a constant; one registered on a :class:`Tape` (via
``tape.watch``) accumulates a gradient during ``tape.backward``. Each
primitive accepts plain arrays or Tensors, lifts arrays to constants,
and records a pullback on the tape carried by its inputs, so the same
formula code serves both plain evaluation and training.

Matrix products go through ``np.einsum`` rather than BLAS: einsum keeps
a fixed per-output-element summation order, which makes batched
evaluation bit-identical to per-sample evaluation and keeps results
independent of BLAS threading.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, EvaluationError

SIGNED_SQRT_EPS = 1e-12
L2_NORM_EPS = 1e-12

ACTIVATION_KINDS = ("tanh", "sigmoid", "identity", "relu", "signed_sqrt")


class Tensor:
    """A dense float64 array, optionally participating in a gradient tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"


class Tape:
    """Wengert list of recorded pullbacks.

    Primitives append their pullback in execution order; ``backward``
    replays the list reversed, so every node's gradient is fully
    accumulated from all of its consumers before its own pullback runs.
    A tape is single-owner: record and replay on one thread only.
    """

    def __init__(self):
        self._pullbacks: list = []

    def watch(self, value) -> Tensor:
        """Wrap `value` as a Tensor whose gradient this tape accumulates."""
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.tape = self
        t.grad = None
        return t

    def record(self, pullback) -> None:
        self._pullbacks.append(pullback)

    def backward(self, root: Tensor) -> None:
        if root.tape is not self:
            raise ConfigurationError("backward root was not produced under this tape")
        if root.data.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {root.data.shape}")
        root.grad = np.ones_like(root.data)
        for pullback in reversed(self._pullbacks):
            pullback()


def value_of(x) -> np.ndarray:
    """The float64 array behind `x`, whether Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def is_taped(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.tape is not None for x in xs)


def _tape_of(*xs) -> "Tape | None":
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ConfigurationError("operands were recorded on different tapes")
    return tape


def _accumulate(x, g: np.ndarray) -> None:
    if not (isinstance(x, Tensor) and x.tape is not None):
        return
    if x.grad is None:
        x.grad = np.zeros_like(x.data)
    x.grad += g


# ---------------------------------------------------------------------------
# linear-algebra primitives


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors; inner extents must agree."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes do not chain: {av.shape} x {bv.shape}")
    tape = _tape_of(a, b)
    out = Tensor(np.einsum("ij,jk->ik", av, bv), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, np.einsum("ik,jk->ij", out.grad, bv))
            _accumulate(b, np.einsum("ij,ik->jk", av, out.grad))
        tape.record(pullback)
    return out


def bmm(a, b) -> Tensor:
    """Batched matrix product over a shared leading axis:
    (B, m, k) @ (B, k, n) -> (B, m, n)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise DimensionError(f"bmm shapes do not chain: {av.shape} x {bv.shape}")
    tape = _tape_of(a, b)
    out = Tensor(np.einsum("bij,bjk->bik", av, bv), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, np.einsum("bik,bjk->bij", out.grad, bv))
            _accumulate(b, np.einsum("bij,bik->bjk", av, out.grad))
        tape.record(pullback)
    return out


def hadamard(a, b) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {av.shape} and {bv.shape}")
    tape = _tape_of(a, b)
    out = Tensor(av * bv, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad * bv)
            _accumulate(b, out.grad * av)
        tape.record(pullback)
    return out


def add(a, b) -> Tensor:
    """Elementwise sum of identically shaped tensors (no broadcasting)."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise DimensionError(f"add needs equal shapes, got {av.shape} and {bv.shape}")
    tape = _tape_of(a, b)
    out = Tensor(av + bv, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)
        tape.record(pullback)
    return out


def scale(a, factor: float) -> Tensor:
    av = value_of(a)
    tape = _tape_of(a)
    out = Tensor(av * float(factor), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad * float(factor))
        tape.record(pullback)
    return out


def sum_all(a) -> Tensor:
    """Sum of all entries as a scalar (rank-0) tensor."""
    av = value_of(a)
    tape = _tape_of(a)
    out = Tensor(av.sum(), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, np.broadcast_to(out.grad, av.shape).copy())
        tape.record(pullback)
    return out


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    av = value_of(a)
    tape = _tape_of(a)
    out = Tensor(np.transpose(av, axes), tape)
    if tape is not None:
        inverse = None if axes is None else np.argsort(axes)
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, np.transpose(out.grad, inverse))
        tape.record(pullback)
    return out


def reshape(a, shape) -> Tensor:
    av = value_of(a)
    tape = _tape_of(a)
    try:
        data = av.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {av.shape} to {shape}: {exc}") from None
    out = Tensor(data, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad.reshape(av.shape))
        tape.record(pullback)
    return out


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    """Concatenation of tensors along `axis`."""
    parts = list(parts)
    values = [value_of(p) for p in parts]
    if not values:
        raise DimensionError("concat needs at least one operand")
    tape = _tape_of(*parts)
    try:
        data = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes incompatible: {[v.shape for v in values]}: {exc}") from None
    out = Tensor(data, tape)
    if tape is not None:
        extents = [v.shape[axis] for v in values]
        def pullback():
            if out.grad is None:
                return
            offset = 0
            for part, extent in zip(parts, extents):
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(offset, offset + extent)
                _accumulate(part, out.grad[tuple(index)])
                offset += extent
        tape.record(pullback)
    return out


def broadcast_cols(a, n: int) -> Tensor:
    """Replicate columns `n` times: a vector (d,) becomes (d, n); a matrix
    (d, B) becomes (d, B*n) with each column repeated contiguously.

    This is the one broadcasting helper in the package; it realizes the
    replication of a projected vector against a lattice of columns.
    """
    av = value_of(a)
    if av.ndim not in (1, 2):
        raise DimensionError(f"broadcast_cols needs a vector or matrix, got shape {av.shape}")
    if n < 1:
        raise DimensionError(f"broadcast_cols needs n >= 1, got {n}")
    was_vector = av.ndim == 1
    mat = av[:, None] if was_vector else av
    d, batch = mat.shape
    tape = _tape_of(a)
    out = Tensor(np.repeat(mat, n, axis=1), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            g = out.grad.reshape(d, batch, n).sum(axis=2)
            _accumulate(a, g[:, 0] if was_vector else g)
        tape.record(pullback)
    return out


# ---------------------------------------------------------------------------
# nonlinear primitives


def softmax_rows(a, axis: int = -1) -> Tensor:
    """Softmax along `axis` (rows by default), stabilized by subtracting
    the per-slice maximum. Each slice of the output sums to 1."""
    av = value_of(a)
    if av.ndim < 1:
        raise DimensionError("softmax_rows needs at least rank 1")
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    tape = _tape_of(a)
    out = Tensor(s, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            inner = (out.grad * s).sum(axis=axis, keepdims=True)
            _accumulate(a, (out.grad - inner) * s)
        tape.record(pullback)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(a, kind: str) -> Tensor:
    """Elementwise activation.

    signed_sqrt(x) = sign(x) * sqrt(|x|); its derivative denominator is
    clamped at |x| = 1e-12 because it is applied to sketched vectors
    where exact zeros occur.
    """
    av = value_of(a)
    if kind == "tanh":
        data = np.tanh(av)
        local = 1.0 - data * data
    elif kind == "sigmoid":
        data = _stable_sigmoid(av)
        local = data * (1.0 - data)
    elif kind == "identity":
        data = av
        local = None
    elif kind == "relu":
        data = np.maximum(av, 0.0)
        local = (av > 0).astype(np.float64)
    elif kind == "signed_sqrt":
        data = np.sign(av) * np.sqrt(np.abs(av))
        local = 0.5 / np.sqrt(np.maximum(np.abs(av), SIGNED_SQRT_EPS))
    else:
        raise ConfigurationError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")
    tape = _tape_of(a)
    out = Tensor(data, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad if local is None else out.grad * local)
        tape.record(pullback)
    return out


def l2_normalize(a, axis: int = 0, eps: float = L2_NORM_EPS) -> Tensor:
    """Scale slices along `axis` to unit L2 norm; slices with norm below
    `eps` are divided by `eps` instead."""
    av = value_of(a)
    norm = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    r = np.maximum(norm, eps)
    s = av / r
    tape = _tape_of(a)
    out = Tensor(s, tape)
    if tape is not None:
        active = (norm > eps).astype(np.float64)
        def pullback():
            if out.grad is None:
                return
            proj = (out.grad * s).sum(axis=axis, keepdims=True)
            _accumulate(a, (out.grad - active * s * proj) / r)
        tape.record(pullback)
    return out


def dropout(a, p: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with probability `p` and scale the
    survivors by 1/(1-p), so evaluation needs no rescaling. With p == 0
    the input passes through untouched."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a if isinstance(a, Tensor) else Tensor(a)
    if rng is None:
        raise ConfigurationError("dropout with p > 0 requires an rng")
    av = value_of(a)
    mask = (rng.random(av.shape) >= p) / (1.0 - p)
    tape = _tape_of(a)
    out = Tensor(av * mask, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad * mask)
        tape.record(pullback)
    return out


def argmax(a, axis: int | None = None):
    """Index of the maximum entry; ties resolve to the lowest index."""
    return np.argmax(value_of(a), axis=axis)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params: Sequence, step: float = 1e-5) -> float:
    """Compare the tape gradient of the scalar ``f(params)`` against
    central finite differences.

    `f` receives a list of Tensors (one per entry of `params`) and must
    return a scalar Tensor built from the primitives in this package.
    Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ConfigurationError(f"step must be positive, got {step}")
    base = [value_of(p).copy() for p in params]

    def evaluate(values) -> float:
        out = f([Tensor(v) for v in values])
        val = float(value_of(out))
        if not np.isfinite(val):
            raise EvaluationError("function value is not finite")
        return val

    tape = Tape()
    nodes = [tape.watch(Tensor(v.copy())) for v in base]
    root = f(nodes)
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.isfinite(root.data).all():
        raise EvaluationError("function value is not finite")
    tape.backward(root)
    analytic = [np.zeros_like(v) if n.grad is None else n.grad for v, n in zip(base, nodes)]

    worst = 0.0
    for k, v in enumerate(base):
        for idx in np.ndindex(v.shape) if v.ndim else [()]:
            plus = [w.copy() for w in base]
            minus = [w.copy() for w in base]
            plus[k][idx] += step
            minus[k][idx] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            a = float(analytic[k][idx])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
