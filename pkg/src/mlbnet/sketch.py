"""Count Sketch, circular convolution, and compact bilinear pooling.

A count sketch projects a vector to d buckets through fixed random hash
indices h (1-based, in {1..d}) and signs s (in {-1, +1}):

    sketch(v, h, s)_i = sum over j with h_j = i of s_j * v_j

Sketching the outer product of two vectors equals the circular
convolution of their individual sketches, which is what compact
bilinear pooling computes. Each pooled output is therefore a hashed
bilinear form x^T W_i y whose implicit signed indicator matrix
`hashed_bilinear_weight` materializes for verification.

The FFT used by the fast convolution path is an in-repo iterative
radix-2 transform (bit-reproducible, no external FFT dependency): a
non-power-of-two length is handled by zero-padding to the next power of
two, computing the linear convolution, and folding it back to length d
by explicit modular indexing.

h and s are constants: gradients flow through the sketched vectors
only, never through the hashes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, _accumulate, _tape_of, is_taped, value_of


# ---------------------------------------------------------------------------
# sketch parameters


def _check_hash(name: str, h: np.ndarray, s: np.ndarray, d: int) -> None:
    if h.ndim != 1 or s.shape != h.shape:
        raise ConfigurationError(f"{name}: h and s must be equal-length vectors")
    if h.size and (h.min() < 1 or h.max() > d):
        raise ConfigurationError(f"{name}: hash indices must lie in 1..{d}")
    if not np.all(np.abs(s) == 1.0):
        raise ConfigurationError(f"{name}: signs must be exactly +1 or -1")


@dataclass
class SketchParams:
    """Fixed hash indices and signs for both inputs of a pooled pair.

    Sampled once and then frozen for the lifetime of a model.
    """

    d: int
    h_x: np.ndarray
    s_x: np.ndarray
    h_y: np.ndarray
    s_y: np.ndarray

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError(f"sketch dimension must be >= 1, got {self.d}")
        self.h_x = np.asarray(self.h_x, dtype=np.int64)
        self.h_y = np.asarray(self.h_y, dtype=np.int64)
        self.s_x = np.asarray(self.s_x, dtype=np.float64)
        self.s_y = np.asarray(self.s_y, dtype=np.float64)
        _check_hash("x branch", self.h_x, self.s_x, self.d)
        _check_hash("y branch", self.h_y, self.s_y, self.d)

    @property
    def n_x(self) -> int:
        return self.h_x.size

    @property
    def n_y(self) -> int:
        return self.h_y.size

    @classmethod
    def sample(cls, rng: np.random.Generator, n_x: int, n_y: int, d: int) -> "SketchParams":
        return cls(
            d=d,
            h_x=rng.integers(1, d + 1, size=n_x),
            s_x=rng.integers(0, 2, size=n_x) * 2.0 - 1.0,
            h_y=rng.integers(1, d + 1, size=n_y),
            s_y=rng.integers(0, 2, size=n_y) * 2.0 - 1.0,
        )

    def to_json(self) -> str:
        return json.dumps({"d": self.d,
                           "h_x": self.h_x.tolist(), "s_x": self.s_x.tolist(),
                           "h_y": self.h_y.tolist(), "s_y": self.s_y.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SketchParams":
        obj = json.loads(text)
        return cls(d=obj["d"], h_x=obj["h_x"], s_x=obj["s_x"], h_y=obj["h_y"], s_y=obj["s_y"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SketchParams":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# count sketch


def count_sketch(v, h, s, d: int):
    """Signed bucket accumulation of `v` into `d` buckets; linear in v."""
    h = np.asarray(h, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    _check_hash("count_sketch", h, s, d)
    vv = value_of(v)
    if vv.shape != h.shape:
        raise DimensionError(f"count_sketch input shape {vv.shape} does not match h {h.shape}")
    tape = _tape_of(v)
    out = Tensor(np.bincount(h - 1, weights=s * vv, minlength=d), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(v, s * out.grad[h - 1])
        tape.record(pullback)
    return out if is_taped(v) else out.data


def count_sketch_cols(x, h, s, d: int):
    """Column-wise count sketch: (n, B) -> (d, B)."""
    h = np.asarray(h, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    _check_hash("count_sketch_cols", h, s, d)
    xv = value_of(x)
    if xv.ndim != 2 or xv.shape[0] != h.size:
        raise DimensionError(f"count_sketch_cols needs ({h.size}, B), got {xv.shape}")
    tape = _tape_of(x)
    buckets = np.zeros((d, xv.shape[1]))
    np.add.at(buckets, h - 1, s[:, None] * xv)
    out = Tensor(buckets, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(x, s[:, None] * out.grad[h - 1, :])
        tape.record(pullback)
    return out if is_taped(x) else out.data


# ---------------------------------------------------------------------------
# FFT and circular convolution


def _bit_reverse_indices(n: int) -> np.ndarray:
    rev = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        rev[i] = rev[i >> 1] >> 1 | ((i & 1) * (n >> 1))
    return rev


def fft_pow2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 transform along axis 0; length must be a power
    of two. Works on 1-D vectors or 2-D column stacks."""
    a = np.asarray(x, dtype=np.complex128).copy()
    n = a.shape[0]
    if n & (n - 1):
        raise DimensionError(f"fft_pow2 needs a power-of-two length, got {n}")
    if n == 1:
        return a
    a = a[_bit_reverse_indices(n)]
    span = 2
    while span <= n:
        half = span // 2
        angle = (2.0 if inverse else -2.0) * np.pi / span
        twiddle = np.exp(1j * angle * np.arange(half))
        blocks = a.reshape(n // span, span, -1)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * twiddle[None, :, None]
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        a = blocks.reshape(a.shape)
        span *= 2
    if inverse:
        a /= n
    return a


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _circ_conv_fft(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cyclic convolution along axis 0 via the in-repo FFT."""
    d = a.shape[0]
    if d & (d - 1) == 0:
        fa = fft_pow2(a)
        fb = fft_pow2(b)
        return fft_pow2(fa * fb, inverse=True).real
    # pad to cover the full linear convolution, then fold modulo d
    p = _next_pow2(2 * d - 1)
    pad = [(0, p - d)] + [(0, 0)] * (a.ndim - 1)
    linear = fft_pow2(fft_pow2(np.pad(a, pad)) * fft_pow2(np.pad(b, pad)), inverse=True).real
    out = linear[:d].copy()
    out[: d - 1] += linear[d: 2 * d - 1]
    return out


def _circ_conv_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a conv b)_k = sum_j a_j b_{(k-j) mod d}, by explicit summation."""
    d = a.shape[0]
    idx = (np.arange(d)[:, None] - np.arange(d)[None, :]) % d
    if a.ndim == 1:
        return np.einsum("kj,j->k", b[idx], a)
    return np.einsum("kjc,jc->kc", b[idx], a)


def _circ_reverse(x: np.ndarray) -> np.ndarray:
    return np.roll(x[::-1], 1, axis=0)


CONV_METHODS = ("direct", "fft")


def circular_convolution(a, b, method: str = "fft"):
    """Cyclic convolution of equal-length vectors (or column stacks).

    The direct path is the O(d^2) definition; the fft path uses the
    radix-2 transform. Both agree to 1e-9 and both are differentiable
    in a and b.
    """
    if method not in CONV_METHODS:
        raise ConfigurationError(f"method must be one of {CONV_METHODS}, got {method!r}")
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape or av.ndim not in (1, 2):
        raise DimensionError(
            f"circular_convolution needs equal-length inputs, got {av.shape} and {bv.shape}")
    conv = _circ_conv_direct if method == "direct" else _circ_conv_fft
    tape = _tape_of(a, b)
    out = Tensor(conv(av, bv), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, conv(out.grad, _circ_reverse(bv)))
            _accumulate(b, conv(out.grad, _circ_reverse(av)))
        tape.record(pullback)
    return out if is_taped(a, b) else out.data


# ---------------------------------------------------------------------------
# compact bilinear pooling


def compact_bilinear_pool(x, y, sp: SketchParams, method: str = "fft"):
    """Sketch both inputs and convolve: the count sketch of the outer
    product x (x) y without materializing it. Inputs may have different
    lengths."""
    sx = count_sketch(x, sp.h_x, sp.s_x, sp.d)
    sy = count_sketch(y, sp.h_y, sp.s_y, sp.d)
    return circular_convolution(sx, sy, method=method)


def compact_bilinear_pool_cols(x, y, sp: SketchParams, method: str = "fft"):
    """Column-wise compact bilinear pooling: (n_x, B), (n_y, B) -> (d, B)."""
    sx = count_sketch_cols(x, sp.h_x, sp.s_x, sp.d)
    sy = count_sketch_cols(y, sp.h_y, sp.s_y, sp.d)
    return circular_convolution(sx, sy, method=method)


def combined_hash(sp: SketchParams) -> tuple[np.ndarray, np.ndarray]:
    """The outer-product sketch implied by (h_x, s_x, h_y, s_y): term
    (j, k) lands in bucket ((h_x_j - 1 + h_y_k - 1) mod d) + 1 with sign
    s_x_j * s_y_k. Returns (h, s) over the flattened outer product."""
    hx, hy = sp.h_x - 1, sp.h_y - 1
    h = ((hx[:, None] + hy[None, :]) % sp.d + 1).reshape(-1)
    s = (sp.s_x[:, None] * sp.s_y[None, :]).reshape(-1)
    return h, s


def hashed_bilinear_weight(sp: SketchParams, output_index: int) -> np.ndarray:
    """The implicit signed indicator matrix of one pooled output
    (0-based): entry (j, k) is s_x_j * s_y_k where the term hashes to
    `output_index`, else 0. x^T W y reproduces that output exactly."""
    if not 0 <= output_index < sp.d:
        raise DimensionError(f"output index {output_index} out of range for d={sp.d}")
    hx, hy = sp.h_x - 1, sp.h_y - 1
    hit = (hx[:, None] + hy[None, :]) % sp.d == output_index
    return np.where(hit, sp.s_x[:, None] * sp.s_y[None, :], 0.0)


# ---------------------------------------------------------------------------
# statistics of the hashed construction


def bucket_statistics(n_x: int, n_y: int, d: int, trials: int,
                      rng: np.random.Generator) -> dict:
    """Distribution of the number of bilinear terms hashed into one
    output bucket, over fresh (h, s) draws, against the closed-form
    moments mean = n_x n_y / d and variance = n_x n_y (d - 1) / d^2."""
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    counts = np.empty(trials)
    for t in range(trials):
        hx = rng.integers(0, d, size=n_x)
        hy = rng.integers(0, d, size=n_y)
        counts[t] = np.count_nonzero((hx[:, None] + hy[None, :]) % d == 0)
    return {
        "empirical_mean": float(counts.mean()),
        "empirical_variance": float(counts.var(ddof=1)) if trials > 1 else 0.0,
        "expected_mean": n_x * n_y / d,
        "expected_variance": n_x * n_y * (d - 1) / d**2,
        "counts": counts,
    }


def inner_product_estimate(x, y, trials: int, d: int,
                           rng: np.random.Generator) -> dict:
    """Monte-Carlo check that <sketch(x), sketch(y)> is an unbiased
    estimator of <x, y> when both inputs share the same (h, s)."""
    xv, yv = value_of(x), value_of(y)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise DimensionError(f"inputs must be equal-length vectors, got {xv.shape} and {yv.shape}")
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    n = xv.size
    estimates = np.empty(trials)
    for t in range(trials):
        h = rng.integers(1, d + 1, size=n)
        s = rng.integers(0, 2, size=n) * 2.0 - 1.0
        estimates[t] = float(count_sketch(xv, h, s, d) @ count_sketch(yv, h, s, d))
    std_error = float(estimates.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return {
        "mean_estimate": float(estimates.mean()),
        "std_error": std_error,
        "true_inner_product": float(xv @ yv),
        "estimates": estimates,
    }
