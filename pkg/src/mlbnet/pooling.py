"""Bilinear pooling constructions and the exact full-bilinear reference.

The exact form f_i = x^T W_i y + b_i materializes one N x M weight
matrix per output and is the oracle every factored construction is
checked against. The factored family replaces the stack of W_i with
three matrices U, V, P:

    plain         f = P^T (U^T x o V^T y) + b
    full model    f = P^T ((U^T x + b_x) o (V^T y + b_y)) + b
    nonlinear     f = P^T (s(U^T x) o s(V^T y)) + b      (s before product)
                  f = P^T s(U^T x o V^T y) + b           (s after product)
    shortcut      f = P^T (s(U^T x) o s(V^T y)) + Hx^T x + Hy^T y + b

where o is the Hadamard product. All functions take vectors (single
sample) or column-stacked matrices (batch) and accept plain arrays or
taped Tensors; gradients flow through every parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    activation,
    add,
    broadcast_cols,
    hadamard,
    is_taped,
    matmul,
    sum_all,
    transpose,
    value_of,
    _tape_of,
)

ACTIVATIONS_BOUNDED = ("tanh", "sigmoid")


def init_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Uniform init in [-a, a] with a = sqrt(6 / (rows + cols))."""
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def _shape(name: str, value, expected: tuple[int, ...]) -> None:
    got = value_of(value).shape
    if got != expected:
        raise DimensionError(f"{name} has shape {got}, expected {expected}")


@dataclass
class FullBilinearParams:
    """One dense N x M weight matrix per output plus a bias vector."""

    w: object  # (outputs, n, m)
    b: object  # (outputs,)

    def __post_init__(self):
        wv = value_of(self.w)
        if wv.ndim != 3:
            raise DimensionError(f"w must be rank 3 (outputs, n, m), got shape {wv.shape}")
        _shape("b", self.b, (wv.shape[0],))

    @property
    def dims(self) -> tuple[int, int, int]:
        return value_of(self.w).shape


@dataclass
class PoolingParams:
    """The three factor matrices of the pooled form plus biases.

    `rank_restricted` marks parameters built under the d <= min(n, m)
    constraint of the factorized-W_i construction; the plain pooled form
    treats d as a free joint-embedding width, so the default leaves d
    unconstrained.
    """

    u: object  # (n, d)
    v: object  # (m, d)
    p: object  # (d, c)
    b: object  # (c,)
    b_x: object | None = None  # (d,)
    b_y: object | None = None  # (d,)
    activation: str = "identity"
    rank_restricted: bool = False

    def __post_init__(self):
        uv, vv, pv = value_of(self.u), value_of(self.v), value_of(self.p)
        if uv.ndim != 2 or vv.ndim != 2 or pv.ndim != 2:
            raise DimensionError("u, v, p must all be matrices")
        n, d = uv.shape
        m, d2 = vv.shape
        if d2 != d or pv.shape[0] != d:
            raise DimensionError(
                f"joint dimension mismatch: u {uv.shape}, v {vv.shape}, p {pv.shape}")
        _shape("b", self.b, (pv.shape[1],))
        if self.b_x is not None:
            _shape("b_x", self.b_x, (d,))
        if self.b_y is not None:
            _shape("b_y", self.b_y, (d,))
        if (self.b_x is None) != (self.b_y is None):
            raise ConfigurationError("input biases b_x and b_y must be set together")
        if self.rank_restricted and d > min(n, m):
            raise ConfigurationError(
                f"rank-restricted construction needs d <= min(n, m); got d={d}, n={n}, m={m}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(n, m, d, c)."""
        uv, vv, pv = value_of(self.u), value_of(self.v), value_of(self.p)
        return uv.shape[0], vv.shape[0], uv.shape[1], pv.shape[1]

    @classmethod
    def create(cls, rng, n, m, d, c, activation="identity", input_biases=False,
               rank_restricted=False):
        if rank_restricted and d > min(n, m):
            raise ConfigurationError(
                f"rank-restricted construction needs d <= min(n, m); got d={d}, n={n}, m={m}")
        return cls(
            u=init_matrix(rng, n, d),
            v=init_matrix(rng, m, d),
            p=init_matrix(rng, d, c),
            b=np.zeros(c),
            b_x=np.zeros(d) if input_biases else None,
            b_y=np.zeros(d) if input_biases else None,
            activation=activation,
            rank_restricted=rank_restricted,
        )


@dataclass
class ShortcutParams(PoolingParams):
    """PoolingParams plus additive linear bypass maps for both inputs."""

    h_x: object = None  # (n, c)
    h_y: object = None  # (m, c)

    def __post_init__(self):
        super().__post_init__()
        if self.h_x is None or self.h_y is None:
            raise ConfigurationError("shortcut parameters need both h_x and h_y")
        n, m, _, c = self.dims
        _shape("h_x", self.h_x, (n, c))
        _shape("h_y", self.h_y, (m, c))


# ---------------------------------------------------------------------------
# evaluation


def _as_cols(name: str, x):
    xv = value_of(x)
    if xv.ndim == 1:
        return x if isinstance(x, Tensor) else Tensor(xv), True
    if xv.ndim == 2:
        return x if isinstance(x, Tensor) else Tensor(xv), False
    raise DimensionError(f"{name} must be a vector or column-stacked matrix, got shape {xv.shape}")


def _cols_view(t, was_vector: bool):
    from .tensor import reshape
    return reshape(t, (value_of(t).shape[0], 1)) if was_vector else t


def _finish(out, was_vector: bool, want_tensor: bool):
    from .tensor import reshape
    if was_vector:
        out = reshape(out, (value_of(out).shape[0],))
    return out if want_tensor else value_of(out)


def full_bilinear(params: FullBilinearParams, x, y):
    """f_i = x^T W_i y + b_i, summed over every pairwise product.

    This is the exact, materialized-weight route; the factored poolings
    are verified against it.
    """
    wv, bv = value_of(params.w), value_of(params.b)
    xv, yv = value_of(x), value_of(y)
    outputs, n, m = wv.shape
    if xv.shape != (n,) or yv.shape != (m,):
        raise DimensionError(
            f"full_bilinear needs x ({n},) and y ({m},), got {xv.shape} and {yv.shape}")
    tape = _tape_of(params.w, params.b, x, y)
    out = Tensor(np.einsum("inm,n,m->i", wv, xv, yv) + bv, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            g = out.grad
            from .tensor import _accumulate
            _accumulate(params.w, np.einsum("i,n,m->inm", g, xv, yv))
            _accumulate(params.b, g)
            _accumulate(x, np.einsum("inm,i,m->n", wv, g, yv))
            _accumulate(y, np.einsum("inm,i,n->m", wv, g, xv))
        tape.record(pullback)
    return out if is_taped(params.w, params.b, x, y) else out.data


def reconstruct_weight(params: PoolingParams, output_index: int) -> np.ndarray:
    """The implicit bilinear weight matrix of one pooled output:
    W_i = U diag(P[:, i]) V^T."""
    uv, vv, pv = value_of(params.u), value_of(params.v), value_of(params.p)
    if not 0 <= output_index < pv.shape[1]:
        raise DimensionError(f"output index {output_index} out of range for c={pv.shape[1]}")
    return (uv * pv[:, output_index]) @ vv.T


def _pool_core(params: PoolingParams, x, y, placement: str):
    """Column-form pooled output (c, B) plus whether inputs were vectors."""
    xc, x_vec = _as_cols("x", x)
    yc, y_vec = _as_cols("y", y)
    if x_vec != y_vec:
        raise DimensionError("x and y must both be vectors or both be batches")
    xc2, yc2 = _cols_view(xc, x_vec), _cols_view(yc, y_vec)
    n, m, d, _ = params.dims
    if value_of(xc2).shape[0] != n or value_of(yc2).shape[0] != m:
        raise DimensionError(
            f"inputs {value_of(x).shape} x {value_of(y).shape} do not match params n={n}, m={m}")
    batch = value_of(xc2).shape[1]
    if value_of(yc2).shape[1] != batch:
        raise DimensionError(
            f"batch sizes differ: x has {batch}, y has {value_of(yc2).shape[1]}")

    zx = matmul(transpose(params.u), xc2)
    zy = matmul(transpose(params.v), yc2)
    if params.b_x is not None:
        zx = add(zx, broadcast_cols(params.b_x, batch))
        zy = add(zy, broadcast_cols(params.b_y, batch))
    if placement == "before":
        zx = activation(zx, params.activation)
        zy = activation(zy, params.activation)
    z = hadamard(zx, zy)
    if placement == "after":
        z = activation(z, params.activation)
    out = add(matmul(transpose(params.p), z), broadcast_cols(params.b, batch))
    return out, x_vec


def _want_tensor(params, *xs) -> bool:
    values = [getattr(params, f.name) for f in fields(params) if f.name not in ("activation", "rank_restricted")]
    return is_taped(*values, *xs)


def low_rank_pool(params: PoolingParams, x, y):
    """f = P^T (U^T x o V^T y) + b. Activation must be identity and
    input biases absent; use the other entry points for those variants."""
    if params.activation != "identity":
        raise ConfigurationError("low_rank_pool needs identity activation")
    if params.b_x is not None:
        raise ConfigurationError("low_rank_pool does not take input biases")
    out, was_vector = _pool_core(params, x, y, "none")
    return _finish(out, was_vector, _want_tensor(params, x, y))


def rank_d_output(u_i, v_i, b_i: float, x, y):
    """Single-output form 1^T (U_i^T x o V_i^T y) + b_i, equal to
    x^T (U_i V_i^T) y + b_i."""
    uv, vv = value_of(u_i), value_of(v_i)
    xv, yv = value_of(x), value_of(y)
    if uv.ndim != 2 or vv.ndim != 2 or uv.shape[1] != vv.shape[1]:
        raise DimensionError(f"factor shapes do not agree: {uv.shape} and {vv.shape}")
    if xv.shape != (uv.shape[0],) or yv.shape != (vv.shape[0],):
        raise DimensionError(
            f"inputs {xv.shape}, {yv.shape} do not match factors {uv.shape}, {vv.shape}")
    from .tensor import reshape
    zx = matmul(transpose(u_i), reshape(x if isinstance(x, Tensor) else Tensor(xv), (len(xv), 1)))
    zy = matmul(transpose(v_i), reshape(y if isinstance(y, Tensor) else Tensor(yv), (len(yv), 1)))
    bias = b_i if isinstance(b_i, Tensor) else Tensor(value_of(b_i).reshape(()))
    total = add(sum_all(hadamard(zx, zy)), reshape(bias, ()))
    return total if is_taped(u_i, v_i, b_i, x, y) else float(total.data)


def full_model_pool(params: PoolingParams, x, y):
    """f = P^T ((U^T x + b_x) o (V^T y + b_y)) + b, evaluated directly."""
    if params.b_x is None:
        raise ConfigurationError("full_model_pool needs input biases b_x and b_y")
    if params.activation != "identity":
        raise ConfigurationError("full_model_pool needs identity activation")
    out, was_vector = _pool_core(params, x, y, "none")
    return _finish(out, was_vector, _want_tensor(params, x, y))


@dataclass
class ExpandedFullModel:
    """Equivalent parameterization of the biased pooled form:
    f = P^T (U^T x o V^T y + U'^T x + V'^T y) + b' with
    U'^T = diag(b_y) U^T, V'^T = diag(b_x) V^T, b' = b + P^T (b_x o b_y)."""

    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    u_lin: np.ndarray
    v_lin: np.ndarray
    b: np.ndarray


def expand_full_model(params: PoolingParams) -> ExpandedFullModel:
    if params.b_x is None:
        raise ConfigurationError("expand_full_model needs input biases b_x and b_y")
    uv, vv, pv = value_of(params.u), value_of(params.v), value_of(params.p)
    bx, by, bv = value_of(params.b_x), value_of(params.b_y), value_of(params.b)
    return ExpandedFullModel(
        u=uv.copy(),
        v=vv.copy(),
        p=pv.copy(),
        u_lin=uv * by,            # columns scaled: U' = U diag(b_y)
        v_lin=vv * bx,
        b=bv + pv.T @ (bx * by),
    )


def evaluate_expanded(exp: ExpandedFullModel, x, y) -> np.ndarray:
    xv, yv = np.atleast_2d(value_of(x).T).T, np.atleast_2d(value_of(y).T).T
    z = (exp.u.T @ xv) * (exp.v.T @ yv) + exp.u_lin.T @ xv + exp.v_lin.T @ yv
    out = exp.p.T @ z + exp.b[:, None]
    return out[:, 0] if value_of(x).ndim == 1 else out


PLACEMENTS = ("before", "after", "none")


def nonlinear_pool(params: PoolingParams, x, y, placement: str):
    """Pooled form with the activation before the product, after it, or
    absent. `none` follows the exact arithmetic of low_rank_pool."""
    if placement not in PLACEMENTS:
        raise ConfigurationError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    if params.b_x is not None:
        raise ConfigurationError("nonlinear_pool does not take input biases")
    out, was_vector = _pool_core(params, x, y, placement)
    return _finish(out, was_vector, _want_tensor(params, x, y))


def shortcut_pool(params: ShortcutParams, x, y):
    """Pooled form plus additive linear bypasses:
    f = P^T (s(U^T x) o s(V^T y)) + Hx^T x + Hy^T y + b."""
    pooled, was_vector = _pool_core(params, x, y, "before")
    xc2 = _cols_view(_as_cols("x", x)[0], was_vector)
    yc2 = _cols_view(_as_cols("y", y)[0], was_vector)
    out = add(add(pooled, matmul(transpose(params.h_x), xc2)),
              matmul(transpose(params.h_y), yc2))
    return _finish(out, was_vector, _want_tensor(params, x, y))


# ---------------------------------------------------------------------------
# parameter accounting


def count_params(kind: str, dims: dict) -> tuple[int, dict]:
    """Exact parameter counts and per-output share for one pooling kind.

    dims keys: n, m always; `outputs` for the output count; `d` for the
    factored and sketched kinds. Counts follow the standing conventions:
    the exact form owns outputs*(n*m + 1) weights, the factored form
    d*(n + m + outputs) + outputs, and the sketched form concentrates
    its learnable weights in the d x outputs projection after pooling.
    """
    required = {"full_bilinear": ("n", "m", "outputs"),
                "low_rank": ("n", "m", "d", "outputs"),
                "compact": ("d", "outputs")}
    if kind not in required:
        raise ConfigurationError(f"unknown pooling kind {kind!r}")
    for key in required[kind]:
        if key not in dims:
            raise ConfigurationError(f"count_params({kind!r}) needs dims[{key!r}]")
        if int(dims[key]) <= 0:
            raise ConfigurationError(f"dims[{key!r}] must be positive, got {dims[key]}")
    vals = {k: int(v) for k, v in dims.items()}

    if kind == "full_bilinear":
        count = vals["outputs"] * (vals["n"] * vals["m"] + 1)
        report = {"per_output": vals["n"] * vals["m"] + 1,
                  "total": count,
                  "per_output_share": (vals["n"] * vals["m"] + 1) / count}
    elif kind == "low_rank":
        n, m, d, c = vals["n"], vals["m"], vals["d"], vals["outputs"]
        count = d * n + d * m + d * c + c
        report = {"per_output": d * (n + m + 1) + 1,
                  "total": count,
                  "per_output_share": (n + m + 1) / (n + m + c)}
    else:
        d, c = vals["d"], vals["outputs"]
        count = d * c
        report = {"per_output": d,
                  "total": count,
                  "per_output_share": 1.0 / c}
    return count, report


# ---------------------------------------------------------------------------
# serialization


_TENSOR_FIELDS = ("u", "v", "p", "b", "b_x", "b_y", "h_x", "h_y")


def save_pooling_params(directory, params: PoolingParams) -> None:
    """Write the factor matrices as MLBT files plus a JSON manifest
    naming each tensor's role, its dims, and the activation kind."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": type(params).__name__,
                "activation": params.activation,
                "rank_restricted": params.rank_restricted,
                "tensors": {}}
    for name in _TENSOR_FIELDS:
        value = getattr(params, name, None)
        if value is None:
            continue
        arr = value_of(value)
        filename = f"{name}.mlbt"
        tensorio.write_tensor(directory / filename, arr)
        manifest["tensors"][name] = {"file": filename, "shape": list(arr.shape)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_pooling_params(directory) -> PoolingParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: tensorio.read_tensor(directory / meta["file"])
               for name, meta in manifest["tensors"].items()}
    common = dict(u=tensors["u"], v=tensors["v"], p=tensors["p"], b=tensors["b"],
                  b_x=tensors.get("b_x"), b_y=tensors.get("b_y"),
                  activation=manifest["activation"],
                  rank_restricted=manifest["rank_restricted"])
    if manifest["kind"] == "ShortcutParams":
        return ShortcutParams(h_x=tensors["h_x"], h_y=tensors["h_y"], **common)
    return PoolingParams(**common)
