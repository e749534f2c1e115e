"""Multimodal attention networks built on the pooled fusion forms.

The main model fuses a question vector q with visual features F over an
S x S lattice twice: once to score lattice cells,

    alpha = softmax(P_att^T (tanh(U_q^T q 1^T) o tanh(V_F^T F^T)))

once to classify from the attended feature vhat,

    p(a | q, F) = softmax(P_out^T (tanh(W_q^T q) o tanh(V_vhat^T vhat)))

with vhat the concatenation over glimpses g of sum_s alpha[g, s] F_s.
Biases inside both fusion sites are optional (default on, zeros at
init); with biases off the classifier stage is byte-for-byte the
nonlinear pooled form followed by a softmax.

Variants:
  * shortcut maps added to the classifier logits (residual-style),
    recovering the plain pipeline exactly when absent;
  * both fusion sites swapped for compact bilinear pooling followed by
    signed square root, L2 normalization, dropout, and a linear
    projection;
  * a stacked implicit-attention block recursion over (q, v) pairs;
  * the factored three-way energy of a higher-order Boltzmann machine,
    kept as an oracle-checked form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .pooling import init_matrix
from .sketch import SketchParams, circular_convolution, count_sketch_cols
from .tensor import (
    Tensor,
    activation,
    add,
    argmax,
    bmm,
    broadcast_cols,
    dropout,
    hadamard,
    is_taped,
    l2_normalize,
    matmul,
    reshape,
    softmax_rows,
    sum_all,
    transpose,
    value_of,
)

MCB_JOINT_DROPOUT = 0.1
MCB_QUESTION_DROPOUT = 0.3


def _col(x):
    xv = value_of(x)
    if xv.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {xv.shape}")
    return reshape(x if isinstance(x, Tensor) else Tensor(xv), (xv.size, 1))


@dataclass
class AttentionModelParams:
    """All weights of the two-site attention network.

    The two question projections (u_q for attention, w_q for the
    classifier) are distinct tensors. `g` is the glimpse count and `s`
    the lattice side; alpha is (g, s*s) and vhat has length g*m.
    """

    u_q: object        # (n, d)
    v_f: object        # (m, d)
    p_att: object      # (d, g)
    w_q: object        # (n, d)
    v_vhat: object     # (g*m, d)
    p_out: object      # (d, answers)
    g: int
    s: int
    b_att_q: object | None = None   # (d,)
    b_att_f: object | None = None   # (d,)
    b_att: object | None = None     # (g,)
    b_cls_q: object | None = None   # (d,)
    b_cls_v: object | None = None   # (d,)
    b_out: object | None = None     # (answers,)

    def __post_init__(self):
        n, d = value_of(self.u_q).shape
        m = value_of(self.v_f).shape[0]
        if value_of(self.v_f).shape[1] != d or value_of(self.w_q).shape != (n, d):
            raise DimensionError("u_q, v_f, w_q must share the joint dimension")
        if value_of(self.p_att).shape != (d, self.g):
            raise DimensionError(f"p_att must be ({d}, {self.g})")
        if value_of(self.v_vhat).shape != (self.g * m, d):
            raise DimensionError(f"v_vhat must be ({self.g * m}, {d})")
        if value_of(self.p_out).shape[0] != d:
            raise DimensionError(f"p_out must have {d} rows")
        biases = [self.b_att_q, self.b_att_f, self.b_att, self.b_cls_q, self.b_cls_v, self.b_out]
        if any(b is None for b in biases) != all(b is None for b in biases):
            raise ConfigurationError("fusion-site biases must be all present or all absent")

    @property
    def dims(self) -> dict:
        n, d = value_of(self.u_q).shape
        return {"n": n, "m": value_of(self.v_f).shape[0], "d": d, "g": self.g,
                "s": self.s, "answers": value_of(self.p_out).shape[1]}

    @property
    def biased(self) -> bool:
        return self.b_att_q is not None

    @classmethod
    def create(cls, rng, n, m, d, s, g, answers, biases=True):
        return cls(
            u_q=init_matrix(rng, n, d),
            v_f=init_matrix(rng, m, d),
            p_att=init_matrix(rng, d, g),
            w_q=init_matrix(rng, n, d),
            v_vhat=init_matrix(rng, g * m, d),
            p_out=init_matrix(rng, d, answers),
            g=g, s=s,
            b_att_q=np.zeros(d) if biases else None,
            b_att_f=np.zeros(d) if biases else None,
            b_att=np.zeros(g) if biases else None,
            b_cls_q=np.zeros(d) if biases else None,
            b_cls_v=np.zeros(d) if biases else None,
            b_out=np.zeros(answers) if biases else None,
        )

    def named_tensors(self) -> dict:
        names = ["u_q", "v_f", "p_att", "w_q", "v_vhat", "p_out",
                 "b_att_q", "b_att_f", "b_att", "b_cls_q", "b_cls_v", "b_out"]
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


def _fusion_site(u, v, proj, b_u, b_v, b_out, x_cols, y_cols,
                 dropout_p=0.0, rng=None):
    """One pooled fusion: proj^T (tanh(u^T x + b_u) o tanh(v^T y + b_v)).

    Training-time dropout applies to the activated question-side
    projection only. The bias-free path delegates to the plain
    nonlinear pooled form so the equality is shared code, not luck.
    """
    batch = value_of(x_cols).shape[1]
    if b_u is None and dropout_p == 0.0:
        from .pooling import PoolingParams, nonlinear_pool
        pv = value_of(proj)
        params = PoolingParams(u=u, v=v, p=proj, b=np.zeros(pv.shape[1]), activation="tanh")
        out = nonlinear_pool(params, x_cols, y_cols, "before")
        return out if isinstance(out, Tensor) else Tensor(out)
    zx = matmul(transpose(u), x_cols)
    if b_u is not None:
        zx = add(zx, broadcast_cols(b_u, batch))
    zx = activation(zx, "tanh")
    zx = dropout(zx, dropout_p, rng)
    zy = matmul(transpose(v), y_cols)
    if b_v is not None:
        zy = add(zy, broadcast_cols(b_v, batch))
    zy = activation(zy, "tanh")
    out = matmul(transpose(proj), hadamard(zx, zy))
    if b_out is not None:
        out = add(out, broadcast_cols(b_out, batch))
    return out


def _check_inputs(params: AttentionModelParams, q, big_f) -> tuple[int, int]:
    dims = params.dims
    qv, fv = value_of(q), value_of(big_f)
    cells = dims["s"] ** 2
    if qv.shape != (dims["n"],):
        raise DimensionError(f"q has shape {qv.shape}, expected ({dims['n']},)")
    if fv.shape != (cells, dims["m"]):
        raise DimensionError(f"F has shape {fv.shape}, expected ({cells}, {dims['m']})")
    return cells, dims["m"]


def attend(params: AttentionModelParams, q, big_f, dropout_p=0.0, rng=None):
    """Attention distribution over lattice cells, one row per glimpse;
    each row sums to 1."""
    cells, _ = _check_inputs(params, q, big_f)
    q_rep = broadcast_cols(q if isinstance(q, Tensor) else Tensor(value_of(q)), cells)
    logits = _fusion_site(params.u_q, params.v_f, params.p_att,
                          params.b_att_q, params.b_att_f, params.b_att,
                          q_rep, transpose(big_f if isinstance(big_f, Tensor) else Tensor(value_of(big_f))),
                          dropout_p, rng)
    alpha = softmax_rows(logits)
    return alpha if is_taped(q, big_f, *params.named_tensors().values()) else value_of(alpha)


def glimpse_pool(alpha, big_f):
    """Convex combination of feature rows per glimpse, concatenated in
    glimpse order: row g of alpha weights the rows of F."""
    av, fv = value_of(alpha), value_of(big_f)
    if av.ndim != 2 or fv.ndim != 2 or av.shape[1] != fv.shape[0]:
        raise DimensionError(f"glimpse_pool needs (g, cells) x (cells, m), got {av.shape} and {fv.shape}")
    pooled = reshape(matmul(alpha, big_f), (av.shape[0] * fv.shape[1],))
    return pooled if is_taped(alpha, big_f) else value_of(pooled)


def classify(params: AttentionModelParams, q, vhat, dropout_p=0.0, rng=None):
    """Answer distribution from the classifier fusion site; sums to 1."""
    dims = params.dims
    qv, vv = value_of(q), value_of(vhat)
    if qv.shape != (dims["n"],) or vv.shape != (dims["g"] * dims["m"],):
        raise DimensionError(
            f"classify got q {qv.shape}, vhat {vv.shape}; expected ({dims['n']},), ({dims['g'] * dims['m']},)")
    logits = _fusion_site(params.w_q, params.v_vhat, params.p_out,
                          params.b_cls_q, params.b_cls_v, params.b_out,
                          _col(q), _col(vhat), dropout_p, rng)
    dist = reshape(softmax_rows(transpose(logits)), (dims["answers"],))
    return dist if is_taped(q, vhat, *params.named_tensors().values()) else value_of(dist)


def predict(params: AttentionModelParams, q, big_f) -> int:
    """attend -> glimpse_pool -> classify -> argmax (lowest index wins ties)."""
    alpha = attend(params, q, big_f)
    vhat = glimpse_pool(alpha, big_f)
    return int(argmax(classify(params, q, vhat)))


# ---------------------------------------------------------------------------
# batched forward (columns are samples)


def _features_matrix(f3) -> Tensor:
    fv = value_of(f3)
    if fv.ndim != 3:
        raise DimensionError(f"batched features must be (B, cells, m), got {fv.shape}")
    t = f3 if isinstance(f3, Tensor) else Tensor(fv)
    return reshape(transpose(t, (2, 0, 1)), (fv.shape[2], fv.shape[0] * fv.shape[1]))


def mlb_forward_batch(params: AttentionModelParams, q_cols, f3,
                      dropout_p=0.0, rng=None) -> Tensor:
    """Full pipeline over a batch: q_cols is (n, B), f3 is (B, cells, m).
    Returns answer distributions as rows, (B, answers)."""
    dims = params.dims
    qv, fv = value_of(q_cols), value_of(f3)
    cells = dims["s"] ** 2
    if qv.ndim != 2 or qv.shape[0] != dims["n"]:
        raise DimensionError(f"q_cols must be ({dims['n']}, B), got {qv.shape}")
    batch = qv.shape[1]
    if fv.shape != (batch, cells, dims["m"]):
        raise DimensionError(f"f3 must be ({batch}, {cells}, {dims['m']}), got {fv.shape}")

    q_t = q_cols if isinstance(q_cols, Tensor) else Tensor(qv)
    f_t = f3 if isinstance(f3, Tensor) else Tensor(fv)

    logits = _fusion_site(params.u_q, params.v_f, params.p_att,
                          params.b_att_q, params.b_att_f, params.b_att,
                          broadcast_cols(q_t, cells), _features_matrix(f_t),
                          dropout_p, rng)                       # (g, B*cells)
    alpha = softmax_rows(reshape(logits, (dims["g"], batch, cells)))
    vhat3 = bmm(transpose(alpha, (1, 0, 2)), f_t)               # (B, g, m)
    vhat_cols = transpose(reshape(vhat3, (batch, dims["g"] * dims["m"])))
    cls_logits = _fusion_site(params.w_q, params.v_vhat, params.p_out,
                              params.b_cls_q, params.b_cls_v, params.b_out,
                              q_t, vhat_cols, dropout_p, rng)   # (answers, B)
    return softmax_rows(transpose(cls_logits))                  # rows are samples


# ---------------------------------------------------------------------------
# shortcut (residual) classifier variant


@dataclass
class ShortcutMaps:
    """Linear bypasses added to the classifier logits."""

    h_q: object   # (n, answers)
    h_v: object   # (g*m, answers)

    def named_tensors(self) -> dict:
        return {"h_q": self.h_q, "h_v": self.h_v}

    @classmethod
    def create(cls, rng, n, m, g, answers):
        return cls(h_q=init_matrix(rng, n, answers),
                   h_v=init_matrix(rng, g * m, answers))

    @classmethod
    def zeros(cls, n, m, g, answers):
        return cls(h_q=np.zeros((n, answers)), h_v=np.zeros((g * m, answers)))


def marn_forward(params: AttentionModelParams, shortcuts: ShortcutMaps | None,
                 q, big_f, dropout_p=0.0, rng=None):
    """Pipeline with shortcut maps on the classifier stage. With
    `shortcuts=None` this is exactly the plain pipeline."""
    alpha = attend(params, q, big_f, dropout_p, rng)
    vhat = glimpse_pool(alpha, big_f)
    if shortcuts is None:
        return classify(params, q, vhat, dropout_p, rng)
    dims = params.dims
    logits = _fusion_site(params.w_q, params.v_vhat, params.p_out,
                          params.b_cls_q, params.b_cls_v, params.b_out,
                          _col(q), _col(vhat), dropout_p, rng)
    logits = add(add(logits, matmul(transpose(shortcuts.h_q), _col(q))),
                 matmul(transpose(shortcuts.h_v), _col(vhat)))
    dist = reshape(softmax_rows(transpose(logits)), (dims["answers"],))
    taped = is_taped(q, big_f, *params.named_tensors().values(),
                     *shortcuts.named_tensors().values())
    return dist if taped else value_of(dist)


def marn_forward_batch(params: AttentionModelParams, shortcuts: ShortcutMaps | None,
                       q_cols, f3, dropout_p=0.0, rng=None) -> Tensor:
    if shortcuts is None:
        return mlb_forward_batch(params, q_cols, f3, dropout_p, rng)
    dims = params.dims
    qv, fv = value_of(q_cols), value_of(f3)
    cells, batch = dims["s"] ** 2, qv.shape[1]
    q_t = q_cols if isinstance(q_cols, Tensor) else Tensor(qv)
    f_t = f3 if isinstance(f3, Tensor) else Tensor(fv)
    logits = _fusion_site(params.u_q, params.v_f, params.p_att,
                          params.b_att_q, params.b_att_f, params.b_att,
                          broadcast_cols(q_t, cells), _features_matrix(f_t),
                          dropout_p, rng)
    alpha = softmax_rows(reshape(logits, (dims["g"], batch, cells)))
    vhat3 = bmm(transpose(alpha, (1, 0, 2)), f_t)
    vhat_cols = transpose(reshape(vhat3, (batch, dims["g"] * dims["m"])))
    cls_logits = _fusion_site(params.w_q, params.v_vhat, params.p_out,
                              params.b_cls_q, params.b_cls_v, params.b_out,
                              q_t, vhat_cols, dropout_p, rng)
    cls_logits = add(add(cls_logits, matmul(transpose(shortcuts.h_q), q_t)),
                     matmul(transpose(shortcuts.h_v), vhat_cols))
    return softmax_rows(transpose(cls_logits))


# ---------------------------------------------------------------------------
# compact-bilinear attention variant


@dataclass
class MCBAttentionParams:
    """Both fusion sites replaced by sketched bilinear pooling followed
    by signed square root, L2 normalization, dropout, and a linear
    projection. Hashes are fixed; only the projections train."""

    sp_att: SketchParams   # question x feature-cell
    sp_cls: SketchParams   # question x attended feature
    w_att: object          # (sketch_dim, g)
    w_cls: object          # (sketch_dim, answers)
    g: int
    s: int

    @property
    def dims(self) -> dict:
        return {"n": self.sp_att.n_x, "m": self.sp_att.n_y,
                "sketch_dim": self.sp_att.d, "g": self.g, "s": self.s,
                "answers": value_of(self.w_cls).shape[1]}

    def named_tensors(self) -> dict:
        return {"w_att": self.w_att, "w_cls": self.w_cls}

    @classmethod
    def create(cls, rng, n, m, s, g, answers, sketch_dim):
        return cls(
            sp_att=SketchParams.sample(rng, n, m, sketch_dim),
            sp_cls=SketchParams.sample(rng, n, g * m, sketch_dim),
            w_att=init_matrix(rng, sketch_dim, g),
            w_cls=init_matrix(rng, sketch_dim, answers),
            g=g, s=s,
        )


def _mcb_chain(x_cols, y_cols, sp, proj, rng):
    """compact bilinear pool -> signed sqrt -> L2 norm -> dropout -> projection."""
    sx = count_sketch_cols(x_cols, sp.h_x, sp.s_x, sp.d)
    sy = count_sketch_cols(y_cols, sp.h_y, sp.s_y, sp.d)
    pooled = circular_convolution(sx, sy, method="fft")
    normed = l2_normalize(activation(pooled, "signed_sqrt"), axis=0)
    dropped = dropout(normed, MCB_JOINT_DROPOUT if rng is not None else 0.0, rng)
    return matmul(transpose(proj), dropped)


def mcb_attention_forward_batch(params: MCBAttentionParams, q_cols, f3,
                                rng=None) -> Tensor:
    """Batched sketched-fusion pipeline; `rng=None` disables both
    dropout sites and makes the forward deterministic."""
    dims = params.dims
    qv, fv = value_of(q_cols), value_of(f3)
    cells = dims["s"] ** 2
    if qv.ndim != 2 or qv.shape[0] != dims["n"]:
        raise DimensionError(f"q_cols must be ({dims['n']}, B), got {qv.shape}")
    batch = qv.shape[1]
    if fv.shape != (batch, cells, dims["m"]):
        raise DimensionError(f"f3 must be ({batch}, {cells}, {dims['m']}), got {fv.shape}")
    q_t = q_cols if isinstance(q_cols, Tensor) else Tensor(qv)
    f_t = f3 if isinstance(f3, Tensor) else Tensor(fv)

    q_t = dropout(q_t, MCB_QUESTION_DROPOUT if rng is not None else 0.0, rng)
    logits = _mcb_chain(broadcast_cols(q_t, cells), _features_matrix(f_t),
                        params.sp_att, params.w_att, rng)        # (g, B*cells)
    alpha = softmax_rows(reshape(logits, (dims["g"], batch, cells)))
    vhat3 = bmm(transpose(alpha, (1, 0, 2)), f_t)
    vhat_cols = transpose(reshape(vhat3, (batch, dims["g"] * dims["m"])))
    cls_logits = _mcb_chain(q_t, vhat_cols, params.sp_cls, params.w_cls, rng)
    return softmax_rows(transpose(cls_logits))


def mcb_attention_forward(params: MCBAttentionParams, q, big_f, rng=None):
    """Single-sample sketched-fusion pipeline; returns a distribution."""
    qv, fv = value_of(q), value_of(big_f)
    out = mcb_attention_forward_batch(params, qv[:, None], fv[None], rng)
    dist = reshape(out, (params.dims["answers"],))
    return dist if is_taped(q, big_f, *params.named_tensors().values()) else value_of(dist)


# ---------------------------------------------------------------------------
# stacked implicit-attention blocks


@dataclass
class MRNBlockParams:
    """Per-block weights of the stacked recursion

        H_l = Wq' q + sum_{k<=l} Wf_k (tanh(Wq_k^T H_{k-1}) o tanh(W2_k^T tanh(W1_k^T v)))

    with H_0 = q; every H_l keeps the width of q.
    """

    w_q: list      # each (width, block_dim)
    w_1: list      # each (m_v, hidden)
    w_2: list      # each (hidden, block_dim)
    w_f: list      # each (block_dim, width)
    w_q_short: object  # (width, width)

    def __post_init__(self):
        if not (len(self.w_q) == len(self.w_1) == len(self.w_2) == len(self.w_f)):
            raise ConfigurationError("per-block weight lists must share a length")
        if len(self.w_q) < 1:
            raise ConfigurationError("at least one block is required")

    @property
    def blocks(self) -> int:
        return len(self.w_q)

    @classmethod
    def create(cls, rng, width, m_v, hidden, block_dim, blocks):
        return cls(
            w_q=[init_matrix(rng, width, block_dim) for _ in range(blocks)],
            w_1=[init_matrix(rng, m_v, hidden) for _ in range(blocks)],
            w_2=[init_matrix(rng, hidden, block_dim) for _ in range(blocks)],
            w_f=[init_matrix(rng, block_dim, width) for _ in range(blocks)],
            w_q_short=init_matrix(rng, width, width),
        )


def mrn_stack(params: MRNBlockParams, q, v):
    """Run the block recursion; block l's question input is H_{l-1}."""
    qc, vc = _col(q), _col(v)
    h = qc
    total = matmul(transpose(params.w_q_short), qc)
    for w_q, w_1, w_2, w_f in zip(params.w_q, params.w_1, params.w_2, params.w_f):
        q_side = activation(matmul(transpose(w_q), h), "tanh")
        v_side = activation(matmul(transpose(w_2), activation(matmul(transpose(w_1), vc), "tanh")), "tanh")
        total = add(total, matmul(transpose(w_f), hadamard(q_side, v_side)))
        h = total
    out = reshape(total, (value_of(total).shape[0],))
    taped = is_taped(q, v, params.w_q_short, *params.w_q, *params.w_1, *params.w_2, *params.w_f)
    return out if taped else value_of(out)


# ---------------------------------------------------------------------------
# factored three-way energy


@dataclass
class HOBMFactors:
    """Shared-factor decomposition of a three-way interaction tensor:
    W_ijk = sum_f wx_if wy_jf wh_kf, plus linear bias terms."""

    w_x: object    # (i, factors)
    w_y: object    # (j, factors)
    w_h: object    # (k, factors)
    bias_h: object  # (k,)
    bias_y: object  # (j,)

    def __post_init__(self):
        f = value_of(self.w_x).shape[1]
        if value_of(self.w_y).shape[1] != f or value_of(self.w_h).shape[1] != f:
            raise DimensionError("the three factor matrices must share the factor dimension")

    def named_tensors(self) -> dict:
        return {"w_x": self.w_x, "w_y": self.w_y, "w_h": self.w_h,
                "bias_h": self.bias_h, "bias_y": self.bias_y}

    @classmethod
    def create(cls, rng, i, j, k, factors):
        return cls(w_x=init_matrix(rng, i, factors),
                   w_y=init_matrix(rng, j, factors),
                   w_h=init_matrix(rng, k, factors),
                   bias_h=np.zeros(k), bias_y=np.zeros(j))


def hobm_energy(factors: HOBMFactors, x, y, h):
    """Negative energy (x^T Wx o y^T Wy o h^T Wh) 1 + h . bias_h + y . bias_y."""
    tx = matmul(transpose(_col(x)), factors.w_x)   # (1, factors)
    ty = matmul(transpose(_col(y)), factors.w_y)
    th = matmul(transpose(_col(h)), factors.w_h)
    three_way = sum_all(hadamard(hadamard(tx, ty), th))
    lin = add(sum_all(hadamard(_col(h), _col(factors.bias_h))),
              sum_all(hadamard(_col(y), _col(factors.bias_y))))
    out = add(three_way, lin)
    taped = is_taped(x, y, h, *factors.named_tensors().values())
    return out if taped else float(value_of(out))


def hobm_energy_unfactored(factors: HOBMFactors, x, y, h) -> float:
    """Reference route: materialize W_ijk by explicit sums and evaluate
    the triple sum directly."""
    wx, wy, wh = value_of(factors.w_x), value_of(factors.w_y), value_of(factors.w_h)
    bh, by = value_of(factors.bias_h), value_of(factors.bias_y)
    xv, yv, hv = value_of(x), value_of(y), value_of(h)
    n_factors = wx.shape[1]
    total = 0.0
    for i in range(wx.shape[0]):
        for j in range(wy.shape[0]):
            for k in range(wh.shape[0]):
                w_ijk = sum(wx[i, f] * wy[j, f] * wh[k, f] for f in range(n_factors))
                total += xv[i] * yv[j] * hv[k] * w_ijk
    total += float(hv @ bh) + float(yv @ by)
    return total
