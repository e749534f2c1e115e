"""Verification suites behind the CLI.

Three families of checks, each deterministic given a seed:

* gradient suite: finite-difference checks across every differentiable
  operation and the end-to-end pipelines, at randomized small shapes;
* equivalence suite: the algebraic identities tying each construction
  to its independent reference route (exact bilinear reconstruction,
  full-model expansion, outer-product sketch, hashed bilinear form,
  unrolled block stack, unfactored three-way energy, ...);
* sketch statistics: Monte-Carlo bucket-count moments and the
  inner-product unbiasedness z-score against their closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import pooling, sketch
from .errors import ConfigurationError
from .rng import derive
from .tensor import (
    Tensor,
    _accumulate,
    _tape_of,
    activation,
    broadcast_cols,
    concat,
    dropout,
    grad_check,
    hadamard,
    l2_normalize,
    matmul,
    reshape,
    softmax_rows,
    sum_all,
    transpose,
    value_of,
)
from .training import cross_entropy, cross_entropy_mean

GRADCHECK_DEFAULT_THRESHOLD = 1e-5


# ---------------------------------------------------------------------------
# gradient suite


def _weighted(out, weights) -> Tensor:
    return sum_all(hadamard(out, weights))


def _offset_normal(rng, shape, offset: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    return np.sign(z) * (offset + np.abs(z))


def _wrong_square(a):
    """Forward x*x with a deliberately wrong derivative (2.5x); the
    negative control proving the gradient suite can fail."""
    av = value_of(a)
    tape = _tape_of(a)
    out = Tensor(av * av, tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            _accumulate(a, out.grad * 2.5 * av)
        tape.record(pullback)
    return out


def gradcheck_suite(seed: int, corrupt: bool = False) -> list:
    """Run grad_check across the operation zoo; one entry per check."""
    entries: list[dict] = []

    def entry(name: str, f, params, step=1e-5):
        entries.append({"name": name, "max_rel_error": grad_check(f, params, step)})

    r = lambda name: derive(seed, "gradcheck", name)

    rng = r("matmul")
    w = rng.standard_normal((3, 5))
    entry("matmul", lambda ps: _weighted(matmul(ps[0], ps[1]), w),
          [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))])

    rng = r("hadamard")
    w = rng.standard_normal((4, 3))
    entry("hadamard", lambda ps: _weighted(hadamard(ps[0], ps[1]), w),
          [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))])

    rng = r("softmax_rows")
    w = rng.standard_normal((3, 6))
    entry("softmax_rows", lambda ps: _weighted(softmax_rows(ps[0]), w),
          [rng.standard_normal((3, 6))])

    for kind, offset in (("tanh", 0.0), ("sigmoid", 0.0), ("relu", 0.2), ("signed_sqrt", 0.3)):
        rng = r(f"activation_{kind}")
        w = rng.standard_normal((2, 7))
        x0 = _offset_normal(rng, (2, 7), offset) if offset else rng.standard_normal((2, 7))
        entry(f"activation_{kind}", lambda ps, k=kind: _weighted(activation(ps[0], k), w), [x0])

    rng = r("plumbing")
    w = rng.standard_normal((6, 2))
    entry("transpose_reshape_concat",
          lambda ps: _weighted(concat([transpose(ps[0]), reshape(ps[1], (3, 2))], axis=0), w),
          [rng.standard_normal((2, 3)), rng.standard_normal(6)])

    rng = r("broadcast_cols")
    w = rng.standard_normal((4, 6))
    entry("broadcast_cols", lambda ps: _weighted(broadcast_cols(ps[0], 3), w),
          [rng.standard_normal((4, 2))])

    rng = r("l2_normalize")
    w = rng.standard_normal((5, 3))
    entry("l2_normalize", lambda ps: _weighted(l2_normalize(ps[0], axis=0), w),
          [rng.standard_normal((5, 3))])

    rng = r("dropout")
    w = rng.standard_normal((4, 4))
    entry("dropout", lambda ps: _weighted(dropout(ps[0], 0.4, derive(seed, "gradcheck", "mask")), w),
          [rng.standard_normal((4, 4))])

    rng = r("count_sketch")
    h = rng.integers(1, 5, size=7)
    s = rng.integers(0, 2, size=7) * 2.0 - 1.0
    w = rng.standard_normal(4)
    entry("count_sketch", lambda ps: _weighted(sketch.count_sketch(ps[0], h, s, 4), w),
          [rng.standard_normal(7)])

    for method in ("direct", "fft"):
        rng = r(f"conv_{method}")
        w = rng.standard_normal(6)
        entry(f"circular_convolution_{method}",
              lambda ps, m=method: _weighted(sketch.circular_convolution(ps[0], ps[1], m), w),
              [rng.standard_normal(6), rng.standard_normal(6)])

    rng = r("full_bilinear")
    w = rng.standard_normal(2)
    x, y = rng.standard_normal(3), rng.standard_normal(4)
    entry("full_bilinear",
          lambda ps: _weighted(pooling.full_bilinear(
              pooling.FullBilinearParams(w=ps[0], b=ps[1]), ps[2], ps[3]), w),
          [rng.standard_normal((2, 3, 4)), rng.standard_normal(2), x, y])

    def pool_params(ps, activation_kind="identity", biases=False):
        return pooling.PoolingParams(
            u=ps[0], v=ps[1], p=ps[2], b=ps[3],
            b_x=ps[4] if biases else None, b_y=ps[5] if biases else None,
            activation=activation_kind)

    rng = r("low_rank_pool")
    w = rng.standard_normal(2)
    x, y = rng.standard_normal(4), rng.standard_normal(3)
    raw = [rng.standard_normal(s) for s in ((4, 3), (3, 3), (3, 2), (2,))]
    entry("low_rank_pool",
          lambda ps: _weighted(pooling.low_rank_pool(pool_params(ps), ps[4], ps[5]), w),
          raw + [x, y])

    rng = r("rank_d_output")
    entry("rank_d_output",
          lambda ps: pooling.rank_d_output(ps[0], ps[1], ps[2], ps[3], ps[4]),
          [rng.standard_normal((3, 2)), rng.standard_normal((4, 2)),
           np.asarray(0.7), rng.standard_normal(3), rng.standard_normal(4)])

    rng = r("full_model_pool")
    w = rng.standard_normal(2)
    x, y = rng.standard_normal(4), rng.standard_normal(3)
    raw = [rng.standard_normal(s) for s in ((4, 3), (3, 3), (3, 2), (2,), (3,), (3,))]
    entry("full_model_pool",
          lambda ps: _weighted(pooling.full_model_pool(pool_params(ps, biases=True), x, y), w),
          raw)

    for placement in ("before", "after"):
        rng = r(f"nonlinear_{placement}")
        w = rng.standard_normal(2)
        x, y = rng.standard_normal(4), rng.standard_normal(3)
        raw = [rng.standard_normal(s) for s in ((4, 3), (3, 3), (3, 2), (2,))]
        entry(f"nonlinear_pool_{placement}",
              lambda ps, pl=placement: _weighted(
                  pooling.nonlinear_pool(pool_params(ps, "tanh"), x, y, pl), w),
              raw)

    rng = r("shortcut_pool")
    w = rng.standard_normal(2)
    x, y = rng.standard_normal(4), rng.standard_normal(3)
    raw = [rng.standard_normal(s) for s in ((4, 3), (3, 3), (3, 2), (2,), (4, 2), (3, 2))]
    entry("shortcut_pool",
          lambda ps: _weighted(pooling.shortcut_pool(
              pooling.ShortcutParams(u=ps[0], v=ps[1], p=ps[2], b=ps[3],
                                     h_x=ps[4], h_y=ps[5], activation="tanh"), x, y), w),
          raw)

    n, m, d, s_lat, g, answers = 6, 5, 4, 3, 2, 4
    model_rng = derive(seed, "gradcheck", "model")
    base = att.AttentionModelParams.create(model_rng, n, m, d, s_lat, g, answers, biases=True)
    names = list(base.named_tensors())
    q = model_rng.standard_normal(n)
    big_f = model_rng.standard_normal((s_lat * s_lat, m))

    def model_of(ps):
        return att.AttentionModelParams(g=g, s=s_lat, **dict(zip(names, ps)))

    rng = r("attend")
    w = rng.standard_normal((g, s_lat * s_lat))
    entry("attend", lambda ps: _weighted(att.attend(model_of(ps), q, big_f), w),
          [value_of(base.named_tensors()[k]) for k in names])

    rng = r("glimpse_pool")
    w = rng.standard_normal(g * m)
    alpha0 = softmax_rows(rng.standard_normal((g, s_lat * s_lat))).data
    entry("glimpse_pool", lambda ps: _weighted(att.glimpse_pool(ps[0], ps[1]), w),
          [alpha0, big_f])

    rng = r("classify")
    w = rng.standard_normal(answers)
    vhat0 = rng.standard_normal(g * m)
    entry("classify", lambda ps: _weighted(att.classify(model_of(ps), q, vhat0), w),
          [value_of(base.named_tensors()[k]) for k in names])

    target = 1
    entry("mlb_cross_entropy",
          lambda ps: cross_entropy_mean(att.mlb_forward_batch(model_of(ps), q[:, None], big_f[None]),
                                        [target]),
          [value_of(base.named_tensors()[k]) for k in names])

    shortcuts = att.ShortcutMaps.create(derive(seed, "gradcheck", "marn"), n, m, g, answers)
    entry("marn_cross_entropy",
          lambda ps: cross_entropy(att.marn_forward(
              model_of(ps[:-2]), att.ShortcutMaps(h_q=ps[-2], h_v=ps[-1]), q, big_f), target),
          [value_of(base.named_tensors()[k]) for k in names]
          + [value_of(shortcuts.h_q), value_of(shortcuts.h_v)])

    mcb_rng = derive(seed, "gradcheck", "mcb")
    mcb = att.MCBAttentionParams.create(mcb_rng, n, m, s_lat, g, answers, sketch_dim=8)
    entry("mcb_cross_entropy",
          lambda ps: cross_entropy(att.mcb_attention_forward(
              att.MCBAttentionParams(sp_att=mcb.sp_att, sp_cls=mcb.sp_cls,
                                     w_att=ps[0], w_cls=ps[1], g=g, s=s_lat), q, big_f), target),
          [value_of(mcb.w_att), value_of(mcb.w_cls)])

    mrn_rng = derive(seed, "gradcheck", "mrn")
    mrn = att.MRNBlockParams.create(mrn_rng, width=4, m_v=3, hidden=3, block_dim=2, blocks=2)
    qv, vv = mrn_rng.standard_normal(4), mrn_rng.standard_normal(3)
    w = mrn_rng.standard_normal(4)
    mrn_names = [value_of(t) for t in (*mrn.w_q, *mrn.w_1, *mrn.w_2, *mrn.w_f, mrn.w_q_short)]
    entry("mrn_stack",
          lambda ps: _weighted(att.mrn_stack(att.MRNBlockParams(
              w_q=ps[0:2], w_1=ps[2:4], w_2=ps[4:6], w_f=ps[6:8], w_q_short=ps[8]), qv, vv), w),
          mrn_names)

    hobm_rng = derive(seed, "gradcheck", "hobm")
    factors = att.HOBMFactors.create(hobm_rng, 3, 2, 4, 2)
    xv, yv, hv = hobm_rng.standard_normal(3), hobm_rng.standard_normal(2), hobm_rng.standard_normal(4)
    entry("hobm_energy",
          lambda ps: att.hobm_energy(att.HOBMFactors(
              w_x=ps[0], w_y=ps[1], w_h=ps[2], bias_h=ps[3], bias_y=ps[4]), xv, yv, hv),
          [value_of(factors.w_x), value_of(factors.w_y), value_of(factors.w_h),
           hobm_rng.standard_normal(4), hobm_rng.standard_normal(2)])

    ce_rng = derive(seed, "gradcheck", "cross_entropy")
    entry("cross_entropy_vs_logits",
          lambda ps: cross_entropy(softmax_rows(ps[0]), 2),
          [ce_rng.standard_normal(5)])

    if corrupt:
        bad_rng = derive(seed, "gradcheck", "corrupt")
        entry("negative_control", lambda ps: sum_all(_wrong_square(ps[0])),
              [bad_rng.standard_normal(4) + 2.0])

    return entries


# ---------------------------------------------------------------------------
# equivalence suite


@dataclass
class EquivConfig:
    n: int = 5
    m: int = 4
    d: int = 3
    c: int = 3
    instances: int = 100
    conv_max_d: int = 256
    rank_restrict: bool = False

    def __post_init__(self):
        for name in ("n", "m", "d", "c", "instances", "conv_max_d"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")


def _rand_pool(rng, cfg: EquivConfig, activation_kind="identity", biases=False,
               rank_restricted=False) -> pooling.PoolingParams:
    params = pooling.PoolingParams.create(
        rng, cfg.n, cfg.m, cfg.d, cfg.c, activation=activation_kind,
        input_biases=biases, rank_restricted=rank_restricted)
    for name in ("u", "v", "p"):
        setattr(params, name, rng.standard_normal(value_of(getattr(params, name)).shape))
    params.b = rng.standard_normal(cfg.c)
    if biases:
        params.b_x = rng.standard_normal(cfg.d)
        params.b_y = rng.standard_normal(cfg.d)
    return params


def equivalence_suite(seed: int, cfg: EquivConfig | None = None) -> list:
    """Every algebraic-equivalence oracle, with its max deviation."""
    cfg = cfg or EquivConfig()
    # surfaces the d <= min(n, m) invariant of the rank-restricted mode
    pooling.PoolingParams.create(derive(seed, "equiv", "probe"), cfg.n, cfg.m, cfg.d, cfg.c,
                                 rank_restricted=cfg.rank_restrict)
    entries: list[dict] = []

    def entry(name: str, deviation: float, tolerance: float):
        entries.append({"name": name, "max_abs_deviation": float(deviation),
                        "tolerance": tolerance})

    # rank-d single output vs exact bilinear with W = U_i V_i^T
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "rank_d", k)
        u_i = rng.standard_normal((cfg.n, cfg.d))
        v_i = rng.standard_normal((cfg.m, cfg.d))
        b_i = float(rng.standard_normal())
        x, y = rng.standard_normal(cfg.n), rng.standard_normal(cfg.m)
        got = pooling.rank_d_output(u_i, v_i, b_i, x, y)
        ref = pooling.full_bilinear(pooling.FullBilinearParams(
            w=(u_i @ v_i.T)[None], b=np.array([b_i])), x, y)[0]
        worst = max(worst, abs(got - ref))
    entry("rank_d_output_vs_exact_bilinear", worst, 1e-12)

    # factored pooling vs exact bilinear with W_i = U diag(P[:, i]) V^T
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "reconstruction", k)
        params = _rand_pool(rng, cfg)
        x, y = rng.standard_normal(cfg.n), rng.standard_normal(cfg.m)
        got = pooling.low_rank_pool(params, x, y)
        w = np.stack([pooling.reconstruct_weight(params, i) for i in range(cfg.c)])
        ref = pooling.full_bilinear(pooling.FullBilinearParams(w=w, b=value_of(params.b)), x, y)
        worst = max(worst, np.abs(got - ref).max())
    entry("factored_pool_vs_exact_bilinear", worst, 1e-12)

    # direct biased form vs its expansion into linear terms
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "full_model", k)
        params = _rand_pool(rng, cfg, biases=True)
        x, y = rng.standard_normal(cfg.n), rng.standard_normal(cfg.m)
        direct = pooling.full_model_pool(params, x, y)
        expanded = pooling.evaluate_expanded(pooling.expand_full_model(params), x, y)
        worst = max(worst, np.abs(direct - expanded).max())
    entry("full_model_expansion", worst, 1e-10)

    # activation after the product vs direct recomputation
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "after", k)
        params = _rand_pool(rng, cfg, activation_kind="tanh")
        x, y = rng.standard_normal(cfg.n), rng.standard_normal(cfg.m)
        got = pooling.nonlinear_pool(params, x, y, "after")
        u, v, p, b = (value_of(params.u), value_of(params.v),
                      value_of(params.p), value_of(params.b))
        ref = p.T @ np.tanh((u.T @ x) * (v.T @ y)) + b
        worst = max(worst, np.abs(got - ref).max())
    entry("nonlinear_after_vs_direct", worst, 1e-12)

    # shortcut form vs term-by-term recomputation
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "shortcut", k)
        base = _rand_pool(rng, cfg, activation_kind="tanh")
        params = pooling.ShortcutParams(
            u=base.u, v=base.v, p=base.p, b=base.b, activation="tanh",
            h_x=rng.standard_normal((cfg.n, cfg.c)), h_y=rng.standard_normal((cfg.m, cfg.c)))
        x, y = rng.standard_normal(cfg.n), rng.standard_normal(cfg.m)
        got = pooling.shortcut_pool(params, x, y)
        u, v, p, b = (value_of(params.u), value_of(params.v),
                      value_of(params.p), value_of(params.b))
        ref = (p.T @ (np.tanh(u.T @ x) * np.tanh(v.T @ y))
               + value_of(params.h_x).T @ x + value_of(params.h_y).T @ y + b)
        worst = max(worst, np.abs(got - ref).max())
    entry("shortcut_pool_vs_terms", worst, 1e-12)

    # compact pooling vs the combined-hash sketch of the outer product
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "outer", k)
        n_x, n_y, d = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 8))
        sp = sketch.SketchParams.sample(rng, n_x, n_y, d)
        x, y = rng.standard_normal(n_x), rng.standard_normal(n_y)
        got = sketch.compact_bilinear_pool(x, y, sp)
        h, s = sketch.combined_hash(sp)
        ref = sketch.count_sketch(np.outer(x, y).reshape(-1), h, s, d)
        worst = max(worst, np.abs(got - ref).max())
    entry("compact_pool_vs_outer_product_sketch", worst, 1e-9)

    # compact pooling vs the materialized hashed bilinear form
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "hashed", k)
        n_x, n_y, d = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        sp = sketch.SketchParams.sample(rng, n_x, n_y, d)
        x, y = rng.standard_normal(n_x), rng.standard_normal(n_y)
        got = sketch.compact_bilinear_pool(x, y, sp, method="direct")
        for i in range(d):
            ref = x @ sketch.hashed_bilinear_weight(sp, i) @ y
            worst = max(worst, abs(got[i] - ref))
    entry("compact_pool_vs_hashed_bilinear_form", worst, 1e-12)

    # direct vs fft convolution across lengths
    worst = 0.0
    for d in range(1, cfg.conv_max_d + 1):
        rng = derive(seed, "equiv", "conv", d)
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        worst = max(worst, np.abs(sketch.circular_convolution(a, b, "direct")
                                  - sketch.circular_convolution(a, b, "fft")).max())
    entry("direct_vs_fft_convolution", worst, 1e-9)

    # classifier fusion vs pooled form plus softmax (shared code by design)
    worst = 0.0
    rng = derive(seed, "equiv", "classifier")
    model = att.AttentionModelParams.create(rng, 6, 5, 4, 3, 2, 4, biases=False)
    for k in range(min(cfg.instances, 20)):
        q = rng.standard_normal(6)
        vhat = rng.standard_normal(2 * 5)
        dist = att.classify(model, q, vhat)
        pooled = pooling.nonlinear_pool(
            pooling.PoolingParams(u=model.w_q, v=model.v_vhat, p=model.p_out,
                                  b=np.zeros(4), activation="tanh"), q, vhat, "before")
        e = np.exp(pooled - pooled.max())
        worst = max(worst, np.abs(dist - e / e.sum()).max())
    entry("classifier_vs_pooled_softmax", worst, 0.0)

    # residual classifier with zero shortcut maps vs the plain pipeline
    worst = 0.0
    rng = derive(seed, "equiv", "residual")
    for k in range(min(cfg.instances, 20)):
        q = rng.standard_normal(6)
        big_f = rng.standard_normal((9, 5))
        zeros = att.ShortcutMaps.zeros(6, 5, 2, 4)
        worst = max(worst, np.abs(att.marn_forward(model, zeros, q, big_f)
                                  - att.marn_forward(model, None, q, big_f)).max())
    entry("zero_shortcuts_vs_plain_pipeline", worst, 0.0)

    # glimpse pooling vs explicit double loop
    worst = 0.0
    for k in range(min(cfg.instances, 50)):
        rng = derive(seed, "equiv", "glimpse", k)
        g, cells, m = 2, 9, 5
        alpha = value_of(softmax_rows(rng.standard_normal((g, cells))))
        big_f = rng.standard_normal((cells, m))
        got = att.glimpse_pool(alpha, big_f)
        ref = np.zeros(g * m)
        for gi in range(g):
            for s_i in range(cells):
                ref[gi * m:(gi + 1) * m] += alpha[gi, s_i] * big_f[s_i]
        worst = max(worst, np.abs(got - ref).max())
    entry("glimpse_pool_vs_loops", worst, 1e-12)

    # two-block stack vs explicit unrolling
    worst = 0.0
    for k in range(min(cfg.instances, 50)):
        rng = derive(seed, "equiv", "mrn", k)
        params = att.MRNBlockParams.create(rng, width=4, m_v=3, hidden=3, block_dim=2, blocks=2)
        q, v = rng.standard_normal(4), rng.standard_normal(3)
        got = att.mrn_stack(params, q, v)
        wq = [value_of(t) for t in params.w_q]
        w1 = [value_of(t) for t in params.w_1]
        w2 = [value_of(t) for t in params.w_2]
        wf = [value_of(t) for t in params.w_f]
        wqs = value_of(params.w_q_short)
        f1 = np.tanh(wq[0].T @ q) * np.tanh(w2[0].T @ np.tanh(w1[0].T @ v))
        h1 = wqs.T @ q + wf[0].T @ f1
        f2 = np.tanh(wq[1].T @ h1) * np.tanh(w2[1].T @ np.tanh(w1[1].T @ v))
        h2 = h1 + wf[1].T @ f2
        worst = max(worst, np.abs(got - h2).max())
    entry("block_stack_vs_unrolled", worst, 1e-12)

    # factored three-way energy vs the reconstructed tensor
    worst = 0.0
    for k in range(cfg.instances):
        rng = derive(seed, "equiv", "hobm", k)
        i, j, kk, f = (int(rng.integers(1, 5)) for _ in range(4))
        factors = att.HOBMFactors(
            w_x=rng.standard_normal((i, f)), w_y=rng.standard_normal((j, f)),
            w_h=rng.standard_normal((kk, f)),
            bias_h=rng.standard_normal(kk), bias_y=rng.standard_normal(j))
        x, y, h = rng.standard_normal(i), rng.standard_normal(j), rng.standard_normal(kk)
        worst = max(worst, abs(att.hobm_energy(factors, x, y, h)
                               - att.hobm_energy_unfactored(factors, x, y, h)))
    entry("three_way_energy_factored_vs_unfactored", worst, 1e-10)

    return entries


# ---------------------------------------------------------------------------
# sketch statistics


@dataclass
class SketchStatsConfig:
    n_x: int = 8
    n_y: int = 8
    d: int = 4
    trials: int = 20000
    ip_n: int = 16
    ip_d: int = 8
    ip_trials: int = 10000
    mean_rtol: float = 0.01
    var_rtol: float = 0.10
    z_max: float = 4.0

    def __post_init__(self):
        if self.trials < 1000 or self.ip_trials < 1000:
            raise ConfigurationError("sketch statistics need at least 1000 trials")
        for name in ("n_x", "n_y", "d", "ip_n", "ip_d"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")


def sketch_stats(seed: int, cfg: SketchStatsConfig | None = None) -> dict:
    """Bucket-count moments and inner-product unbiasedness, with
    pass/fail rows ready for the CSV report."""
    cfg = cfg or SketchStatsConfig()
    bucket = sketch.bucket_statistics(cfg.n_x, cfg.n_y, cfg.d, cfg.trials,
                                      derive(seed, "sketch-stats", "buckets"))
    rng = derive(seed, "sketch-stats", "vectors")
    x = rng.standard_normal(cfg.ip_n)
    y = rng.standard_normal(cfg.ip_n)
    ip = sketch.inner_product_estimate(x, y, cfg.ip_trials, cfg.ip_d,
                                       derive(seed, "sketch-stats", "trials"))
    z = ((ip["mean_estimate"] - ip["true_inner_product"]) / ip["std_error"]
         if ip["std_error"] > 0 else 0.0)

    def rel(observed, expected):
        return abs(observed - expected) / abs(expected) if expected else abs(observed)

    rows = [
        {"statistic": "bucket_mean", "observed": bucket["empirical_mean"],
         "expected": bucket["expected_mean"],
         "error": rel(bucket["empirical_mean"], bucket["expected_mean"]),
         "limit": cfg.mean_rtol},
        {"statistic": "bucket_variance", "observed": bucket["empirical_variance"],
         "expected": bucket["expected_variance"],
         "error": rel(bucket["empirical_variance"], bucket["expected_variance"]),
         "limit": cfg.var_rtol},
        {"statistic": "inner_product_z", "observed": ip["mean_estimate"],
         "expected": ip["true_inner_product"], "error": abs(z), "limit": cfg.z_max},
    ]
    for row in rows:
        row["status"] = "pass" if row["error"] <= row["limit"] else "fail"
    return {"rows": rows, "bucket": bucket, "inner_product": ip, "z": z}


