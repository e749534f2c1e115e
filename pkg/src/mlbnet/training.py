"""Loss, RMSProp with per-iteration learning-rate decay, elementwise
gradient clipping, the training loop, and evaluation.

The optimizer keeps a running mean square per parameter:

    acc <- rho * acc + (1 - rho) * g^2
    w   <- w - lr_k * g / (sqrt(acc) + eps)      lr_k = lr * decay^k

Gradients clip elementwise to [-threshold, +threshold] before the
update. Training is bit-reproducible: batches, dropout masks, answer
sampling, and initialization each draw from independently derived
sub-streams of the run seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .attention import (
    AttentionModelParams,
    MCBAttentionParams,
    ShortcutMaps,
    marn_forward_batch,
    mcb_attention_forward_batch,
    mlb_forward_batch,
)
from .data import ToyDataset, sample_answer, vqa_accuracy
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
)
from .pooling import init_matrix
from .rng import derive
from .sketch import SketchParams
from .tensor import (
    Tape,
    Tensor,
    _accumulate,
    _tape_of,
    argmax,
    concat,
    broadcast_cols,
    matmul,
    reshape,
    softmax_rows,
    transpose,
    value_of,
)

VARIANTS = ("mlb", "marn", "mcb-att", "baseline-linear")

METRICS_HEADER = "iter,loss,train_acc,eval_acc,lr"

CHECKPOINT_VERSION = 1


@dataclass
class HyperParams:
    learning_rate: float = 3e-4
    lr_decay: float = 0.99997592083
    dropout: float = 0.5
    clip_threshold: float = 10.0
    batch_size: int = 64
    iterations: int = 5000
    eval_interval: int = 500
    rms_decay: float = 0.99
    rms_epsilon: float = 1e-8
    glimpses: int = 1
    embed_dim: int = 32
    lattice: int = 4
    q_dim: int = 32
    v_dim: int = 16
    n_answers: int = 2
    sketch_dim: int = 64

    def __post_init__(self):
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.clip_threshold <= 0:
            raise ConfigurationError(f"clip_threshold must be positive, got {self.clip_threshold}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("batch_size", "eval_interval", "glimpses", "embed_dim",
                     "lattice", "q_dim", "v_dim", "n_answers", "sketch_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")


# ---------------------------------------------------------------------------
# loss


def _check_dist(dv: np.ndarray, target: int) -> None:
    if not 0 <= target < dv.shape[-1]:
        raise DataError(f"target {target} out of range for {dv.shape[-1]} answers")
    if abs(float(dv.sum()) - 1.0) > 1e-9 * dv.shape[-1]:
        raise DataError("distribution does not sum to 1")


def cross_entropy(dist, target: int):
    """-log(dist[target]) with the probability clamped at 1e-12."""
    dv = value_of(dist)
    if dv.ndim != 1:
        raise DimensionError(f"cross_entropy needs a probability vector, got shape {dv.shape}")
    _check_dist(dv, int(target))
    p = max(float(dv[int(target)]), 1e-12)
    tape = _tape_of(dist)
    out = Tensor(np.asarray(-np.log(p)), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            g = np.zeros_like(dv)
            if dv[int(target)] > 1e-12:
                g[int(target)] = -float(out.grad) / p
            _accumulate(dist, g)
        tape.record(pullback)
    return out if tape is not None else float(out.data)


def cross_entropy_mean(dist_rows, targets):
    """Mean clamped cross entropy over a batch of distribution rows."""
    dv = value_of(dist_rows)
    t = np.asarray(targets, dtype=np.int64)
    if dv.ndim != 2 or t.shape != (dv.shape[0],):
        raise DimensionError(f"need (B, answers) distributions and (B,) targets, got {dv.shape} and {t.shape}")
    for b in range(dv.shape[0]):
        _check_dist(dv[b], int(t[b]))
    picked = dv[np.arange(dv.shape[0]), t]
    clamped = np.maximum(picked, 1e-12)
    tape = _tape_of(dist_rows)
    out = Tensor(np.asarray(-np.log(clamped).mean()), tape)
    if tape is not None:
        def pullback():
            if out.grad is None:
                return
            g = np.zeros_like(dv)
            live = picked > 1e-12
            rows = np.arange(dv.shape[0])[live]
            g[rows, t[live]] = -float(out.grad) / (dv.shape[0] * clamped[live])
            _accumulate(dist_rows, g)
        tape.record(pullback)
    return out if tape is not None else float(out.data)


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(grads, threshold: float):
    """Elementwise clamp to [-threshold, threshold]; idempotent."""
    if threshold <= 0:
        raise ConfigurationError(f"clip threshold must be positive, got {threshold}")
    return [np.clip(g, -threshold, threshold) for g in grads]


@dataclass
class OptimizerState:
    mean_square: list
    iteration: int = 0
    effective_lr: float = 0.0

    @classmethod
    def init(cls, params, hp: HyperParams) -> "OptimizerState":
        return cls(mean_square=[np.zeros_like(value_of(p)) for p in params],
                   iteration=0, effective_lr=hp.learning_rate)


def rmsprop_step(state: OptimizerState, params, grads, hp: HyperParams) -> OptimizerState:
    """One update; afterwards effective_lr equals lr * decay^iteration
    exactly (recomputed in closed form, not accumulated)."""
    if len(params) != len(grads) or len(params) != len(state.mean_square):
        raise DimensionError("params, grads, and optimizer state must align")
    for acc, p, g in zip(state.mean_square, params, grads):
        if acc.shape != g.shape or value_of(p).shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {value_of(p).shape}")
        acc *= hp.rms_decay
        acc += (1.0 - hp.rms_decay) * g * g
        step = state.effective_lr * g / (np.sqrt(acc) + hp.rms_epsilon)
        if isinstance(p, Tensor):
            p.data = p.data - step
        else:
            p -= step
    state.iteration += 1
    state.effective_lr = hp.learning_rate * hp.lr_decay ** state.iteration
    return state


# ---------------------------------------------------------------------------
# model variants


@dataclass
class LinearBaselineParams:
    """Softmax regression on the raw concatenated (q, flattened F)
    features: the additive control that cannot represent the
    multiplicative interaction the task requires."""

    w: object   # (n + cells*m, answers)
    b: object   # (answers,)

    def named_tensors(self) -> dict:
        return {"w": self.w, "b": self.b}

    @classmethod
    def create(cls, rng, n, m, s, answers):
        return cls(w=init_matrix(rng, n + s * s * m, answers), b=np.zeros(answers))


class Model:
    """A trainable variant: parameters plus its batched forward."""

    def __init__(self, variant: str, hp: HyperParams, seed: int):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.hp = hp
        rng = derive(seed, "init")
        n, m, d, s, g, a = hp.q_dim, hp.v_dim, hp.embed_dim, hp.lattice, hp.glimpses, hp.n_answers
        if variant in ("mlb", "marn"):
            self.params = AttentionModelParams.create(rng, n, m, d, s, g, a, biases=True)
            self.shortcuts = ShortcutMaps.create(rng, n, m, g, a) if variant == "marn" else None
        elif variant == "mcb-att":
            hash_rng = derive(seed, "hash")
            self.params = MCBAttentionParams.create(hash_rng, n, m, s, g, a, hp.sketch_dim)
            self.params.w_att = init_matrix(rng, hp.sketch_dim, g)
            self.params.w_cls = init_matrix(rng, hp.sketch_dim, a)
            self.shortcuts = None
        else:
            self.params = LinearBaselineParams.create(rng, n, m, s, a)
            self.shortcuts = None
        self._promote()

    def _promote(self):
        for name, val in self.params.named_tensors().items():
            if not isinstance(val, Tensor):
                setattr(self.params, name, Tensor(val))
        if self.shortcuts is not None:
            for name, val in self.shortcuts.named_tensors().items():
                if not isinstance(val, Tensor):
                    setattr(self.shortcuts, name, Tensor(val))

    def named_tensors(self) -> dict:
        tensors = dict(self.params.named_tensors())
        if self.shortcuts is not None:
            for name, val in self.shortcuts.named_tensors().items():
                tensors[f"shortcut_{name}"] = val
        return tensors

    def forward_batch(self, q_cols, f3, train: bool = False, rng=None):
        """Distributions as rows, (B, answers)."""
        p = self.hp.dropout if train else 0.0
        if self.variant == "mlb":
            return mlb_forward_batch(self.params, q_cols, f3, p, rng)
        if self.variant == "marn":
            return marn_forward_batch(self.params, self.shortcuts, q_cols, f3, p, rng)
        if self.variant == "mcb-att":
            return mcb_attention_forward_batch(self.params, q_cols, f3, rng if train else None)
        feats = concat([q_cols if isinstance(q_cols, Tensor) else Tensor(value_of(q_cols)),
                        transpose(reshape(f3 if isinstance(f3, Tensor) else Tensor(value_of(f3)),
                                          (value_of(f3).shape[0], -1)))], axis=0)
        logits = _add_bias_cols(matmul(transpose(self.params.w), feats), self.params.b)
        return softmax_rows(transpose(logits))


def _add_bias_cols(logits, bias):
    from .tensor import add
    return add(logits, broadcast_cols(bias, value_of(logits).shape[1]))


def check_model_dims(model: Model, ds: ToyDataset) -> None:
    hp = model.hp
    if (ds.n, ds.m, ds.s, ds.n_answers) != (hp.q_dim, hp.v_dim, hp.lattice, hp.n_answers):
        raise DataError(
            f"model dims (n={hp.q_dim}, m={hp.v_dim}, s={hp.lattice}, answers={hp.n_answers})"
            f" do not match dataset (n={ds.n}, m={ds.m}, s={ds.s}, answers={ds.n_answers})")


# ---------------------------------------------------------------------------
# evaluation


def predictions(model: Model, ds: ToyDataset, chunk: int = 512) -> np.ndarray:
    check_model_dims(model, ds)
    preds = np.empty(len(ds), dtype=np.int64)
    for start in range(0, len(ds), chunk):
        stop = min(start + chunk, len(ds))
        dist = model.forward_batch(ds.q[start:stop].T, ds.features[start:stop])
        preds[start:stop] = argmax(value_of(dist), axis=1)
    return preds


def evaluate(model: Model, ds: ToyDataset, metric: str = "exact") -> float:
    """Mean accuracy; `exact` scores against the mode answer, `vqa`
    grades by annotator counts, min(count/3, 1)."""
    if metric not in ("exact", "vqa"):
        raise ConfigurationError(f"metric must be 'exact' or 'vqa', got {metric!r}")
    preds = predictions(model, ds)
    if metric == "exact":
        modes = np.array([ms.mode for ms in ds.answers])
        return float((preds == modes).mean())
    return float(np.mean([vqa_accuracy(ms.count_of(int(p)))
                          for p, ms in zip(preds, ds.answers)]))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    train_acc: float
    eval_acc: float
    lr: float

    def as_csv(self) -> str:
        return f"{self.iteration},{self.loss!r},{self.train_acc!r},{self.eval_acc!r},{self.lr!r}"


@dataclass
class TrainResult:
    model: Model
    metrics: list

    @property
    def final_eval_acc(self) -> float:
        return self.metrics[-1].eval_acc

    def metrics_csv(self) -> str:
        lines = [METRICS_HEADER] + [row.as_csv() for row in self.metrics]
        return "\n".join(lines) + "\n"


def _batch_loss(model: Model, ds: ToyDataset, idx, targets, train: bool, rng,
                iteration: int):
    dist = model.forward_batch(ds.q[idx].T, ds.features[idx], train=train, rng=rng)
    if not np.isfinite(value_of(dist)).all():
        raise DivergenceError(iteration)
    loss = cross_entropy_mean(dist, targets)
    if not np.isfinite(float(value_of(loss))):
        raise DivergenceError(iteration)
    return loss


def train(model: Model, train_set: ToyDataset, eval_set: ToyDataset,
          seed: int, answer_sampling: bool = False) -> TrainResult:
    """Minibatch RMSProp training; deterministic given (model config, seed)."""
    hp = model.hp
    check_model_dims(model, train_set)
    check_model_dims(model, eval_set)
    rng_batch = derive(seed, "batches")
    rng_drop = derive(seed, "dropout")
    rng_answer = derive(seed, "answer-sampling")
    rng_probe = derive(seed, "probe")

    tensors = list(model.named_tensors().values())
    state = OptimizerState.init(tensors, hp)

    def target_for(i: int) -> int:
        ms = train_set.answers[i]
        return sample_answer(ms, rng_answer) if answer_sampling else ms.mode

    def metrics_row(iteration: int, loss: float) -> MetricsRow:
        return MetricsRow(
            iteration=iteration,
            loss=loss,
            train_acc=evaluate(model, train_set, "exact"),
            eval_acc=evaluate(model, eval_set, "exact"),
            lr=state.effective_lr,
        )

    probe_idx = rng_probe.integers(0, len(train_set), size=min(hp.batch_size, len(train_set)))
    probe_targets = [train_set.answers[i].mode for i in probe_idx]
    loss0 = _batch_loss(model, train_set, probe_idx, probe_targets, train=False,
                        rng=None, iteration=0)
    rows = [metrics_row(0, float(value_of(loss0)))]

    for iteration in range(1, hp.iterations + 1):
        idx = rng_batch.integers(0, len(train_set), size=hp.batch_size)
        targets = [target_for(int(i)) for i in idx]

        tape = Tape()
        for t in tensors:
            tape.watch(t)
        loss = _batch_loss(model, train_set, idx, targets, train=True,
                           rng=rng_drop, iteration=iteration)
        loss_val = float(value_of(loss))
        tape.backward(loss)
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        grads = clip_gradients(grads, hp.clip_threshold)
        for t in tensors:
            t.tape = None
            t.grad = None
        rmsprop_step(state, tensors, grads, hp)

        if iteration % hp.eval_interval == 0 or iteration == hp.iterations:
            rows.append(metrics_row(iteration, loss_val))

    return TrainResult(model=model, metrics=rows)


# ---------------------------------------------------------------------------
# checkpoints: directory of tensors plus a JSON manifest


def save_checkpoint(directory, model: Model, seed: int, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hp = model.hp
    manifest = {
        "format": "mlbnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "seed": seed,
        "hyperparams": {k: getattr(hp, k) for k in hp.__dataclass_fields__},
        "tensors": {},
    }
    if extra:
        manifest.update(extra)
    for name, t in model.named_tensors().items():
        filename = f"{name}.mlbt"
        tensorio.write_tensor(directory / filename, value_of(t))
        manifest["tensors"][name] = {"file": filename, "shape": list(value_of(t).shape)}
    if model.variant == "mcb-att":
        manifest["sketch"] = {"att": json.loads(model.params.sp_att.to_json()),
                              "cls": json.loads(model.params.sp_cls.to_json())}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[Model, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "mlbnet-checkpoint":
        raise FormatError("not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')}")
    hp = HyperParams(**manifest["hyperparams"])
    model = Model(manifest["variant"], hp, manifest["seed"])
    if model.variant == "mcb-att":
        model.params.sp_att = SketchParams.from_json(json.dumps(manifest["sketch"]["att"]))
        model.params.sp_cls = SketchParams.from_json(json.dumps(manifest["sketch"]["cls"]))
    for name, meta in manifest["tensors"].items():
        arr = tensorio.read_tensor(directory / meta["file"])
        if name.startswith("shortcut_"):
            setattr(model.shortcuts, name[len("shortcut_"):], Tensor(arr))
        else:
            setattr(model.params, name, Tensor(arr))
    return model, manifest
