"""Synthetic multimodal QA task, answer sampling, and the graded
answer-count accuracy metric.

Each sample pairs a question vector with a grid of per-cell feature
vectors. The question one-hot-encodes a target cell and a question
attribute; every grid cell carries its row/column position one-hots, an
attribute one-hot, and noise channels. The label is the modular sum
(XOR for two answers) of the question attribute and the attribute
stored at the target cell, so neither modality alone predicts it: the
task is only solvable through a multiplicative interaction, which is
exactly what the pooled fusion models are supposed to learn and an
additive/linear model cannot.

Answer multisets mimic annotator disagreement: by default all
annotators agree on the label; a configurable fraction of samples are
"divided", giving the runner-up answer enough votes that sampled-answer
training occasionally trains on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ConfigurationError, DataError
from .rng import derive


@dataclass
class AnswerMultiset:
    """Annotator answer counts, ordered by count descending; ties between
    runner-up candidates break toward the lower answer index."""

    counts: list  # [(answer, count), ...]

    def __post_init__(self):
        if not self.counts:
            raise DataError("answer multiset must not be empty")
        normalized = sorted(((int(a), int(c)) for a, c in self.counts),
                            key=lambda ac: (-ac[1], ac[0]))
        if any(c <= 0 for _, c in normalized):
            raise DataError(f"answer counts must be positive, got {self.counts}")
        self.counts = normalized

    @property
    def mode(self) -> int:
        return self.counts[0][0]

    @property
    def total(self) -> int:
        return sum(c for _, c in self.counts)

    def count_of(self, answer: int) -> int:
        for a, c in self.counts:
            if a == answer:
                return c
        return 0


def sample_answer(ms: AnswerMultiset, rng: np.random.Generator) -> int:
    """Draw the runner-up answer with probability |a1| / total when the
    runner-up has at least three votes, otherwise return the mode."""
    if len(ms.counts) < 2:
        return ms.mode
    a1, c1 = ms.counts[1]
    p1 = c1 / ms.total if c1 >= 3 else 0.0
    return a1 if rng.random() < p1 else ms.mode


def vqa_accuracy(count: int) -> float:
    """min(count / 3, 1): full credit once three annotators agree."""
    if count < 0:
        raise DataError(f"answer count must be >= 0, got {count}")
    return min(count / 3.0, 1.0)


@dataclass
class ToyTaskConfig:
    s: int = 4
    n: int = 32
    m: int = 16
    n_answers: int = 2
    count: int = 1024
    distractor_channels: int = 6
    divided_rate: float = 0.0
    annotators: int = 10
    noise_scale: float = 0.3

    def __post_init__(self):
        a = self.n_answers
        if a < 2:
            raise ConfigurationError(f"need at least two answers, got {a}")
        if self.count < 1:
            raise ConfigurationError(f"count must be >= 1, got {self.count}")
        if self.n < self.s**2 + a:
            raise ConfigurationError(
                f"question dim n={self.n} too small for cell one-hot {self.s**2} + attribute one-hot {a}")
        if self.m < 2 * self.s + a + self.distractor_channels:
            raise ConfigurationError(
                f"feature dim m={self.m} too small for 2*{self.s} position + {a} attribute"
                f" + {self.distractor_channels} distractor channels")
        if not 0.0 <= self.divided_rate <= 1.0:
            raise ConfigurationError(f"divided_rate must be in [0, 1], got {self.divided_rate}")
        if self.divided_rate > 0 and self.annotators < 9:
            raise ConfigurationError("divided answers need at least 9 annotators")


@dataclass
class ToySample:
    q: np.ndarray          # (n,)
    features: np.ndarray   # (s*s, m)
    label: int
    answers: AnswerMultiset
    source: str = "base"


@dataclass
class ToyDataset:
    """Column-stackable storage of toy samples plus their multisets."""

    s: int
    n: int
    m: int
    n_answers: int
    q: np.ndarray          # (count, n)
    features: np.ndarray   # (count, s*s, m)
    labels: np.ndarray     # (count,)
    answers: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.q.shape[0]

    def __getitem__(self, i: int) -> ToySample:
        return ToySample(self.q[i], self.features[i], int(self.labels[i]),
                         self.answers[i], self.sources[i])

    def samples(self):
        return (self[i] for i in range(len(self)))

    def dims_match(self, other: "ToyDataset") -> bool:
        return (self.s, self.n, self.m, self.n_answers) == (other.s, other.n, other.m, other.n_answers)


def _make_multiset(label: int, runner: int, divided: bool, annotators: int) -> AnswerMultiset:
    if divided:
        return AnswerMultiset([(label, annotators - 4), (runner, 4)])
    return AnswerMultiset([(label, annotators)])


def generate_toy_dataset(config: ToyTaskConfig, seed: int, stream: str = "base") -> ToyDataset:
    """Deterministic per (seed, stream); distinct streams (train, eval,
    augment, ...) yield disjoint draws under one seed. Labels cycle
    through the answer set before shuffling, so classes are balanced
    within one sample."""
    s, n, m, a = config.s, config.n, config.m, config.n_answers
    cells = s * s
    count = config.count
    q = np.zeros((count, n))
    features = np.zeros((count, cells, m))
    labels = np.empty(count, dtype=np.int64)
    answers: list[AnswerMultiset] = []

    attr_offset = 2 * s
    noise_offset = attr_offset + a
    rows, cols = np.divmod(np.arange(cells), s)

    for i in range(count):
        rng = derive(seed, "toy-data", stream, i)
        label = i % a
        target = int(rng.integers(cells))
        q_attr = int(rng.integers(a))
        cell_attrs = rng.integers(a, size=cells)
        cell_attrs[target] = (label - q_attr) % a

        q[i, target] = 1.0
        q[i, cells + q_attr] = 1.0
        features[i, np.arange(cells), rows] = 1.0
        features[i, np.arange(cells), s + cols] = 1.0
        features[i, np.arange(cells), attr_offset + cell_attrs] = 1.0
        if config.distractor_channels:
            features[i, :, noise_offset:noise_offset + config.distractor_channels] = \
                config.noise_scale * rng.standard_normal((cells, config.distractor_channels))

        labels[i] = label
        divided = config.divided_rate > 0 and rng.random() < config.divided_rate
        answers.append(_make_multiset(label, (label + 1) % a, divided, config.annotators))

    ds = ToyDataset(s=s, n=n, m=m, n_answers=a, q=q, features=features,
                    labels=labels, answers=answers, sources=["base"] * count)
    return shuffle_dataset(ds, derive(seed, "toy-order", stream))


def oracle_label(q: np.ndarray, features: np.ndarray, s: int, n_answers: int) -> int:
    """Lookup route to the label: read the attribute at the question's
    target cell and add the question attribute modulo the answer count."""
    cells = s * s
    target = int(np.argmax(q[:cells]))
    q_attr = int(np.argmax(q[cells:cells + n_answers]))
    v_attr = int(np.argmax(features[target, 2 * s:2 * s + n_answers]))
    return (q_attr + v_attr) % n_answers


def shuffle_dataset(ds: ToyDataset, rng: np.random.Generator) -> ToyDataset:
    order = rng.permutation(len(ds))
    return ToyDataset(s=ds.s, n=ds.n, m=ds.m, n_answers=ds.n_answers,
                      q=ds.q[order], features=ds.features[order], labels=ds.labels[order],
                      answers=[ds.answers[i] for i in order],
                      sources=[ds.sources[i] for i in order])


def augment(base: ToyDataset, extra: ToyDataset) -> ToyDataset:
    """Concatenate a second pool behind the base set. Extra samples are
    tagged and forced to singleton multisets (one annotator), the shape
    of single-answer annotation pools."""
    if not base.dims_match(extra):
        raise DataError(
            f"dimension mismatch: base (s={base.s}, n={base.n}, m={base.m}, a={base.n_answers})"
            f" vs extra (s={extra.s}, n={extra.n}, m={extra.m}, a={extra.n_answers})")
    return ToyDataset(
        s=base.s, n=base.n, m=base.m, n_answers=base.n_answers,
        q=np.concatenate([base.q, extra.q]),
        features=np.concatenate([base.features, extra.features]),
        labels=np.concatenate([base.labels, extra.labels]),
        answers=list(base.answers) + [AnswerMultiset([(int(l), 1)]) for l in extra.labels],
        sources=list(base.sources) + ["extra"] * len(extra),
    )


# ---------------------------------------------------------------------------
# serialization: JSON index plus stacked tensor blobs


def save_dataset(directory, ds: ToyDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {
        "s": ds.s, "n": ds.n, "m": ds.m, "n_answers": ds.n_answers,
        "count": len(ds),
        "labels": [int(x) for x in ds.labels],
        "sources": list(ds.sources),
        "answers": [[[a, c] for a, c in ms.counts] for ms in ds.answers],
        "tensors": {"q": "q.mlbt", "features": "features.mlbt"},
    }
    tensorio.write_tensor(directory / "q.mlbt", ds.q)
    tensorio.write_tensor(directory / "features.mlbt", ds.features)
    (directory / "index.json").write_text(json.dumps(index) + "\n")


def load_dataset(directory) -> ToyDataset:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return ToyDataset(
        s=index["s"], n=index["n"], m=index["m"], n_answers=index["n_answers"],
        q=tensorio.read_tensor(directory / index["tensors"]["q"]),
        features=tensorio.read_tensor(directory / index["tensors"]["features"]),
        labels=np.asarray(index["labels"], dtype=np.int64),
        answers=[AnswerMultiset(pairs) for pairs in index["answers"]],
        sources=list(index["sources"]),
    )
