"""Synthetic task generation, answer sampling, and the graded metric."""

import numpy as np
import pytest

from mlbnet import data
from mlbnet.errors import ConfigurationError, DataError
from mlbnet.rng import derive


class TestAnswerMultiset:
    def test_orders_by_count_then_index(self):
        ms = data.AnswerMultiset([(3, 2), (1, 7), (0, 2)])
        assert ms.counts == [(1, 7), (0, 2), (3, 2)]
        assert ms.mode == 1
        assert ms.total == 11

    def test_rejects_empty_and_nonpositive(self):
        with pytest.raises(DataError):
            data.AnswerMultiset([])
        with pytest.raises(DataError):
            data.AnswerMultiset([(0, 0)])


class TestSampleAnswer:
    def test_divided_frequencies_match_closed_form(self):
        ms = data.AnswerMultiset([(0, 7), (1, 3)])
        rng = derive(0, "sample")
        draws = 100000
        hits = sum(data.sample_answer(ms, rng) == 1 for _ in range(draws))
        p = 0.3
        sigma = np.sqrt(p * (1 - p) / draws)
        assert abs(hits / draws - p) < 3 * sigma

    def test_runner_up_below_three_never_drawn(self):
        ms = data.AnswerMultiset([(0, 8), (1, 2)])
        rng = derive(1, "sample")
        assert all(data.sample_answer(ms, rng) == 0 for _ in range(5000))

    def test_single_answer_always_mode(self):
        ms = data.AnswerMultiset([(4, 10)])
        rng = derive(2, "sample")
        assert all(data.sample_answer(ms, rng) == 4 for _ in range(100))


class TestVqaAccuracy:
    def test_graded_values(self):
        assert data.vqa_accuracy(0) == 0.0
        assert data.vqa_accuracy(1) == pytest.approx(1 / 3)
        assert data.vqa_accuracy(2) == pytest.approx(2 / 3)
        assert data.vqa_accuracy(3) == 1.0

    def test_monotone_and_clamped(self):
        values = [data.vqa_accuracy(k) for k in range(12)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0

    def test_negative_count_rejected(self):
        with pytest.raises(DataError):
            data.vqa_accuracy(-1)


class TestGenerateToyDataset:
    def test_deterministic_per_seed(self):
        cfg = data.ToyTaskConfig(count=8)
        a = data.generate_toy_dataset(cfg, 42)
        b = data.generate_toy_dataset(cfg, 42)
        assert np.array_equal(a.q, b.q)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_streams_disjoint(self):
        cfg = data.ToyTaskConfig(count=8)
        a = data.generate_toy_dataset(cfg, 42, "train")
        b = data.generate_toy_dataset(cfg, 42, "eval")
        assert not np.array_equal(a.q, b.q)

    def test_classes_balanced_within_one(self):
        for count, answers in ((101, 2), (64, 5)):
            cfg = data.ToyTaskConfig(count=count, n_answers=answers, m=20)
            ds = data.generate_toy_dataset(cfg, 3)
            freq = np.bincount(ds.labels, minlength=answers)
            assert freq.max() - freq.min() <= 1

    def test_lookup_oracle_labels_every_sample(self):
        cfg = data.ToyTaskConfig(count=256, n_answers=3, m=20)
        ds = data.generate_toy_dataset(cfg, 5)
        for sample in ds.samples():
            assert data.oracle_label(sample.q, sample.features, ds.s, ds.n_answers) == sample.label

    def test_question_only_mutual_information_near_zero(self):
        cfg = data.ToyTaskConfig(count=10000)
        ds = data.generate_toy_dataset(cfg, 7)
        cells = ds.s ** 2
        target = ds.q[:, :cells].argmax(axis=1)
        q_attr = ds.q[:, cells:cells + ds.n_answers].argmax(axis=1)
        q_state = target * ds.n_answers + q_attr
        joint = np.zeros((cells * ds.n_answers, ds.n_answers))
        for qs, y in zip(q_state, ds.labels):
            joint[qs, y] += 1
        joint /= joint.sum()
        px = joint.sum(axis=1, keepdims=True)
        py = joint.sum(axis=0, keepdims=True)
        nz = joint > 0
        mi_bits = (joint[nz] * np.log2(joint[nz] / (px @ py)[nz])).sum()
        assert mi_bits < 0.02

    def test_linear_probe_cannot_exceed_065(self):
        sklearn = pytest.importorskip("sklearn.linear_model")
        cfg = data.ToyTaskConfig(count=10000)
        ds = data.generate_toy_dataset(cfg, 11)
        feats = np.concatenate([ds.q, ds.features.reshape(len(ds), -1)], axis=1)
        probe = sklearn.LogisticRegression(max_iter=2000, C=1.0)
        probe.fit(feats, ds.labels)
        assert probe.score(feats, ds.labels) <= 0.65

    def test_divided_rate_produces_divided_multisets(self):
        cfg = data.ToyTaskConfig(count=400, divided_rate=0.5)
        ds = data.generate_toy_dataset(cfg, 13)
        divided = [ms for ms in ds.answers if len(ms.counts) > 1 and ms.counts[1][1] >= 3]
        assert 100 < len(divided) < 300
        for ms in divided:
            assert ms.counts[0][1] >= ms.counts[1][1]

    def test_inconsistent_dims_rejected(self):
        with pytest.raises(ConfigurationError):
            data.ToyTaskConfig(n=10, s=4)  # 16-cell one-hot cannot fit
        with pytest.raises(ConfigurationError):
            data.ToyTaskConfig(m=8, s=4)   # position channels cannot fit


class TestAugment:
    def test_empty_extra_preserves_base(self):
        cfg = data.ToyTaskConfig(count=16)
        base = data.generate_toy_dataset(cfg, 1)
        extra = data.generate_toy_dataset(data.ToyTaskConfig(count=1), 1, "x")
        merged = data.augment(base, extra)
        assert np.array_equal(merged.q[:16], base.q)

    def test_sizes_add_and_extras_are_singletons(self):
        base = data.generate_toy_dataset(data.ToyTaskConfig(count=10), 2)
        extra = data.generate_toy_dataset(data.ToyTaskConfig(count=6), 2, "x")
        merged = data.augment(base, extra)
        assert len(merged) == 16
        assert merged.sources[:10] == ["base"] * 10
        assert merged.sources[10:] == ["extra"] * 6
        for ms, label in zip(merged.answers[10:], merged.labels[10:]):
            assert ms.counts == [(int(label), 1)]

    def test_tags_survive_seeded_shuffle(self):
        base = data.generate_toy_dataset(data.ToyTaskConfig(count=10), 3)
        extra = data.generate_toy_dataset(data.ToyTaskConfig(count=6), 3, "x")
        merged = data.augment(base, extra)
        shuffled = data.shuffle_dataset(merged, derive(3, "shuffle"))
        assert sorted(shuffled.sources) == sorted(merged.sources)
        for sample in shuffled.samples():
            assert data.oracle_label(sample.q, sample.features, 4, 2) == sample.label

    def test_dim_mismatch_rejected(self):
        base = data.generate_toy_dataset(data.ToyTaskConfig(count=4), 4)
        extra = data.generate_toy_dataset(data.ToyTaskConfig(count=4, n_answers=3, m=20), 4)
        with pytest.raises(DataError):
            data.augment(base, extra)


class TestDatasetSerialization:
    def test_round_trip(self, tmp_path):
        ds = data.generate_toy_dataset(data.ToyTaskConfig(count=12, divided_rate=0.4), 9)
        data.save_dataset(tmp_path / "ds", ds)
        back = data.load_dataset(tmp_path / "ds")
        assert np.array_equal(back.q, ds.q)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
        assert back.sources == ds.sources
        assert all(a.counts == b.counts for a, b in zip(back.answers, ds.answers))
