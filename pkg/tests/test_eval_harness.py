import dataclasses
import os

import numpy as np
import pytest

import eval_harness as eh
from biomarker_data import Dataset, GeneratorConfig, generate_synthetic
from errors import AucUndefinedError, ConfigError, TrainingError
from linalg_core import RngStream
from nn_layers import named_params
from optimizer import OptimizerConfig
from trilstm_model import ModelConfig

TINY_MODEL = ModelConfig(embed_dim=3, hidden_dim=4, head_hidden=3, baseline_hidden=4)
TINY = eh.TrainConfig(epochs=2, minibatch=16, shuffle_copies=2, eval_repeats=2, model=TINY_MODEL)


@pytest.fixture(scope="module")
def split():
    dataset = generate_synthetic(GeneratorConfig(n_patients=80, seed=5))
    return eh.prepare_split(dataset, 5)


def _brute_force_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"minibatch": 0}, {"dropout": 1.0}, {"lam": 0.0}, {"lam": 1.5}, {"alpha": 0.5},
        {"alpha": 10.0}, {"final_weight": -1.0}, {"shuffle_copies": 0}, {"eval_repeats": 0},
        {"eval_order": "sorted"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            eh.TrainConfig(**kwargs)

    def test_from_dict_is_nested(self):
        cfg = eh.config_from_dict(eh.TrainConfig, {"epochs": 3, "optimizer": {"name": "sgd"}, "model": {"hidden_dim": 8}})
        assert cfg.epochs == 3
        assert cfg.optimizer == OptimizerConfig(name="sgd", lr=1e-2)
        assert cfg.model.hidden_dim == 8

    def test_default_training_rate(self):
        assert eh.TrainConfig().optimizer == OptimizerConfig(lr=1e-2)
        assert OptimizerConfig().lr == 1e-3

    def test_round_trips_through_dict(self):
        assert eh.config_from_dict(eh.TrainConfig, dataclasses.asdict(TINY)) == TINY

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            eh.config_from_dict(eh.TrainConfig, {"epoch": 3})

    def test_unknown_model_kind(self):
        with pytest.raises(ConfigError):
            eh.model_kind("gru")


class TestMetrics:
    def test_confusion_arithmetic(self):
        scores = [0.9, 0.9, 0.9, 0.2, 0.1, 0.1, 0.1, 0.1, 0.8]
        labels = [1, 1, 1, 1, 0, 0, 0, 0, 0]
        report = eh.compute_metrics(scores, labels)
        assert (report.tp, report.fn, report.tn, report.fp) == (3, 1, 4, 1)
        assert report.recall == 0.75
        assert report.specificity == 0.8
        assert report.accuracy == pytest.approx(0.7778, abs=1e-4)

    def test_half_is_negative(self):
        report = eh.compute_metrics([0.5, 0.6], [0, 1])
        assert report.tn == 1 and report.tp == 1

    def test_perfect_separation(self):
        assert eh.compute_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0

    def test_rank_auc_matches_pairwise_count(self):
        root = RngStream(17)
        for k in range(1000):
            rng = root.child(f"set-{k}")
            n = int(rng.integers(4, 30))
            # coarse rounding forces ties
            scores = np.round(rng.random(n), 1)
            labels = (rng.random(n) < 0.5).astype(int)
            labels[0], labels[1] = 0, 1
            assert eh.rank_auc(scores, labels) == pytest.approx(_brute_force_auc(scores, labels), abs=1e-12)

    def test_single_class_keeps_partial_report(self):
        with pytest.raises(AucUndefinedError) as info:
            eh.compute_metrics([0.7, 0.2, 0.9], [1, 1, 1])
        partial = info.value.partial
        assert partial.recall == pytest.approx(2 / 3)
        assert partial.specificity is None
        assert partial.auc is None

    def test_empty_scores(self):
        with pytest.raises(ConfigError):
            eh.compute_metrics([], [])

    def test_tied_rank(self):
        np.testing.assert_array_equal(eh.tied_rank([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])

    def test_roc_points(self):
        points = eh.roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert points[0] == (0.0, 0.0)
        assert points[-1] == (1.0, 1.0)
        fpr = [p[0] for p in points]
        tpr = [p[1] for p in points]
        assert fpr == sorted(fpr) and tpr == sorted(tpr)

    def test_average_reports(self):
        a = eh.compute_metrics([0.9, 0.1], [1, 0])
        b = eh.compute_metrics([0.1, 0.9], [1, 0])
        mean = eh.average_reports([a, b])
        assert mean.auc == 0.5
        assert mean.tp == 0.5


class TestTrain:
    def test_deterministic(self, split):
        train, _, _ = split
        a = eh.train("tri-lstm", train, TINY)
        b = eh.train("tri-lstm", train, TINY)
        assert a.loss_trace == b.loss_trace
        for name, value in named_params(a.params).items():
            np.testing.assert_array_equal(value, named_params(b.params)[name])

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "tri-lstm"])
    def test_loss_trace_per_epoch(self, split, kind):
        train, _, _ = split
        result = eh.train(kind, train, TINY)
        assert len(result.loss_trace) == TINY.epochs
        assert all(np.isfinite(result.loss_trace))

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "tri-lstm"])
    def test_loss_falls_on_a_separable_cohort(self, kind):
        train, _, _ = eh.prepare_split(generate_synthetic(GeneratorConfig(n_patients=80, seed=5, separability=2.0)), 5)
        result = eh.train(kind, train, dataclasses.replace(TINY, epochs=6))
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_needs_normalized_data(self):
        raw = generate_synthetic(GeneratorConfig(n_patients=8, seed=1))
        with pytest.raises(ConfigError):
            eh.train("rnn", raw, TINY)

    def test_non_finite_loss_names_epoch_and_batch(self, split, monkeypatch):
        train, _, _ = split
        kind = eh.MODEL_KINDS["rnn"]

        def diverging(p, values, perms, labels, cfg, rng):
            _, grads = kind.loss(p, values, perms, labels, cfg, rng)
            return float("nan"), grads

        monkeypatch.setitem(eh.MODEL_KINDS, "rnn", dataclasses.replace(kind, loss=diverging))
        with pytest.raises(TrainingError) as info:
            eh.train("rnn", train, TINY)
        assert (info.value.epoch, info.value.batch) == (1, 0)


class TestEvaluate:
    def test_deterministic_and_read_only(self, split):
        train, test, _ = split
        params = eh.train("lstm", train, TINY).params
        before = {k: v.copy() for k, v in named_params(params).items()}
        assert eh.evaluate("lstm", params, test, TINY) == eh.evaluate("lstm", params, test, TINY)
        for name, value in named_params(params).items():
            np.testing.assert_array_equal(value, before[name])

    def test_identity_order_passes_agree(self, split):
        train, test, _ = split
        cfg = dataclasses.replace(TINY, eval_order="identity")
        params = eh.train("tri-lstm", train, cfg).params
        first, second = eh.pass_scores("tri-lstm", params, test, cfg)
        np.testing.assert_array_equal(first, second)

    def test_single_class_test_set_keeps_partial_metrics(self, split):
        train, test, _ = split
        params = eh.train("lstm", train, TINY).params
        negatives = test.subset(np.flatnonzero(test.labels() == 0))
        with pytest.raises(AucUndefinedError) as info:
            eh.evaluate("lstm", params, negatives, TINY)
        partial = info.value.partial
        assert partial.auc is None and partial.recall is None
        assert partial.specificity == pytest.approx(partial.accuracy)
        assert partial.tn + partial.fp == pytest.approx(len(negatives))

    def test_summarize_passes_averages_partials(self):
        passes = [np.array([0.2, 0.7]), np.array([0.1, 0.3])]
        with pytest.raises(AucUndefinedError) as info:
            eh.summarize_passes(passes, [0, 0], "RNN")
        partial = info.value.partial
        assert partial.specificity == 0.75
        assert partial.accuracy == 0.75
        assert partial.model == "RNN"

    def test_summarize_passes_with_both_classes(self):
        report = eh.summarize_passes([np.array([0.9, 0.1]), np.array([0.1, 0.9])], [1, 0])
        assert report.auc == 0.5

    def test_empty_test_set(self, split):
        train, test, _ = split
        params = eh.train("rnn", train, TINY).params
        with pytest.raises(ConfigError):
            eh.evaluate("rnn", params, Dataset(test.schema, (), test.stats), TINY)


class TestBenchmark:
    def test_grid_layout(self):
        dataset = generate_synthetic(GeneratorConfig(n_patients=80, seed=2))
        cfg = dataclasses.replace(TINY, epochs=1, eval_repeats=1)
        rows = eh.benchmark_grid(dataset, cfg, n_seeds=1)
        assert [(r.model, r.order_shuffled) for r in rows] == [
            ("LSTM", False), ("LSTM", True), ("RNN", False), ("RNN", True), ("TRI-LSTM", False), ("TRI-LSTM", True),
        ]
        table = eh.format_table(rows).splitlines()
        assert table[0].split() == ["Model", "Order", "AUC", "Recall", "Specificity", "Accuracy"]
        assert len(table) == 8
        assert "✓" in table[3] and "×" in table[2]

    def test_needs_a_seed(self):
        dataset = generate_synthetic(GeneratorConfig(n_patients=8, seed=2))
        with pytest.raises(ConfigError):
            eh.benchmark_grid(dataset, TINY, n_seeds=0)


class TestCheckpoints:
    def test_save_and_load_model(self, split, tmp_path):
        train, _, stats = split
        result = eh.train("tri-lstm", train, TINY)
        path = tmp_path / "model.json"
        eh.save_model(path, result, TINY, stats, extra={"split_seed": 5})
        loaded = eh.load_model(path)
        assert loaded.kind == "tri-lstm"
        assert loaded.config == TINY
        assert loaded.stats == stats
        assert loaded.extra["split_seed"] == 5
        for name, value in named_params(result.params).items():
            np.testing.assert_array_equal(named_params(loaded.params)[name], value)


@pytest.mark.slow
class TestEndToEnd:
    def test_gradient_check_suite(self):
        reports = eh.gradient_check_suite(seed=0)
        assert set(reports) == {"lstm", "rnn", "tri-lstm"}
        for name, report in reports.items():
            assert report.passed, (name, report.max_rel_error)
            assert report.max_rel_error <= 1e-4

    def test_tri_lstm_learns_default_cohort(self):
        train, test, _ = eh.prepare_split(generate_synthetic(GeneratorConfig()), 7)
        cfg = eh.TrainConfig()
        result = eh.train("tri-lstm", train, cfg)
        report = eh.evaluate("tri-lstm", result.params, test, cfg)
        assert report.accuracy >= 0.90
        assert report.auc >= 0.95


@pytest.mark.slow
class TestDefaultBenchmark:
    @pytest.fixture(scope="class")
    def rows(self):
        jobs = min(4, os.cpu_count() or 1)
        grid = eh.benchmark_grid(generate_synthetic(GeneratorConfig()), eh.TrainConfig(), n_seeds=5, jobs=jobs)
        return {(r.model, r.order_shuffled): r for r in grid}

    def test_order_shuffling_does_not_hurt_auc(self, rows):
        assert rows[("TRI-LSTM", True)].auc >= rows[("TRI-LSTM", False)].auc

    def test_tri_lstm_at_least_as_accurate_as_lstm(self, rows):
        assert rows[("TRI-LSTM", True)].accuracy >= rows[("LSTM", True)].accuracy
