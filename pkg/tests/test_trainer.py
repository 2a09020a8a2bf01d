"""Adam updates, config handling, early stopping, and the multi-seed protocol."""

import numpy as np
import pytest

from probekit import ner_probe, trainer
from probekit.errors import ConfigError
from probekit.trainer import AdamState, TrainConfig, adam_step, fit, mean_metrics, run_seeds

from conftest import make_ner_corpus, make_nli_corpus


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert config.learning_rate == 1e-3
        assert config.batch_size == 32
        assert config.max_epochs == 50
        assert config.patience == 5
        assert config.seeds == (13, 42, 2019)

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(seeds=())
        with pytest.raises(ConfigError):
            TrainConfig(precision="float32")

    def test_config_file_roundtrip(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "# comment\nlearning_rate = 0.01\nbatch-size = 8\nseeds = 1, 2, 3\n"
            "shuffle = false\n",
            encoding="utf-8",
        )
        config = trainer.load_config(path)
        assert config.learning_rate == 0.01
        assert config.batch_size == 8
        assert config.seeds == (1, 2, 3)
        assert config.shuffle is False

    def test_cli_overrides_win(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("learning_rate = 0.01\n", encoding="utf-8")
        config = trainer.load_config(path, learning_rate=0.5)
        assert config.learning_rate == 0.5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("momentum = 0.9\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="momentum"):
            trainer.load_config(path)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        # at t=1 the bias-corrected moments are g and g^2, so the update is
        # -lr * g / (|g| + eps) ~= -lr * sign(g)
        g = np.array([3.0, -0.25, 1e-3])
        params = {"w": np.zeros(3)}
        adam_step(params, {"w": g}, AdamState.for_params(params), lr=0.01)
        np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-4)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(4, 3))
        runs = []
        for _ in range(2):
            params = {"w": np.ones((4, 3))}
            state = AdamState.for_params(params)
            for _ in range(5):
                adam_step(params, {"w": g}, state, lr=0.05)
            runs.append(params["w"].copy())
        assert np.array_equal(runs[0], runs[1])

    def test_nan_gradient_names_parameter(self):
        params = {"bad": np.zeros(2)}
        with pytest.raises(ValueError, match="bad"):
            adam_step(params, {"bad": np.array([np.nan, 0.0])}, AdamState.for_params(params), 0.1)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(ValueError, match="mirror"):
            adam_step(params, {"w": np.zeros(3)}, AdamState.for_params(params), 0.1)


class TestFit:
    @staticmethod
    def _quadratic_problem():
        # minimize sum of (w - item)^2 over items; dev metric is -loss at w
        params = {"w": np.array([5.0])}
        items = [np.array([float(i % 3)]) for i in range(30)]

        def grad_fn(item):
            diff = params["w"] - item
            return float(diff @ diff), {"w": 2.0 * diff}

        def dev_metric():
            return -float(np.sum((params["w"] - 1.0) ** 2))

        return params, items, grad_fn, dev_metric

    def test_zero_epochs_returns_initial(self):
        params, items, grad_fn, dev_metric = self._quadratic_problem()
        config = TrainConfig(max_epochs=0)
        out, history = fit(params, items, grad_fn, dev_metric, config, seed=13)
        assert history == []
        np.testing.assert_array_equal(out["w"], [5.0])

    def test_converges_and_returns_best(self):
        params, items, grad_fn, dev_metric = self._quadratic_problem()
        config = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=40, patience=40)
        _, history = fit(params, items, grad_fn, dev_metric, config, seed=13)
        assert params["w"][0] == pytest.approx(1.0, abs=0.2)

    def test_same_seed_bit_identical(self):
        results = []
        for _ in range(2):
            params, items, grad_fn, dev_metric = self._quadratic_problem()
            config = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=5, patience=5)
            fit(params, items, grad_fn, dev_metric, config, seed=42)
            results.append(params["w"].copy())
        assert np.array_equal(results[0], results[1])

    def test_different_seed_changes_batch_order(self):
        orders = []
        for seed in (1, 2):
            rng = trainer.shuffle_rng(seed)
            orders.append(tuple(rng.permutation(10)))
        assert orders[0] != orders[1]

    def test_early_stopping_restores_best_snapshot(self):
        # dev metric sequence is injected: improves twice then degrades forever
        params = {"w": np.array([0.0])}
        items = [np.array([1.0])]
        metric_sequence = iter([0.1, 0.5, 0.4, 0.3, 0.2])
        seen = []

        def grad_fn(item):
            return 0.0, {"w": np.array([1.0])}  # constant pull

        def dev_metric():
            m = next(metric_sequence)
            seen.append((m, params["w"].copy()))
            return m

        config = TrainConfig(learning_rate=0.1, max_epochs=10, patience=3)
        _, history = fit(params, items, grad_fn, dev_metric, config, seed=0)
        assert len(history) == 5  # 2 improving + 3 stale epochs
        best_epoch_params = seen[1][1]
        np.testing.assert_array_equal(params["w"], best_epoch_params)

    def test_tie_keeps_earlier_snapshot(self):
        params = {"w": np.array([0.0])}
        items = [np.array([1.0])]
        metric_sequence = iter([0.5, 0.5, 0.5])
        snapshots = []

        def grad_fn(item):
            return 0.0, {"w": np.array([-1.0])}

        def dev_metric():
            snapshots.append(params["w"].copy())
            return next(metric_sequence)

        config = TrainConfig(learning_rate=0.1, max_epochs=3, patience=3)
        fit(params, items, grad_fn, dev_metric, config, seed=0)
        np.testing.assert_array_equal(params["w"], snapshots[0])

    def test_divergence_aborts_with_diagnostic(self):
        params = {"w": np.array([0.0])}

        def grad_fn(item):
            return float("nan"), {"w": np.array([0.0])}

        config = TrainConfig(max_epochs=1)
        with pytest.raises(trainer.TrainingDiverged, match="epoch 0"):
            fit(params, [1], grad_fn, lambda: 0.0, config, seed=0)


class TestRunSeeds:
    def test_single_seed_mean_equals_run(self):
        train, train_store = make_ner_corpus(40, seed=500)
        dev, dev_store = make_ner_corpus(15, seed=501)
        data = ner_probe.NerExperiment(
            train=train, dev=dev, test=dev, hidden_sizes=(16,)
        )
        config = TrainConfig(learning_rate=5e-3, max_epochs=6, patience=6, seeds=(13,))
        runs = run_seeds(
            "ner", config, data, {"train": train_store, "dev": dev_store, "test": dev_store}
        )
        assert len(runs.per_seed) == 1
        assert runs.mean["f1"] == pytest.approx(runs.per_seed[0]["f1"])

    def test_three_seeds_converge_on_separable_data(self):
        train, train_store = make_ner_corpus(120, seed=502, noise=0.02)
        dev, dev_store = make_ner_corpus(40, seed=503, noise=0.02)
        data = ner_probe.NerExperiment(train=train, dev=dev, test=dev, hidden_sizes=(16,))
        config = TrainConfig(learning_rate=1e-2, max_epochs=15, patience=15)
        runs = run_seeds(
            "ner", config, data, {"train": train_store, "dev": dev_store, "test": dev_store}
        )
        assert len(runs.per_seed) == 3
        assert runs.mean["f1"] >= 0.99

    def test_unknown_task(self):
        with pytest.raises(ConfigError):
            run_seeds("pos", TrainConfig(), None, None)

    def test_mean_metrics_skips_non_numeric(self):
        mean = mean_metrics([{"seed": 1, "f1": 0.5, "note": "x"}, {"seed": 2, "f1": 1.0}])
        assert mean == {"f1": 0.75}
