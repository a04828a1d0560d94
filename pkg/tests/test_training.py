import math

import numpy as np
import pytest

from veforecast.data import (
    ChannelStats,
    ForecastSplits,
    SplitSpec,
    TimeSeriesDataset,
    WindowBatch,
    prepare_forecast_splits,
)
from veforecast.errors import ConfigError, InsufficientDataError, NumericError, ShapeError
from veforecast.head import CIHead
from veforecast.models import LinearModel, ModelConfig, create_model, model_param_count
from veforecast.numeric import finite_difference_check, pack_arrays
from veforecast.training import (
    DEFAULT_SEEDS,
    GridEntry,
    RunMetrics,
    TrainConfig,
    _lr_vector,
    adam_step,
    evaluate,
    grid_search,
    init_adam,
    mse_loss,
    multi_seed_run,
    run_experiment,
    train_model,
)

SPLIT = SplitSpec(0.6, 0.2, 0.2)


def sine_dataset(T=2000, period=24.0, channels=2):
    """Noiseless sinusoids, one phase offset per channel."""
    t = np.arange(T, dtype=np.float64)
    cols = [np.sin(2.0 * np.pi * (t + 5.0 * c) / period) for c in range(channels)]
    names = tuple(f"s{c}" for c in range(channels))
    return TimeSeriesDataset(name="sine", values=np.stack(cols, axis=1), channel_names=names)


def grouped_dataset(T=1440, seed=7):
    """Two channel groups whose identical look-back windows demand opposite targets.

    Channels a* tile a fixed length-24 pattern; channels b* tile the pattern
    with its sign flipped every 24 steps, so one shared projection cannot fit
    both groups while per-group experts can fit each exactly.
    """
    rng = np.random.default_rng(seed)
    pattern = rng.normal(size=24)
    reps = T // 48 + 1
    periodic = np.tile(pattern, 2 * reps)[:T]
    flipping = np.tile(np.concatenate([pattern, -pattern]), reps)[:T]
    values = np.stack([periodic, periodic, flipping, flipping], axis=1)
    return TimeSeriesDataset(
        name="grouped", values=values, channel_names=("a0", "a1", "b0", "b1")
    )


def quick_metrics(val, test=0.0, count=10, seed=2021):
    return RunMetrics(
        test_mse=test, val_mse=val, param_count=count, seed=seed, wall_clock_seconds=0.0
    )


def packed_params(model):
    names = sorted(model.params())
    return pack_arrays([model.params()[n] for n in names])


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 10
        assert cfg.batch_size == 32
        assert cfg.learning_rate == 5e-3
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"batch_size": 0},
            {"learning_rate": 0.0},
            {"learning_rate": -1e-3},
            {"head_lr": 0.0},
            {"L": 1},
            {"H": 0},
            {"beta1": 1.0},
            {"beta2": -0.1},
            {"epsilon": 0.0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestRunMetrics:
    def test_rejects_negative_mse(self):
        with pytest.raises(NumericError):
            quick_metrics(val=0.1, test=-1.0)

    def test_rejects_nan_mse(self):
        with pytest.raises(NumericError):
            quick_metrics(val=float("nan"))


class TestMseLoss:
    def test_zero_when_equal(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        loss, grad = mse_loss(x, x.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_unit_offset(self):
        target = np.zeros((2, 3, 4))
        loss, grad = mse_loss(target + 1.0, target)
        assert loss == 1.0
        assert np.allclose(grad, 2.0 / 24.0)

    def test_gradient_passes_finite_difference(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(size=(3, 4, 2))
        target = rng.normal(size=(3, 4, 2))
        _, grad = mse_loss(pred, target)

        def loss_of(flat):
            return mse_loss(flat.reshape(pred.shape), target)[0]

        report = finite_difference_check(loss_of, pred.ravel(), grad.ravel())
        assert report.passed, str(report)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((0, 3)), np.zeros((0, 3)))


class TestAdamStep:
    def test_zero_gradient_is_fixed_point(self):
        params = np.array([1.5, -2.0, 0.25])
        updated, state = adam_step(params, np.zeros(3), init_adam(3), TrainConfig())
        assert np.array_equal(updated, params)
        assert state.t == 1

    def test_first_step_approaches_signed_rate(self):
        # bias correction makes m_hat/sqrt(v_hat) -> g/|g| as |g| grows
        cfg = TrainConfig(learning_rate=0.01)
        params = np.array([1.0, 1.0])
        grads = np.array([1e8, -1e8])
        updated, _ = adam_step(params, grads, init_adam(2), cfg)
        assert np.allclose(updated, [1.0 - 0.01, 1.0 + 0.01], atol=1e-9)

    def test_scalar_convergence(self):
        # minimize 0.5 * (x - 3)^2 from x = 0
        cfg = TrainConfig(learning_rate=0.1)
        x = np.zeros(1)
        state = init_adam(1)
        for _ in range(500):
            x, state = adam_step(x, x - 3.0, state, cfg)
        assert abs(x[0] - 3.0) < 1e-3

    def test_vector_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.1)
        params = np.array([1.0, 1.0])
        grads = np.array([1e8, 1e8])
        updated, _ = adam_step(params, grads, init_adam(2), cfg, lr=np.array([0.1, 0.0]))
        assert updated[0] == pytest.approx(0.9, abs=1e-9)
        assert updated[1] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(np.zeros(3), np.zeros(4), init_adam(3), TrainConfig())
        with pytest.raises(ShapeError):
            adam_step(np.zeros(3), np.zeros(3), init_adam(4), TrainConfig())

    def test_step_counter_advances(self):
        state = init_adam(2)
        p = np.zeros(2)
        for expected in (1, 2, 3):
            p, state = adam_step(p, np.ones(2), state, TrainConfig())
            assert state.t == expected


class TestLrVector:
    def test_scalar_without_head_rate(self):
        assert _lr_vector(["weights"], [np.zeros(4)], TrainConfig()) == 5e-3

    def test_head_parameters_get_their_own_rate(self):
        cfg = TrainConfig(learning_rate=5e-3, head_lr=1e-4)
        names = ["embedding", "trend.experts", "weights"]
        templates = [np.zeros((2, 3)), np.zeros(4), np.zeros(5)]
        lr = _lr_vector(names, templates, cfg)
        assert lr.shape == (15,)
        assert np.all(lr[:6] == 1e-4)
        assert np.all(lr[6:10] == 1e-4)
        assert np.all(lr[10:] == 5e-3)

    def test_complex_template_doubles_width(self):
        cfg = TrainConfig(head_lr=1e-4)
        lr = _lr_vector(["experts"], [np.zeros(3, dtype=np.complex128)], cfg)
        assert lr.shape == (6,)


def linear_ci_config(L=24, H=12, C=2, **kwargs):
    return ModelConfig(backbone="linear", L=L, H=H, C=C, variant="ci", **kwargs)


class TestTrainModel:
    def test_sine_task_converges(self):
        ds = sine_dataset()
        cfg = TrainConfig(L=24, H=12, seed=2021)
        _, metrics, _ = run_experiment(ds, SPLIT, linear_ci_config(), cfg)
        assert metrics.test_mse < 1e-3
        assert len(metrics.val_history) == cfg.epochs
        assert len(metrics.train_history) == cfg.epochs
        assert metrics.param_count == model_param_count(linear_ci_config())
        assert metrics.wall_clock_seconds > 0.0

    def test_training_loss_decreases_monotonically(self):
        ds = sine_dataset()
        cfg = TrainConfig(L=24, H=12, seed=2021)
        _, metrics, _ = run_experiment(ds, SPLIT, linear_ci_config(), cfg)
        hist = metrics.train_history
        for i in range(1, len(hist) - 1):
            assert hist[i + 1] <= hist[i] + 1e-6

    def test_bitwise_determinism(self):
        ds = sine_dataset(T=400)
        cfg = TrainConfig(L=24, H=12, epochs=3, seed=2021)
        model_a, metrics_a, _ = run_experiment(ds, SPLIT, linear_ci_config(), cfg)
        model_b, metrics_b, _ = run_experiment(ds, SPLIT, linear_ci_config(), cfg)
        assert np.array_equal(packed_params(model_a), packed_params(model_b))
        assert metrics_a.test_mse == metrics_b.test_mse
        assert metrics_a.val_history == metrics_b.val_history

    def test_seed_changes_the_run(self):
        ds = sine_dataset(T=400)
        base = TrainConfig(L=24, H=12, epochs=2)
        model_a, _, _ = run_experiment(ds, SPLIT, linear_ci_config(), base)
        model_b, _, _ = run_experiment(
            ds, SPLIT, linear_ci_config(), TrainConfig(L=24, H=12, epochs=2, seed=9)
        )
        assert not np.array_equal(packed_params(model_a), packed_params(model_b))

    def test_non_finite_loss_aborts_with_context(self):
        ds = sine_dataset(T=300)
        splits = prepare_forecast_splits(ds, SPLIT, 24, 12)
        model = create_model(linear_ci_config(), np.random.default_rng(0))
        names = sorted(model.params())
        poisoned = {n: np.full_like(model.params()[n], np.nan) for n in names}
        model.set_params(poisoned)
        with pytest.raises(NumericError, match=r"epoch 1.*batch 1"):
            train_model(model, splits, TrainConfig(L=24, H=12))

    def test_ve_mixture_beats_shared_projection_on_grouped_data(self):
        ds = grouped_dataset()
        cfg = TrainConfig(L=24, H=12, seed=2021)
        ci = linear_ci_config(C=4, use_revin=False)
        ve = ModelConfig(
            backbone="linear", L=24, H=12, C=4, variant="vemoe", k=2, use_revin=False
        )
        _, ci_metrics, _ = run_experiment(ds, SPLIT, ci, cfg)
        _, ve_metrics, _ = run_experiment(ds, SPLIT, ve, cfg)
        assert ve_metrics.test_mse < 0.5 * ci_metrics.test_mse

    @pytest.mark.parametrize("backbone", ["linear", "dlinear", "fits"])
    @pytest.mark.parametrize("variant", ["ci", "vemoe", "vemoe_lora"])
    def test_every_backbone_and_variant_trains(self, backbone, variant):
        ds = sine_dataset(T=240)
        cfg = TrainConfig(L=24, H=8, epochs=2, batch_size=16, seed=2021)
        model_cfg = ModelConfig(
            backbone=backbone, L=24, H=8, C=2, variant=variant, k=2, p=1.0
        )
        _, metrics, _ = run_experiment(ds, SPLIT, model_cfg, cfg)
        assert math.isfinite(metrics.test_mse)
        assert metrics.train_history[-1] < metrics.train_history[0]

    def test_empty_train_split_rejected(self):
        base = np.zeros((40, 2))
        empty = WindowBatch(base, np.array([], dtype=np.int64), 24, 12)
        some = WindowBatch(base, np.array([0, 1]), 24, 12)
        stats = ChannelStats(mean=np.zeros(2), std=np.ones(2))
        splits = ForecastSplits(train=empty, val=some, test=some, stats=stats)
        model = create_model(linear_ci_config(), np.random.default_rng(0))
        with pytest.raises(InsufficientDataError):
            train_model(model, splits, TrainConfig(L=24, H=12))

    def test_reconstruction_config_rejected(self):
        # H = 0 models exist for spectral reconstruction but cannot be trained
        cfg = ModelConfig(backbone="fits", L=24, H=0, C=2)
        model = create_model(cfg, np.random.default_rng(0))
        ds = sine_dataset(T=200)
        splits = prepare_forecast_splits(ds, SPLIT, 24, 12)
        with pytest.raises(ConfigError, match="horizon"):
            train_model(model, splits, TrainConfig(L=24, H=12))


class TestRunExperiment:
    def test_window_geometry_must_agree(self):
        with pytest.raises(ConfigError, match="geometry"):
            run_experiment(
                sine_dataset(T=200), SPLIT, linear_ci_config(L=24), TrainConfig(L=48, H=12)
            )


def persistence_model(C=3, L=8, H=4):
    """CI linear head that copies the last observed value to every horizon step."""
    weights = np.zeros((H, L + 1))
    weights[:, L - 1] = 1.0
    cfg = ModelConfig(backbone="linear", L=L, H=H, C=C, variant="ci", use_revin=False)
    return LinearModel(cfg, CIHead(weights=weights))


class TestEvaluate:
    def test_persistence_on_constant_series_scores_zero(self):
        base = np.full((50, 3), 2.5)
        windows = WindowBatch(base, np.arange(30), 8, 4)
        assert evaluate(persistence_model(), windows) == 0.0

    def test_matches_naive_window_loop(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(80, 3))
        windows = WindowBatch(base, np.arange(60), 8, 4)
        model = persistence_model()
        got = evaluate(model, windows, chunk=16)

        losses = []
        for i in range(len(windows)):
            inputs, targets = windows.gather(np.array([i]))
            pred, _ = model.forward(inputs)
            losses.append(float(np.mean((pred - targets) ** 2)))
        expected = sum(losses) / len(losses)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_pure_and_bitwise_repeatable(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(60, 3))
        windows = WindowBatch(base, np.arange(40), 8, 4)
        model = persistence_model()
        assert evaluate(model, windows) == evaluate(model, windows)

    def test_chunk_size_does_not_change_the_score(self):
        rng = np.random.default_rng(5)
        base = rng.normal(size=(300, 3))
        windows = WindowBatch(base, np.arange(280), 8, 4)
        model = persistence_model()
        full = evaluate(model, windows, chunk=512)
        assert evaluate(model, windows, chunk=7) == pytest.approx(full, rel=1e-12)

    def test_empty_windows_rejected(self):
        windows = WindowBatch(np.zeros((20, 3)), np.array([], dtype=np.int64), 8, 4)
        with pytest.raises(InsufficientDataError):
            evaluate(persistence_model(), windows)

    def test_bad_chunk_rejected(self):
        windows = WindowBatch(np.zeros((20, 3)), np.arange(5), 8, 4)
        with pytest.raises(ConfigError):
            evaluate(persistence_model(), windows, chunk=0)


class TestGridSearch:
    def run_args(self):
        """Placeholder model/data/config; mocked cells never touch them."""
        ds = sine_dataset(T=120)
        splits = prepare_forecast_splits(ds, SPLIT, 24, 12)
        return linear_ci_config(), splits, TrainConfig(L=24, H=12, epochs=1)

    def test_singleton_grid(self):
        cfg, splits, tcfg = self.run_args()
        result = grid_search(
            cfg,
            splits,
            tcfg,
            k_set=[4],
            p_set=[1.0],
            seeds=[2021],
            run_cell=lambda k, p, s: quick_metrics(val=0.3, test=0.4),
        )
        assert result.chosen == (4, 1.0)
        assert set(result.entries) == {(4, 1.0)}
        assert result.best().val_mse == pytest.approx(0.3)

    def test_mocked_minimum_ignores_test_mse(self):
        cfg, splits, tcfg = self.run_args()

        def cell(k, p, seed):
            val = abs(k - 8) + abs(p - 1)
            # the val-optimal cell gets the worst test score on purpose
            test = 100.0 if (k, p) == (8, 1.0) else 0.0
            return quick_metrics(val=val, test=test, seed=seed)

        result = grid_search(cfg, splits, tcfg, seeds=[2021], run_cell=cell)
        assert result.chosen == (8, 1.0)
        assert result.best().test_mse == 100.0

    def test_evaluates_every_cell_exactly_once(self):
        cfg, splits, tcfg = self.run_args()
        calls = []

        def cell(k, p, seed):
            calls.append((k, p, seed))
            return quick_metrics(val=1.0)

        grid_search(cfg, splits, tcfg, k_set=[2, 4], p_set=[0.25, 1.0, 4.0], seeds=[1, 2], run_cell=cell)
        assert len(calls) == 2 * 3 * 2
        assert len(set(calls)) == len(calls)

    def test_averages_over_seeds(self):
        cfg, splits, tcfg = self.run_args()
        by_seed = {1: 0.1, 2: 0.2, 3: 0.3}

        def cell(k, p, seed):
            return quick_metrics(val=by_seed[seed], test=2 * by_seed[seed], seed=seed)

        result = grid_search(
            cfg, splits, tcfg, k_set=[4], p_set=[1.0], seeds=[1, 2, 3], run_cell=cell
        )
        entry = result.best()
        assert entry.val_mse == pytest.approx(0.2)
        assert entry.test_mse == pytest.approx(0.4)
        assert len(entry.runs) == 3

    def test_tie_broken_by_param_count(self):
        cfg, splits, tcfg = self.run_args()

        def cell(k, p, seed):
            return quick_metrics(val=1.0, count=1000 - k)

        result = grid_search(
            cfg, splits, tcfg, k_set=[2, 8, 128], p_set=[1.0], seeds=[1], run_cell=cell
        )
        assert result.chosen == (128, 1.0)

    def test_full_tie_broken_by_smaller_k(self):
        cfg, splits, tcfg = self.run_args()
        result = grid_search(
            cfg,
            splits,
            tcfg,
            k_set=[8, 2, 32],
            p_set=[1.0],
            seeds=[1],
            run_cell=lambda k, p, s: quick_metrics(val=1.0, count=10),
        )
        assert result.chosen == (2, 1.0)

    def test_failed_cell_recorded_and_excluded(self):
        cfg, splits, tcfg = self.run_args()

        def cell(k, p, seed):
            if k == 4:
                raise NumericError("non-finite training loss")
            return quick_metrics(val=float(k))

        result = grid_search(
            cfg, splits, tcfg, k_set=[2, 4, 8], p_set=[1.0], seeds=[1], run_cell=cell
        )
        assert result.chosen == (2, 1.0)
        assert (4, 1.0) not in result.entries
        assert "non-finite" in result.failures[(4, 1.0)]

    def test_every_cell_failing_is_fatal(self):
        cfg, splits, tcfg = self.run_args()

        def cell(k, p, seed):
            raise NumericError("boom")

        with pytest.raises(NumericError, match="every grid cell failed"):
            grid_search(cfg, splits, tcfg, k_set=[2], p_set=[1.0], seeds=[1], run_cell=cell)

    def test_empty_axes_rejected(self):
        cfg, splits, tcfg = self.run_args()
        with pytest.raises(ConfigError):
            grid_search(cfg, splits, tcfg, k_set=[], run_cell=lambda k, p, s: None)

    def test_on_cell_callback_sees_entries_and_failures(self):
        cfg, splits, tcfg = self.run_args()
        seen = []

        def cell(k, p, seed):
            if k == 4:
                raise NumericError("bad cell")
            return quick_metrics(val=1.0)

        grid_search(
            cfg,
            splits,
            tcfg,
            k_set=[2, 4],
            p_set=[1.0],
            seeds=[1],
            run_cell=cell,
            on_cell=lambda k, p, entry, error: seen.append((k, p, entry is None, error)),
        )
        assert seen == [(2, 1.0, False, None), (4, 1.0, True, "seed 1: bad cell")]

    def test_precomputed_cells_are_not_rerun(self):
        cfg, splits, tcfg = self.run_args()
        done = GridEntry(k=2, p=1.0, val_mse=0.05, test_mse=0.1, param_count=5)
        calls = []

        def cell(k, p, seed):
            calls.append((k, p))
            return quick_metrics(val=1.0)

        result = grid_search(
            cfg,
            splits,
            tcfg,
            k_set=[2, 4],
            p_set=[1.0],
            seeds=[1],
            run_cell=cell,
            precomputed={(2, 1.0): done},
        )
        assert calls == [(4, 1.0)]
        assert result.chosen == (2, 1.0)
        assert result.entries[(2, 1.0)] is done

    def test_default_cell_really_trains(self):
        ds = sine_dataset(T=200)
        splits = prepare_forecast_splits(ds, SPLIT, 24, 4)
        cfg = ModelConfig(backbone="linear", L=24, H=4, C=2, variant="vemoe", k=2)
        tcfg = TrainConfig(L=24, H=4, epochs=1, seed=2021)
        result = grid_search(cfg, splits, tcfg, k_set=[2], p_set=[1.0], seeds=[2021])
        entry = result.best()
        assert result.chosen == (2, 1.0)
        assert entry.param_count == model_param_count(cfg)
        assert math.isfinite(entry.val_mse)
        assert entry.runs[0].seed == 2021


class TestMultiSeedRun:
    def test_default_seeds(self):
        assert DEFAULT_SEEDS == (2021, 2022, 2023)

    def test_hand_statistics(self):
        returns = {2021: 0.1, 2022: 0.2, 2023: 0.3}
        summary = multi_seed_run(lambda seed: quick_metrics(val=1.0, test=returns[seed]))
        assert summary.mean_test_mse == pytest.approx(0.2)
        # population std: sqrt(((0.1)^2 + 0 + (0.1)^2) / 3)
        assert summary.std_test_mse == pytest.approx(0.0816496580927726, abs=1e-12)

    def test_single_seed_has_zero_std(self):
        summary = multi_seed_run(lambda seed: quick_metrics(val=0.5, test=0.7), seeds=[2021])
        assert summary.std_test_mse == 0.0
        assert summary.mean_test_mse == pytest.approx(0.7)
        assert len(summary.runs) == 1

    def test_repeated_invocations_agree(self):
        run = lambda seed: quick_metrics(val=seed / 1000.0, test=seed / 500.0, seed=seed)
        a = multi_seed_run(run)
        b = multi_seed_run(run)
        assert a.mean_test_mse == b.mean_test_mse
        assert a.std_val_mse == b.std_val_mse

    def test_empty_seed_set_rejected(self):
        with pytest.raises(ConfigError):
            multi_seed_run(lambda seed: quick_metrics(val=1.0), seeds=[])
