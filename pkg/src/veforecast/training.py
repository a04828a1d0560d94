"""Mini-batch MSE training with Adam, plus evaluation, grid search and seed sweeps.

All model parameters are packed into one flat float64 vector (complex entries
as re/im pairs) and updated by a single Adam state, so a training run is fully
determined by (config, data, seed). Two seeded generators are used: stream
``[seed, 0]`` initializes parameters (owned by the caller or ``run_experiment``)
and stream ``[seed, 1]`` shuffles batches, so changing the init draw never
perturbs batch order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import ForecastSplits, SplitSpec, TimeSeriesDataset, WindowBatch, prepare_forecast_splits
from .errors import ConfigError, InsufficientDataError, NumericError, ShapeError, VEForecastError
from .models import Model, ModelConfig, create_model, model_param_count
from .numeric import pack_arrays, unpack_arrays

DEFAULT_SEEDS = (2021, 2022, 2023)
DEFAULT_K_SET = (2, 4, 8, 16, 32, 64, 128)
DEFAULT_P_SET = (0.25, 1.0, 4.0)

# fixed evaluation chunk: chunking only bounds memory, the reduction order is
# part of the determinism contract so the size must not depend on the data
EVAL_CHUNK = 256

# mixture-head parameter names (possibly behind a "trend."/"seasonal." prefix)
_HEAD_PARAM_SUFFIXES = ("embedding", "experts", "lora_a", "lora_b")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; L and H pin the window geometry of a run."""

    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 5e-3
    seed: int = 2021
    L: int = 360
    H: int = 96
    head_lr: Optional[float] = None  # optional separate rate for mixture-head params
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.head_lr is not None and self.head_lr <= 0:
            raise ConfigError(f"head_lr must be positive, got {self.head_lr}")
        if self.L < 2 or self.H < 1:
            raise ConfigError(f"bad window geometry L={self.L}, H={self.H}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class RunMetrics:
    """Scores of one finished training run."""

    test_mse: float
    val_mse: float
    param_count: int
    seed: int
    wall_clock_seconds: float
    train_history: tuple = ()  # mean training loss per epoch
    val_history: tuple = ()  # validation MSE after each epoch

    def __post_init__(self):
        if not self.test_mse >= 0.0:
            raise NumericError(f"test MSE must be >= 0, got {self.test_mse}")
        if not self.val_mse >= 0.0:
            raise NumericError(f"validation MSE must be >= 0, got {self.val_mse}")


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements and its gradient wrt ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse_loss of empty arrays is undefined")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


def init_adam(size: int) -> AdamState:
    return AdamState(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    config: TrainConfig,
    lr=None,
):
    """One bias-corrected Adam update; returns (new params, new state).

    ``lr`` overrides ``config.learning_rate`` and may be a per-element vector,
    which is how a separate head learning rate is applied to the packed params.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.ndim != 1:
        raise ShapeError(
            f"params and grads must be equal-length vectors, got {params.shape} and {grads.shape}"
        )
    if state.m.shape != params.shape:
        raise ShapeError(f"state size {state.m.shape} does not match params {params.shape}")
    if lr is None:
        lr = config.learning_rate
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    updated = params - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return updated, AdamState(m=m, v=v, t=t)


def _packed_width(arr: np.ndarray) -> int:
    return arr.size * (2 if np.iscomplexobj(arr) else 1)


def _lr_vector(names, templates, config: TrainConfig):
    """Scalar rate, or a per-element vector when head_lr differs from the base rate."""
    if config.head_lr is None:
        return config.learning_rate
    segments = []
    for name, arr in zip(names, templates):
        suffix = name.rsplit(".", 1)[-1]
        rate = config.head_lr if suffix in _HEAD_PARAM_SUFFIXES else config.learning_rate
        segments.append(np.full(_packed_width(arr), rate))
    if not segments:
        return config.learning_rate
    return np.concatenate(segments)


def train_model(model: Model, data: ForecastSplits, config: TrainConfig):
    """Train ``model`` in place on ``data.train``; returns (model, RunMetrics).

    Each epoch visits every training window once in a seeded shuffled order,
    records the running mean training loss, and scores ``data.val``. The
    final-epoch model is kept as is (no early stopping) and scored on
    ``data.test``. A non-finite batch loss aborts with epoch/batch context.
    """
    started = time.perf_counter()
    if model.config.H < 1:
        raise ConfigError("training requires a forecast horizon H >= 1")
    n_train = len(data.train)
    if n_train == 0:
        raise InsufficientDataError("no training windows")

    shuffle_rng = np.random.default_rng([config.seed, 1])
    names = sorted(model.params())
    templates = [model.params()[name] for name in names]
    flat = pack_arrays(templates)
    state = init_adam(flat.size)
    lr = _lr_vector(names, templates, config)

    train_history = []
    val_history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n_train)
        sse_sum = 0.0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            inputs, targets = data.train.gather(idx)
            pred, cache = model.forward(inputs)
            loss, d_pred = mse_loss(pred, targets)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss {loss} at epoch {epoch + 1}, "
                    f"batch {lo // config.batch_size + 1} (seed {config.seed})"
                )
            grads = model.backward(cache, d_pred)
            flat_grads = pack_arrays([grads[name] for name in names])
            flat, state = adam_step(flat, flat_grads, state, config, lr=lr)
            model.set_params(dict(zip(names, unpack_arrays(flat, templates))))
            sse_sum += loss * idx.size
        train_history.append(sse_sum / n_train)
        val_history.append(evaluate(model, data.val))

    metrics = RunMetrics(
        test_mse=evaluate(model, data.test),
        val_mse=val_history[-1],
        param_count=model_param_count(model.config),
        seed=config.seed,
        wall_clock_seconds=time.perf_counter() - started,
        train_history=tuple(train_history),
        val_history=tuple(val_history),
    )
    return model, metrics


def evaluate(model: Model, windows: WindowBatch, chunk: int = EVAL_CHUNK) -> float:
    """MSE over all windows, materialized in fixed-size chunks.

    Pure: no RNG, no parameter updates, and a data-independent reduction
    order, so repeated calls agree bitwise.
    """
    n = len(windows)
    if n == 0:
        raise InsufficientDataError("no windows to evaluate")
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")
    total = 0.0
    count = 0
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        inputs, targets = windows.gather(idx)
        pred, _ = model.forward(inputs)
        diff = pred - targets
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def run_experiment(
    ds: TimeSeriesDataset,
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
):
    """Window ``ds``, build a freshly seeded model, train it; (model, metrics, splits)."""
    if (model_config.L, model_config.H) != (train_config.L, train_config.H):
        raise ConfigError(
            f"window geometry disagrees: model ({model_config.L}, {model_config.H}) "
            f"vs train ({train_config.L}, {train_config.H})"
        )
    splits = prepare_forecast_splits(ds, split, train_config.L, train_config.H)
    init_rng = np.random.default_rng([train_config.seed, 0])
    model = create_model(model_config, init_rng)
    model, metrics = train_model(model, splits, train_config)
    return model, metrics, splits


@dataclass(frozen=True)
class GridEntry:
    """Seed-averaged scores of one (k, p) grid cell."""

    k: int
    p: float
    val_mse: float
    test_mse: float
    param_count: int
    runs: tuple = ()  # per-seed RunMetrics


@dataclass(frozen=True)
class GridResult:
    entries: Mapping  # (k, p) -> GridEntry, completed cells only
    chosen: tuple  # (k, p) with the smallest seed-averaged validation MSE
    failures: Mapping  # (k, p) -> reason string for excluded cells

    def best(self) -> GridEntry:
        return self.entries[self.chosen]


def _select(entries) -> tuple:
    # validation MSE first; ties fall to the cheaper cell, then the smaller
    # k, then the smaller p so the choice is a total order
    def key(item):
        (k, p), entry = item
        return (entry.val_mse, entry.param_count, k, p)

    return min(entries.items(), key=key)[0]


def grid_search(
    model_config: ModelConfig,
    data: ForecastSplits,
    train_config: TrainConfig,
    k_set: Sequence[int] = DEFAULT_K_SET,
    p_set: Sequence[float] = DEFAULT_P_SET,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    run_cell: Optional[Callable[[int, float, int], RunMetrics]] = None,
    on_cell: Optional[Callable] = None,
    precomputed: Optional[Mapping] = None,
) -> GridResult:
    """Train every (k, p, seed) cell and pick the (k, p) with the best val MSE.

    ``run_cell(k, p, seed) -> RunMetrics`` may be injected for testing or
    distribution; the default trains a freshly seeded model per cell. A cell
    whose run raises is recorded under ``failures`` and excluded from the
    selection. ``on_cell(k, p, entry, error)`` fires after every cell, and
    ``precomputed`` entries are reused without retraining (resume support).
    Test MSE is reported but never consulted by the selection.
    """
    if not k_set or not p_set or not seeds:
        raise ConfigError("k_set, p_set and seeds must all be nonempty")
    if run_cell is None:
        run_cell = _default_run_cell(model_config, data, train_config)

    entries = {}
    failures = {}
    for k in k_set:
        for p in p_set:
            cell = (k, p)
            if precomputed is not None and cell in precomputed:
                entries[cell] = precomputed[cell]
                continue
            runs = []
            error = None
            for seed in seeds:
                try:
                    runs.append(run_cell(k, p, seed))
                except VEForecastError as exc:
                    error = f"seed {seed}: {exc}"
                    break
            if error is not None:
                failures[cell] = error
                if on_cell is not None:
                    on_cell(k, p, None, error)
                continue
            entry = GridEntry(
                k=k,
                p=p,
                val_mse=float(np.mean([r.val_mse for r in runs])),
                test_mse=float(np.mean([r.test_mse for r in runs])),
                param_count=runs[0].param_count,
                runs=tuple(runs),
            )
            entries[cell] = entry
            if on_cell is not None:
                on_cell(k, p, entry, None)
    if not entries:
        raise NumericError(f"every grid cell failed: {failures}")
    return GridResult(entries=entries, chosen=_select(entries), failures=failures)


def _default_run_cell(model_config: ModelConfig, data: ForecastSplits, train_config: TrainConfig):
    def run(k: int, p: float, seed: int) -> RunMetrics:
        cfg = replace(model_config, k=k, p=p)
        init_rng = np.random.default_rng([seed, 0])
        model = create_model(cfg, init_rng)
        _, metrics = train_model(model, data, replace(train_config, seed=seed))
        return metrics

    return run


@dataclass(frozen=True)
class SeedSummary:
    """Per-seed metrics plus the mean/std (population) used for reporting."""

    runs: tuple
    mean_test_mse: float
    std_test_mse: float
    mean_val_mse: float
    std_val_mse: float


def multi_seed_run(
    run: Callable[[int], RunMetrics], seeds: Sequence[int] = DEFAULT_SEEDS
) -> SeedSummary:
    """Invoke ``run(seed)`` per seed and aggregate test/val MSE."""
    if not seeds:
        raise ConfigError("multi_seed_run needs at least one seed")
    runs = tuple(run(seed) for seed in seeds)
    tests = np.array([r.test_mse for r in runs])
    vals = np.array([r.val_mse for r in runs])
    return SeedSummary(
        runs=runs,
        mean_test_mse=float(tests.mean()),
        std_test_mse=float(tests.std()),
        mean_val_mse=float(vals.mean()),
        std_val_mse=float(vals.std()),
    )
