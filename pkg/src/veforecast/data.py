"""CSV ingestion, chronological splits, windowing, and normalization.

Conventions used throughout:

* A dataset is a T x C float64 matrix in file order; the first CSV column is
  a timestamp and is not part of the matrix.
* Splits are contiguous and chronological. Train gets floor(ratio * T) rows,
  validation likewise, test the remainder. Validation and test windows may
  reach back up to L rows into the preceding segment so that their targets
  cover the whole segment; targets never cross a boundary into the future.
* Standardization statistics are computed on the train split only.
* RevIN operates per window and per channel with no learnable affine terms.

Window batches are lazy: they hold one base matrix plus start offsets, and
materialize windows on demand, so channel-heavy datasets stay affordable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError, InsufficientDataError, ShapeError

__all__ = [
    "TimeSeriesDataset",
    "SplitSpec",
    "WindowBatch",
    "RevInState",
    "ChannelStats",
    "ForecastSplits",
    "MixedSplits",
    "ETT_SPLIT",
    "LARGE_SPLIT",
    "REVIN_EPSILON",
    "load_csv",
    "chrono_split",
    "standardize",
    "make_windows",
    "revin_normalize",
    "revin_denormalize",
    "build_mixed_dataset",
    "prepare_forecast_splits",
    "prepare_presplit",
    "select_channels",
    "dataset_fingerprint",
]

REVIN_EPSILON = 1e-5
STD_EPSILON = 1e-5


@dataclass(frozen=True)
class TimeSeriesDataset:
    """A named T x C value matrix with channel labels."""

    name: str
    values: np.ndarray
    channel_names: tuple[str, ...]
    granularity: str = "unknown"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"values must be T x C, got shape {values.shape}")
        if values.shape[1] != len(self.channel_names):
            raise ShapeError(
                f"{values.shape[1]} columns but {len(self.channel_names)} channel names"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test ratio split."""

    train_ratio: float
    val_ratio: float
    test_ratio: float

    def __post_init__(self):
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if any(r < 0 for r in ratios):
            raise DataError(f"split ratios must be nonnegative, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {ratios}")

    def boundaries(self, T: int) -> tuple[int, int]:
        """Row indices (train_end, val_end); test is the remainder to T."""
        # tiny epsilon so 0.6 * T floors to the intended integer when the
        # product lands a few ulps below it
        train_end = int(self.train_ratio * T + 1e-9)
        val_end = train_end + int(self.val_ratio * T + 1e-9)
        return train_end, val_end


ETT_SPLIT = SplitSpec(0.6, 0.2, 0.2)
LARGE_SPLIT = SplitSpec(0.7, 0.1, 0.2)


class WindowBatch:
    """Sliding (input, target) windows over one base matrix, materialized lazily.

    Window i covers base rows [starts[i], starts[i]+L) as input and
    [starts[i]+L, starts[i]+L+H) as target.
    """

    def __init__(self, base: np.ndarray, starts: np.ndarray, L: int, H: int):
        base = np.asarray(base, dtype=np.float64)
        if base.ndim != 2:
            raise ShapeError(f"base must be rows x C, got shape {base.shape}")
        starts = np.asarray(starts, dtype=np.int64)
        if starts.size and (starts.min() < 0 or starts.max() + L + H > base.shape[0]):
            raise ShapeError("window starts reach outside the base matrix")
        self._base = base.view()  # freeze our view, not the caller's array
        self._base.flags.writeable = False
        self._starts = starts
        self.L = int(L)
        self.H = int(H)

    def __len__(self) -> int:
        return int(self._starts.size)

    @property
    def count(self) -> int:
        return len(self)

    @property
    def channels(self) -> int:
        return self._base.shape[1]

    def gather(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Materialize (inputs, targets) for the selected window indices."""
        idx = np.asarray(idx, dtype=np.int64)
        s = self._starts[idx]
        rows = s[:, None] + np.arange(self.L + self.H)[None, :]
        block = self._base[rows]  # b x (L+H) x C
        return block[:, : self.L], block[:, self.L :]

    @property
    def inputs(self) -> np.ndarray:
        return self.gather(np.arange(len(self)))[0]

    @property
    def targets(self) -> np.ndarray:
        return self.gather(np.arange(len(self)))[1]


@dataclass(frozen=True)
class RevInState:
    """Per-window per-channel statistics captured during normalization."""

    means: np.ndarray  # B x C
    stds: np.ndarray  # B x C
    epsilon: float = REVIN_EPSILON


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel train-split statistics used for standardization."""

    mean: np.ndarray
    std: np.ndarray


def load_csv(path, name: str | None = None, granularity: str = "unknown") -> TimeSeriesDataset:
    """Load a UTF-8 CSV whose first column is a timestamp label.

    The remaining columns must parse as decimal numbers on every row; the
    first offending cell is reported with its row index (zero-based, header
    excluded) and column name.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    try:
        # round_trip: 17-significant-digit values parse back to the exact double
        frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed CSV {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from exc
    if frame.shape[1] < 2:
        raise DataError(f"{path} needs a timestamp column plus at least one channel")
    if frame.shape[0] < 1:
        raise DataError(f"{path} has a header but no data rows")

    channel_frame = frame.iloc[:, 1:]
    numeric = channel_frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna()
    if bad.any().any():
        col = bad.any(axis=0).idxmax()
        row = int(bad[col].idxmax())
        raise DataError(
            f"non-numeric or missing value at row {row}, column {col!r} in {path}: "
            f"{channel_frame.at[row, col]!r}"
        )
    return TimeSeriesDataset(
        name=name or path.stem,
        values=numeric.to_numpy(dtype=np.float64),
        channel_names=tuple(str(c) for c in channel_frame.columns),
        granularity=granularity,
    )


def _slice(ds: TimeSeriesDataset, lo: int, hi: int, tag: str) -> TimeSeriesDataset:
    return TimeSeriesDataset(
        name=f"{ds.name}/{tag}",
        values=ds.values[lo:hi],
        channel_names=ds.channel_names,
        granularity=ds.granularity,
    )


def chrono_split(ds: TimeSeriesDataset, spec: SplitSpec):
    """Contiguous chronological (train, val, test) row segments."""
    train_end, val_end = spec.boundaries(ds.length)
    return (
        _slice(ds, 0, train_end, "train"),
        _slice(ds, train_end, val_end, "val"),
        _slice(ds, val_end, ds.length, "test"),
    )


def standardize(train: TimeSeriesDataset, *others: TimeSeriesDataset):
    """Z-score all splits with the train split's per-channel statistics.

    Returns the standardized datasets (train first) and the stats. Channels
    with (near-)zero spread are divided by the epsilon guard instead.
    """
    if train.length == 0:
        raise DataError("cannot standardize with an empty train split")
    mean = train.values.mean(axis=0)
    std = np.maximum(train.values.std(axis=0), STD_EPSILON)
    stats = ChannelStats(mean=mean, std=std)

    def apply(ds):
        return TimeSeriesDataset(
            name=ds.name,
            values=(ds.values - mean) / std,
            channel_names=ds.channel_names,
            granularity=ds.granularity,
        )

    return [apply(train), *map(apply, others)], stats


def make_windows(ds: TimeSeriesDataset, L: int, H: int, stride: int = 1) -> WindowBatch:
    """All stride-spaced windows of ds; raises when fewer than L+H rows exist."""
    if L < 1 or H < 1 or stride < 1:
        raise DataError(f"L, H, stride must be >= 1, got {L}, {H}, {stride}")
    T = ds.length
    if T < L + H:
        raise InsufficientDataError(
            f"{ds.name}: {T} rows cannot fit one window of L={L} plus H={H}"
        )
    count = (T - L - H) // stride + 1
    starts = np.arange(count, dtype=np.int64) * stride
    return WindowBatch(base=ds.values, starts=starts, L=L, H=H)


def revin_normalize(inputs: np.ndarray, epsilon: float = REVIN_EPSILON):
    """Per-window per-channel normalization of a B x L x C input batch.

    Uses std = sqrt(var + epsilon) so constant windows map to zero instead of
    dividing by zero. Statistics are captured in the returned state and are
    constants with respect to gradients.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ShapeError(f"inputs must be B x L x C, got shape {inputs.shape}")
    if inputs.shape[1] < 2:
        raise ShapeError("RevIN needs at least 2 time steps per window")
    means = inputs.mean(axis=1)
    stds = np.sqrt(inputs.var(axis=1) + epsilon)
    normalized = (inputs - means[:, None, :]) / stds[:, None, :]
    return normalized, RevInState(means=means, stds=stds, epsilon=epsilon)


def revin_denormalize(predictions: np.ndarray, state: RevInState) -> np.ndarray:
    """Undo :func:`revin_normalize` on a B x H x C prediction batch."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.ndim != 3 or predictions.shape[::2] != state.means.shape:
        raise ShapeError(
            f"predictions {predictions.shape} do not match state {state.means.shape}"
        )
    return predictions * state.stds[:, None, :] + state.means[:, None, :]


@dataclass(frozen=True)
class ForecastSplits:
    """Standardized windowed splits of one dataset plus the train statistics."""

    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    stats: ChannelStats
    channel_names: tuple[str, ...] = ()


def prepare_forecast_splits(
    ds: TimeSeriesDataset, spec: SplitSpec, L: int, H: int
) -> ForecastSplits:
    """Split, standardize by train stats, and window one contiguous dataset.

    Validation and test windows reach back up to L rows into the preceding
    segment so their targets cover the whole segment; train windows stay
    strictly inside the train segment.
    """
    train_end, val_end = spec.boundaries(ds.length)
    _, stats = standardize(_slice(ds, 0, train_end, "train"))
    full = (ds.values - stats.mean) / stats.std

    def windows(lo, hi, tag):
        seg = TimeSeriesDataset(
            name=f"{ds.name}/{tag}", values=full[lo:hi], channel_names=ds.channel_names
        )
        return make_windows(seg, L, H)

    train = windows(0, train_end, "train")
    val = windows(max(0, train_end - L), val_end, "val")
    test = windows(max(0, val_end - L), ds.length, "test")
    return ForecastSplits(
        train=train, val=val, test=test, stats=stats, channel_names=ds.channel_names
    )


def prepare_presplit(
    train: TimeSeriesDataset,
    val: TimeSeriesDataset,
    test: TimeSeriesDataset,
    L: int,
    H: int,
) -> ForecastSplits:
    """Standardize and window splits that are not temporally adjacent.

    Used for assembled datasets whose segments come from different sources:
    no window reaches across segment ends, because the rows that precede a
    segment in storage are unrelated to it in time.
    """
    (z_train, z_val, z_test), stats = standardize(train, val, test)
    return ForecastSplits(
        train=make_windows(z_train, L, H),
        val=make_windows(z_val, L, H),
        test=make_windows(z_test, L, H),
        stats=stats,
        channel_names=train.channel_names,
    )


@dataclass(frozen=True)
class MixedSplits:
    """Pre-split multi-source dataset with a channel block manifest.

    blocks maps source name to a (start, stop) half-open channel range in the
    concatenated channel axis.
    """

    train: TimeSeriesDataset
    val: TimeSeriesDataset
    test: TimeSeriesDataset
    blocks: dict[str, tuple[int, int]]


def build_mixed_dataset(
    etth1: TimeSeriesDataset,
    etth2: TimeSeriesDataset,
    ecl: TimeSeriesDataset,
    weather: TimeSeriesDataset,
    split: SplitSpec = ETT_SPLIT,
    donor_split: SplitSpec | None = None,
) -> MixedSplits:
    """Concatenate four datasets channel-wise into one pre-split dataset.

    Each source is split chronologically; per split, the longer sources are
    truncated (tail dropped) to the first source's segment length, then
    channels are concatenated in argument order. A source whose segment is
    shorter than the first source's raises.

    By default every source uses the first source's ratio: the 10-percent
    validation slice of a 26304-row donor is shorter than a 20-percent slice
    of 17420 rows, so donor-native ratios cannot cover the reference
    validation segment at benchmark shapes. Pass ``donor_split`` to override
    the ratio used for the last two (larger) sources.
    """
    donor = donor_split or split
    sources = [
        (etth1, split),
        (etth2, split),
        (ecl, donor),
        (weather, donor),
    ]
    split_sets = [chrono_split(ds, spec) for ds, spec in sources]

    blocks: dict[str, tuple[int, int]] = {}
    offset = 0
    for ds, _ in sources:
        blocks[ds.name] = (offset, offset + ds.channels)
        offset += ds.channels

    channel_names = tuple(
        f"{ds.name}/{c}" for ds, _ in sources for c in ds.channel_names
    )

    out = []
    for split_idx, tag in enumerate(("train", "val", "test")):
        ref_len = split_sets[0][split_idx].length
        parts = []
        for (ds, _), segs in zip(sources, split_sets):
            seg = segs[split_idx]
            if seg.length < ref_len:
                raise InsufficientDataError(
                    f"{ds.name} {tag} segment has {seg.length} rows, "
                    f"needs at least {ref_len}"
                )
            parts.append(seg.values[:ref_len])
        out.append(
            TimeSeriesDataset(
                name=f"mixed/{tag}",
                values=np.concatenate(parts, axis=1),
                channel_names=channel_names,
            )
        )
    return MixedSplits(train=out[0], val=out[1], test=out[2], blocks=blocks)


def select_channels(ds: TimeSeriesDataset, indices: Sequence[int]) -> TimeSeriesDataset:
    """Dataset restricted to the given channel indices, order preserved."""
    indices = list(indices)
    if not indices:
        raise DataError("channel selection must keep at least one channel")
    bad = [i for i in indices if not 0 <= i < ds.channels]
    if bad:
        raise DataError(f"channel indices out of range for {ds.name}: {bad}")
    return TimeSeriesDataset(
        name=ds.name,
        values=ds.values[:, indices],
        channel_names=tuple(ds.channel_names[i] for i in indices),
        granularity=ds.granularity,
    )


def dataset_fingerprint(ds: TimeSeriesDataset) -> str:
    """Content hash of the value matrix (shape-aware), for artifact manifests."""
    digest = hashlib.sha256()
    digest.update(str(ds.values.shape).encode())
    digest.update(np.ascontiguousarray(ds.values).tobytes())
    return digest.hexdigest()
