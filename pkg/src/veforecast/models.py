"""Forecasting backbones with pluggable projection heads.

Three channel-independent architectures share one contract:

* ``linear``: window -> (instance norm) -> one projection -> (denorm).
* ``dlinear``: the window is decomposed into a moving-average trend and a
  seasonal remainder; each part gets its own projection and the forecasts
  are summed. In mixture mode both projections share a single variate
  embedding, so one gate drives both weight groups.
* ``fits``: the window is mapped to the frequency domain, low-pass truncated,
  linearly mapped to the longer output band with a complex head, zero-padded,
  and inverse-transformed to a length L+H series whose tail is the forecast.

Every model exposes ``forward`` (prediction plus a cache), ``backward``
(analytic parameter gradients given the prediction gradient; upstream paths
carry no trainable parameters and instance-norm statistics are treated as
constants), ``params`` and ``set_params`` over a flat name -> array dict.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .data import RevInState, revin_denormalize, revin_normalize
from .errors import ConfigError, ShapeError
from .head import (
    CIHead,
    VEHeadConfig,
    VariateMixtureHead,
    ci_backward,
    ci_forward,
    head_backward,
    head_forward,
    init_ci_head,
    init_ve_head,
    param_count,
)

__all__ = [
    "ModelConfig",
    "LinearModel",
    "DLinearModel",
    "FITSModel",
    "BACKBONES",
    "create_model",
    "moving_average",
    "decompose",
    "default_cutoff",
    "fits_band_widths",
    "model_param_count",
]

BACKBONES = ("linear", "dlinear", "fits")
DEFAULT_DLINEAR_KERNEL = 25


def default_cutoff(L: int, period: int = 24, harmonics: int = 2) -> int:
    """Low-pass bin count keeping `harmonics` multiples of the base period.

    The h-th harmonic of a period-`period` cycle sits at bin h * (L // period);
    the returned count keeps everything up to and including that bin, capped
    at the full one-sided width L//2 + 1.
    """
    if L < 2:
        raise ConfigError(f"look-back must be >= 2, got {L}")
    return min(harmonics * (L // period) + 1, L // 2 + 1)


def fits_band_widths(L: int, H: int, cutoff: int) -> tuple[int, int]:
    """(head output bins, padded one-sided spectrum length) for a fits model."""
    out_bins = cutoff * (L + H) // L
    target_bins = (L + H) // 2 + 1
    return out_bins, target_bins


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by all backbones.

    variant selects the projection head: "ci" (one shared weight matrix),
    "vemoe" (full-rank expert mixture) or "vemoe_lora" (low-rank experts).
    H = 0 is allowed for reconstruction-only use; training requires H >= 1.
    """

    backbone: str
    L: int
    H: int
    C: int
    variant: str = "ci"
    k: int = 4
    p: float = 1.0
    kernel: int = DEFAULT_DLINEAR_KERNEL
    cutoff: Optional[int] = None
    use_revin: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.variant not in ("ci", "vemoe", "vemoe_lora"):
            raise ConfigError(f"unknown head variant {self.variant!r}")
        if self.L < 2 or self.H < 0 or self.C < 1:
            raise ConfigError(f"bad dimensions L={self.L}, H={self.H}, C={self.C}")
        if self.backbone == "dlinear":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigError(f"moving-average kernel must be odd and >= 1, got {self.kernel}")
        if self.backbone == "fits":
            cutoff = self.cutoff if self.cutoff is not None else default_cutoff(self.L)
            if not 1 <= cutoff <= self.L // 2 + 1:
                raise ConfigError(
                    f"cutoff {cutoff} outside [1, {self.L // 2 + 1}] for L={self.L}"
                )
            out_bins, target_bins = fits_band_widths(self.L, self.H, cutoff)
            if out_bins > target_bins:
                raise ConfigError(
                    f"cutoff {cutoff} maps to {out_bins} output bins, more than the "
                    f"{target_bins} one-sided bins of a length-{self.L + self.H} series"
                )

    @property
    def resolved_cutoff(self) -> int:
        if self.backbone != "fits":
            raise ConfigError("cutoff is only defined for the fits backbone")
        return self.cutoff if self.cutoff is not None else default_cutoff(self.L)

    def head_dims(self) -> tuple[int, int, str]:
        """(D, H, domain) of the projection head this config implies."""
        if self.backbone == "fits":
            cutoff = self.resolved_cutoff
            out_bins, _ = fits_band_widths(self.L, self.H, cutoff)
            return cutoff, out_bins, "complex"
        return self.L, self.H, "real"

    def head_config(self) -> VEHeadConfig:
        D, H, domain = self.head_dims()
        mode = "lora" if self.variant == "vemoe_lora" else "full"
        return VEHeadConfig(C=self.C, D=D, H=H, k=self.k, p=self.p, domain=domain, mode=mode)


def moving_average(x: np.ndarray, kernel: int) -> np.ndarray:
    """Centered mean with replicate padding; 1-D series or B x L x C batches."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd and >= 1, got {kernel}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :, None]
    if x.ndim != 3:
        raise ShapeError(f"expected a vector or B x L x C array, got shape {x.shape}")
    if kernel == 1:
        out = x.copy()
        return out[0, :, 0] if single else out
    pad = kernel // 2
    padded = np.concatenate(
        [np.repeat(x[:, :1], pad, axis=1), x, np.repeat(x[:, -1:], pad, axis=1)], axis=1
    )
    csum = np.concatenate(
        [np.zeros((x.shape[0], 1, x.shape[2])), np.cumsum(padded, axis=1)], axis=1
    )
    out = (csum[:, kernel:] - csum[:, :-kernel]) / kernel
    return out[0, :, 0] if single else out


def decompose(x: np.ndarray, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """(trend, seasonal) with trend the moving average and seasonal the rest."""
    trend = moving_average(x, kernel)
    return trend, x - trend


Head = Union[CIHead, VariateMixtureHead]


def _init_head(config: ModelConfig, rng: np.random.Generator) -> Head:
    D, H, domain = config.head_dims()
    if config.variant == "ci":
        return init_ci_head(D, H, rng, domain=domain)
    return init_ve_head(config.head_config(), rng)


def _head_apply(head: Head, x: np.ndarray) -> np.ndarray:
    if isinstance(head, CIHead):
        return ci_forward(head.weights, x)
    return head_forward(head, x)


def _head_grads(head: Head, x: np.ndarray, d_y: np.ndarray) -> dict[str, np.ndarray]:
    if isinstance(head, CIHead):
        d_w, _ = ci_backward(head.weights, x, d_y)
        return {"weights": d_w}
    return head_backward(head, x, d_y).arrays()


class _RevinMixin:
    def _normalize(self, x):
        if self.config.use_revin:
            return revin_normalize(x)
        return x, None

    def _denormalize(self, y, state):
        if state is None:
            return y
        return revin_denormalize(y, state)

    @staticmethod
    def _scale_grad(d_pred, state: Optional[RevInState]):
        # denormalization multiplies by the per-window std, so the gradient
        # of the pre-denorm output picks up the same factor
        if state is None:
            return d_pred
        return d_pred * state.stds[:, None, :]


def _check_input(x, L, C):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != L or x.shape[2] != C:
        raise ShapeError(f"expected inputs B x {L} x {C}, got shape {x.shape}")
    return x


class LinearModel(_RevinMixin):
    """One projection from the (normalized) look-back window to the horizon."""

    def __init__(self, config: ModelConfig, head: Head):
        self.config = config
        self.head = head

    def forward(self, x):
        x = _check_input(x, self.config.L, self.config.C)
        z, state = self._normalize(x)
        y = _head_apply(self.head, z)
        return self._denormalize(y, state), {"z": z, "state": state}

    def backward(self, cache, d_pred):
        d_y = self._scale_grad(d_pred, cache["state"])
        return _head_grads(self.head, cache["z"], d_y)

    def params(self):
        return dict(self.head.params())

    def set_params(self, values):
        self.head.set_params(values)


class DLinearModel(_RevinMixin):
    """Trend/seasonal decomposition with one projection per component.

    In mixture mode both heads share one embedding object, so a single gate
    matrix weights both expert banks and its gradient is the sum of the two
    heads' contributions.
    """

    def __init__(self, config: ModelConfig, trend_head: Head, seasonal_head: Head):
        self.config = config
        self.trend_head = trend_head
        self.seasonal_head = seasonal_head

    @property
    def shared_embedding(self) -> bool:
        return isinstance(self.trend_head, VariateMixtureHead)

    def forward(self, x):
        x = _check_input(x, self.config.L, self.config.C)
        z, state = self._normalize(x)
        trend, seasonal = decompose(z, self.config.kernel)
        y = _head_apply(self.trend_head, trend) + _head_apply(self.seasonal_head, seasonal)
        return self._denormalize(y, state), {
            "trend": trend,
            "seasonal": seasonal,
            "state": state,
        }

    def backward(self, cache, d_pred):
        d_y = self._scale_grad(d_pred, cache["state"])
        trend_grads = _head_grads(self.trend_head, cache["trend"], d_y)
        seasonal_grads = _head_grads(self.seasonal_head, cache["seasonal"], d_y)
        out = {}
        for name, g in trend_grads.items():
            if name == "embedding":
                continue
            out[f"trend.{name}"] = g
        for name, g in seasonal_grads.items():
            if name == "embedding":
                continue
            out[f"seasonal.{name}"] = g
        if self.shared_embedding:
            out["embedding"] = trend_grads["embedding"] + seasonal_grads["embedding"]
        return out

    def params(self):
        out = {}
        for name, arr in self.trend_head.params().items():
            if name == "embedding":
                continue
            out[f"trend.{name}"] = arr
        for name, arr in self.seasonal_head.params().items():
            if name == "embedding":
                continue
            out[f"seasonal.{name}"] = arr
        if self.shared_embedding:
            out["embedding"] = self.trend_head.embedding
        return out

    def set_params(self, values):
        def split(prefix, head):
            sub = {
                name[len(prefix) :]: arr
                for name, arr in values.items()
                if name.startswith(prefix)
            }
            if self.shared_embedding:
                sub["embedding"] = values["embedding"]
            head.set_params(sub)

        split("trend.", self.trend_head)
        split("seasonal.", self.seasonal_head)
        if self.shared_embedding:
            # one shared array: keep both heads pointing at the same object
            self.seasonal_head.embedding = self.trend_head.embedding

    def decompose_input(self, x):
        """Expose the (trend, seasonal) split of a raw batch for inspection."""
        return decompose(np.asarray(x, dtype=np.float64), self.config.kernel)


class FITSModel(_RevinMixin):
    """Frequency-domain forecaster with a complex projection head.

    Forward: normalize -> one-sided DFT over time -> keep the lowest `cutoff`
    bins -> complex head maps them to the output band -> zero-pad -> inverse
    DFT at length L+H -> rescale amplitudes by (L+H)/L -> last H steps ->
    denormalize. `extend` returns the full length-(L+H) series instead of the
    tail, which is the whole output when H = 0.
    """

    def __init__(self, config: ModelConfig, head: Head):
        self.config = config
        self.head = head
        self.cutoff = config.resolved_cutoff
        self.out_bins, self.target_bins = fits_band_widths(config.L, config.H, self.cutoff)

    def _spectrum_forward(self, x):
        z, state = self._normalize(x)
        spec = np.fft.rfft(z, axis=1)
        s_trunc = spec[:, : self.cutoff, :]
        s_out = _head_apply(self.head, s_trunc)
        B, _, C = s_out.shape
        s_pad = np.zeros((B, self.target_bins, C), dtype=np.complex128)
        s_pad[:, : self.out_bins] = s_out
        N = self.config.L + self.config.H
        full = np.fft.irfft(s_pad, n=N, axis=1) * (N / self.config.L)
        return full, s_trunc, state

    def extend(self, x):
        """Full reconstruction-plus-forecast series, denormalized, B x (L+H) x C."""
        x = _check_input(x, self.config.L, self.config.C)
        full, _, state = self._spectrum_forward(x)
        if state is None:
            return full
        # broadcast the per-window affine over the extended length
        return full * state.stds[:, None, :] + state.means[:, None, :]

    def forward(self, x):
        x = _check_input(x, self.config.L, self.config.C)
        full, s_trunc, state = self._spectrum_forward(x)
        y = full[:, self.config.L :, :]
        return self._denormalize(y, state), {"s_trunc": s_trunc, "state": state}

    def backward(self, cache, d_pred):
        L, H = self.config.L, self.config.H
        N = L + H
        d_y = self._scale_grad(d_pred, cache["state"])
        d_full = np.zeros((d_y.shape[0], N, d_y.shape[2]))
        d_full[:, L:] = d_y
        d_full *= N / L
        # adjoint of the one-sided inverse DFT: weight 2 on paired bins, 1 on
        # DC and (even N) Nyquist, all over N
        w = np.full(self.target_bins, 2.0)
        w[0] = 1.0
        if N % 2 == 0:
            w[-1] = 1.0
        d_s_pad = (w[None, :, None] / N) * np.fft.rfft(d_full, axis=1)
        d_s_out = d_s_pad[:, : self.out_bins, :]
        return _head_grads(self.head, cache["s_trunc"], d_s_out)

    def params(self):
        return dict(self.head.params())

    def set_params(self, values):
        self.head.set_params(values)


Model = Union[LinearModel, DLinearModel, FITSModel]


def create_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Build a backbone with freshly initialized head parameters."""
    if config.backbone == "linear":
        return LinearModel(config, _init_head(config, rng))
    if config.backbone == "fits":
        return FITSModel(config, _init_head(config, rng))
    trend = _init_head(config, rng)
    seasonal = _init_head(config, rng)
    if isinstance(trend, VariateMixtureHead):
        seasonal.embedding = trend.embedding  # one gate for both banks
    return DLinearModel(config, trend, seasonal)


def model_param_count(config: ModelConfig) -> int:
    """Stored-scalar count of the whole model (heads only; backbones are fixed)."""
    head_cfg = config.head_config()
    base = param_count(head_cfg, config.variant)
    if config.backbone != "dlinear":
        return base
    if config.variant == "ci":
        return 2 * base
    embedding = config.C * config.k  # shared between the two weight groups
    return 2 * (base - embedding) + embedding
