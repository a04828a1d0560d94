"""Variate-embedding mixture projection head.

The head replaces a channel-independent final projection ``Y = W X`` with a
per-variate projection built from k shared expert weight matrices. A learnable
embedding matrix (one k-dimensional column per variate) is pushed through a
column-wise softmax and the resulting gate weights form, for every variate, a
convex combination of the experts:

    gate = softmax(embedding, per column)              # k x C
    W_i  = sum_j gate[j, i] * P_j                      # H x (D+1), variate i
    y_i  = W_i [x_i; 1]                                # bias-augmented input

Experts are stored either as full ``H x (D+1)`` matrices or as low-rank factor
pairs ``A_j (H x r)`` and ``B_j (r x (D+1))`` with ``P_j = A_j B_j``. The rank
is derived from a parameter-budget expansion ratio p, see :func:`lora_rank`.

Both a real and a complex weight domain are supported; the gate logits are
always real, so in the complex domain the experts are combined with real
convex coefficients. Forward and backward passes are pure functions of the
parameter arrays and may run concurrently on disjoint batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "VEHeadConfig",
    "ExpertBank",
    "VariateMixtureHead",
    "CIHead",
    "HeadGradients",
    "lora_rank",
    "effective_p",
    "gate_weights",
    "compose_experts",
    "mix_weights",
    "ve_project",
    "head_forward",
    "head_backward",
    "ci_forward",
    "ci_backward",
    "param_count",
    "init_ci_head",
    "init_ve_head",
    "augment_bias",
]

REAL = "real"
COMPLEX = "complex"

MODE_FULL = "full"
MODE_LORA = "lora"

VARIANT_CI = "ci"
VARIANT_VEMOE = "vemoe"
VARIANT_VEMOE_LORA = "vemoe_lora"
VARIANTS = (VARIANT_CI, VARIANT_VEMOE, VARIANT_VEMOE_LORA)


def lora_rank(D: int, H: int, k: int, p: float) -> int:
    """Expert rank for a target parameter budget of ``p`` times the plain layer.

    ``r = floor(p * (D+1) * H / (k * (D+1+H)))``, clamped to at least 1 so no
    expert degenerates to rank zero. Exact rational arithmetic is used so the
    floor is unambiguous at integer boundaries.
    """
    if D < 1 or H < 1 or k < 1:
        raise ConfigError(f"D, H, k must all be >= 1, got D={D}, H={H}, k={k}")
    if p <= 0:
        raise ConfigError(f"expansion ratio p must be positive, got {p}")
    r = math.floor(Fraction(p) * (D + 1) * H / (k * (D + 1 + H)))
    return max(1, int(r))


def effective_p(D: int, H: int, k: int, p: float) -> float:
    """Expansion ratio actually realized once the rank clamp has applied.

    Equals ``p`` up to flooring when the raw rank is >= 1; larger than the
    requested ``p`` when the clamp kicked in. Useful metadata for reports.
    """
    r = lora_rank(D, H, k, p)
    return r * k * (D + 1 + H) / ((D + 1) * H)


@dataclass(frozen=True)
class VEHeadConfig:
    """Dimensions of one mixture head.

    C: variate count, D: input feature width (before the bias column),
    H: output width, k: expert count, p: parameter expansion ratio used to
    derive the low-rank factor rank.
    """

    C: int
    D: int
    H: int
    k: int
    p: float = 1.0
    domain: str = REAL
    mode: str = MODE_FULL

    def __post_init__(self):
        for name in ("C", "D", "H", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.domain not in (REAL, COMPLEX):
            raise ConfigError(f"domain must be 'real' or 'complex', got {self.domain!r}")
        if self.mode not in (MODE_FULL, MODE_LORA):
            raise ConfigError(f"mode must be 'full' or 'lora', got {self.mode!r}")
        if self.p <= 0:
            raise ConfigError(f"p must be positive, got {self.p}")

    @property
    def r(self) -> int:
        return lora_rank(self.D, self.H, self.k, self.p)

    @property
    def dtype(self):
        return np.complex128 if self.domain == COMPLEX else np.float64

    @property
    def variant(self) -> str:
        return VARIANT_VEMOE if self.mode == MODE_FULL else VARIANT_VEMOE_LORA


@dataclass
class ExpertBank:
    """k expert projections, stored full or as low-rank factor pairs.

    full: k x H x (D+1) stacked matrices, or
    a: k x H x r and b: k x r x (D+1) with expert j given by ``a[j] @ b[j]``.
    """

    mode: str
    full: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode == MODE_FULL:
            if self.full is None or self.full.ndim != 3:
                raise ShapeError("full mode requires a k x H x (D+1) expert stack")
        elif self.mode == MODE_LORA:
            if self.a is None or self.b is None:
                raise ShapeError("lora mode requires both factor stacks")
            if self.a.ndim != 3 or self.b.ndim != 3:
                raise ShapeError("factor stacks must be 3-D (k leading axis)")
            if self.a.shape[0] != self.b.shape[0] or self.a.shape[2] != self.b.shape[1]:
                raise ShapeError(
                    f"factor shapes disagree: a {self.a.shape} vs b {self.b.shape}"
                )
            if self.a.shape[2] < 1:
                raise ShapeError("factor rank must be at least 1")
        else:
            raise ConfigError(f"unknown expert mode {self.mode!r}")

    @property
    def k(self) -> int:
        return self.full.shape[0] if self.mode == MODE_FULL else self.a.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        if self.mode == MODE_FULL:
            return {"experts": self.full}
        return {"lora_a": self.a, "lora_b": self.b}


@dataclass
class VariateMixtureHead:
    """Learnable state of a mixture head: gate logits plus the expert bank."""

    config: VEHeadConfig
    embedding: np.ndarray  # k x C, always real
    bank: ExpertBank

    def __post_init__(self):
        if self.embedding.shape != (self.config.k, self.config.C):
            raise ShapeError(
                f"embedding shape {self.embedding.shape} does not match "
                f"(k={self.config.k}, C={self.config.C})"
            )

    def params(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        out.update(self.bank.arrays())
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        self.embedding = values["embedding"]
        if self.bank.mode == MODE_FULL:
            self.bank.full = values["experts"]
        else:
            self.bank.a = values["lora_a"]
            self.bank.b = values["lora_b"]


@dataclass
class CIHead:
    """Plain channel-independent projection: one H x (D+1) weight matrix."""

    weights: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        self.weights = values["weights"]


def gate_weights(embedding: np.ndarray) -> np.ndarray:
    """Column-wise softmax of the embedding with max subtraction for stability."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 2:
        raise ShapeError(f"embedding must be k x C, got shape {embedding.shape}")
    shifted = embedding - embedding.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=0, keepdims=True)


def compose_experts(bank: ExpertBank) -> np.ndarray:
    """Materialize the k expert matrices; in lora mode ``P_j = A_j B_j``."""
    if bank.mode == MODE_FULL:
        return bank.full
    return np.einsum("khr,krd->khd", bank.a, bank.b)


def mix_weights(experts: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Per-variate weights ``W_i = sum_j gate[j,i] P_j``; returns C x H x (D+1)."""
    experts = np.asarray(experts)
    gate = np.asarray(gate, dtype=np.float64)
    if experts.ndim != 3 or gate.ndim != 2 or experts.shape[0] != gate.shape[0]:
        raise ShapeError(
            f"experts {experts.shape} and gate {gate.shape} are inconsistent"
        )
    return np.einsum("kc,khd->chd", gate, experts)


def augment_bias(x: np.ndarray) -> np.ndarray:
    """Append a constant-one bias row: D x C -> (D+1) x C, B x D x C -> B x (D+1) x C."""
    pad = [(0, 0)] * x.ndim
    pad[-2] = (0, 1)
    return np.pad(x, pad, mode="constant", constant_values=1)


def ve_project(w_tilde: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply per-variate weights to bias-augmented inputs.

    ``w_tilde`` is C x H x (D+1); ``x`` is D x C or batched B x D x C (the bias
    row is appended here). Returns H x C or B x H x C.
    """
    w_tilde = np.asarray(w_tilde)
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or w_tilde.ndim != 3:
        raise ShapeError(f"bad ranks: w_tilde {w_tilde.shape}, x {x.shape}")
    if x.shape[1] + 1 != w_tilde.shape[2] or x.shape[2] != w_tilde.shape[0]:
        raise ShapeError(
            f"w_tilde {w_tilde.shape} does not match input {x.shape} (+bias row)"
        )
    x_aug = augment_bias(x)
    y = np.einsum("chd,bdc->bhc", w_tilde, x_aug)
    return y[0] if single else y


def head_forward(head: VariateMixtureHead, x: np.ndarray) -> np.ndarray:
    """Gate, compose, mix, project: the full mixture-head forward pass."""
    gate = gate_weights(head.embedding)
    experts = compose_experts(head.bank)
    w_tilde = mix_weights(experts, gate)
    return ve_project(w_tilde, x)


@dataclass
class HeadGradients:
    """Gradients from one backward pass; complex arrays use d/dRe + i d/dIm."""

    embedding: np.ndarray
    experts: Optional[np.ndarray] = None
    lora_a: Optional[np.ndarray] = None
    lora_b: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        if self.experts is not None:
            out["experts"] = self.experts
        if self.lora_a is not None:
            out["lora_a"] = self.lora_a
        if self.lora_b is not None:
            out["lora_b"] = self.lora_b
        return out


def softmax_backward(gate: np.ndarray, d_gate: np.ndarray) -> np.ndarray:
    """Backprop through the column-wise softmax: g * (dg - sum_j g_j dg_j)."""
    inner = np.sum(gate * d_gate, axis=0, keepdims=True)
    return gate * (d_gate - inner)


def head_backward(head: VariateMixtureHead, x: np.ndarray, d_y: np.ndarray) -> HeadGradients:
    """Analytic gradients of the head for an upstream gradient d_y.

    ``x`` is D x C or B x D x C exactly as passed to :func:`head_forward`;
    ``d_y`` matches the forward output. In the complex domain ``d_y`` is the
    complex pairing dL/dRe(y) + i dL/dIm(y) and the returned complex gradients
    follow the same convention; the embedding gradient is always real.
    """
    single = x.ndim == 2
    if single:
        x = x[None]
        d_y = d_y[None]
    is_complex = head.config.domain == COMPLEX

    gate = gate_weights(head.embedding)
    experts = compose_experts(head.bank)
    w_tilde = mix_weights(experts, gate)
    x_aug = augment_bias(x)

    if is_complex:
        d_w_tilde = np.einsum("bhc,bdc->chd", d_y, np.conj(x_aug))
        d_x_aug = np.einsum("chd,bhc->bdc", np.conj(w_tilde), d_y)
        d_gate = np.real(np.einsum("khd,chd->kc", np.conj(experts), d_w_tilde))
    else:
        d_w_tilde = np.einsum("bhc,bdc->chd", d_y, x_aug)
        d_x_aug = np.einsum("chd,bhc->bdc", w_tilde, d_y)
        d_gate = np.einsum("khd,chd->kc", experts, d_w_tilde)

    d_experts = np.einsum("kc,chd->khd", gate, d_w_tilde)
    d_embedding = softmax_backward(gate, d_gate)
    d_x = d_x_aug[:, :-1, :]
    if single:
        d_x = d_x[0]

    if head.bank.mode == MODE_FULL:
        return HeadGradients(embedding=d_embedding, experts=d_experts, x=d_x)
    if is_complex:
        d_a = np.einsum("khd,krd->khr", d_experts, np.conj(head.bank.b))
        d_b = np.einsum("khr,khd->krd", np.conj(head.bank.a), d_experts)
    else:
        d_a = np.einsum("khd,krd->khr", d_experts, head.bank.b)
        d_b = np.einsum("khr,khd->krd", head.bank.a, d_experts)
    return HeadGradients(embedding=d_embedding, lora_a=d_a, lora_b=d_b, x=d_x)


def ci_forward(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Shared-weight projection of bias-augmented inputs (D x C or B x D x C)."""
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1] + 1 != weights.shape[1]:
        raise ShapeError(f"weights {weights.shape} do not match input {x.shape} (+bias)")
    y = np.einsum("hd,bdc->bhc", weights, augment_bias(x))
    return y[0] if single else y


def ci_backward(weights: np.ndarray, x: np.ndarray, d_y: np.ndarray):
    """Gradient of :func:`ci_forward` w.r.t. weights and input."""
    single = x.ndim == 2
    if single:
        x = x[None]
        d_y = d_y[None]
    x_aug = augment_bias(x)
    if np.iscomplexobj(weights):
        d_w = np.einsum("bhc,bdc->hd", d_y, np.conj(x_aug))
        d_x = np.einsum("hd,bhc->bdc", np.conj(weights), d_y)[:, :-1, :]
    else:
        d_w = np.einsum("bhc,bdc->hd", d_y, x_aug)
        d_x = np.einsum("hd,bhc->bdc", weights, d_y)[:, :-1, :]
    if single:
        d_x = d_x[0]
    return d_w, d_x


def param_count(config: VEHeadConfig, variant: str) -> int:
    """Stored-scalar count of a head variant; complex weights count twice.

    ci:         (D+1) * H
    vemoe:      C*k + k * (D+1) * H
    vemoe_lora: C*k + k * r * (D+1+H)

    The embedding term C*k stays real in both domains, so only the weight
    terms double for complex heads.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown head variant {variant!r}")
    scale = 2 if config.domain == COMPLEX else 1
    D, H, C, k = config.D, config.H, config.C, config.k
    if variant == VARIANT_CI:
        return (D + 1) * H * scale
    if variant == VARIANT_VEMOE:
        return C * k + k * (D + 1) * H * scale
    r = lora_rank(D, H, k, config.p)
    return C * k + k * r * (D + 1 + H) * scale


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    if dtype == np.complex128:
        re = rng.uniform(-bound, bound, size=shape)
        im = rng.uniform(-bound, bound, size=shape)
        return re + 1j * im
    return rng.uniform(-bound, bound, size=shape)


def init_ci_head(D: int, H: int, rng: np.random.Generator, domain: str = REAL) -> CIHead:
    """Plain head with torch.nn.Linear-style uniform(+-1/sqrt(fan_in)) weights."""
    dtype = np.complex128 if domain == COMPLEX else np.float64
    bound = 1.0 / math.sqrt(D + 1)
    return CIHead(weights=_uniform(rng, bound, (H, D + 1), dtype))


def init_ve_head(config: VEHeadConfig, rng: np.random.Generator) -> VariateMixtureHead:
    """Fresh mixture head: near-uniform gates, uniform(+-1/sqrt(fan_in)) experts.

    Gate logits start at Normal(0, 0.01) so initial gates are close to 1/k.
    Low-rank factors are both randomly initialized: there is no frozen base
    weight to preserve, so a zero factor would only stall training.
    """
    embedding = rng.normal(0.0, 0.01, size=(config.k, config.C))
    dtype = config.dtype
    D, H, k = config.D, config.H, config.k
    if config.mode == MODE_FULL:
        bound = 1.0 / math.sqrt(D + 1)
        full = _uniform(rng, bound, (k, H, D + 1), dtype)
        bank = ExpertBank(mode=MODE_FULL, full=full)
    else:
        r = config.r
        a = _uniform(rng, 1.0 / math.sqrt(r), (k, H, r), dtype)
        b = _uniform(rng, 1.0 / math.sqrt(D + 1), (k, r, D + 1), dtype)
        bank = ExpertBank(mode=MODE_LORA, a=a, b=b)
    return VariateMixtureHead(config=config, embedding=embedding, bank=bank)
