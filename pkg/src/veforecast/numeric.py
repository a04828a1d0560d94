"""Dense matrix arithmetic, real FFTs, and the finite-difference gradient check.

All public operations work on double-precision numpy arrays (real matrices are
``float64``, complex ones ``complex128``) and are pure functions: they never
mutate their inputs, so they are safe to call concurrently.

Conventions fixed here so results are reproducible bit for bit:

* forward DFT is unnormalized, the inverse carries the ``1/L`` factor
  (numpy's default);
* reductions use numpy's deterministic (pairwise) summation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "GradCheckReport",
    "matmul",
    "complex_matmul",
    "rfft",
    "irfft",
    "finite_difference_check",
    "pack_arrays",
    "unpack_arrays",
]


def _as_matrix(a, dtype, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Real matrix product ``a @ b`` with explicit shape validation."""
    a = _as_matrix(a, np.float64, "a")
    b = _as_matrix(b, np.float64, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def complex_matmul(a, b) -> np.ndarray:
    """Complex matrix product ``a @ b`` with explicit shape validation."""
    a = _as_matrix(a, np.complex128, "a")
    b = _as_matrix(b, np.complex128, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def rfft(x) -> np.ndarray:
    """One-sided DFT of a real signal of length L; returns ``L//2 + 1`` bins.

    Bin 0 is the (unnormalized) DC component: for a constant signal ``c`` of
    length L it equals ``L * c``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ShapeError(f"rfft expects a 1-D signal of length >= 2, got shape {x.shape}")
    return np.fft.rfft(x)


def irfft(spectrum, target_length: int) -> np.ndarray:
    """Inverse of :func:`rfft` for a known output length (carries the 1/L)."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    if spectrum.ndim != 1:
        raise ShapeError(f"irfft expects a 1-D spectrum, got shape {spectrum.shape}")
    if target_length < 2:
        raise ShapeError(f"target_length must be >= 2, got {target_length}")
    expected = target_length // 2 + 1
    if spectrum.shape[0] != expected:
        raise ShapeError(
            f"spectrum has {spectrum.shape[0]} bins, length {target_length} needs {expected}"
        )
    return np.fft.irfft(spectrum, n=target_length)


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing an analytic gradient against central differences."""

    max_relative_error: float
    worst_parameter_index: int
    passed: bool

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        status = "PASS" if self.passed else "FAIL"
        return (
            f"GradCheck[{status}] max_rel_err={self.max_relative_error:.3e} "
            f"at index {self.worst_parameter_index}"
        )


def finite_difference_check(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Check ``analytic_grad`` of ``loss_fn`` at ``params`` by central differences.

    Per coordinate i the finite-difference slope is
    ``(loss(p + eps e_i) - loss(p - eps e_i)) / (2 eps)`` and the relative
    error is ``|fd - an| / max(1, |fd|, |an|)``. The report carries the worst
    coordinate; ``passed`` means the worst error is within ``tolerance``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    params = np.asarray(params, dtype=np.float64).ravel()
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if params.shape != analytic_grad.shape:
        raise ShapeError(
            f"params and analytic_grad disagree: {params.shape} vs {analytic_grad.shape}"
        )

    worst_err = 0.0
    worst_idx = 0
    probe = params.copy()
    for i in range(params.shape[0]):
        original = probe[i]
        probe[i] = original + epsilon
        up = float(loss_fn(probe))
        probe[i] = original - epsilon
        down = float(loss_fn(probe))
        probe[i] = original
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(
                f"loss is not finite at probe around parameter {i}: f(+eps)={up}, f(-eps)={down}"
            )
        fd = (up - down) / (2.0 * epsilon)
        an = analytic_grad[i]
        err = abs(fd - an) / max(1.0, abs(fd), abs(an))
        if err > worst_err:
            worst_err = err
            worst_idx = i
    return GradCheckReport(
        max_relative_error=worst_err,
        worst_parameter_index=worst_idx,
        passed=worst_err <= tolerance,
    )


def pack_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten real/complex arrays into one float64 vector (complex as re,im pairs)."""
    parts = []
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        if np.iscomplexobj(arr):
            parts.append(arr.view(np.float64).ravel())
        else:
            parts.append(np.asarray(arr, dtype=np.float64).ravel())
    if not parts:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(parts)


def unpack_arrays(flat: np.ndarray, templates: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Inverse of :func:`pack_arrays`; shapes and dtypes are taken from templates."""
    flat = np.asarray(flat, dtype=np.float64).ravel()
    out = []
    offset = 0
    for tpl in templates:
        if np.iscomplexobj(tpl):
            n = 2 * tpl.size
            seg = flat[offset : offset + n].copy()
            out.append(seg.view(np.complex128).reshape(tpl.shape))
        else:
            n = tpl.size
            seg = flat[offset : offset + n].copy()
            out.append(seg.reshape(tpl.shape))
        offset += n
    if offset != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, templates need {offset}")
    return out
