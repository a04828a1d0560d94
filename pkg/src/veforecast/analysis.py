"""Interpretability exports for trained mixture heads.

Three read-only views: absolute cosine similarity between the per-variate
embedding columns, the softmax gate weights for a variate range, and the
elementwise magnitude of a variate's mixed projection matrix. Everything is
exported as CSV matrices plus a JSON manifest; no plotting happens here.
"""

from __future__ import annotations

import csv
import json
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .head import VariateMixtureHead, compose_experts, gate_weights, mix_weights
from .models import DLinearModel, Model


def embedding_cosine_similarity(embedding: np.ndarray) -> np.ndarray:
    """C x C matrix of |cos| between embedding columns.

    Zero-norm columns (never produced by training, but representable) get 0
    similarity to everything and 1 on the diagonal; ``zero_norm_columns``
    reports which columns were affected.
    """
    e = np.asarray(embedding, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeError(f"embedding must be k x C, got shape {e.shape}")
    norms = np.linalg.norm(e, axis=0)
    zero = norms == 0.0
    unit = e / np.where(zero, 1.0, norms)
    gram = unit.T @ unit
    gram = (gram + gram.T) / 2.0  # force exact symmetry
    sim = np.minimum(np.abs(gram), 1.0)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return sim


def zero_norm_columns(embedding: np.ndarray) -> list[int]:
    e = np.asarray(embedding, dtype=np.float64)
    return [int(i) for i in np.flatnonzero(np.linalg.norm(e, axis=0) == 0.0)]


def _check_variates(variates, C: int) -> list[int]:
    out = []
    for v in variates:
        v = int(v)
        if not 0 <= v < C:
            raise IndexError(f"variate {v} outside [0, {C})")
        out.append(v)
    if not out:
        raise IndexError("empty variate selection")
    return out


def gate_weight_table(embedding: np.ndarray, variates: Sequence[int]) -> np.ndarray:
    """Rows = selected variates, columns = experts; each row sums to 1."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeError(f"embedding must be k x C, got shape {e.shape}")
    idx = _check_variates(variates, e.shape[1])
    return gate_weights(e)[:, idx].T


def weighted_weight_magnitude(head: VariateMixtureHead, variate: int) -> np.ndarray:
    """Elementwise magnitude of variate ``variate``'s mixed projection, H x (D+1)."""
    if not isinstance(head, VariateMixtureHead):
        raise ConfigError("weight-magnitude analysis needs a mixture head")
    C = head.config.C
    (variate,) = _check_variates([variate], C)
    gate = gate_weights(head.embedding)
    mixed = mix_weights(compose_experts(head.bank), gate)
    return np.abs(mixed[variate])


def model_mixture_head(model: Model) -> VariateMixtureHead:
    """The embedding-bearing head of a model; rejects CI checkpoints."""
    head = model.trend_head if isinstance(model, DLinearModel) else model.head
    if not isinstance(head, VariateMixtureHead):
        raise ConfigError(
            "this checkpoint uses the channel-independent head, which has no "
            "per-variate embedding to analyze"
        )
    return head


def write_matrix_csv(path, matrix: np.ndarray, row_labels, col_labels, corner="") -> None:
    """Delimited matrix with one label row/column; floats keep full precision."""
    matrix = np.asarray(matrix)
    if matrix.shape != (len(row_labels), len(col_labels)):
        raise ShapeError(
            f"matrix {matrix.shape} does not match {len(row_labels)} x {len(col_labels)} labels"
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([corner, *col_labels])
        for label, row in zip(row_labels, matrix):
            writer.writerow([label, *(f"{v:.17g}" for v in row)])


def write_manifest(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _labels(channel_names, C: int):
    if channel_names:
        return list(channel_names)
    return [f"v{i}" for i in range(C)]


def export_similarity(
    out_dir,
    head: VariateMixtureHead,
    variates: Optional[Sequence[int]] = None,
    channel_names: Optional[Sequence[str]] = None,
    fingerprint: str = "",
):
    """Write similarity.csv (+ manifest entry payload) under ``out_dir``.

    With ``variates`` the matrix is restricted to those columns; pairwise
    cosine similarity of a column subset equals the corresponding submatrix.
    """
    embedding = head.embedding
    labels = _labels(channel_names, head.config.C)
    if variates is not None:
        idx = _check_variates(variates, head.config.C)
        embedding = embedding[:, idx]
        labels = [labels[v] for v in idx]
    sim = embedding_cosine_similarity(embedding)
    path = f"{out_dir}/similarity.csv"
    write_matrix_csv(path, sim, labels, labels, corner="variate")
    return {
        "file": "similarity.csv",
        "shape": list(sim.shape),
        "variates": labels,
        "zero_norm_columns": zero_norm_columns(embedding),
        "fingerprint": fingerprint,
    }


def export_gate_weights(
    out_dir,
    head: VariateMixtureHead,
    variates: Sequence[int],
    channel_names: Optional[Sequence[str]] = None,
    fingerprint: str = "",
):
    """Write gates.csv: one row per selected variate, one column per expert."""
    table = gate_weight_table(head.embedding, variates)
    labels = _labels(channel_names, head.config.C)
    rows = [labels[v] for v in variates]
    cols = [f"expert{j}" for j in range(head.config.k)]
    path = f"{out_dir}/gates.csv"
    write_matrix_csv(path, table, rows, cols, corner="variate")
    return {
        "file": "gates.csv",
        "shape": list(table.shape),
        "variates": rows,
        "fingerprint": fingerprint,
    }


def export_weight_magnitude(
    out_dir,
    head: VariateMixtureHead,
    variate: int,
    channel_names: Optional[Sequence[str]] = None,
    fingerprint: str = "",
):
    """Write magnitude_v{i}.csv: |mixed weights| of one variate, H x (D+1)."""
    mag = weighted_weight_magnitude(head, variate)
    H, D1 = mag.shape
    rows = [f"h{i}" for i in range(H)]
    cols = [f"d{j}" for j in range(D1 - 1)] + ["bias"]
    name = f"magnitude_v{variate}.csv"
    write_matrix_csv(f"{out_dir}/{name}", mag, rows, cols, corner="step")
    labels = _labels(channel_names, head.config.C)
    return {
        "file": name,
        "shape": list(mag.shape),
        "variate": labels[variate],
        "domain": head.config.domain,
        "fingerprint": fingerprint,
    }
