"""Regression metrics and PCA projection for region embeddings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricTriple:
    r2: float | None  # None when target variance is zero (R^2 undefined)
    rmse: float
    mae: float

    def to_json(self) -> dict:
        return {"r2": self.r2, "rmse": self.rmse, "mae": self.mae}


def evaluate(predictions, targets) -> MetricTriple:
    """R-squared, RMSE, and MAE of predictions against targets.

    Zero-variance targets make R-squared undefined; it is reported as the
    explicit ``None`` sentinel while RMSE/MAE are still computed.
    """
    preds = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != y.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {y.shape}")
    if y.size < 2:
        raise ValueError(f"need at least 2 points, got {y.size}")
    err = preds - y
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return MetricTriple(r2=None, rmse=rmse, mae=mae)
    r2 = 1.0 - float(np.sum(err**2)) / ss_tot
    return MetricTriple(r2=r2, rmse=rmse, mae=mae)


def evaluate_per_indicator(predictions: np.ndarray, targets: np.ndarray) -> list[MetricTriple]:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 2:
        raise ValueError(
            f"expected matching (n, K) matrices, got {predictions.shape} vs {targets.shape}"
        )
    return [evaluate(predictions[:, k], targets[:, k]) for k in range(targets.shape[1])]


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaProjection:
    coords: np.ndarray  # (n, kept)
    components: np.ndarray  # (d, kept), orthonormal columns
    eigenvalues: np.ndarray  # all d covariance eigenvalues, descending
    kept: int


def pca_project(embeddings: np.ndarray, k: int = 2) -> PcaProjection:
    """Project onto the top-k principal axes of the centered embeddings.

    Uses an eigen-decomposition of the covariance matrix. Sign convention:
    each component's largest-magnitude entry is made positive, so results
    are deterministic. If the data rank is below k, only the informative
    axes are returned (with a warning).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] <= k:
        raise ValueError(f"need more than k={k} rows of embeddings, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    tol = max(eigvals[0], 0.0) * 1e-12
    rank = int(np.sum(eigvals > tol))
    kept = min(k, rank)
    if kept < k:
        warnings.warn(
            f"embedding rank {rank} below requested {k} axes; returning {kept}",
            stacklevel=2,
        )
    components = eigvecs[:, :kept]
    for j in range(kept):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0.0:
            components[:, j] = -components[:, j]
    return PcaProjection(
        coords=centered @ components,
        components=components,
        eigenvalues=eigvals,
        kept=kept,
    )
