"""PCA reducer fitted once on the accumulated embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import params
from .errors import DataError, PipelineError


@dataclass(frozen=True, eq=False)
class ReducerModel:
    mean: np.ndarray
    components: np.ndarray  # (input_dim, out_dim), orthonormal columns
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.components.shape[0]

    @property
    def out_dim(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return transform(self, x)

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) @ self.components.T + self.mean

    def save(self, path):
        params.save(path, "reducer", {
            "mean": self.mean, "components": self.components,
            "explained_variance": self.explained_variance,
            "explained_variance_ratio": self.explained_variance_ratio,
        })

    @classmethod
    def load(cls, path) -> "ReducerModel":
        t, _ = params.load(path, "reducer")
        return cls(t["mean"], t["components"], t["explained_variance"], t["explained_variance_ratio"])


def fit(embeddings, out_dim: int = 2) -> ReducerModel:
    """Top-``out_dim`` eigenvectors of the unbiased sample covariance.

    Each component is flipped so its largest-magnitude coordinate is positive.
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise DataError("embeddings must form a 2-D array")
    n, d = x.shape
    if out_dim < 1:
        raise DataError("out_dim must be >= 1")
    if out_dim > d:
        raise DataError(f"out_dim {out_dim} exceeds input dimension {d}")
    if n < out_dim + 1:
        raise PipelineError(f"reducer needs at least {out_dim + 1} embeddings, got {n}")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, ddof=1).reshape(d, d)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:out_dim]
    comps = evecs[:, order]
    for j in range(out_dim):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    top = evals[order]
    ratio = top / total if total > 0 else np.zeros(out_dim)
    return ReducerModel(mean, comps, top, ratio)


def transform(reducer: ReducerModel, embedding) -> np.ndarray:
    """Project one embedding ``(d,)`` or a batch ``(n, d)``."""
    e = np.asarray(embedding, dtype=float)
    if e.shape[-1] != reducer.input_dim:
        raise DataError(f"embedding has {e.shape[-1]} dimensions, reducer expects {reducer.input_dim}")
    return (e - reducer.mean) @ reducer.components
