"""Evaluation metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DataError


def per_class_f1(predictions: Sequence[str], truths: Sequence[str]) -> dict:
    """``{label: (f1, support)}`` for every label seen in either sequence."""
    if len(predictions) != len(truths):
        raise DataError(f"{len(predictions)} predictions for {len(truths)} truths")
    out = {}
    for label in sorted(set(truths) | set(predictions)):
        tp = sum(1 for p, t in zip(predictions, truths) if p == label and t == label)
        fp = sum(1 for p, t in zip(predictions, truths) if p == label and t != label)
        fn = sum(1 for p, t in zip(predictions, truths) if p != label and t == label)
        denom = 2 * tp + fp + fn
        out[label] = (2 * tp / denom if denom else 0.0, tp + fn)
    return out


def weighted_f1(predictions: Sequence[str], truths: Sequence[str]) -> float:
    """Per-class F1 averaged with weights equal to class support in ``truths``."""
    if len(predictions) != len(truths):
        raise DataError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise DataError("weighted F1 of an empty sequence")
    table = per_class_f1(predictions, truths)
    return sum(f1 * support for f1, support in table.values()) / len(truths)


def al_rate(queries: int, al_stream_len: int) -> float:
    if al_stream_len < 0 or queries < 0:
        raise DataError("counts must be >= 0")
    if queries > al_stream_len:
        raise DataError(f"{queries} queries exceed the {al_stream_len} active-learning samples")
    return queries / al_stream_len if al_stream_len else 0.0


def silhouette_score(x, labels) -> float:
    """Mean silhouette over all points with Euclidean distance (0 for singleton clusters)."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2 or len(uniq) >= len(x):
        raise DataError("silhouette needs 2 <= n_clusters < n_samples")
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1))
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        if own.sum() < 2:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, labels == c].mean() for c in uniq if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())
