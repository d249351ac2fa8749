"""Clustering error with optimal label matching, classification error, embedding export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels


def hard_labels(w) -> np.ndarray:
    """Row argmax; ``np.argmax`` already resolves ties to the lowest index."""
    return np.argmax(np.asarray(w), axis=1)


def _check_labels(pred, truth, k):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ValueError("no samples to score")
    for name, v in (("prediction", pred), ("label", truth)):
        if v.min() < 0 or v.max() >= k:
            raise ValueError(f"{name} out of range [0, {k})")
    return pred, truth


def confusion_table(pred, truth, k) -> np.ndarray:
    """Counts with predicted cluster on rows and true label on columns."""
    pred, truth = _check_labels(pred, truth, k)
    return _kernels.confusion(pred, truth, k)


@dataclass
class ClusteringScore:
    error: float
    mapping: dict  # true label -> predicted cluster
    table: np.ndarray


def clustering_error(pred, truth, k) -> ClusteringScore:
    """1 - best one-to-one matched fraction of samples (denominator N)."""
    table = confusion_table(pred, truth, k)
    rows, cols = linear_sum_assignment(table, maximize=True)
    matched = int(table[rows, cols].sum())
    n = int(table.sum())
    return ClusteringScore(1.0 - matched / n, {int(c): int(r) for r, c in zip(rows, cols)}, table)


def classification_error(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ValueError("no samples to score")
    return float(np.mean(pred != truth))


def export_embeddings(enet, x, labels=None) -> list[dict]:
    """One row per sample: bottleneck features, true label (or -1), predicted cluster."""
    feats = enet.embed(x)
    pred = hard_labels(enet.predict(x))
    if labels is None:
        labels = np.full(len(feats), -1)
    rows = []
    for f, t, p in zip(feats, labels, pred):
        row = {f"f{j}": float(v) for j, v in enumerate(f)}
        row["label"] = int(t)
        row["pred"] = int(p)
        rows.append(row)
    return rows


def embeddings_csv(rows) -> str:
    if not rows:
        return ""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return out.getvalue()
