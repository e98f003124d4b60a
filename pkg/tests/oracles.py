"""Independent reference implementations used only by tests."""

from __future__ import annotations

import numpy as np


def simplex_projection_oracle(x: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex by support search.

    Tries every candidate support size over the descending-sorted
    coordinates and keeps those satisfying the projection's optimality
    conditions: supported coordinates sit above the threshold, excluded ones
    at or below it (the shifted support then sums to one by construction).
    The projection is unique, so all surviving candidates must coincide.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    order = np.argsort(-x, kind="stable")
    xs = x[order]
    taus = (np.cumsum(xs) - 1.0) / np.arange(1, n + 1)
    support_ok = xs - taus >= -1e-12
    excluded_ok = np.append(xs[1:] - taus[:-1] <= 1e-12, True)
    valid = np.flatnonzero(support_ok & excluded_ok)
    if valid.size == 0:
        raise AssertionError("no support size satisfies the projection conditions")
    candidates = [np.maximum(x - taus[k], 0.0) for k in valid]
    for c in candidates[1:]:
        np.testing.assert_allclose(c, candidates[0], atol=1e-10)
    return candidates[0]


def confusion_matrix_oracle(true_labels, predicted_labels):
    """Macro P/R/F1 by explicit confusion counting over present classes."""
    true_labels = list(true_labels)
    predicted_labels = list(predicted_labels)
    classes = sorted(set(true_labels))
    ps, rs, f1s = [], [], []
    for c in classes:
        tp = sum(1 for t, p in zip(true_labels, predicted_labels) if t == c and p == c)
        fp = sum(1 for t, p in zip(true_labels, predicted_labels) if t != c and p == c)
        fn = sum(1 for t, p in zip(true_labels, predicted_labels) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn)
        ps.append(precision)
        rs.append(recall)
        f1s.append(
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return sum(ps) / len(ps), sum(rs) / len(rs), sum(f1s) / len(f1s)
