"""Clustering agreement metrics: Hungarian-aligned accuracy, NMI, ARI."""

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError


def _check_pair(true_labels, predicted):
    t = np.asarray(true_labels).ravel()
    p = np.asarray(predicted).ravel()
    if t.size == 0 or p.size == 0:
        raise InvalidInputError("label arrays must be nonempty")
    if t.size != p.size:
        raise InvalidInputError(f"label lengths differ: {t.size} vs {p.size}")
    return t, p


def contingency_matrix(true_labels, predicted):
    """Counts of samples per (true class, predicted cluster) pair."""
    t, p = _check_pair(true_labels, predicted)
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    w = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(w, (ti, pi), 1)
    return w


def hungarian_accuracy(true_labels, predicted):
    """Fraction matched under the best one-to-one cluster-to-class map."""
    w = contingency_matrix(true_labels, predicted)
    size = max(w.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: w.shape[0], : w.shape[1]] = w
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum()) / float(w.sum())


def nmi(true_labels, predicted):
    """Normalized mutual information, geometric normalization, natural logs.

    Degenerate single-cluster inputs: 1.0 when the two partitions are
    identical up to relabeling, 0.0 when either partition is trivial and
    they differ.
    """
    w = contingency_matrix(true_labels, predicted)
    n = w.sum()
    pt = w.sum(axis=1) / n
    pp = w.sum(axis=0) / n
    h_t = -np.sum(pt[pt > 0] * np.log(pt[pt > 0]))
    h_p = -np.sum(pp[pp > 0] * np.log(pp[pp > 0]))
    same = w.shape[0] == w.shape[1] and np.count_nonzero(w) == w.shape[0]
    if h_t <= 0.0 or h_p <= 0.0:
        return 1.0 if same else 0.0
    joint = w / n
    mask = joint > 0
    mi = np.sum(joint[mask] * np.log(joint[mask] / np.outer(pt, pp)[mask]))
    return float(mi / np.sqrt(h_t * h_p))


def ari(true_labels, predicted):
    """Adjusted Rand index via pair counting with chance correction."""
    w = contingency_matrix(true_labels, predicted)
    n = w.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(w.astype(np.float64)).sum()
    sum_rows = comb2(w.sum(axis=1).astype(np.float64)).sum()
    sum_cols = comb2(w.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_rows * sum_cols / total
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0  # both partitions trivial and identical in pair structure
    return float((index - expected) / (max_index - expected))
