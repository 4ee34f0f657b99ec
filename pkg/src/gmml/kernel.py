"""Numerically stable scalar/vector primitives shared by all losses.

Everything here is a pure function of its inputs and computes in 64-bit
floats. The Lp "distance" is the unrooted power sum sum_d |x_d - z_d|^p,
so p=2 is the squared Euclidean norm.
"""

import numpy as np

__all__ = ["lp_distance", "pairwise_distances", "log_sum_exp", "attention_weights"]


def lp_distance(x, z, p: float) -> float:
    """Unrooted Lp distance sum_d |x_d - z_d|^p between two vectors."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.ndim != 1 or z.ndim != 1 or x.shape != z.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {z.shape}")
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    return float(np.sum(np.abs(x - z) ** p))


def pairwise_distances(queries, supports, p: float) -> np.ndarray:
    """m x n matrix of lp_distance between every query row and support row."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    S = np.atleast_2d(np.asarray(supports, dtype=np.float64))
    if Q.shape[1] != S.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {S.shape[1]}")
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    diff = Q[:, None, :] - S[None, :, :]
    return np.sum(np.abs(diff) ** p, axis=2)


def log_sum_exp(v) -> float:
    """Max-shifted log(sum(exp(v))); safe for entries anywhere in float range."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of empty sequence")
    m = np.max(v)
    if not np.isfinite(m):
        raise ValueError("log_sum_exp requires finite entries")
    return float(m + np.log(np.sum(np.exp(v - m))))


def attention_weights(d) -> np.ndarray:
    """Softmax over negated distances: a_j = exp(-d_j) / sum_k exp(-d_k)."""
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("attention_weights of empty sequence")
    if not np.all(np.isfinite(d)):
        raise ValueError("attention_weights requires finite distances")
    s = -d
    e = np.exp(s - np.max(s))
    return e / np.sum(e)
