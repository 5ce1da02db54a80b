"""Similarity-weighted teacher matching.

The weights maximise ``k.c - mu * ||k - 1/n||^2`` over the probability
simplex.  Completing the square turns this into the Euclidean projection of
``1/n + c / (2 mu)`` onto the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor_nn import cosine_similarity

MAX_ORACLE_DIM = 8


@dataclass
class TeacherWeights:
    k: np.ndarray
    client_ids: list[int]
    mu: float
    c: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {cid: float(v) for cid, v in zip(self.client_ids, self.k)}

    def to_json(self) -> dict:
        return {"clients": list(self.client_ids), "k": [float(v) for v in self.k],
                "c": [float(v) for v in self.c], "mu": self.mu}


def sim_vector(student_client: int, registry: Mapping[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    if student_client not in registry:
        raise KeyError(f"no registered final exit for client {student_client}")
    ids = sorted(registry)
    v_s = registry[student_client]
    c = np.array([1.0 if i == student_client else cosine_similarity(registry[i], v_s) for i in ids])
    return ids, c


def simplex_project(v) -> np.ndarray:
    """Sort-and-threshold projection onto {k >= 0, sum k = 1}."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ranks = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ranks > 0)
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def qp_objective(k, c, mu: float) -> float:
    k = np.asarray(k, dtype=np.float64)
    return float(k @ c - mu * np.sum((k - 1.0 / k.size) ** 2))


def solve_weights(c, mu: float) -> np.ndarray:
    if mu <= 0:
        raise ValueError("mu must be positive")
    c = np.asarray(c, dtype=np.float64)
    return simplex_project(np.full(c.size, 1.0 / c.size) + c / (2.0 * mu))


def match_teachers(student_client: int, registry: Mapping[int, np.ndarray], mu: float) -> TeacherWeights:
    ids, c = sim_vector(student_client, registry)
    return TeacherWeights(solve_weights(c, mu), ids, mu, c)


def self_weights(student_client: int, registry: Mapping[int, np.ndarray], mu: float) -> TeacherWeights:
    """One-hot weights on the student's own final exit (local distillation)."""
    ids, c = sim_vector(student_client, registry)
    k = np.array([1.0 if i == student_client else 0.0 for i in ids])
    return TeacherWeights(k, ids, mu, c)


# ---------------------------------------------------------------- oracle


def _bisect_project(v: np.ndarray, iters: int = 200) -> np.ndarray:
    # threshold search by bisection, no sorting
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if np.maximum(v - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0.0)


def brute_force_qp(c, mu: float, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Projected-gradient ascent reference solver for small instances."""
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    if n > MAX_ORACLE_DIM:
        raise ValueError(f"oracle limited to n <= {MAX_ORACLE_DIM}")
    if mu <= 0:
        raise ValueError("mu must be positive")
    step = 1.0 / (4.0 * mu)
    k = np.full(n, 1.0 / n)
    prev = qp_objective(k, c, mu)
    for _ in range(max_iter):
        grad = c - 2.0 * mu * (k - 1.0 / n)
        k_next = _bisect_project(k + step * grad)
        val = qp_objective(k_next, c, mu)
        moved = np.abs(k_next - k).max()
        k = k_next
        if abs(val - prev) < tol and moved < 1e-12:
            break
        prev = val
    return k
