"""Conflict-aware student-exit selection.

Each round every sampled client keeps its final exit as a teacher and trains
the ``L`` shallowest exits as students; ``K`` more clients additionally train
exit ``L+1``.  Those ``K`` clients are picked by greedily dropping the client
whose final exit is least similar to the rest.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .tensor_nn import cosine_similarity

MAX_BRUTE_FORCE = 15


def _ratio_fraction(t: int, T: int) -> Fraction:
    if T <= 0:
        raise ValueError("T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"round {t} outside 0..{T}")
    return min(Fraction(2 * t, T), Fraction(1))


def student_ratio(t: int, T: int) -> float:
    return float(_ratio_fraction(t, T))


@dataclass
class SimilarityMatrix:
    clients: list[int]
    delta: np.ndarray

    def index(self, client: int) -> int:
        return self.clients.index(client)


def similarity_matrix(exit_registry: Mapping[int, np.ndarray], clients: Iterable[int]) -> SimilarityMatrix:
    ids = sorted(clients)
    missing = [c for c in ids if c not in exit_registry]
    if missing:
        raise KeyError(f"no registered final exit for clients {missing}")
    n = len(ids)
    delta = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            s = min(0.0, cosine_similarity(exit_registry[ids[a]], exit_registry[ids[b]]))
            delta[a, b] = delta[b, a] = s
    return SimilarityMatrix(ids, delta)


def greedy_prune(candidates: Iterable[int], delta: SimilarityMatrix, K: int) -> set[int]:
    """Drop the least similar candidate until ``K`` remain.

    Ties between equally dissimilar candidates keep the lower client id, so an
    all-zero ``delta`` leaves the ``K`` lowest ids.
    """
    remaining = sorted(candidates)
    if not 0 <= K <= len(remaining):
        raise ValueError(f"K={K} must lie in [0, {len(remaining)}]")
    while len(remaining) > K:
        rows = [delta.index(c) for c in remaining]
        sub = delta.delta[np.ix_(rows, rows)]
        scores = sub.sum(axis=0)
        worst = scores.min()
        # highest id among the tied minima goes first
        drop = max(c for c, s in zip(remaining, scores) if s == worst)
        remaining.remove(drop)
    return set(remaining)


def pair_similarity(delta: SimilarityMatrix, subset: Iterable[int]) -> float:
    rows = [delta.index(c) for c in subset]
    if not rows:
        return 0.0
    return float(delta.delta[np.ix_(rows, rows)].sum())


def removal_objective(candidates: Iterable[int], delta: SimilarityMatrix, removed: Iterable[int]) -> float:
    """Similarity gained by removing ``removed``; zero for the empty set and non-negative."""
    cands = set(candidates)
    kept = cands - set(removed)
    return pair_similarity(delta, kept) - pair_similarity(delta, cands)


def brute_force_select(candidates: Iterable[int], delta: SimilarityMatrix, K: int) -> set[int]:
    cands = sorted(candidates)
    if len(cands) > MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE} candidates")
    if not 0 <= K <= len(cands):
        raise ValueError(f"K={K} must lie in [0, {len(cands)}]")
    best, best_val = None, -math.inf
    for subset in itertools.combinations(cands, K):
        val = pair_similarity(delta, subset)
        if val > best_val:
            best, best_val = subset, val
    return set(best)


@dataclass
class RoundPlan:
    round: int
    ratio: float
    depth_L: int
    frontier_K: int
    students: dict[int, list[int]] = field(default_factory=dict)

    def student_count(self, m: int) -> int:
        return sum(len([j for j in S if j != m]) for S in self.students.values())

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "ratio": self.ratio,
            "depth_L": self.depth_L,
            "frontier_K": self.frontier_K,
            "students": {str(c): sorted(S) for c, S in sorted(self.students.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoundPlan":
        return cls(obj["round"], obj["ratio"], obj["depth_L"], obj["frontier_K"],
                   {int(c): list(S) for c, S in obj["students"].items()})


def select_students(sampled: Iterable[int], t: int, T: int, m: int,
                    delta: SimilarityMatrix | None, ratio: Fraction | float | None = None) -> RoundPlan:
    """Two-tier plan: depth-first inclusion, then similarity-aware frontier picks.

    ``ratio`` overrides the R(t) schedule (used by the full-inclusion ablation).
    """
    clients = sorted(sampled)
    if not clients:
        raise ValueError("no sampled clients")
    if m < 2:
        raise ValueError("need at least two exits")
    R = _ratio_fraction(t, T) if ratio is None else Fraction(ratio).limit_denominator(10**9)
    C = len(clients)
    # Q = round half up of (m-1)*C*R, evaluated exactly
    Q = math.floor((m - 1) * C * R + Fraction(1, 2))
    L, K = divmod(Q, C)
    students = {c: set(range(1, L + 1)) | {m} for c in clients}
    if K > 0 and L < m - 1:
        if delta is None:
            raise ValueError("a similarity matrix is needed to pick frontier exits")
        for c in greedy_prune(clients, delta, K):
            students[c].add(L + 1)
    return RoundPlan(t, float(R), L, K, {c: sorted(S) for c, S in students.items()})
