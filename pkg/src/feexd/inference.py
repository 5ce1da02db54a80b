"""Confidence-threshold early exiting, MAC accounting and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .een_model import ArchSpec, EENParams, forward_all_exits


@dataclass(frozen=True)
class ExitPolicy:
    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class CostModel:
    macs_block: tuple[int, ...]
    macs_exit: tuple[int, ...]

    @classmethod
    def from_arch(cls, arch: ArchSpec) -> "CostModel":
        blocks = tuple(int(np.prod(arch.block_shape(j))) for j in range(1, arch.m + 1))
        exits = tuple(int(np.prod(arch.exit_shape(j))) for j in range(1, arch.m + 1))
        return cls(blocks, exits)

    def cumulative(self, j: int) -> int:
        """MACs to reach exit j, counting every exit head evaluated on the way."""
        return int(sum(self.macs_block[:j]) + sum(self.macs_exit[:j]))


def mac_count(arch: ArchSpec, j: int) -> int:
    if not 1 <= j <= arch.m:
        raise ValueError(f"exit index {j} outside 1..{arch.m}")
    return CostModel.from_arch(arch).cumulative(j)


def _terminate(all_probs: list[np.ndarray], epsilon: float) -> np.ndarray:
    m = len(all_probs)
    n = all_probs[0].shape[0]
    exit_idx = np.full(n, m)
    undecided = np.ones(n, dtype=bool)
    for j, probs in enumerate(all_probs[:-1], start=1):
        fire = undecided & (probs.max(axis=1) > epsilon)
        exit_idx[fire] = j
        undecided &= ~fire
    return exit_idx


def predict_with_policy(model: EENParams, x, policy: ExitPolicy, cost: CostModel | None = None):
    """Per-sample (label, exit index, MACs) arrays under the confidence rule."""
    cost = cost or CostModel.from_arch(model.arch)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    all_probs = forward_all_exits(model, x)
    exit_idx = _terminate(all_probs, policy.epsilon)
    preds = np.stack([p.argmax(axis=1) for p in all_probs], axis=1)
    labels = preds[np.arange(len(x)), exit_idx - 1]
    macs = np.array([cost.cumulative(j) for j in range(1, model.m + 1)])[exit_idx - 1]
    return labels, exit_idx, macs


@dataclass
class EvalReport:
    accuracy: float
    averaged_accuracy: float
    per_exit_accuracy: list[float]
    mean_macs: float
    exit_histogram: list[int]
    epsilon: float = 0.0

    def csv_row(self, strategy: str, round_: int) -> list:
        return ([strategy, round_, self.epsilon, self.accuracy, self.averaged_accuracy]
                + list(self.per_exit_accuracy) + [self.mean_macs] + list(self.exit_histogram))


def csv_header(m: int) -> list[str]:
    return (["strategy", "round", "epsilon", "accuracy", "averaged_accuracy"]
            + [f"per_exit_acc_{j}" for j in range(1, m + 1)] + ["mean_macs"]
            + [f"exit_hist_{j}" for j in range(1, m + 1)])


def evaluate_many(model: EENParams, features, labels, epsilons, cost: CostModel | None = None) -> list[EvalReport]:
    """One forward pass, one report per threshold."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    cost = cost or CostModel.from_arch(model.arch)
    all_probs = forward_all_exits(model, np.asarray(features, dtype=np.float64))
    preds = np.stack([p.argmax(axis=1) for p in all_probs], axis=1)
    correct = preds == labels[:, None]
    per_exit = [float(v) for v in correct.mean(axis=0)]
    macs_at = np.array([cost.cumulative(j) for j in range(1, model.m + 1)])
    reports = []
    for eps in epsilons:
        ExitPolicy(eps)
        exit_idx = _terminate(all_probs, eps)
        taken = correct[np.arange(len(labels)), exit_idx - 1]
        reports.append(EvalReport(
            accuracy=float(taken.mean()),
            averaged_accuracy=float(np.mean(per_exit)),
            per_exit_accuracy=per_exit,
            mean_macs=float(macs_at[exit_idx - 1].mean()),
            exit_histogram=[int(v) for v in np.bincount(exit_idx, minlength=model.m + 1)[1:]],
            epsilon=float(eps),
        ))
    return reports


def evaluate(model: EENParams, features, labels, policy: ExitPolicy, cost: CostModel | None = None) -> EvalReport:
    return evaluate_many(model, features, labels, [policy.epsilon], cost)[0]


def combine_reports(reports: list[EvalReport]) -> EvalReport:
    """Unweighted mean over clients; histograms are summed."""
    if not reports:
        raise ValueError("no reports to combine")
    per_exit = np.mean([r.per_exit_accuracy for r in reports], axis=0)
    return EvalReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        averaged_accuracy=float(per_exit.mean()),
        per_exit_accuracy=[float(v) for v in per_exit],
        mean_macs=float(np.mean([r.mean_macs for r in reports])),
        exit_histogram=[int(v) for v in np.sum([r.exit_histogram for r in reports], axis=0)],
        epsilon=reports[0].epsilon,
    )
