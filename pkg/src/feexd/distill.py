"""Decoupled cross-client distillation.

The server averages the final exits of all clients with the matched weights
into one head; each client then distils from that head on top of the frozen
round-start backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .een_model import EENParams, block_names, exit_probs, joint_loss
from .matching import TeacherWeights
from .tensor_nn import ParamSet, Tensor, add, add_all, kl_divergence, scale, softmax


@dataclass(frozen=True)
class AggregatedTeacher:
    head: ParamSet
    backbone_ref: ParamSet
    frozen: bool = True

    def probs(self, x) -> np.ndarray:
        return teacher_probs(self.head, self.backbone_ref, x)


def _backbone_features(backbone: ParamSet, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    j = 1
    while f"block{j}.W" in backbone:
        w, b = block_names(j)
        h = np.maximum(h @ backbone[w] + backbone[b], 0.0)
        j += 1
    return h


def teacher_probs(head: ParamSet, backbone: ParamSet, x) -> np.ndarray:
    # plain numpy: no tape, so no gradient can reach the teacher
    h = _backbone_features(backbone, x)
    return softmax(h @ head["W"] + head["b"]).data


def aggregate_teacher(final_exits: Mapping[int, ParamSet], k: TeacherWeights,
                      backbone: ParamSet | None = None) -> AggregatedTeacher:
    if len(k.client_ids) != len(k.k):
        raise ValueError("teacher weights and client ids are misaligned")
    if np.any(k.k < -1e-12) or abs(k.k.sum() - 1.0) > 1e-9:
        raise ValueError("teacher weights are not on the probability simplex")
    missing = [c for c in k.client_ids if c not in final_exits]
    if missing:
        raise KeyError(f"no final exit for clients {missing}")
    # offsets from the heaviest head keep one-hot weights and identical heads exact
    anchor = final_exits[k.client_ids[int(np.argmax(k.k))]]
    head = ParamSet((name, np.array(v, dtype=np.float64)) for name, v in anchor.items())
    for cid, weight in zip(k.client_ids, k.k):
        exit_head = final_exits[cid]
        for name in head:
            if np.shape(exit_head[name]) != head[name].shape:
                raise ValueError(f"exit of client {cid} has mismatched shape for {name}")
            if weight != 0:
                head[name] += weight * (np.asarray(exit_head[name]) - anchor[name])
    for v in head.values():
        v.setflags(write=False)
    ref = ParamSet() if backbone is None else backbone.copy()
    for v in ref.values():
        v.setflags(write=False)
    return AggregatedTeacher(head, ref)


def xkd_loss(model: EENParams, teacher: AggregatedTeacher, x, S: Iterable[int]) -> Tensor:
    if not teacher.frozen:
        raise ValueError("teacher must be frozen during local training")
    S = sorted(set(S))
    if not S:
        raise ValueError("exit set is empty")
    p_bar = Tensor(teacher.probs(x))
    student = exit_probs(model, x, S)
    return add_all([kl_divergence(p_bar, student[j]) for j in S])


def local_objective(model: EENParams, teacher: AggregatedTeacher | None, x, labels,
                    S: Iterable[int], w, lam: float) -> Tensor:
    S = sorted(set(S))
    ce = joint_loss(model, x, labels, S, w)
    if teacher is None or lam == 0:
        return ce
    return add(ce, scale(xkd_loss(model, teacher, x, S), lam))


def mixture_teacher_probs(final_exits: Mapping[int, ParamSet], k: TeacherWeights,
                          backbone: ParamSet, x) -> np.ndarray:
    """Probability mixture of the individual teachers' outputs."""
    h = _backbone_features(backbone, x)
    mix = 0.0
    for cid, weight in zip(k.client_ids, k.k):
        head = final_exits[cid]
        mix = mix + weight * softmax(h @ head["W"] + head["b"]).data
    return mix


def teacher_gap(final_exits: Mapping[int, ParamSet], k: TeacherWeights,
                teacher: AggregatedTeacher, x) -> float:
    """Mean total-variation distance between the averaged-head and mixture teachers."""
    a = teacher.probs(x)
    b = mixture_teacher_probs(final_exits, k, teacher.backbone_ref, x)
    return float(0.5 * np.abs(a - b).sum(axis=1).mean())
