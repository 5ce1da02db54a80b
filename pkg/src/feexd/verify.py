"""Oracle and property suites runnable from the command line.

Each check returns the measured quantities; the caller decides tolerances
(the defaults in :data:`TOLERANCES` are the ones the CLI reports against).
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .distill import aggregate_teacher, local_objective, mixture_teacher_probs, xkd_loss
from .een_model import ArchSpec, EENParams, exit_probs, exit_weights, init_model, joint_loss, value_and_grad
from .matching import TeacherWeights, brute_force_qp, solve_weights
from .selection import (
    SimilarityMatrix,
    brute_force_select,
    greedy_prune,
    removal_objective,
)
from .tensor_nn import ParamSet, Tensor, add_all, kl_divergence, scale

TOLERANCES = {
    "kd_max_abs_grad_diff": 1e-9,
    "qp_max_coord_err": 1e-6,
    "grad_max_rel_err": 1e-4,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        shown = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.metrics.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.seconds:.2f}s): {shown}"


def _random_model(rng, input_dim, hidden, classes) -> EENParams:
    return init_model(ArchSpec(input_dim, tuple(hidden), classes), seed=int(rng.integers(1 << 31)))


def _jitter_biases(model: EENParams, rng) -> None:
    for name, v in model.params.items():
        if name.endswith(".b"):
            model.params[name] = rng.normal(0, 0.3, size=v.shape)


# ---------------------------------------------------------------- KD equivalence


def check_kd_equivalence(n_configs: int = 50, seed: int = 0) -> CheckResult:
    """Gradient of the weighted per-teacher KL sum vs the mixture-teacher KL."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        n = int(rng.integers(2, 7))
        C = int(rng.integers(2, 6))
        B = int(rng.integers(1, 9))
        d = int(rng.integers(2, 6))
        hidden = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 4)))]
        student = _random_model(rng, d, hidden, C)
        _jitter_biases(student, rng)
        teacher_src = _random_model(rng, d, hidden, C)
        m = teacher_src.m
        heads = {i: ParamSet(W=rng.normal(0, 1, size=(hidden[-1], C)), b=rng.normal(0, 1, size=C))
                 for i in range(n)}
        k = TeacherWeights(rng.dirichlet(np.ones(n)), list(range(n)), 1.0, np.zeros(n))
        x = rng.normal(0, 1, size=(B, d))
        j = int(rng.integers(1, m + 1))
        backbone = teacher_src.backbone()
        per_teacher = [aggregate_teacher({0: heads[i]}, TeacherWeights(np.array([1.0]), [0], 1.0, np.zeros(1)),
                                         backbone).probs(x) for i in range(n)]
        p_mix = mixture_teacher_probs(heads, k, backbone, x)

        def split_loss(mdl):
            q = exit_probs(mdl, x, [j])[j]
            return add_all([scale(kl_divergence(Tensor(p), q), float(w)) for p, w in zip(per_teacher, k.k)])

        def mixed_loss(mdl):
            q = exit_probs(mdl, x, [j])[j]
            return kl_divergence(Tensor(p_mix), q)

        _, g1 = value_and_grad(split_loss, student)
        _, g2 = value_and_grad(mixed_loss, student)
        worst = max(worst, max(float(np.abs(g1[name] - g2[name]).max()) for name in g1))
    tol = TOLERANCES["kd_max_abs_grad_diff"]
    return CheckResult("kd", worst < tol, {"configs": n_configs, "max_abs_grad_diff": worst},
                       time.perf_counter() - start)


# ---------------------------------------------------------------- QP


def check_qp(n_instances: int = 200, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    violations = {"simplex": 0, "ordering": 0, "shift": 0}
    for _ in range(n_instances):
        n = int(rng.integers(2, 9))
        c = rng.uniform(-1, 1, size=n)
        mu = float(np.exp(rng.uniform(np.log(0.05), np.log(5.0))))
        k = solve_weights(c, mu)
        worst = max(worst, float(np.abs(k - brute_force_qp(c, mu)).max()))
        if k.min() < -1e-12 or abs(k.sum() - 1.0) > 1e-9:
            violations["simplex"] += 1
        for a, b in itertools.permutations(range(n), 2):
            if c[a] > c[b] and k[a] < k[b] - 1e-12:
                violations["ordering"] += 1
        shifted = solve_weights(c + rng.uniform(-3, 3), mu)
        if np.abs(shifted - k).max() > 1e-9:
            violations["shift"] += 1
    passed = worst < TOLERANCES["qp_max_coord_err"] and not any(violations.values())
    return CheckResult("qp", passed, {"instances": n_instances, "max_coord_err": worst, **violations},
                       time.perf_counter() - start)


# ---------------------------------------------------------------- greedy


def random_similarity(rng, n: int, dim: int = 4) -> SimilarityMatrix:
    vecs = rng.normal(size=(n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    delta = np.minimum(0.0, vecs @ vecs.T)
    np.fill_diagonal(delta, 0.0)
    return SimilarityMatrix(list(range(n)), delta)


def check_greedy(n_instances: int = 100, seed: int = 0, n_chains: int = 20) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    bound = 1.0 - 1.0 / math.e
    worst_ratio = math.inf
    bound_failures = mono_failures = sub_failures = 0
    for _ in range(n_instances):
        n = int(rng.integers(2, 13))
        K = int(rng.integers(0, min(6, n) + 1))
        delta = random_similarity(rng, n, dim=int(rng.integers(2, 6)))
        cands = list(range(n))
        kept_g = greedy_prune(cands, delta, K)
        kept_b = brute_force_select(cands, delta, K)
        f_g = removal_objective(cands, delta, set(cands) - kept_g)
        f_b = removal_objective(cands, delta, set(cands) - kept_b)
        if f_b > 0:
            worst_ratio = min(worst_ratio, f_g / f_b)
        if f_g < bound * f_b - 1e-12:
            bound_failures += 1
        for _ in range(n_chains):
            perm = [int(v) for v in rng.permutation(n)]
            b_size = int(rng.integers(0, n))
            a_size = int(rng.integers(0, b_size + 1))
            A, B, x = set(perm[:a_size]), set(perm[:b_size]), perm[b_size]
            gain_a = removal_objective(cands, delta, A | {x}) - removal_objective(cands, delta, A)
            gain_b = removal_objective(cands, delta, B | {x}) - removal_objective(cands, delta, B)
            mono_failures += gain_a < -1e-12
            sub_failures += gain_a < gain_b - 1e-12
    passed = bound_failures == 0 and mono_failures == 0 and sub_failures == 0
    ratio = worst_ratio if worst_ratio != math.inf else 1.0
    return CheckResult("greedy", passed, {"instances": n_instances, "worst_ratio": ratio,
                                          "bound_failures": bound_failures,
                                          "monotonicity_failures": int(mono_failures),
                                          "submodularity_failures": int(sub_failures)},
                       time.perf_counter() - start)


# ---------------------------------------------------------------- gradients


def finite_difference(loss_fn, model: EENParams, h: float = 1e-5) -> ParamSet:
    grads = ParamSet()
    for name, value in model.params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(model).item()
            flat[i] = orig - h
            down = loss_fn(model).item()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic: ParamSet, numeric: ParamSet, floor: float = 1e-6) -> float:
    worst = 0.0
    for name in analytic:
        a, b = analytic[name], numeric[name]
        err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(err.max()))
    return worst


def gradient_cases(n_cases: int, seed: int):
    """Yield (kind, loss_fn, model) triples cycling through CE, KL and the full local objective."""
    rng = np.random.default_rng(seed)
    kinds = ("ce", "kl", "local")
    for i in range(n_cases):
        kind = kinds[i % 3]
        d, C, B = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 7))
        hidden = [int(rng.integers(3, 6)) for _ in range(int(rng.integers(2, 4)))]
        model = _random_model(rng, d, hidden, C)
        _jitter_biases(model, rng)
        x = rng.normal(0, 1, size=(B, d))
        y = rng.integers(0, C, size=B)
        m = model.m
        S = sorted({m} | {int(j) for j in rng.integers(1, m + 1, size=2)})
        w = exit_weights(m, S)
        other = _random_model(rng, d, hidden, C)
        _jitter_biases(other, rng)
        teacher = aggregate_teacher({0: other.exit(m)},
                                    TeacherWeights(np.array([1.0]), [0], 1.0, np.zeros(1)),
                                    other.backbone())
        if kind == "ce":
            fn = lambda mdl, x=x, y=y, S=S, w=w: joint_loss(mdl, x, y, S, w)
        elif kind == "kl":
            fn = lambda mdl, x=x, S=S, teacher=teacher: xkd_loss(mdl, teacher, x, S)
        else:
            lam = float(rng.uniform(0.2, 2.0))
            fn = lambda mdl, x=x, y=y, S=S, w=w, teacher=teacher, lam=lam: local_objective(
                mdl, teacher, x, y, S, w, lam)
        yield kind, fn, model


def check_gradients(n_cases: int = 21, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    counts = {"ce": 0, "kl": 0, "local": 0}
    for kind, fn, model in gradient_cases(n_cases, seed):
        _, analytic = value_and_grad(fn, model)
        numeric = finite_difference(fn, model)
        worst = max(worst, relative_error(analytic, numeric))
        counts[kind] += 1
    return CheckResult("grad", worst < TOLERANCES["grad_max_rel_err"],
                       {"cases": n_cases, "max_rel_err": worst, **counts}, time.perf_counter() - start)


SUITES = {
    "kd": check_kd_equivalence,
    "qp": check_qp,
    "greedy": check_greedy,
    "grad": check_gradients,
}


def run_suites(names) -> list[CheckResult]:
    return [SUITES[name]() for name in names]
