"""End-to-end acceptance checks, one test per criterion (criterion 6 and 7 split by clause).

Each test prints a PASS/FAIL line; the lines are also collected into the
terminal summary by ``conftest.py``.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from feexd.cli import write_reports
from feexd.config import DataConfig, ExperimentConfig
from feexd.orchestrator import Federation, backbone_size, comm_cost, exit_size, run_strategy
from feexd.verify import check_gradients, check_greedy, check_kd_equivalence, check_qp

SEEDS = (0, 1, 2)
STRATEGIES = ("cafedistill", "fedper_ee", "joint_local_kd", "fedavg_ee")
EPS_GRID = [round(0.1 * i, 1) for i in range(1, 10)]

ABLATION = ExperimentConfig(
    n_clients=20, m_exits=3, hidden_dims=[64, 64, 64], alpha=0.3, sample_rate=0.25, rounds=60,
    epsilon_grid=EPS_GRID, data=DataConfig(num_classes=10, dim=32, per_class=200, class_sep=3.0),
)


def report(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    """Train every (strategy, seed) pair of the ablation config once."""
    root = tmp_path_factory.mktemp("ablation")
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        cfg = ABLATION.replace(seed=seed)
        for strat in STRATEGIES:
            history = run_strategy(strat, cfg.replace(strategy=strat))
            out = write_reports(history, cfg.replace(strategy=strat), root / f"{strat}_{seed}")
            runs[strat, seed] = (history, out)
    return runs, time.perf_counter() - start


def _final(runs, strat, seed):
    return runs[strat, seed][0].final_reports()[0]


def _mean(runs, strat, fn):
    return float(np.mean([fn(_final(runs, strat, s)) for s in SEEDS]))


# ---------------------------------------------------------------- exact suites


def test_c1_decoupled_kd_gradient_equivalence():
    r = check_kd_equivalence(n_configs=50, seed=0)
    ok = r.passed and r.seconds < 10
    report("C1 KD gradient equivalence", ok,
           f"{r.metrics['configs']} configs, max |dg| = {r.metrics['max_abs_grad_diff']:.2e} (< 1e-9), {r.seconds:.2f}s")
    assert ok


def test_c2_qp_solver_matches_oracle():
    r = check_qp(n_instances=200, seed=0)
    ok = r.passed and r.seconds < 10
    report("C2 QP vs oracle", ok,
           f"{r.metrics['instances']} instances, max coord err = {r.metrics['max_coord_err']:.2e} (< 1e-6), "
           f"property violations = {r.metrics['simplex'] + r.metrics['ordering'] + r.metrics['shift']}, "
           f"{r.seconds:.2f}s")
    assert ok


def test_c3_greedy_guarantee():
    r = check_greedy(n_instances=100, seed=0)
    ok = r.passed and r.seconds < 60
    report("C3 greedy >= (1-1/e) opt", ok,
           f"{r.metrics['instances']} instances, worst ratio = {r.metrics['worst_ratio']:.4f} "
           f"(bound {1 - 1 / math.e:.4f}), monotonicity/submodularity failures = "
           f"{r.metrics['monotonicity_failures']}/{r.metrics['submodularity_failures']}, {r.seconds:.2f}s")
    assert ok


def test_c4_finite_difference_gradients():
    r = check_gradients(n_cases=21, seed=0)
    ok = r.passed and r.seconds < 30
    report("C4 finite-difference gradients", ok,
           f"{r.metrics['cases']} losses (ce/kl/local = {r.metrics['ce']}/{r.metrics['kl']}/{r.metrics['local']}), "
           f"max rel err = {r.metrics['max_rel_err']:.2e} (< 1e-4), {r.seconds:.2f}s")
    assert ok


def test_c5_schedule_conformance():
    cfg = ExperimentConfig(n_clients=20, m_exits=3, hidden_dims=[8, 8, 8], rounds=100, local_epochs=1,
                           batch=32, sample_rate=0.25, eval_every=1000, alpha=1.0,
                           data=DataConfig(num_classes=10, dim=6, per_class=40))
    fed = Federation(cfg, "cafedistill")
    mismatches, teacher_missing, prev_L, non_monotone = 0, 0, -1, 0
    for t in range(1, cfg.rounds + 1):
        rec = fed.run_round()
        plan = rec["plan"]
        C = len(rec["sampled"])
        R = min(Fraction(2 * t, cfg.rounds), Fraction(1))
        Q = math.floor((cfg.m_exits - 1) * C * R + Fraction(1, 2))
        realized = sum(len([j for j in S if j != cfg.m_exits]) for S in plan["students"].values())
        mismatches += realized != Q
        teacher_missing += sum(cfg.m_exits not in S for S in plan["students"].values())
        non_monotone += plan["depth_L"] < prev_L
        prev_L = plan["depth_L"]
    ok = mismatches == 0 and teacher_missing == 0 and non_monotone == 0
    report("C5 schedule conformance", ok,
           f"T=100, count mismatches = {mismatches}, rounds without teacher = {teacher_missing}, "
           f"depth decreases = {non_monotone}")
    assert ok


# ---------------------------------------------------------------- ablation pattern


def test_c6a_cafedistill_beats_fedper(ablation):
    runs, secs = ablation
    caf = _mean(runs, "cafedistill", lambda r: r.averaged_accuracy)
    per = _mean(runs, "fedper_ee", lambda r: r.averaged_accuracy)
    ok = caf - per >= 0.02
    report("C6a cafedistill >= fedper_ee + 2pt (averaged acc)", ok,
           f"cafedistill {caf:.4f} vs fedper_ee {per:.4f} (diff {100 * (caf - per):+.2f} pt), "
           f"12 runs in {secs:.0f}s")
    assert ok


def test_c6b_local_kd_does_not_help_deep_exit(ablation):
    runs, _ = ablation
    jl = _mean(runs, "joint_local_kd", lambda r: r.per_exit_accuracy[-1])
    per = _mean(runs, "fedper_ee", lambda r: r.per_exit_accuracy[-1])
    ok = jl <= per + 0.005
    report("C6b joint_local_kd exit-m <= fedper_ee exit-m + 0.5pt", ok,
           f"joint_local_kd {jl:.4f} vs fedper_ee {per:.4f}")
    assert ok


def test_c6c_personalization_beats_global(ablation):
    runs, secs = ablation
    per = _mean(runs, "fedper_ee", lambda r: r.averaged_accuracy)
    avg = _mean(runs, "fedavg_ee", lambda r: r.averaged_accuracy)
    ok = per > avg and secs < 15 * 60
    report("C6c fedper_ee > fedavg_ee (averaged acc)", ok, f"fedper_ee {per:.4f} vs fedavg_ee {avg:.4f}")
    assert ok


# ---------------------------------------------------------------- exit policy


def test_c7a_macs_monotone_per_client(ablation):
    runs, _ = ablation
    violations, checked = 0, 0
    for seed in SEEDS:
        fed = runs["cafedistill", seed][0].federation
        _, per_client = fed.evaluate(EPS_GRID)
        for reports in per_client.values():
            macs = [r.mean_macs for r in reports]
            violations += sum(b < a for a, b in zip(macs, macs[1:]))
            checked += 1
    ok = violations == 0
    report("C7a per-client mean MACs nondecreasing in epsilon", ok,
           f"{checked} client models, {violations} violations")
    assert ok


def test_c7b_mac_reduction_at_small_accuracy_cost(ablation):
    runs, _ = ablation
    details, all_ok = [], True
    for seed in SEEDS:
        fed = runs["cafedistill", seed][0].federation
        combined, _ = fed.evaluate(EPS_GRID)
        full_macs = fed.evaluate([1.0])[0][0].mean_macs
        exit_m_acc = combined[0].per_exit_accuracy[-1]
        best = None
        for r in combined:
            reduction = 1 - r.mean_macs / full_macs
            if reduction >= 0.25 and r.accuracy >= exit_m_acc - 0.05:
                if best is None or reduction > best[1]:
                    best = (r.epsilon, reduction, r.accuracy)
        all_ok &= best is not None
        details.append(f"seed {seed}: " + ("none" if best is None else
                       f"eps={best[0]} saves {100 * best[1]:.1f}% at acc {best[2]:.4f} (exit-m {exit_m_acc:.4f})"))
    report("C7b >=25% MAC saving within 5pt of exit-m", all_ok, "; ".join(details))
    assert all_ok


# ---------------------------------------------------------------- communication


def test_c8_communication_ledger(ablation):
    runs, _ = ablation
    arch = runs["cafedistill", 0][0].federation.arch
    phi, h = backbone_size(arch), exit_size(arch, arch.m)
    exact = True
    for seed in SEEDS:
        caf = runs["cafedistill", seed][0]
        per = runs["fedper_ee", seed][0]
        for rc, rp, lc, lp in zip(caf.rounds, per.rounds, caf.federation.server.ledger.per_round,
                                  per.federation.server.ledger.per_round):
            assert rc["sampled"] == rp["sampled"]
            exact &= lc.total == lp.total + 2 * h * len(rc["sampled"])
    caf_total = runs["cafedistill", 0][0].federation.server.ledger
    per_total = runs["fedper_ee", 0][0].federation.server.ledger
    caf_sum = caf_total.total_up + caf_total.total_down
    per_sum = per_total.total_up + per_total.total_down
    overhead = (caf_sum - per_sum) / caf_sum
    predicted = h / (phi + h)
    ratio_ok = abs(overhead - predicted) < 1e-12
    per_client = comm_cost(arch, "cafedistill").total - comm_cost(arch, "fedper_ee").total
    ok = exact and ratio_ok and per_client == 2 * h
    report("C8 communication ledger", ok,
           f"per-round identity exact = {exact}, overhead {overhead:.6%} vs size(h)/(size(phi)+size(h)) "
           f"{predicted:.6%} (|diff| {abs(overhead - predicted):.1e}); phi={phi}, h={h}")
    assert ok


# ---------------------------------------------------------------- determinism


def test_c9_determinism(ablation, tmp_path):
    runs, _ = ablation
    cfg = ABLATION.replace(seed=0, strategy="cafedistill")
    out = write_reports(run_strategy("cafedistill", cfg), cfg, tmp_path / "again")
    first = (runs["cafedistill", 0][1] / "metrics.csv").read_bytes()
    second = (out / "metrics.csv").read_bytes()
    ok = first == second
    report("C9 determinism", ok, f"metrics CSV {len(first)} bytes, byte-identical = {ok}")
    assert ok
