import math

import numpy as np
import pytest

from feexd.een_model import ArchSpec, EENParams, init_model
from feexd.inference import (
    CostModel,
    EvalReport,
    ExitPolicy,
    combine_reports,
    csv_header,
    evaluate,
    evaluate_many,
    mac_count,
    predict_with_policy,
)
from feexd.tensor_nn import ParamSet

EPS = [round(0.1 * i, 1) for i in range(1, 10)]


def _two_exit_model(conf1: float) -> EENParams:
    """Identity blocks; exit 1 puts ``conf1`` on class 0, exit 2 is confident on class 1."""
    arch = ArchSpec(1, (1, 1), 2)
    p = ParamSet()
    p["block1.W"] = np.array([[1.0]])
    p["block1.b"] = np.zeros(1)
    p["block2.W"] = np.array([[1.0]])
    p["block2.b"] = np.zeros(1)
    p["exit1.W"] = np.array([[math.log(conf1 / (1 - conf1)), 0.0]])
    p["exit1.b"] = np.zeros(2)
    p["exit2.W"] = np.array([[0.0, 5.0]])
    p["exit2.b"] = np.zeros(2)
    return EENParams(arch, p)


def test_mac_count_example():
    arch = ArchSpec(4, (8, 8), 2)
    assert mac_count(arch, 1) == 4 * 8 + 8 * 2
    assert mac_count(arch, 2) == 48 + 8 * 8 + 8 * 2


def test_mac_count_increasing_and_full():
    arch = ArchSpec(6, (16, 12, 10, 4), 5)
    macs = [mac_count(arch, j) for j in range(1, 5)]
    assert all(a < b for a, b in zip(macs, macs[1:]))
    full = sum(a * b for a, b in (arch.block_shape(j) for j in range(1, 5)))
    full += sum(a * b for a, b in (arch.exit_shape(j) for j in range(1, 5)))
    assert macs[-1] == full
    with pytest.raises(ValueError):
        mac_count(arch, 5)


def test_policy_range():
    with pytest.raises(ValueError):
        ExitPolicy(1.5)


def test_epsilon_zero_and_one():
    model = init_model(ArchSpec(3, (4, 4, 4), 3), 0)
    x = np.random.default_rng(0).normal(size=(10, 3))
    _, idx0, _ = predict_with_policy(model, x, ExitPolicy(0.0))
    _, idx1, _ = predict_with_policy(model, x, ExitPolicy(1.0))
    assert np.all(idx0 == 1)
    assert np.all(idx1 == 3)


def test_crafted_confidence():
    model = _two_exit_model(0.9)
    x = np.array([[1.0]])
    labels, idx, macs = predict_with_policy(model, x, ExitPolicy(0.8))
    assert (labels[0], idx[0]) == (0, 1)
    labels, idx, macs = predict_with_policy(model, x, ExitPolicy(0.95))
    assert (labels[0], idx[0]) == (1, 2)
    assert macs[0] == mac_count(model.arch, 2)


def test_confident_correct_model_exits_first():
    model = _two_exit_model(0.999)
    rep = evaluate(model, np.ones((5, 1)), np.zeros(5, dtype=int), ExitPolicy(0.5))
    assert rep.accuracy == 1.0
    assert rep.exit_histogram == [5, 0]


def test_uniform_model_goes_to_last_exit():
    model = init_model(ArchSpec(2, (3, 3, 3), 4), 0)
    for j in (1, 2, 3):
        model.params[f"exit{j}.W"][:] = 0.0
    rep = evaluate(model, np.ones((6, 2)), np.zeros(6, dtype=int), ExitPolicy(0.3))
    assert rep.exit_histogram == [0, 0, 6]


def test_hand_tallied_report():
    model = _two_exit_model(0.9)
    # exit 1 always predicts 0, exit 2 always predicts 1; inputs are positive
    x = np.ones((4, 1))
    y = np.array([0, 0, 0, 1])
    rep_low, rep_high = evaluate_many(model, x, y, [0.5, 0.95])
    assert rep_low.per_exit_accuracy == [0.75, 0.25]
    assert rep_low.averaged_accuracy == 0.5
    assert rep_low.accuracy == 0.75 and rep_low.exit_histogram == [4, 0]
    assert rep_high.accuracy == 0.25 and rep_high.exit_histogram == [0, 4]
    assert rep_high.mean_macs == mac_count(model.arch, 2)


def test_empty_test_set():
    with pytest.raises(ValueError):
        evaluate_many(_two_exit_model(0.9), np.zeros((0, 1)), np.zeros(0, dtype=int), [0.5])


@pytest.mark.parametrize("seed", range(3))
def test_exit_index_monotone_in_epsilon(seed):
    rng = np.random.default_rng(seed)
    model = init_model(ArchSpec(5, (8, 8, 8), 4), seed)
    for name, v in model.params.items():
        model.params[name] = v * 3
    x = rng.normal(size=(40, 5))
    y = rng.integers(0, 4, size=40)
    prev = np.zeros(40)
    for eps in EPS:
        _, idx, macs = predict_with_policy(model, x, ExitPolicy(eps))
        assert np.all(idx >= prev)
        prev = idx
        np.testing.assert_array_equal(macs, [mac_count(model.arch, j) for j in idx])
    reports = evaluate_many(model, x, y, EPS)
    macs = [r.mean_macs for r in reports]
    assert all(a <= b for a, b in zip(macs, macs[1:]))
    assert len({r.averaged_accuracy for r in reports}) == 1


def test_combine_reports_unweighted():
    a = EvalReport(1.0, 0.5, [0.5, 0.5], 10.0, [3, 1], 0.5)
    b = EvalReport(0.0, 0.25, [0.0, 0.5], 20.0, [0, 2], 0.5)
    c = combine_reports([a, b])
    assert (c.accuracy, c.mean_macs, c.exit_histogram) == (0.5, 15.0, [3, 3])
    assert c.per_exit_accuracy == [0.25, 0.5]
    assert c.averaged_accuracy == pytest.approx(0.375)


def test_csv_row_matches_header():
    rep = EvalReport(1.0, 0.5, [0.5, 0.5, 0.5], 10.0, [3, 1, 0], 0.5)
    assert len(rep.csv_row("x", 1)) == len(csv_header(3))


def test_cost_model_cumulative():
    cost = CostModel((10, 20), (1, 2))
    assert cost.cumulative(1) == 11 and cost.cumulative(2) == 33
