import math

import numpy as np
import pytest

from feexd.een_model import (
    ArchSpec,
    EENParams,
    exit_probs,
    exit_weights,
    flatten_exit,
    forward_all_exits,
    forward_to_exit,
    init_model,
    joint_loss,
    load_checkpoint,
    save_checkpoint,
    unflatten_exit,
    value_and_grad,
)
from feexd.tensor_nn import ParamSet, cosine_similarity

ARCH = ArchSpec(5, (6, 4, 3), 3)


@pytest.fixture
def model():
    m = init_model(ARCH, seed=7)
    rng = np.random.default_rng(0)
    for name, v in m.params.items():
        if name.endswith(".b"):
            m.params[name] = rng.normal(0, 0.2, size=v.shape)
    return m


@pytest.fixture
def batch():
    rng = np.random.default_rng(1)
    return rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_model(ARCH, 3), init_model(ARCH, 3), init_model(ARCH, 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_init_structure():
    m = init_model(ARCH, 0)
    assert m.m == 3
    assert list(m.params) == ["block1.W", "block1.b", "block2.W", "block2.b", "block3.W", "block3.b",
                              "exit1.W", "exit1.b", "exit2.W", "exit2.b", "exit3.W", "exit3.b"]
    assert m.params["block2.W"].shape == (6, 4)
    assert m.params["exit1.W"].shape == (6, 3)


def test_arch_needs_two_blocks():
    with pytest.raises(ValueError):
        ArchSpec(4, (8,), 2)


def test_forward_final_exit_equals_full_forward(model, batch):
    x, _ = batch
    np.testing.assert_array_equal(forward_to_exit(model, x, 3), forward_all_exits(model, x)[-1])


@pytest.mark.parametrize("j", [1, 2])
def test_forward_locality(model, batch, j):
    x, _ = batch
    other = model.copy()
    rng = np.random.default_rng(5)
    for name in other.params:
        depth = int(name[5] if name.startswith("block") else name[4])
        if depth > j:
            other.params[name] = other.params[name] + rng.normal(size=other.params[name].shape)
        elif name.startswith("exit") and depth != j:
            other.params[name] = other.params[name] + 1.0
    np.testing.assert_array_equal(forward_to_exit(model, x, j), forward_to_exit(other, x, j))


def test_forward_hand_computed():
    arch = ArchSpec(2, (2, 2), 2)
    p = ParamSet()
    p["block1.W"] = np.eye(2)
    p["block1.b"] = np.array([0.0, -1.0])
    p["block2.W"] = np.eye(2)
    p["block2.b"] = np.zeros(2)
    p["exit1.W"] = np.array([[1.0, 0.0], [0.0, 2.0]])
    p["exit1.b"] = np.array([0.0, 0.5])
    p["exit2.W"] = np.eye(2)
    p["exit2.b"] = np.zeros(2)
    model = EENParams(arch, p)
    # h1 = relu([1, 3] + [0, -1]) = [1, 2]; logits = [1, 4.5]
    probs = forward_to_exit(model, np.array([[1.0, 3.0]]), 1)
    expected = np.exp([1.0, 4.5]) / np.exp([1.0, 4.5]).sum()
    np.testing.assert_allclose(probs[0], expected, rtol=1e-14)


def test_forward_exit_out_of_range(model, batch):
    with pytest.raises(ValueError):
        forward_to_exit(model, batch[0], 4)


def test_exit_weights():
    np.testing.assert_allclose(exit_weights(3, [1, 3]), [0.5, 0.0, 0.5])
    np.testing.assert_allclose(exit_weights(3, [1, 3], renormalize=False), [1 / 3, 0.0, 1 / 3])
    with pytest.raises(ValueError):
        exit_weights(3, [])


def test_joint_loss_single_exit_is_ce(model, batch):
    x, y = batch
    probs = forward_to_exit(model, x, 3)
    ce = -np.mean(np.log(probs[np.arange(len(y)), y]))
    assert joint_loss(model, x, y, [3], [0, 0, 1.0]).item() == pytest.approx(ce, rel=1e-13)


def test_joint_loss_identical_exits_is_m_independent():
    arch = ArchSpec(3, (4, 4, 4), 2)
    model = init_model(arch, 0)
    # identity blocks after the first make every exit see the same (non-negative) features
    for j in (2, 3):
        model.params[f"block{j}.W"] = np.eye(4)
    for j in (2, 3):
        model.set_exit(j, model.exit(1))
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(5, 3)), rng.integers(0, 2, size=5)
    single = joint_loss(model, x, y, [1], [1.0, 0, 0]).item()
    assert joint_loss(model, x, y, [1, 2, 3], exit_weights(3, [1, 2, 3])).item() == pytest.approx(single, rel=1e-13)


def test_joint_loss_two_exit_hand_instance(model, batch):
    x, y = batch
    w = np.array([0.3, 0.0, 0.7])
    parts = []
    for j in (1, 3):
        p = forward_to_exit(model, x, j)
        parts.append(-np.mean(np.log(p[np.arange(len(y)), y])))
    expected = 0.3 * parts[0] + 0.7 * parts[1]
    assert joint_loss(model, x, y, [1, 3], w).item() == pytest.approx(expected, rel=1e-13)


def test_joint_loss_empty_set(model, batch):
    with pytest.raises(ValueError):
        joint_loss(model, batch[0], batch[1], [], [0, 0, 0])


def test_block_gradient_is_weighted_sum_of_exit_gradients(model, batch):
    x, y = batch
    S, w = [1, 2, 3], np.array([0.2, 0.3, 0.5])
    _, g_joint = value_and_grad(lambda mdl: joint_loss(mdl, x, y, S, w), model)
    total = {k: np.zeros_like(v) for k, v in g_joint.items()}
    for j in S:
        one = np.zeros(3)
        one[j - 1] = 1.0
        _, g = value_and_grad(lambda mdl, j=j, one=one: joint_loss(mdl, x, y, [j], one), model)
        for b in range(1, 4):
            if b > j:
                assert np.all(g[f"block{b}.W"] == 0)
        for k in total:
            total[k] += w[j - 1] * g[k]
    for k in g_joint:
        assert np.abs(g_joint[k] - total[k]).max() < 1e-9


def test_flatten_layout_and_round_trip(model):
    arch = ArchSpec(2, (2, 2), 2)
    m = init_model(arch, 0)
    m.set_exit(2, ParamSet(W=np.eye(2), b=np.zeros(2)))
    np.testing.assert_array_equal(flatten_exit(m, 2), [1, 0, 0, 1, 0, 0])
    for j in (1, 2, 3):
        back = unflatten_exit(flatten_exit(model, j), ARCH, j)
        np.testing.assert_array_equal(back["W"], model.exit(j)["W"])
        np.testing.assert_array_equal(back["b"], model.exit(j)["b"])


def test_identical_exits_have_cosine_one(model):
    other = model.copy()
    assert cosine_similarity(flatten_exit(model, 3), flatten_exit(other, 3)) == pytest.approx(1.0)


def test_set_exit_shape_checked(model):
    with pytest.raises(ValueError):
        model.set_exit(1, ParamSet(W=np.zeros((2, 2)), b=np.zeros(2)))


def test_checkpoint_round_trip(model, tmp_path):
    manifest = save_checkpoint(model, tmp_path / "ck", extra={"client_id": 4})
    back = load_checkpoint(manifest)
    assert back.arch == model.arch
    assert list(back.params) == list(model.params)
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    assert (tmp_path / "ck.bin").stat().st_size == 8 * model.params.size()


def test_checkpoint_truncated_blob(model, tmp_path):
    save_checkpoint(model, tmp_path / "ck")
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck")


def test_exit_probs_skips_unneeded_blocks(model, batch):
    # corrupting block 3 must not matter when only exit 1 is requested
    broken = model.copy()
    broken.params["block3.W"] = np.full_like(broken.params["block3.W"], 1e300)
    out = exit_probs(broken, batch[0], [1])
    assert math.isclose(out[1].data.sum(), len(batch[0]))
