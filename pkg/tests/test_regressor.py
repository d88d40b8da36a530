import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import fd_gradient_error, random_network_case

from tsfine.errors import DegenerateTarget, NonFiniteLoss, ParseError, ShapeMismatch
from tsfine.regressor import (LabeledSet, NetworkSpec, TrainConfig, backward, file_sha256,
                              finetune_heads, fim_weights, forward, huber, init_params,
                              inverse_variance_weights, load_checkpoint, loss, orth_penalty,
                              save_checkpoint, train)


def small_spec(**kw):
    base = dict(input_dim=3, trunk_widths=(8, 6), trunk_dropout=0.0, n_heads=2, head_depth=2,
                head_width=5, head_dropout=0.0)
    base.update(kw)
    return NetworkSpec(**base)


def test_zero_weights_give_zero_output():
    p = init_params(small_spec())
    for w in p.weights.values():
        w[...] = 0.0
    out = forward(np.random.default_rng(0).normal(size=(4, 3)), p)
    assert np.array_equal(out, np.zeros((4, 2)))


def test_linear_composition_sums_inputs():
    spec = NetworkSpec(3, trunk_widths=(3,), trunk_activation="identity", trunk_dropout=0.0,
                       n_heads=1, head_depth=0, head_dropout=0.0)
    p = init_params(spec)
    p.weights["trunk.0.W"] = np.eye(3)
    p.weights["trunk.0.b"] = np.zeros(3)
    p.weights["head.0.a"] = np.ones(3)
    x = np.array([[1.0, 2.0, 4.0], [-1.0, 0.5, 0.0]])
    np.testing.assert_allclose(forward(x, p)[:, 0], [7.0, -0.5])


def test_forward_shape_check_and_eval_purity():
    p = init_params(small_spec(trunk_dropout=0.3, head_dropout=0.3), 1)
    x = np.ones((2, 3))
    assert np.array_equal(forward(x, p), forward(x, p))
    with pytest.raises(ShapeMismatch):
        forward(np.ones((2, 4)), p)
    with pytest.raises(ValueError):
        forward(x, p, train=True)
    a = forward(x, p, train=True, rng=np.random.default_rng(0))
    assert not np.array_equal(a, forward(x, p))


def test_loss_examples():
    spec = NetworkSpec(1, trunk_widths=(), n_heads=1, head_depth=0, trunk_dropout=0.0, head_dropout=0.0)
    p = init_params(spec)
    p.weights["head.0.a"] = np.array([1.0])
    cfg = TrainConfig(weights=(1.0,), huber_delta=1.0)
    assert loss(LabeledSet(np.array([[0.3]]), np.array([[0.3]])), p, cfg) == 0.0
    assert abs(loss(LabeledSet(np.array([[0.4]]), np.array([[0.3]])), p, cfg) - 0.005) < 1e-15
    # a single head has no cross-head pairs
    assert orth_penalty(init_params(small_spec(n_heads=1))) == 0.0


def test_huber_branches():
    r = np.array([-3.0, -1.0, -0.2, 0.0, 0.5, 1.0, 2.5])
    np.testing.assert_allclose(huber(r, 1.0), np.where(np.abs(r) <= 1, 0.5 * r * r, np.abs(r) - 0.5))
    eps = 1e-7
    for d in (0.5, 1.0, 2.0):
        for s in (-1, 1):
            k = s * d
            left, right = huber(np.array([k - eps]), d)[0], huber(np.array([k + eps]), d)[0]
            assert abs(left - right) < 3 * d * eps
            slope_in = (huber(np.array([k]), d) - huber(np.array([k - s * 1e-5]), d))[0] / 1e-5
            slope_out = (huber(np.array([k + s * 1e-5]), d) - huber(np.array([k]), d))[0] / 1e-5
            assert abs(slope_in - slope_out) < 1e-4


def test_inverse_variance_weights():
    np.testing.assert_allclose(inverse_variance_weights([[0.0], [2.0]]), [1.0])
    t = np.column_stack([[0.0, 2.0, 0.0, 2.0], [0.0, 4.0, 0.0, 4.0]])
    np.testing.assert_allclose(inverse_variance_weights(t), [1.0, 0.25])
    with pytest.raises(DegenerateTarget):
        inverse_variance_weights([[1.0], [1.0], [1.0]])
    with pytest.raises(DegenerateTarget):
        inverse_variance_weights([[1.0]])


def test_fim_weights():
    np.testing.assert_allclose(fim_weights([3.0, 3.0, 3.0]), [1, 1, 1])
    w = fim_weights([1.0, 3.0])
    np.testing.assert_allclose(w, [0.5, 1.5])


def test_zero_residual_zero_gradient():
    p = init_params(small_spec(), 2)
    x = np.random.default_rng(0).normal(size=(5, 3))
    batch = LabeledSet(x, forward(x, p))
    g = backward(batch, p, TrainConfig(lambda_orth=0.0))
    assert max(np.abs(v).max() for v in g.values()) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    params, batch, cfg = random_network_case(100 + seed)
    assert fd_gradient_error(params, batch, cfg) < 1e-5


def test_orth_penalty_gradient_with_orthogonal_rows():
    spec = small_spec(n_heads=3, head_width=2, trunk_widths=(6,))
    p = init_params(spec, 5)
    eye = np.eye(6)
    for j in range(3):
        p.weights[f"head.{j}.0.W"] = eye[2 * j:2 * j + 2] * (1 + j)
    assert orth_penalty(p) == 0.0
    p.weights["head.1.0.W"] = p.weights["head.1.0.W"] + 0.1
    rng = np.random.default_rng(0)
    batch = LabeledSet(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    assert orth_penalty(p) > 0
    assert fd_gradient_error(p, batch, TrainConfig(lambda_orth=2.0)) < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_orth_penalty_zero_iff_cross_products_vanish(seed):
    rng = np.random.default_rng(seed)
    p = init_params(small_spec(n_heads=3, trunk_widths=(9,), head_width=3), seed)
    basis = np.linalg.qr(rng.normal(size=(9, 9)))[0]
    for j in range(3):
        p.weights[f"head.{j}.0.W"] = rng.normal(size=(3, 1)) * basis[3 * j:3 * j + 3]
    assert orth_penalty(p) < 1e-20
    p.weights["head.2.0.W"] = p.weights["head.2.0.W"] + basis[0] * 0.5
    assert orth_penalty(p) > 0


def test_train_memorizes_repeated_pair_and_is_deterministic():
    x = np.tile([[0.5, -1.0, 2.0]], (64, 1))
    t = np.tile([[1.0, -2.0]], (64, 1))
    t[0] += 1e-3  # a constant target would have no variance weight
    spec = small_spec()
    cfg = TrainConfig(epochs=60, batch_size=16, seed=3)
    p1, h1 = train(LabeledSet(x, t), spec, cfg)
    p2, _ = train(LabeledSet(x, t), spec, cfg)
    for k in p1.weights:
        assert np.array_equal(p1.weights[k], p2.weights[k])
    assert h1["train_loss"][-1] < 1e-2 * h1["train_loss"][0]


def test_train_rejects_mismatch_and_nonfinite():
    with pytest.raises(ShapeMismatch):
        train(LabeledSet(np.ones((4, 2)), np.arange(4.0)[:, None]), small_spec(), TrainConfig(epochs=1))
    x = np.random.default_rng(0).normal(size=(20, 3))
    t = np.random.default_rng(1).normal(size=(20, 2))
    with pytest.raises(NonFiniteLoss) as info:
        train(LabeledSet(x, t), small_spec(), TrainConfig(epochs=2, lr=1e300))
    assert info.value.batch_index is not None


def test_train_fits_smooth_map():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (800, 3))
    t = np.column_stack([np.sin(x[:, 0]) + x[:, 1], x[:, 2] ** 2])
    p, hist = train(LabeledSet(x, t), small_spec(trunk_widths=(32, 16), head_width=16),
                    TrainConfig(epochs=80, seed=0))
    err = np.mean((p.predict(x) - t) ** 2, axis=0)
    assert np.all(err < 0.02)


def test_orth_training_reduces_cross_products():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 4))
    t = x[:, :4] @ rng.normal(size=(4, 4))
    spec = NetworkSpec(4, (16, 16), "leaky_relu", 0.0, True, 4, 2, 8, "tanh", 0.0, True)
    p0 = init_params(spec, 0)
    before = orth_penalty(p0)
    p, _ = train(LabeledSet(x, t), spec, TrainConfig(epochs=30, lambda_orth=5.0, seed=0))
    assert orth_penalty(p) < before


def test_finetune_freezes_trunk():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    t = x[:, :2] * 2
    p, _ = train(LabeledSet(x, t), small_spec(), TrainConfig(epochs=5, seed=0))
    data = LabeledSet(x + 1.0, t + 0.5)
    q, hist = finetune_heads(data, p, TrainConfig(epochs=10, seed=1), fim_diag=[2.0, 2.0])
    for k in p.trunk_keys():
        assert np.array_equal(p.weights[k], q.weights[k])
    assert any(not np.array_equal(p.weights[k], q.weights[k]) for k in p.head_keys())
    assert hist["weights"] == [1.0, 1.0]
    z, _ = finetune_heads(data, p, TrainConfig(epochs=0))
    for k in p.weights:
        assert np.array_equal(p.weights[k], z.weights[k])


def test_finetune_with_new_head():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, 3))
    t = x[:, :2]
    p, _ = train(LabeledSet(x, t), small_spec(), TrainConfig(epochs=3, seed=0))
    q, _ = finetune_heads(LabeledSet(x, t), p, TrainConfig(epochs=3, seed=0),
                          new_head={"depth": 1, "width": 4, "dropout": 0.2})
    assert q.spec.head_depth == 1 and q.spec.head_width == 4 and q.spec.head_dropout == 0.2
    assert "head.0.1.W" not in q.weights and q.weights["head.0.0.W"].shape == (4, 6)
    for k in p.trunk_keys():
        assert np.array_equal(p.weights[k], q.weights[k])


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(small_spec(trunk_layernorm=True, head_layernorm=True), 7,
                    np.arange(3.0), np.ones(3) * 2, np.array([1.0, -1.0]), np.array([0.5, 3.0]))
    path = save_checkpoint(tmp_path / "c.bin", p, TrainConfig(), {"a": 1})
    q = load_checkpoint(path)
    assert q.spec == p.spec
    for k in p.weights:
        assert np.array_equal(p.weights[k], q.weights[k])
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(p.predict(x), q.predict(x))
    again = save_checkpoint(tmp_path / "d.bin", q)
    assert file_sha256(path) == file_sha256(again)
    assert (tmp_path / "c.json").exists()
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(blob))
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "junk.bin")
