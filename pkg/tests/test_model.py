from __future__ import annotations

import hashlib
import math

import numpy as np
import pytest

from conadv.model import (
    Branch,
    LabeledBatch,
    Phase,
    accuracy,
    combine_halves,
    half_loss_and_grads,
    init_params,
    input_gradient,
    loss_and_grads,
    make_architecture,
    model_forward,
)


def _cnn(seed=0, classes=10):
    return init_params(make_architecture("cnn", (8, 8, 1), classes), seed)


def _batch(n=6, seed=1, shape=(8, 8, 1), classes=10):
    rng = np.random.default_rng(seed)
    return LabeledBatch(rng.random((n,) + shape), rng.integers(0, classes, n))


def _state_hash(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params.tensors):
        h.update(params.tensors[k].tobytes())
    for k in sorted(params.bn):
        s = params.bn[k]
        for arr in (s.main_mean, s.main_var, s.aux_mean, s.aux_var):
            h.update(arr.tobytes())
    return h.hexdigest()


def test_preset_shapes():
    mlp = init_params(make_architecture("mlp", (784,), 10), 0)
    assert mlp.tensors["fc1.w"].shape == (784, 256)
    assert mlp.tensors["fc2.w"].shape == (256, 128)
    assert mlp.tensors["out.w"].shape == (128, 10)
    cnn = init_params(make_architecture("cnn", (12, 12, 1), 10), 0)
    assert cnn.tensors["conv1.w"].shape == (3, 3, 1, 16)
    assert cnn.tensors["conv2.w"].shape == (3, 3, 16, 32)
    assert cnn.tensors["out.w"].shape == (3 * 3 * 32, 10)


def test_he_init_scale():
    p = init_params(make_architecture("mlp", (784,), 10), 0)
    assert p.tensors["fc1.w"].std() == pytest.approx(math.sqrt(2 / 784), rel=0.02)
    assert not p.tensors["fc1.b"].any()


def test_constant_batch_through_bn_gives_zero_before_affine():
    params = init_params(make_architecture("mlp", (5,), 3), 0)
    for k in list(params.tensors):
        if k.endswith(".beta"):
            params.tensors[k][:] = 0.0
    batch = LabeledBatch(np.full((4, 5), 0.5), np.zeros(4, dtype=int))
    logits = model_forward(params, batch, Branch.MAIN, Phase.TRAIN).values
    # identical rows have zero batch variance, so every BN output is beta = 0
    # and only the output bias survives
    np.testing.assert_allclose(logits, np.broadcast_to(params.tensors["out.b"], logits.shape), atol=1e-12)


def test_branch_isolation_and_eval_purity():
    params = _cnn()
    aux_before = {k: (s.aux_mean.copy(), s.aux_var.copy()) for k, s in params.bn.items()}
    for seed in range(3):
        model_forward(params, _batch(seed=seed), Branch.MAIN, Phase.TRAIN)
    for k, s in params.bn.items():
        np.testing.assert_array_equal(s.aux_mean, aux_before[k][0])
        np.testing.assert_array_equal(s.aux_var, aux_before[k][1])
        assert not np.array_equal(s.main_mean, np.zeros_like(s.main_mean))
    h = _state_hash(params)
    model_forward(params, _batch(seed=9), Branch.MAIN, Phase.EVAL)
    model_forward(params, _batch(seed=9), Branch.AUX, Phase.EVAL)
    input_gradient(params, _batch(seed=9))
    assert _state_hash(params) == h


def test_main_and_aux_identical_on_fresh_state():
    a, b = _cnn(), _cnn()
    batch = _batch()
    la = model_forward(a, batch, Branch.MAIN, Phase.TRAIN).values
    lb = model_forward(b, batch, Branch.AUX, Phase.TRAIN).values
    np.testing.assert_array_equal(la, lb)
    for k in a.bn:
        np.testing.assert_array_equal(a.bn[k].main_mean, b.bn[k].aux_mean)


def test_duplicate_batch_loss_equals_clean_loss():
    params = _cnn()
    batch = _batch()
    loss, grads = loss_and_grads(params.copy(), batch, batch)
    clean, cgrads = half_loss_and_grads(params.copy(), batch, Branch.MAIN)
    assert loss == pytest.approx(clean, abs=1e-15)
    for k in grads:
        np.testing.assert_allclose(grads[k], cgrads[k], rtol=0, atol=1e-15)


def test_uniform_logits_give_log_z():
    params = _cnn()
    params.tensors["out.w"][:] = 0.0
    loss, _ = half_loss_and_grads(params, _batch(), Branch.MAIN)
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_loss_symmetry_under_swapped_roles():
    rng = np.random.default_rng(4)
    params = _cnn()
    for s in params.bn.values():
        s.main_mean, s.aux_mean = rng.standard_normal(s.main_mean.shape), rng.standard_normal(s.aux_mean.shape)
        s.main_var, s.aux_var = rng.random(s.main_var.shape) + 0.5, rng.random(s.aux_var.shape) + 0.5
    clean, adv = _batch(seed=1), _batch(seed=2)
    swapped = params.copy()
    for s in swapped.bn.values():
        s.main_mean, s.aux_mean, s.main_var, s.aux_var = s.aux_mean, s.main_mean, s.aux_var, s.main_var
    for phase in (Phase.EVAL, Phase.TRAIN):
        a = combine_halves(half_loss_and_grads(params.copy(), clean, Branch.MAIN, phase),
                           half_loss_and_grads(params.copy(), adv, Branch.AUX, phase))[0]
        b = combine_halves(half_loss_and_grads(swapped.copy(), adv, Branch.MAIN, phase),
                           half_loss_and_grads(swapped.copy(), clean, Branch.AUX, phase))[0]
        assert a == pytest.approx(b, rel=1e-14)


def test_errors():
    params = _cnn()
    with pytest.raises(ValueError, match="at least 2"):
        model_forward(params, _batch(n=1), Branch.MAIN, Phase.TRAIN)
    model_forward(params, _batch(n=1), Branch.MAIN, Phase.EVAL)
    bad = LabeledBatch(np.zeros((2, 8, 8, 1)), np.array([0, 10]))
    with pytest.raises(ValueError, match="label"):
        model_forward(params, bad, Branch.MAIN, Phase.EVAL)
    with pytest.raises(ValueError, match="adversarial batch"):
        loss_and_grads(params, _batch(n=4), _batch(n=3))
    with pytest.raises(ValueError):
        LabeledBatch(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        make_architecture("resnet", (8, 8, 1), 10)


def test_snapshot_is_deep_and_read_only():
    params = _cnn()
    snap = params.snapshot()
    params.tensors["out.w"][0, 0] += 1.0
    assert snap.tensors["out.w"][0, 0] != params.tensors["out.w"][0, 0]
    with pytest.raises(ValueError):
        snap.tensors["out.w"][0, 0] = 0.0
    with pytest.raises(ValueError):
        snap.bn["bn1"].main_mean[0] = 1.0
    # eval forward works on the read-only snapshot
    model_forward(snap, _batch(), Branch.AUX, Phase.EVAL)


def test_input_gradient_rows_are_per_example():
    params = _cnn()
    batch = _batch(n=4)
    full = input_gradient(params, batch)
    for i in range(4):
        one = input_gradient(params, LabeledBatch(batch.inputs[i:i + 1], batch.labels[i:i + 1]))
        np.testing.assert_allclose(full[i], one[0], rtol=1e-12, atol=1e-15)


def test_accuracy_counts_matches():
    params = _cnn()
    batch = _batch(n=20)
    preds = np.argmax(model_forward(params, batch, Branch.MAIN, Phase.EVAL).values, axis=1)
    assert accuracy(params, batch.inputs, preds) == 1.0
    assert accuracy(params, batch.inputs, preds, chunk=3) == 1.0
