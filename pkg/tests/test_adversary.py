from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conadv.adversary import (
    AttackConfig,
    NonFiniteGradientError,
    StepMode,
    generate_adversarial,
    model_input_grad,
    perturb,
    project_linf,
)
from conadv.model import Branch, LabeledBatch, Phase, init_params, make_architecture, model_forward


def _linear_grad(w):
    return lambda x, labels: np.broadcast_to(w, x.shape).copy()


def _model(seed=0):
    return init_params(make_architecture("cnn", (8, 8, 1), 4, widths=(4, 4)), seed)


def _batch(n=5, seed=1):
    rng = np.random.default_rng(seed)
    return LabeledBatch(rng.random((n, 8, 8, 1)), rng.integers(0, 4, n))


def test_zero_radius_returns_input():
    batch = _batch()
    out = generate_adversarial(_model(), batch, AttackConfig(epsilon=0.0, alpha=0.5), rng_seed=0)
    np.testing.assert_array_equal(out.inputs, batch.inputs)
    np.testing.assert_array_equal(out.labels, batch.labels)


def test_zero_step_without_init_returns_input():
    batch = _batch()
    out = generate_adversarial(_model(), batch, AttackConfig(epsilon=0.1, alpha=0.0, random_init=False), rng_seed=0)
    np.testing.assert_array_equal(out.inputs, batch.inputs)


def test_linear_model_raw_step():
    x = np.array([[0.5, 0.5]])
    cfg = AttackConfig(epsilon=1.0, alpha=0.1, random_init=False, step_mode=StepMode.RAW, clamp_domain=None)
    out = perturb(x, np.zeros(1, dtype=int), cfg, _linear_grad(np.array([1.0, -2.0])), 0)
    np.testing.assert_allclose(out, x + np.array([0.1, -0.2]), rtol=0, atol=1e-15)


def test_sign_step():
    x = np.array([[0.5, 0.5]])
    cfg = AttackConfig(epsilon=1.0, alpha=0.1, random_init=False, step_mode="sign", clamp_domain=None)
    out = perturb(x, np.zeros(1, dtype=int), cfg, _linear_grad(np.array([3.0, -0.01])), 0)
    np.testing.assert_allclose(out, [[0.6, 0.4]])


def test_project_linf_examples():
    np.testing.assert_array_equal(project_linf(np.array([0.05]), np.zeros(1), 0.1), [0.05])
    np.testing.assert_array_equal(project_linf(np.array([0.5]), np.zeros(1), 0.1), [0.1])
    np.testing.assert_allclose(project_linf(np.array([0.7, 1.1]), np.array([1.0, 1.0]), 0.2), [0.8, 1.1])
    with pytest.raises(ValueError):
        project_linf(np.zeros(2), np.zeros(3), 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(clamp_domain=(1.0, 0.0))


def test_non_finite_gradient_aborts():
    cfg = AttackConfig(epsilon=0.1, alpha=0.1, random_init=False)
    with pytest.raises(NonFiniteGradientError):
        perturb(np.zeros((1, 2)), np.zeros(1, dtype=int), cfg, lambda x, y: np.full(x.shape, np.nan), 0)


def test_inputs_outside_domain_rejected():
    batch = LabeledBatch(np.full((2, 8, 8, 1), 1.5), np.zeros(2, dtype=int))
    with pytest.raises(ValueError, match="clamp domain"):
        generate_adversarial(_model(), batch, AttackConfig(epsilon=0.1, alpha=0.1), 0)


def test_determinism():
    cfg = AttackConfig(epsilon=0.1, alpha=0.05, step_mode="sign")
    a = generate_adversarial(_model(), _batch(), cfg, [1, 2, 3])
    b = generate_adversarial(_model(), _batch(), cfg, [1, 2, 3])
    c = generate_adversarial(_model(), _batch(), cfg, [1, 2, 4])
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, c.inputs)


def test_snapshot_not_mutated():
    params = _model()
    snap = params.snapshot()
    before = {k: v.copy() for k, v in snap.tensors.items()}
    generate_adversarial(snap, _batch(), AttackConfig(epsilon=0.1, alpha=0.05), 0)
    for k, v in snap.tensors.items():
        np.testing.assert_array_equal(v, before[k])


@settings(max_examples=40, deadline=None)
@given(eps=st.floats(0.0, 0.5), alpha=st.floats(0.0, 2.0), seed=st.integers(0, 10_000),
       mode=st.sampled_from(["raw", "sign"]), init=st.booleans())
def test_feasibility_property(eps, alpha, seed, mode, init):
    params = _model(seed % 7)
    batch = _batch(n=3, seed=seed)
    cfg = AttackConfig(epsilon=eps, alpha=alpha, random_init=init, step_mode=mode)
    out = generate_adversarial(params, batch, cfg, seed).inputs
    assert np.all(np.abs(out - batch.inputs) <= eps + 1e-15)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_ascent_property_small_alpha():
    # smooth toy model: tiny MLP with eval-mode BN, no random init
    wins, trials = 0, 200
    for seed in range(trials):
        params = init_params(make_architecture("mlp", (6,), 3, widths=(8, 8)), seed)
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.2, 0.8, size=(1, 6))
        y = rng.integers(0, 3, 1)
        cfg = AttackConfig(epsilon=0.01, alpha=1e-3, random_init=False, step_mode="raw")
        adv = perturb(x, y, cfg, model_input_grad(params), seed)

        def loss(v):
            logits = model_forward(params, LabeledBatch(v, y), Branch.AUX, Phase.EVAL).values[0]
            return np.log(np.exp(logits - logits.max()).sum()) + logits.max() - logits[y[0]]

        wins += loss(adv) >= loss(x)
    assert wins >= 0.99 * trials
