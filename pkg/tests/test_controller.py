import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entropy_steer.controller import (
    ControllerGradient,
    ValueCacheController,
    apply_controller,
    backprop_to_controller,
    entropy_grad_logits,
)
from entropy_steer.entropy import entropy
from entropy_steer.errors import ConfigError, StaleActivationsError, WeightsFormatError
from entropy_steer.model import decode_step, prefill
from entropy_steer.nn import softmax
from entropy_steer.verify import finite_diff_grad

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_transform_worked_example():
    v = np.array([[[1.0, 0.0]]])
    d = np.array([[[0.0, 1.0]]])
    out, degen = apply_controller(v, d, np.array([[1.0]]))
    np.testing.assert_allclose(out[0, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-15)
    assert not degen.any()


def test_degenerate_slot_passes_through():
    v = np.array([[[1.0, 2.0], [0.5, 0.5]]])
    d = np.array([[[-1.0, -2.0], [0.1, 0.0]]])
    out, degen = apply_controller(v, d, np.linalg.norm(v, axis=-1))
    assert degen.tolist() == [[True, False]]
    assert np.array_equal(out[0, 0], v[0, 0])


def test_zero_delta_is_identity():
    v = np.random.default_rng(0).normal(size=(2, 5, 4))
    out, _ = apply_controller(v, np.zeros_like(v), np.linalg.norm(v, axis=-1))
    assert np.array_equal(out, v)


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        apply_controller(np.ones((2, 3, 4)), np.ones((2, 3, 5)), np.ones((2, 3)))


@settings(max_examples=200, deadline=None)
@given(
    v=arrays(np.float64, (2, 3, 4), elements=finite),
    d=arrays(np.float64, (2, 3, 4), elements=finite),
    r=arrays(np.float64, (2, 3), elements=st.floats(1e-3, 100)),
)
def test_norm_preserved_property(v, d, r):
    out, degen = apply_controller(v, d, r)
    got = np.linalg.norm(out, axis=-1)
    ok = ~degen & (np.linalg.norm(v + d, axis=-1) > 1e-6)
    np.testing.assert_allclose(got[ok], r[ok], rtol=1e-9)


@settings(max_examples=200, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 30), elements=finite))
def test_entropy_gradient_sums_to_zero(z):
    g = entropy_grad_logits(softmax(z))
    assert abs(g.sum()) < 1e-12


def test_entropy_gradient_matches_finite_difference():
    z = np.log(np.array([0.8, 0.2]))
    analytic = entropy_grad_logits(softmax(z))
    numeric = finite_diff_grad(lambda x: entropy(softmax(x)), z, eps=1e-6)
    np.testing.assert_allclose(analytic, numeric, atol=1e-6)
    # closed form for two classes: dH/dz0 = -p0 p1 log(p0/p1)
    np.testing.assert_allclose(analytic[0], -0.8 * 0.2 * np.log(4.0), atol=1e-12)


def test_entropy_gradient_at_uniform_is_zero():
    assert np.allclose(entropy_grad_logits(np.full(7, 1 / 7)), 0.0, atol=1e-15)


def test_adam_zero_gradient_leaves_delta():
    c = ValueCacheController.zeros(2, 3, 4)
    res = c.step(ControllerGradient(np.zeros((2, 3, 4)), 0.0), 1)
    assert not res.skipped
    assert np.array_equal(c.delta, np.zeros((2, 3, 4)))
    assert c.opt_step_count == 1


def test_adam_first_step_moves_by_lr_per_coordinate():
    c = ValueCacheController.zeros(1, 1, 2, learning_rate=1e-3)
    c.step(ControllerGradient(np.array([[[0.3, -0.4]]]), 0.5), 1)
    # loss gradient is -grad; first bias-corrected Adam step is lr * sign
    np.testing.assert_allclose(c.delta[0, 0], [1e-3, -1e-3], rtol=1e-6)


def test_clip_to_unit_norm():
    c = ValueCacheController.zeros(1, 1, 2, clip_norm=1.0)
    g = np.array([[[3.0, 4.0]]])
    res = c.step(ControllerGradient(g, 5.0), -1)
    assert res.pre_clip_norm == 5.0
    assert res.applied_norm == pytest.approx(1.0)
    np.testing.assert_allclose(c.last_applied_grad[0, 0], [0.6, 0.8])


def test_no_clip_below_threshold():
    c = ValueCacheController.zeros(1, 1, 2, clip_norm=1.0)
    res = c.step(ControllerGradient(np.array([[[0.3, 0.4]]]), 0.5), 1)
    assert res.applied_norm == pytest.approx(0.5)


def test_nonfinite_gradient_is_skipped():
    c = ValueCacheController.zeros(1, 1, 2)
    res = c.step(ControllerGradient(np.array([[[np.nan, 0.0]]]), np.nan), 1)
    assert res.skipped
    assert c.skipped_steps == 1 and c.opt_step_count == 0
    assert np.array_equal(c.delta, np.zeros((1, 1, 2)))


def test_alpha_must_be_sign():
    c = ValueCacheController.zeros(1, 1, 2)
    with pytest.raises(ValueError):
        c.step(ControllerGradient(np.zeros((1, 1, 2)), 0.0), 0)


@pytest.mark.parametrize("k", [1, 0, -3])
def test_step_size_validation(k):
    with pytest.raises(ConfigError):
        ValueCacheController.zeros(1, 1, 2, step_size=k)


def test_dump_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    c = ValueCacheController(delta=rng.normal(size=(2, 3, 4)), learning_rate=1e-4)
    c.step(ControllerGradient(rng.normal(size=(2, 3, 4)), 1.0), 1)
    c.dump(tmp_path / "c.bin")
    back = ValueCacheController.load(tmp_path / "c.bin")
    assert np.array_equal(back.delta, c.delta)
    assert np.array_equal(back.m, c.m) and np.array_equal(back.v, c.v)
    assert back.opt_step_count == 1 and back.learning_rate == 1e-4


def test_load_rejects_truncated(tmp_path):
    c = ValueCacheController.zeros(1, 2, 2)
    c.dump(tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-1])
    with pytest.raises(WeightsFormatError):
        ValueCacheController.load(tmp_path / "c.bin")


def test_stale_activations(toy):
    weights, prompt = toy
    _, cache, saved_prefill = prefill(weights, prompt)
    with pytest.raises(StaleActivationsError):
        backprop_to_controller(saved_prefill, np.zeros(weights.config.vocab_size))
    ctrl = ValueCacheController.zeros(weights.config.n_kv_heads, cache.n_video, weights.config.d_head)
    logits, _, saved = decode_step(weights, 3, cache, ctrl)
    with pytest.raises(StaleActivationsError):
        backprop_to_controller(saved, entropy_grad_logits(softmax(logits)), expected_step=saved.step + 1)
    grad = backprop_to_controller(saved, entropy_grad_logits(softmax(logits)), expected_step=saved.step)
    assert grad.grad.shape == ctrl.shape


def test_gradient_is_tangent(toy):
    # the transform's Jacobian annihilates the radial direction
    weights, prompt = toy
    _, cache, _ = prefill(weights, prompt)
    rng = np.random.default_rng(0)
    ctrl = ValueCacheController(delta=0.05 * rng.normal(size=(2, cache.n_video, weights.config.d_head)))
    logits, _, saved = decode_step(weights, 3, cache, ctrl)
    g = backprop_to_controller(saved, entropy_grad_logits(softmax(logits))).grad
    u = saved.video_values + saved.delta
    assert np.max(np.abs(np.sum(g * u, axis=-1))) < 1e-14
