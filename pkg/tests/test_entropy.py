import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from entropy_steer.entropy import (
    EntropyEMASwitch,
    EntropyTracker,
    alphas_from_ema,
    ema_filter,
    entropy,
    entropy_from_logits,
    switching_loss,
)
from entropy_steer.errors import ConfigError


def test_entropy_two_point():
    assert entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


def test_entropy_extremes():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy(np.full(17, 1 / 17)) == pytest.approx(math.log(17), abs=1e-12)


def test_entropy_rejects_non_distribution():
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy([1.2, -0.2])


@settings(max_examples=200, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 40), elements=st.floats(-50, 50)))
def test_entropy_bounds(z):
    h = entropy_from_logits(z)
    assert 0.0 <= h <= math.log(z.size)


def test_ema_worked_example():
    ema = ema_filter([0.1, 1.0], beta=0.98)
    assert ema[0] == 0.1
    assert ema[1] == pytest.approx(0.118, abs=1e-12)


def test_alpha_worked_example():
    assert alphas_from_ema([1.0, 2.0, 1.5, 2.0]).tolist() == [1, 1, -1, 1]


def test_tracker_matches_vector_form():
    rng = np.random.default_rng(0)
    h = rng.uniform(0, 3, size=50)
    tr = EntropyTracker(beta=0.9)
    alphas = [tr.update(x) for x in h]
    assert np.array_equal(np.asarray(tr.ema_series), ema_filter(h, beta=0.9))
    assert alphas == alphas_from_ema(ema_filter(h, beta=0.9)).tolist()


def test_raw_form_differs():
    h = [1.0, 2.0, 0.0, 3.0]
    rec = ema_filter(h, beta=0.5)
    raw = ema_filter(h, beta=0.5, recursive=False)
    assert rec[2] == pytest.approx(0.75)
    assert raw[2] == pytest.approx(1.0)


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
def test_beta_bounds(beta):
    with pytest.raises(ConfigError):
        EntropyTracker(beta=beta)


def test_alpha_requires_data():
    with pytest.raises(ValueError):
        EntropyTracker().alpha()


def test_switching_loss():
    assert switching_loss(2.0, 1) == -2.0
    assert switching_loss(2.0, -1) == 2.0
    with pytest.raises(ValueError):
        switching_loss(1.0, 0)


@settings(max_examples=300, deadline=None)
@given(h=st.lists(st.floats(0, 5), min_size=1, max_size=60), beta=st.floats(0.01, 0.99))
def test_alpha_soundness(h, beta):
    ema = ema_filter(h, beta=beta)
    a = alphas_from_ema(ema)
    for t in range(len(ema)):
        expect = 1 if t == 0 or ema[t] >= max(ema[:t]) else -1
        assert a[t] == expect


def test_estimator_wrapper():
    est = EntropyEMASwitch(beta=0.5).fit()
    assert est.transform([1.0, 0.0]).tolist() == [1.0, 0.5]
    assert est.predict([1.0, 0.0, 2.0]).tolist() == [1, -1, 1]
    assert clone(est).get_params() == {"beta": 0.5, "recursive": True}
    with pytest.raises(ConfigError):
        EntropyEMASwitch(beta=2.0).fit()
