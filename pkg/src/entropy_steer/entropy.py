"""Shannon entropy, EMA tracking, the switching coefficient and the switching loss."""
import math
import numbers
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_float_array, check_probability_vector, check_scalar_param
from .nn import softmax

__all__ = [
    "entropy",
    "entropy_from_logits",
    "EntropyTracker",
    "ema_update",
    "alpha",
    "alphas_from_ema",
    "ema_filter",
    "switching_loss",
    "EntropyEMASwitch",
]


def entropy(p):
    """Entropy in nats; zero entries contribute nothing.

    Rounding can push the sum a hair outside ``[0, log n]``; the result is
    clamped back onto that interval.
    """
    p = check_probability_vector(p)
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    return min(max(h, 0.0), math.log(p.size))


def entropy_from_logits(z):
    return entropy(softmax(as_float_array(z, "logits", ndim=1)))


@dataclass
class EntropyTracker:
    """Per-session entropy bookkeeping.

    The first pushed entropy initializes the EMA directly. ``peak_before``
    holds the largest EMA strictly before the most recent one, which is
    what the switching rule compares against; ``ema_peak`` includes the
    most recent value.
    """

    beta: float = 0.98
    recursive: bool = True
    h_series: list = field(default_factory=list)
    ema_series: list = field(default_factory=list)
    alpha_series: list = field(default_factory=list)
    ema_peak: float = -math.inf
    peak_before: float = -math.inf

    def __post_init__(self):
        check_scalar_param(self.beta, "beta", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="neither")

    @property
    def step_index(self):
        return len(self.h_series)

    @property
    def ema(self):
        return self.ema_series[-1] if self.ema_series else None

    def push(self, h):
        h = float(h)
        if not self.h_series:
            ema = h
        else:
            prev = self.ema_series[-1] if self.recursive else self.h_series[-1]
            ema = self.beta * prev + (1.0 - self.beta) * h
        self.peak_before = self.ema_peak
        self.h_series.append(h)
        self.ema_series.append(ema)
        self.ema_peak = max(self.ema_peak, ema)
        return ema

    def alpha(self):
        if not self.ema_series:
            raise ValueError("alpha requires at least one EMA value")
        return 1 if self.ema_series[-1] >= self.peak_before else -1

    def update(self, h):
        """Push ``h`` and record the switching coefficient for this step."""
        self.push(h)
        a = self.alpha()
        self.alpha_series.append(a)
        return a


def ema_update(tracker, h):
    tracker.push(h)
    return tracker


def alpha(tracker):
    return tracker.alpha()


def ema_filter(h, beta=0.98, recursive=True):
    """EMA of a whole series, initialized at the first value."""
    tracker = EntropyTracker(beta=beta, recursive=recursive)
    for value in as_float_array(h, "h", ndim=1):
        tracker.push(value)
    return np.asarray(tracker.ema_series)


def alphas_from_ema(ema):
    """+1 where the EMA reaches the running maximum of all earlier values, else -1."""
    ema = as_float_array(ema, "ema", ndim=1)
    if ema.size == 0:
        return np.zeros(0, dtype=np.int64)
    prior = np.empty_like(ema)
    prior[0] = -np.inf
    prior[1:] = np.maximum.accumulate(ema)[:-1]
    return np.where(ema >= prior, 1, -1)


def switching_loss(h, alpha_k):
    if alpha_k not in (-1, 1):
        raise ValueError(f"alpha must be +1 or -1, got {alpha_k!r}")
    return -alpha_k * float(h)


class EntropyEMASwitch(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the EMA switch.

    ``transform`` maps an entropy series to its EMA, ``predict`` maps it to
    the switching coefficients.

    Parameters
    ----------
    beta : float, default=0.98
        Smoothing coefficient.
    recursive : bool, default=True
        Use the recursive EMA. ``False`` blends the previous *raw* entropy
        instead, for comparison only.
    """

    def __init__(self, beta=0.98, recursive=True):
        self.beta = beta
        self.recursive = recursive

    def fit(self, X=None, y=None):
        check_scalar_param(self.beta, "beta", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="neither")
        self.is_fitted_ = True
        return self

    def transform(self, X):
        return ema_filter(np.ravel(X), beta=self.beta, recursive=self.recursive)

    def predict(self, X):
        return alphas_from_ema(self.transform(X))
