"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
import numbers

import numpy as np
from sklearn.utils.validation import check_scalar

from .errors import ConfigError

__all__ = ["check_scalar_param", "check_probability_vector", "check_video_span", "as_float_array"]


def check_scalar_param(x, name, target_type, min_val=None, max_val=None, include_boundaries="both"):
    """Wrap :func:`sklearn.utils.validation.check_scalar` so failures raise ``ConfigError``."""
    if target_type is numbers.Integral and isinstance(x, (bool, np.bool_)):
        raise ConfigError(f"{name} must be an integer, got bool")
    try:
        return check_scalar(
            x, name, target_type, min_val=min_val, max_val=max_val, include_boundaries=include_boundaries
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def as_float_array(x, name="array", ndim=None):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ConfigError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_probability_vector(p, atol=1e-9, name="p"):
    p = as_float_array(p, name, ndim=1)
    if p.size == 0:
        raise ConfigError(f"{name} is empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ConfigError(f"{name} must be finite and nonnegative")
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise ConfigError(f"{name} is not normalized (sum={total!r})")
    return p


def check_video_span(span, prompt_len):
    start, end = span
    if not (0 <= start < end <= prompt_len):
        raise ConfigError(
            f"video span [{start}, {end}) must satisfy 0 <= start < end <= prompt length ({prompt_len})"
        )
    if end - start < 2:
        raise ConfigError(f"video span [{start}, {end}) must cover at least 2 positions")
    return int(start), int(end)
