"""Forward/backward primitives for the toy decoder (float64, single-sequence)."""
import numpy as np

RMS_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


def rms_norm(x, gain, eps=RMS_EPS):
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / scale * gain


def rms_norm_backward(x, gain, grad_out, eps=RMS_EPS):
    """Vector-Jacobian product of :func:`rms_norm` w.r.t. a 1-D input ``x``."""
    d = x.shape[-1]
    s = np.sqrt(np.mean(x * x) + eps)
    gy = grad_out * gain
    return gy / s - x * (gy @ x) / (d * s**3)


def gelu(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def row_norms(x):
    """L2 norm along the last axis."""
    return np.sqrt(np.sum(x * x, axis=-1))
