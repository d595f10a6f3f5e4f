"""Value-cache controller: the norm-preserving transform, its gradient, and AdamW."""
import json
import numbers
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_probability_vector, check_scalar_param
from .errors import ConfigError, StaleActivationsError, WeightsFormatError
from .nn import gelu_grad, rms_norm_backward, row_norms

__all__ = [
    "DEGENERATE_GUARD",
    "PROB_FLOOR",
    "apply_controller",
    "entropy_grad_logits",
    "ControllerGradient",
    "StepResult",
    "ValueCacheController",
    "backprop_to_controller",
    "adamw_step",
]

DEGENERATE_GUARD = 1e-12
PROB_FLOOR = 1e-12


def apply_controller(values, delta, original_norms, guard=DEGENERATE_GUARD):
    """Add ``delta`` to the video-slot values and rescale each vector to its original norm.

    ``values`` and ``delta`` are ``[n_kv_heads, n_slots, d_head]``; ``original_norms``
    is ``[n_kv_heads, n_slots]``. Returns ``(transformed, degenerate)`` where
    ``degenerate`` flags slots whose shifted vector has (near) zero norm; those
    slots are passed through untransformed.

    A slot with an all-zero delta whose value already carries its recorded norm
    is returned unchanged, so a zero controller reproduces the frozen model
    exactly instead of up to rounding.
    """
    values = np.asarray(values, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    norms = np.asarray(original_norms, dtype=np.float64)
    if values.shape != delta.shape or values.shape[:-1] != norms.shape:
        raise ConfigError(
            f"shape mismatch: values {values.shape}, delta {delta.shape}, norms {norms.shape}"
        )
    shifted = values + delta
    rho = row_norms(shifted)
    degenerate = rho < guard
    safe_rho = np.where(degenerate, 1.0, rho)
    out = shifted / safe_rho[..., None] * norms[..., None]
    out[degenerate] = values[degenerate]
    untouched = ~np.any(delta, axis=-1) & np.isclose(row_norms(values), norms, rtol=1e-12, atol=0.0)
    out[untouched] = values[untouched]
    return out, degenerate


def entropy_grad_logits(p):
    """Gradient of the entropy of ``softmax(z)`` w.r.t. ``z``, given ``p = softmax(z)``.

    Evaluates ``-J_p^T (1 + log p)`` with the softmax Jacobian
    ``J_p = diag(p) - p p^T``. ``p`` is floored at ``PROB_FLOOR`` and
    renormalized before the log.
    """
    p = check_probability_vector(p)
    p = np.maximum(p, PROB_FLOOR)
    p = p / p.sum()
    a = 1.0 + np.log(p)
    return -(p * a - p * (p @ a))


@dataclass
class ControllerGradient:
    grad: np.ndarray
    pre_clip_norm: float


@dataclass
class StepResult:
    skipped: bool
    applied_norm: float
    pre_clip_norm: float


@dataclass
class ValueCacheController:
    """Trainable offset on the last layer's video-slot values plus AdamW state."""

    delta: np.ndarray
    step_size: int = 4
    learning_rate: float = 3e-4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    opt_step_count: int = 0
    skipped_steps: int = 0
    last_applied_grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.delta = np.array(self.delta, dtype=np.float64)
        if self.delta.ndim != 3:
            raise ConfigError(f"delta must be [n_kv_heads, n_slots, d_head], got {self.delta.shape}")
        check_scalar_param(self.step_size, "step_size", numbers.Integral, min_val=2)
        check_scalar_param(self.learning_rate, "learning_rate", numbers.Real, min_val=0.0)
        check_scalar_param(self.clip_norm, "clip_norm", numbers.Real, min_val=0.0, include_boundaries="neither")
        if self.m is None:
            self.m = np.zeros_like(self.delta)
        if self.v is None:
            self.v = np.zeros_like(self.delta)

    @classmethod
    def zeros(cls, n_kv_heads, n_slots, d_head, **kwargs):
        return cls(delta=np.zeros((n_kv_heads, n_slots, d_head)), **kwargs)

    @property
    def shape(self):
        return self.delta.shape

    @property
    def n_parameters(self):
        return int(self.delta.size)

    def step(self, grad, alpha_k):
        """One AdamW step on the loss ``-alpha_k * H`` given ``grad = dH/d(delta)``."""
        if alpha_k not in (-1, 1):
            raise ValueError(f"alpha must be +1 or -1, got {alpha_k!r}")
        g = np.asarray(grad.grad, dtype=np.float64)
        if g.shape != self.delta.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match controller {self.delta.shape}")
        pre = float(grad.pre_clip_norm)
        if not (np.all(np.isfinite(g)) and np.isfinite(pre)):
            self.skipped_steps += 1
            return StepResult(skipped=True, applied_norm=float("nan"), pre_clip_norm=pre)
        loss_grad = -alpha_k * g
        if pre > self.clip_norm:
            loss_grad = loss_grad * (self.clip_norm / pre)
        self.opt_step_count += 1
        t = self.opt_step_count
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * loss_grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * loss_grad * loss_grad
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        self.delta = self.delta - self.learning_rate * (m_hat / (np.sqrt(v_hat) + self.eps))
        self.last_applied_grad = loss_grad
        return StepResult(skipped=False, applied_norm=float(np.linalg.norm(loss_grad)), pre_clip_norm=pre)

    def copy(self):
        return ValueCacheController(
            delta=self.delta.copy(),
            step_size=self.step_size,
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            m=self.m.copy(),
            v=self.v.copy(),
            opt_step_count=self.opt_step_count,
            skipped_steps=self.skipped_steps,
        )

    def dump(self, path):
        """Write delta, m and v as a JSON header line followed by little-endian float64."""
        header = {
            "format": "entropy_steer.controller/1",
            "shape": list(self.delta.shape),
            "arrays": ["delta", "m", "v"],
            "opt_step_count": self.opt_step_count,
            "step_size": self.step_size,
            "learning_rate": self.learning_rate,
            "clip_norm": self.clip_norm,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for arr in (self.delta, self.m, self.v):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        line, sep, payload = raw.partition(b"\n")
        if not sep:
            raise WeightsFormatError("missing controller header", field="header")
        header = json.loads(line)
        shape = tuple(header["shape"])
        size = int(np.prod(shape))
        if len(payload) != 3 * size * 8:
            raise WeightsFormatError("controller payload length mismatch", field="payload")
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        delta, m, v = (flat[i * size : (i + 1) * size].reshape(shape) for i in range(3))
        return cls(
            delta=delta,
            m=m.copy(),
            v=v.copy(),
            step_size=header["step_size"],
            learning_rate=header["learning_rate"],
            clip_norm=header["clip_norm"],
            opt_step_count=header["opt_step_count"],
        )


def adamw_step(controller, grad, alpha_k):
    controller.step(grad, alpha_k)
    return controller


def backprop_to_controller(saved, dH_dz, expected_step=None):
    """Reverse-mode gradient of a scalar of the logits w.r.t. the controller offset.

    Walks LM head -> final norm -> feed-forward (with residual) -> output
    projection -> attention-weighted value read -> norm-preserving transform.
    Attention weights do not depend on the values, so they are treated as
    constants.
    """
    if expected_step is not None and saved.step != expected_step:
        raise StaleActivationsError(
            f"saved activations are from step {saved.step}, expected step {expected_step}"
        )
    if saved.delta is None:
        raise StaleActivationsError("saved activations were recorded without a controller")
    w = saved.weights
    cfg = w.config
    lp = w.layer(cfg.n_layers - 1)
    dz = np.asarray(dH_dz, dtype=np.float64)
    if dz.shape != (cfg.vocab_size,):
        raise ConfigError(f"dH_dz must have shape ({cfg.vocab_size},), got {dz.shape}")

    d_nf = w["lm_head"] @ dz
    d_h2 = rms_norm_backward(saved.h2, w["final_norm"], d_nf)
    d_act = lp["w2"] @ d_h2
    d_u1 = d_act * gelu_grad(saved.u1)
    d_n2 = lp["w1"] @ d_u1
    d_h1 = d_h2 + rms_norm_backward(saved.h1, lp["ffn_norm"], d_n2)
    d_heads = (lp["wo"] @ d_h1).reshape(cfg.n_heads, cfg.d_head)

    group = cfg.n_heads // cfg.n_kv_heads
    a_video = saved.attn[:, saved.video_slots].reshape(cfg.n_kv_heads, group, -1)
    d_out = d_heads.reshape(cfg.n_kv_heads, group, cfg.d_head)
    d_vprime = np.einsum("kgj,kgd->kjd", a_video, d_out)

    shifted = saved.video_values + saved.delta
    rho = row_norms(shifted)
    degenerate = rho < DEGENERATE_GUARD
    safe_rho = np.where(degenerate, 1.0, rho)
    u = shifted / safe_rho[..., None]
    scale = saved.original_norms / safe_rho
    grad = scale[..., None] * (d_vprime - u * np.sum(u * d_vprime, axis=-1, keepdims=True))
    grad[degenerate] = 0.0
    return ControllerGradient(grad=grad, pre_clip_norm=float(np.linalg.norm(grad)))
