"""Independent oracles: finite-difference gradients, a cache-free reference forward,
and numerical harnesses for the entropy-update and EMA properties.

Nothing here calls the reverse-mode code in ``controller`` except
:func:`gradcheck`, which exists to compare against it.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from .controller import ValueCacheController, backprop_to_controller, entropy_grad_logits
from .decoding import GenerationConfig, generate
from .entropy import alphas_from_ema, ema_filter, entropy_from_logits
from .errors import ConfigError, NumericalError
from .experiments import toy_instance
from .model import decode_step, last_layer_forward, prefill
from .nn import gelu, rms_norm, softmax

__all__ = [
    "REL_ERROR_FLOOR",
    "finite_diff_grad",
    "controller_entropy",
    "controller_finite_diff",
    "GradCheckReport",
    "gradcheck",
    "reference_forward",
    "frozen_state",
    "entropy_after_steps",
    "proposition_harness",
    "PROPOSITION_KINDS",
]

# Relative errors divide by max(|analytic|, |numeric|, REL_ERROR_FLOOR) so that
# coordinates whose true gradient is ~0 are judged on an absolute scale.
REL_ERROR_FLOOR = 1e-6


def finite_diff_grad(func, x0, eps=1e-5):
    """Central differences of scalar ``func`` at every coordinate of array ``x0``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"epsilon {eps} outside [1e-7, 1e-3]")
    x0 = np.array(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        x = x0.copy()
        x[idx] = x0[idx] + eps
        f_plus = func(x)
        x[idx] = x0[idx] - eps
        f_minus = func(x)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericalError(f"non-finite probe at coordinate {idx}")
        grad[idx] = (f_plus - f_minus) / (2 * eps)
    return grad


def controller_entropy(saved, delta):
    """Entropy of the next-token distribution after re-running the last layer with ``delta``."""
    logits, _ = last_layer_forward(
        saved.weights,
        saved.x,
        saved.keys,
        saved.values,
        saved.attend_mask,
        saved.video_slots,
        delta,
        saved.original_norms,
        step=saved.step,
    )
    return entropy_from_logits(logits)


def controller_finite_diff(saved, delta, eps=1e-5):
    return finite_diff_grad(lambda d: controller_entropy(saved, d), delta, eps)


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    worst_index: tuple
    epsilon: float
    model_hash: str
    n_coordinates: int
    delta_scale: float
    passed: bool
    tolerance: float

    def to_dict(self):
        d = asdict(self)
        d["worst_index"] = list(self.worst_index)
        return d


def frozen_state(weights, prompt, n_decode=3, delta=None):
    """Prefill, then decode ``n_decode`` prompt-derived tokens under a fixed offset.

    Returns the last step's saved activations, which are the frozen state the
    gradient oracles and directional checks operate on.
    """
    cfg = weights.config
    _, cache, saved = prefill(weights, prompt)
    if delta is None:
        delta = np.zeros((cfg.n_kv_heads, cache.n_video, cfg.d_head))
    controller = ValueCacheController(delta=delta)
    for i in range(n_decode):
        token = prompt.tokens[i % len(prompt)]
        _, cache, saved = decode_step(weights, token, cache, controller)
    return saved


def gradcheck(weights, prompt, eps=1e-5, delta_scale=0.0, seed=0, tolerance=1e-4, n_decode=3):
    """Compare the analytic entropy gradient w.r.t. the offset with central differences.

    ``delta_scale > 0`` evaluates at a random offset of that scale instead of zero.
    """
    cfg = weights.config
    rng = np.random.Generator(np.random.PCG64(seed))
    n_video = prompt.video_span[1] - prompt.video_span[0]
    delta = rng.standard_normal((cfg.n_kv_heads, n_video, cfg.d_head)) * delta_scale
    saved = frozen_state(weights, prompt, n_decode=n_decode, delta=delta)
    analytic = backprop_to_controller(saved, entropy_grad_logits(softmax(saved.logits))).grad
    numeric = controller_finite_diff(saved, delta, eps)
    abs_err = np.abs(analytic - numeric)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERROR_FLOOR)
    worst = np.unravel_index(int(np.argmax(rel_err)), rel_err.shape)
    max_rel = float(rel_err.max())
    return GradCheckReport(
        max_abs_error=float(abs_err.max()),
        max_rel_error=max_rel,
        worst_index=tuple(int(i) for i in worst),
        epsilon=eps,
        model_hash=weights.digest(),
        n_coordinates=int(delta.size),
        delta_scale=float(delta_scale),
        passed=bool(max_rel <= tolerance),
        tolerance=tolerance,
    )


def reference_forward(weights, tokens, positions, visible):
    """Cache-free forward over a whole sequence; returns logits at the last position.

    ``visible[i, j]`` says whether query ``i`` may attend key ``j``. Written
    with explicit per-position, per-head loops so it shares no attention or
    caching code with ``model``.
    """
    cfg = weights.config
    T = len(tokens)
    h = np.stack([weights["tok_emb"][tok] + weights["pos_emb"][pos] for tok, pos in zip(tokens, positions)])
    for layer in range(cfg.n_layers):
        lp = weights.layer(layer)
        n1 = np.stack([rms_norm(h[i], lp["attn_norm"]) for i in range(T)])
        q = (n1 @ lp["wq"]).reshape(T, cfg.n_heads, cfg.d_head)
        k = (n1 @ lp["wk"]).reshape(T, cfg.n_kv_heads, cfg.d_head)
        v = (n1 @ lp["wv"]).reshape(T, cfg.n_kv_heads, cfg.d_head)
        new_h = np.empty_like(h)
        for i in range(T):
            heads = []
            for head in range(cfg.n_heads):
                g = head // cfg.group_size
                cols = [j for j in range(T) if visible[i, j]]
                scores = np.array([q[i, head] @ k[j, g] for j in cols]) / math.sqrt(cfg.d_head)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                heads.append(sum(wj * v[j, g] for wj, j in zip(w, cols)))
            a = h[i] + np.concatenate(heads) @ lp["wo"]
            u = rms_norm(a, lp["ffn_norm"]) @ lp["w1"] + lp["b1"]
            new_h[i] = a + gelu(u) @ lp["w2"] + lp["b2"]
        h = new_h
    return rms_norm(h[-1], weights["final_norm"]) @ weights["lm_head"]


def entropy_after_steps(saved, alpha_k, learning_rate, n_steps, delta=None, clip_norm=1.0):
    """Entropies of the frozen state before and after each of ``n_steps`` AdamW steps."""
    if delta is None:
        delta = saved.delta if saved.delta is not None else np.zeros_like(saved.video_values)
    controller = ValueCacheController(delta=delta, learning_rate=learning_rate, clip_norm=clip_norm)
    out = [controller_entropy(saved, controller.delta)]
    for _ in range(n_steps):
        _, current = last_layer_forward(
            saved.weights,
            saved.x,
            saved.keys,
            saved.values,
            saved.attend_mask,
            saved.video_slots,
            controller.delta,
            saved.original_norms,
            step=saved.step,
        )
        grad = backprop_to_controller(current, entropy_grad_logits(softmax(current.logits)))
        controller.step(grad, alpha_k)
        out.append(controller_entropy(saved, controller.delta))
    return np.asarray(out)


PROPOSITION_KINDS = ("bounded_update", "ema_lowpass", "peak_delay", "post_peak_alpha")


def ema_gain(omega, beta):
    return abs((1 - beta) / (1 - beta * np.exp(-1j * omega)))


def _sinusoid_amplitude(y, omega):
    t = np.arange(y.size)
    a = 2.0 / y.size * np.sum(y * np.sin(omega * t))
    b = 2.0 / y.size * np.sum(y * np.cos(omega * t))
    return math.hypot(a, b)


def unimodal_series(seed, length=400):
    """A Gaussian bump plus small Gaussian noise, all parameters drawn from ``seed``."""
    rng = np.random.Generator(np.random.PCG64([seed, 7]))
    center = rng.uniform(80, 220)
    width = rng.uniform(20, 60)
    height = rng.uniform(0.5, 2.0)
    t = np.arange(length)
    base = rng.uniform(0.05, 0.3)
    return base + height * np.exp(-0.5 * ((t - center) / width) ** 2) + rng.normal(0, 0.02 * height, length)


def post_peak_alpha_ok(ema, alphas=None):
    """True when the step after the (last) global EMA maximum switches to -1.

    Runs that peak on their final step have no following step and pass vacuously.
    """
    ema = np.asarray(ema, dtype=np.float64)
    last_peak = int(np.flatnonzero(ema == ema.max())[-1])
    if last_peak == ema.size - 1:
        return True
    if alphas is None:
        alphas = alphas_from_ema(ema)
    return alphas[last_peak + 1] == -1


def _bounded_update(seeds, beta):
    etas = (1e-4, 5e-5, 2.5e-5)
    rows = []
    ok = True
    for seed in range(seeds):
        weights, prompt = toy_instance(seed)
        saved = frozen_state(weights, prompt)
        changes = []
        for eta in etas:
            h = entropy_after_steps(saved, 1, eta, 1)
            changes.append(abs(h[1] - h[0]))
        ratios = [changes[1] / changes[0], changes[2] / changes[1]]
        slope = float(np.polyfit(np.log(etas), np.log(changes), 1)[0])
        seed_ok = all(0.3 <= r <= 0.7 for r in ratios) and abs(slope - 1.0) <= 0.3
        rows.append({"seed": seed, "changes": changes, "ratios": ratios, "slope": slope, "passed": seed_ok})
        ok &= seed_ok

    # envelope on full runs with frequent small updates
    log_n = None
    worst = 0.0
    max_jump = 0.0
    for seed in range(seeds):
        weights, prompt = toy_instance(seed)
        log_n = math.log(weights.config.vocab_size)
        cfg = GenerationConfig(mode="vreason", learning_rate=1e-4, step_size=2, max_length=100, eos_id=None, beta=beta)
        _, trace = generate(weights, prompt, cfg)
        hs = np.asarray(trace.entropies)
        worst = max(worst, float(np.max(hs - log_n)), float(np.max(-hs)))
        opt = [i for i, r in enumerate(trace.records) if r.optimized and i + 1 < len(hs)]
        if opt:
            max_jump = max(max_jump, float(np.max(np.abs(hs[[i + 1 for i in opt]] - hs[opt]))))
        ok &= bool(np.all((hs >= 0) & (hs <= log_n)))
    ok &= math.isfinite(max_jump)
    return ok, {"per_seed": rows, "envelope_violation": worst, "max_step_change_after_update": max_jump}


def _ema_lowpass(beta):
    rows = []
    ok = True
    for omega in (math.pi / 2, math.pi / 8):
        period = round(2 * math.pi / omega)
        burn, n_periods = 2000, 200
        t = np.arange(burn + n_periods * period)
        series = 1.0 + 0.5 * np.sin(omega * t)
        ema = ema_filter(series, beta=beta)[burn:]
        measured = _sinusoid_amplitude(ema - ema.mean(), omega)
        expected = 0.5 * ema_gain(omega, beta)
        rel = abs(measured - expected) / expected
        rows.append({"omega": omega, "measured": measured, "expected": expected, "rel_error": rel})
        ok &= rel <= 0.05
    return ok, {"per_frequency": rows}


def _peak_delay(seeds, beta):
    violations = []
    for seed in range(seeds):
        h = unimodal_series(seed)
        if int(np.argmax(ema_filter(h, beta=beta))) < int(np.argmax(h)):
            violations.append(seed)
    return not violations, {"series": seeds, "violations": violations}


def _post_peak_alpha(seeds, beta):
    failures = []
    for seed in range(seeds):
        if not post_peak_alpha_ok(ema_filter(unimodal_series(seed), beta=beta)):
            failures.append(("synthetic", seed))
    for seed in range(min(seeds, 20)):
        weights, prompt = toy_instance(seed)
        _, trace = generate(weights, prompt, GenerationConfig(mode="vreason", max_length=100, beta=beta))
        if not post_peak_alpha_ok(trace.emas, trace.alphas):
            failures.append(("toy", seed))
    return not failures, {"failures": failures}


def proposition_harness(kind, seeds=100, beta=0.98):
    """Run one property check; returns ``(passed, measurements)``."""
    if kind == "bounded_update":
        return _bounded_update(min(seeds, 20), beta)
    if kind == "ema_lowpass":
        return _ema_lowpass(beta)
    if kind == "peak_delay":
        return _peak_delay(seeds, beta)
    if kind == "post_peak_alpha":
        return _post_peak_alpha(seeds, beta)
    raise ConfigError(f"unknown proposition kind {kind!r}; expected one of {PROPOSITION_KINDS}")
