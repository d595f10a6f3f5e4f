"""Sampling and the generation loop with optional test-time controller optimization."""
import logging
import math
import numbers
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from ._validation import check_scalar_param
from .controller import ValueCacheController, backprop_to_controller, entropy_grad_logits
from .entropy import EntropyTracker, entropy, switching_loss
from .errors import ConfigError, NumericalError
from .model import decode_step, prefill
from .nn import softmax
from .pruning import prune_cache, score_video_tokens, select_keep_set
from .trace import StepRecord, Trace

logger = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "GenerationConfig",
    "truncate_probs",
    "sample",
    "DecodingSession",
    "generate",
    "generate_lite",
    "run_generation",
    "cadence_count",
]

MODES = ("baseline", "vreason", "vreason_lite", "min_entropy", "max_entropy")
_FORCED_ALPHA = {"min_entropy": -1, "max_entropy": 1}


@dataclass(frozen=True)
class GenerationConfig:
    max_length: int = 64
    temperature: float = 0.1
    top_p: float = 0.001
    min_p: float = None
    sampler_seed: int = 0
    step_size: int = 4
    learning_rate: float = 3e-4
    clip_norm: float = 1.0
    beta: float = 0.98
    mode: str = "vreason"
    keep_ratio: float = 0.5
    eos_id: int = 0
    alpha_override: int = None
    recursive_ema: bool = True

    def __post_init__(self):
        check_scalar_param(self.max_length, "max_length", numbers.Integral, min_val=1)
        check_scalar_param(self.temperature, "temperature", numbers.Real, min_val=0.0, include_boundaries="neither")
        check_scalar_param(self.top_p, "top_p", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="right")
        if self.min_p is not None:
            check_scalar_param(self.min_p, "min_p", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="neither")
        check_scalar_param(self.sampler_seed, "sampler_seed", numbers.Integral, min_val=0, max_val=2**64 - 1)
        check_scalar_param(self.step_size, "step_size", numbers.Integral, min_val=2)
        check_scalar_param(self.learning_rate, "learning_rate", numbers.Real, min_val=0.0)
        check_scalar_param(self.clip_norm, "clip_norm", numbers.Real, min_val=0.0, include_boundaries="neither")
        check_scalar_param(self.beta, "beta", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="neither")
        check_scalar_param(self.keep_ratio, "keep_ratio", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="right")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.alpha_override not in (None, -1, 1):
            raise ConfigError("alpha_override must be None, -1 or +1")

    def to_dict(self):
        return asdict(self)


def truncate_probs(probs, top_p=1.0, min_p=None):
    """Nucleus truncation, then min-p truncation, then renormalization.

    The most probable token survives both rules, so the support is never empty.
    """
    probs = np.asarray(probs, dtype=np.float64)
    keep = np.zeros(probs.size, dtype=bool)
    if top_p >= 1.0:
        keep[:] = True
    else:
        order = np.argsort(-probs, kind="stable")
        before = np.cumsum(probs[order]) - probs[order]
        keep[order[before < top_p]] = True
        keep[order[0]] = True
    if min_p is not None:
        keep &= probs >= min_p * probs.max()
    out = np.where(keep, probs, 0.0)
    return out / out.sum()


def sample(logits, config, rng):
    """Draw one token. Consumes exactly one uniform from ``rng`` regardless of the support size."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits passed to the sampler")
    probs = truncate_probs(softmax(logits / config.temperature), config.top_p, config.min_p)
    cum = np.cumsum(probs)
    u = rng.random()
    token = int(np.searchsorted(cum, u * cum[-1], side="right"))
    token = min(token, probs.size - 1)
    while probs[token] == 0.0:
        token -= 1
    return token, rng


def cadence_count(n_tokens, step_size):
    """Number of optimizer triggers in a run of ``n_tokens`` generated tokens."""
    return sum(1 for t in range(2, n_tokens + 1) if t % step_size == 0)


class DecodingSession:
    """One generation session: cache, controller, entropy tracker and sampler state.

    Token ``t`` (1-based) is sampled from the distribution produced by the
    forward pass fed token ``t-1`` (prefill for ``t = 1``). When ``t`` is a
    multiple of the step size, the switching loss of that distribution is
    differentiated through the saved last-layer activations and one AdamW
    step is applied; the new offset is used from the next forward on.
    """

    def __init__(self, weights, prompt, config):
        self.weights = weights
        self.prompt = prompt
        self.config = config
        self.rng = np.random.Generator(np.random.PCG64(config.sampler_seed))
        self.tracker = EntropyTracker(beta=config.beta, recursive=config.recursive_ema)
        self.cache = None
        self.controller = None
        self.prune_report = None
        self.last_saved = None
        self.last_logits = None
        self.records = []
        self.tokens = []

    @property
    def optimizing(self):
        return self.config.mode != "baseline"

    @property
    def finished(self):
        if not self.tokens:
            return False
        eos = self.config.eos_id
        return len(self.tokens) >= self.config.max_length or (eos is not None and self.tokens[-1] == eos)

    def _policy_alpha(self):
        eq4 = self.tracker.alpha()
        if self.config.alpha_override is not None:
            return self.config.alpha_override
        return _FORCED_ALPHA.get(self.config.mode, eq4)

    def start(self):
        cfg = self.weights.config
        logits, cache, saved = prefill(self.weights, self.prompt)
        if self.config.mode == "vreason_lite":
            self.prune_report = select_keep_set(
                score_video_tokens(cache), self.config.keep_ratio, cache.video_positions()
            )
            cache = prune_cache(cache, self.prune_report, self.weights)
        self.cache = cache
        if self.optimizing:
            self.controller = ValueCacheController.zeros(
                cfg.n_kv_heads,
                cache.n_video,
                cfg.d_head,
                step_size=self.config.step_size,
                learning_rate=self.config.learning_rate,
                clip_norm=self.config.clip_norm,
            )
        self.last_saved = saved
        self._emit(logits, saved, optimize=False)
        return self

    def _emit(self, logits, saved, optimize):
        self.last_logits = logits
        token, self.rng = sample(logits, self.config, self.rng)
        p = softmax(logits)
        h = entropy(p)
        self.tracker.push(h)
        a = self._policy_alpha()
        self.tracker.alpha_series.append(a)
        self.tokens.append(token)
        t = len(self.tokens)
        record = StepRecord(
            step=t,
            token=token,
            entropy=h,
            ema=self.tracker.ema,
            alpha=a,
            degenerate_slots=int(saved.degenerate.sum()),
        )
        if record.degenerate_slots:
            logger.warning("step %d: %d degenerate controller slot(s) left untransformed", t, record.degenerate_slots)
        if optimize and self.controller is not None and t % self.config.step_size == 0:
            grad = backprop_to_controller(saved, entropy_grad_logits(p), expected_step=saved.step)
            result = self.controller.step(grad, a)
            record.loss = switching_loss(h, a)
            record.grad_norm = result.pre_clip_norm
            record.optimized = not result.skipped
            record.skipped = result.skipped
            if result.skipped:
                logger.warning("step %d: non-finite controller gradient, optimizer step skipped", t)
        if self.controller is not None:
            record.optimizer_steps = self.controller.opt_step_count
        self.records.append(record)
        return record

    def step(self):
        if self.cache is None:
            raise RuntimeError("call start() first")
        if self.finished:
            raise RuntimeError("generation already finished")
        logits, self.cache, saved = decode_step(self.weights, self.tokens[-1], self.cache, self.controller)
        if not np.all(np.isfinite(logits)):
            raise NumericalError(f"non-finite logits at step {len(self.tokens) + 1}")
        self.last_saved = saved
        return self._emit(logits, saved, optimize=True)

    def run(self):
        if self.cache is None:
            self.start()
        while not self.finished:
            self.step()
        return self.tokens, self.trace()

    def trace(self):
        header = {
            "tool_version": __version__,
            "config": self.config.to_dict(),
            "model_config": self.weights.config.to_dict(),
            "model_hash": self.weights.digest(),
            "prompt": {"tokens": list(self.prompt.tokens), "video_span": list(self.prompt.video_span)},
            "prune_report": self.prune_report.to_dict() if self.prune_report else None,
            "ema_init": self.tracker.ema_series[0] if self.tracker.ema_series else None,
            "ema_form": "recursive" if self.config.recursive_ema else "raw",
            "controller_parameters": self.controller.n_parameters if self.controller else 0,
            "log_vocab": math.log(self.weights.config.vocab_size),
        }
        return Trace(header=header, records=list(self.records))


def generate(weights, prompt, config):
    if config.mode == "vreason_lite":
        raise ConfigError("use generate_lite for mode 'vreason_lite'")
    return DecodingSession(weights, prompt, config).run()


def generate_lite(weights, prompt, config):
    if config.mode != "vreason_lite":
        raise ConfigError(f"generate_lite requires mode 'vreason_lite', got {config.mode!r}")
    return DecodingSession(weights, prompt, config).run()


def run_generation(weights, prompt, config):
    fn = generate_lite if config.mode == "vreason_lite" else generate
    return fn(weights, prompt, config)
