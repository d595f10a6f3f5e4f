"""scikit-learn style front end for entropy-steered generation."""
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .decoding import GenerationConfig, run_generation
from .errors import ConfigError
from .model import PromptSpec, Weights, load_weights

__all__ = ["EntropySteeredGenerator", "as_prompt"]


def as_prompt(prompt):
    if isinstance(prompt, PromptSpec):
        return prompt
    try:
        tokens, span = prompt
    except (TypeError, ValueError) as exc:
        raise ConfigError("prompt must be a PromptSpec or a (tokens, (start, end)) pair") from exc
    return PromptSpec(tokens=tuple(tokens), video_span=tuple(span))


class EntropySteeredGenerator(BaseEstimator):
    """Generate from a frozen toy decoder while steering its output entropy.

    ``fit`` binds (and validates) the frozen weights; nothing is trained.
    ``generate`` runs one session and stores its trace in ``trace_``.
    Hyperparameters follow :class:`GenerationConfig`, so ``set_params`` and
    ``sklearn.base.clone`` work for sweeps.

    Parameters
    ----------
    mode : {"baseline", "vreason", "vreason_lite", "min_entropy", "max_entropy"}
    step_size : int, default=4
        Optimize the controller on every ``step_size``-th generated token.
    learning_rate : float, default=3e-4
    clip_norm : float, default=1.0
    beta : float, default=0.98
        EMA smoothing coefficient.
    temperature, top_p, min_p : sampling controls.
    keep_ratio : float, default=0.5
        Fraction of video tokens kept in ``vreason_lite`` mode.
    max_length : int, default=64
    seed : int, default=0
        Sampler seed.
    eos_id : int or None, default=0
    alpha_override : {None, -1, 1}
        Force the switching coefficient.
    """

    def __init__(
        self,
        mode="vreason",
        step_size=4,
        learning_rate=3e-4,
        clip_norm=1.0,
        beta=0.98,
        temperature=0.1,
        top_p=0.001,
        min_p=None,
        keep_ratio=0.5,
        max_length=64,
        seed=0,
        eos_id=0,
        alpha_override=None,
    ):
        self.mode = mode
        self.step_size = step_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.beta = beta
        self.temperature = temperature
        self.top_p = top_p
        self.min_p = min_p
        self.keep_ratio = keep_ratio
        self.max_length = max_length
        self.seed = seed
        self.eos_id = eos_id
        self.alpha_override = alpha_override

    def generation_config(self):
        return GenerationConfig(
            max_length=self.max_length,
            temperature=self.temperature,
            top_p=self.top_p,
            min_p=self.min_p,
            sampler_seed=self.seed,
            step_size=self.step_size,
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            beta=self.beta,
            mode=self.mode,
            keep_ratio=self.keep_ratio,
            eos_id=self.eos_id,
            alpha_override=self.alpha_override,
        )

    def fit(self, weights, y=None):
        if not isinstance(weights, Weights):
            _, weights = load_weights(weights)
        self.generation_config()
        self.weights_ = weights
        self.model_hash_ = weights.digest()
        return self

    def generate(self, prompt):
        check_is_fitted(self, "weights_")
        tokens, self.trace_ = run_generation(self.weights_, as_prompt(prompt), self.generation_config())
        return tokens, self.trace_

    def predict(self, prompt):
        return self.generate(prompt)[0]
