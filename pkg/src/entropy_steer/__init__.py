"""Entropy-steered decoding with a test-time value-cache controller."""
__version__ = "0.1.0"

from .controller import (
    ControllerGradient,
    ValueCacheController,
    adamw_step,
    apply_controller,
    backprop_to_controller,
    entropy_grad_logits,
)
from .decoding import DecodingSession, GenerationConfig, generate, generate_lite, run_generation, sample
from .entropy import EntropyEMASwitch, EntropyTracker, alpha, ema_update, entropy, switching_loss
from .estimator import EntropySteeredGenerator
from .model import (
    KVCache,
    ModelConfig,
    PromptSpec,
    Weights,
    decode_step,
    init_random,
    load_weights,
    prefill,
    save_weights,
)
from .pruning import KVCachePruner, PruneReport, prune_cache, score_video_tokens, select_keep_set
from .trace import StepRecord, Trace

__all__ = [
    "ControllerGradient",
    "DecodingSession",
    "EntropyEMASwitch",
    "EntropySteeredGenerator",
    "EntropyTracker",
    "GenerationConfig",
    "KVCache",
    "KVCachePruner",
    "ModelConfig",
    "PromptSpec",
    "PruneReport",
    "StepRecord",
    "Trace",
    "ValueCacheController",
    "Weights",
    "adamw_step",
    "alpha",
    "apply_controller",
    "backprop_to_controller",
    "decode_step",
    "ema_update",
    "entropy",
    "entropy_grad_logits",
    "generate",
    "generate_lite",
    "init_random",
    "load_weights",
    "prefill",
    "prune_cache",
    "run_generation",
    "sample",
    "save_weights",
    "score_video_tokens",
    "select_keep_set",
    "switching_loss",
]
