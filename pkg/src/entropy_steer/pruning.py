"""One-shot eviction of low-norm video tokens from every layer's KV cache."""
import math
import numbers
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_scalar_param
from .errors import ConfigError
from .model import KVCache, encode
from .nn import row_norms

__all__ = ["PruneReport", "score_video_tokens", "select_keep_set", "prune_cache", "KVCachePruner"]


@dataclass(frozen=True)
class PruneReport:
    video_positions: tuple
    scores: tuple
    kept: tuple
    evicted: tuple
    keep_ratio: float

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            video_positions=tuple(d["video_positions"]),
            scores=tuple(d["scores"]),
            kept=tuple(d["kept"]),
            evicted=tuple(d["evicted"]),
            keep_ratio=d["keep_ratio"],
        )


def score_video_tokens(cache):
    """Mean L2 norm of each video slot's value vector over all layers and KV heads."""
    if cache.n_video == 0:
        raise ConfigError("cache has no video slots to score")
    per_layer = [row_norms(v[:, cache.video_slots, :]) for v in cache.values]
    return np.mean(np.stack(per_layer), axis=(0, 1))


def n_keep(keep_ratio, n_video):
    # round() absorbs products like 0.7 * 10 = 7.000000000000001
    return max(1, math.ceil(round(keep_ratio * n_video, 9)))


def select_keep_set(scores, keep_ratio=0.5, positions=None):
    """Keep the top ``ceil(keep_ratio * n)`` scores; ties go to the earlier position."""
    check_scalar_param(keep_ratio, "keep_ratio", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="right")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ConfigError("score set is empty")
    if positions is None:
        positions = np.arange(scores.size)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != scores.shape:
        raise ConfigError("positions and scores differ in length")
    order = np.lexsort((positions, -scores))
    k = n_keep(keep_ratio, scores.size)
    kept = np.sort(positions[order[:k]])
    evicted = np.sort(positions[order[k:]])
    return PruneReport(
        video_positions=tuple(int(p) for p in positions),
        scores=tuple(float(s) for s in scores),
        kept=tuple(int(p) for p in kept),
        evicted=tuple(int(p) for p in evicted),
        keep_ratio=float(keep_ratio),
    )


def prune_cache(cache, report, weights):
    """Evict the report's video slots from every layer and re-encode the survivors.

    The surviving tokens are run again at their original absolute positions,
    so the pruned cache is exactly what a fresh forward over the kept
    subsequence would have produced: no cached key or value retains any trace
    of an evicted token. Text slots always survive. The recorded original
    norms of kept video slots are carried over unchanged from before pruning,
    so the controller keeps rescaling to the unpruned magnitudes.
    """
    if cache.pruned:
        raise ConfigError("cache has already been pruned")
    video_positions = cache.video_positions()
    if tuple(int(p) for p in video_positions) != report.video_positions:
        raise ConfigError("prune report does not match the cache's video positions")
    kept_video = np.isin(video_positions, report.kept)
    keep = np.ones(cache.cached_len, dtype=bool)
    keep[cache.video_slots[~kept_video]] = False
    slots = np.flatnonzero(keep)
    remap = np.full(cache.cached_len, -1, dtype=np.int64)
    remap[slots] = np.arange(slots.size)
    if keep.all():
        keys = [k.copy() for k in cache.keys]
        values = [v.copy() for v in cache.values]
    else:
        if cache.tokens is None:
            raise ConfigError("cache carries no token ids; cannot re-encode the kept slots")
        keys, values, _ = encode(weights, cache.tokens[slots], cache.positions[slots])
    return KVCache(
        keys=keys,
        values=values,
        positions=cache.positions[slots],
        video_span=cache.video_span,
        video_slots=remap[cache.video_slots[kept_video]],
        original_value_norms=cache.original_value_norms[:, kept_video],
        attend_mask=cache.attend_mask[slots],
        pruned=True,
        tokens=None if cache.tokens is None else cache.tokens[slots],
        next_pos=cache.next_position,
    )


class KVCachePruner(TransformerMixin, BaseEstimator):
    """Estimator form of the pruner: ``fit`` scores a cache, ``transform`` evicts.

    ``fit`` also takes the frozen weights used to re-encode the kept slots.

    Parameters
    ----------
    keep_ratio : float, default=0.5
        Fraction of video tokens kept, rounded up.
    """

    def __init__(self, keep_ratio=0.5):
        self.keep_ratio = keep_ratio

    def fit(self, cache, y=None, *, weights):
        self.weights_ = weights
        self.scores_ = score_video_tokens(cache)
        self.report_ = select_keep_set(self.scores_, self.keep_ratio, cache.video_positions())
        return self

    def transform(self, cache):
        check_is_fitted(self, "report_")
        return prune_cache(cache, self.report_, self.weights_)
