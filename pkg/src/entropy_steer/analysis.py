"""Post-hoc trace analytics: phase segmentation, run summaries, MRA and paired comparison."""
from dataclasses import asdict, dataclass

import numpy as np

from .trace import Trace, export

__all__ = [
    "MRA_THRESHOLDS",
    "PhaseSegmentation",
    "RunSummary",
    "peak_index",
    "segment_phases",
    "summarize",
    "mra",
    "compare",
    "export",
]

# 1 - theta for theta in {0.50, 0.55, ..., 0.95}, written out so that the
# comparisons use the nearest doubles to the decimal thresholds.
MRA_THRESHOLDS = (0.50, 0.45, 0.40, 0.35, 0.30, 0.25, 0.20, 0.15, 0.10, 0.05)


def _ema_of(obj):
    if isinstance(obj, Trace):
        return np.asarray(obj.emas, dtype=np.float64)
    return np.asarray(obj, dtype=np.float64)


def peak_index(ema):
    """First index of the global maximum."""
    ema = np.asarray(ema, dtype=np.float64)
    if ema.size == 0:
        raise ValueError("empty series has no peak")
    return int(np.argmax(ema))


@dataclass
class PhaseSegmentation:
    peak_index: int
    macro_exploration: tuple
    macro_exploitation: tuple
    micro_cycles: list
    persistence: float

    def to_dict(self):
        d = asdict(self)
        d["micro_cycles"] = [list(c) for c in self.micro_cycles]
        return d


def _alternating_extrema(x, persistence):
    """Confirmed turning points as ``(index, +1 max / -1 min)``.

    A running extremum is confirmed once the series has moved at least
    ``persistence`` away from it in the opposite direction.
    """
    out = []
    if len(x) < 2:
        return out
    hi = lo = 0
    direction = 0
    for i in range(1, len(x)):
        v = x[i]
        if direction == 0:
            if v > x[hi]:
                hi = i
            if v < x[lo]:
                lo = i
            if x[hi] - v >= persistence and hi < i:
                out.append((hi, 1))
                direction, lo = -1, i
            elif v - x[lo] >= persistence and lo < i:
                out.append((lo, -1))
                direction, hi = 1, i
        elif direction == 1:
            if v > x[hi]:
                hi = i
            elif x[hi] - v >= persistence:
                out.append((hi, 1))
                direction, lo = -1, i
        else:
            if v < x[lo]:
                lo = i
            elif v - x[lo] >= persistence:
                out.append((lo, -1))
                direction, hi = 1, i
    return out


def segment_phases(trace, persistence=0.01):
    """Split a run at its EMA peak and list (local-min, local-max) micro-cycles.

    Turning points at index 0 are endpoints, not local extrema, and are ignored.
    """
    ema = _ema_of(trace)
    if ema.size == 0:
        raise ValueError("cannot segment an empty trace")
    peak = peak_index(ema)
    extrema = [e for e in _alternating_extrema(ema, persistence) if e[0] > 0]
    cycles = [
        (lo_idx, hi_idx)
        for (lo_idx, lo_kind), (hi_idx, hi_kind) in zip(extrema, extrema[1:])
        if lo_kind == -1 and hi_kind == 1
    ]
    n = ema.size
    return PhaseSegmentation(
        peak_index=peak,
        macro_exploration=(0, peak),
        macro_exploitation=(peak + 1, n - 1) if peak + 1 < n else (),
        micro_cycles=cycles,
        persistence=float(persistence),
    )


@dataclass
class RunSummary:
    final_entropy: float
    peak_value: float
    peak_index: int
    total_tokens: int
    optimizer_steps: int
    skipped_steps: int
    alpha_plus_before_peak: int
    alpha_minus_before_peak: int
    mean_loss: float

    def to_dict(self):
        return asdict(self)


def summarize(trace):
    if not trace.records:
        raise ValueError("cannot summarize an empty trace")
    ema = _ema_of(trace)
    peak = peak_index(ema)
    before = [r.alpha for r in trace.records[:peak]]
    losses = [r.loss for r in trace.records if r.optimized]
    return RunSummary(
        final_entropy=float(ema[-1]),
        peak_value=float(ema[peak]),
        peak_index=peak,
        total_tokens=len(trace.records),
        optimizer_steps=sum(1 for r in trace.records if r.optimized),
        skipped_steps=sum(1 for r in trace.records if r.skipped),
        alpha_plus_before_peak=sum(1 for a in before if a == 1),
        alpha_minus_before_peak=sum(1 for a in before if a == -1),
        mean_loss=float(np.mean(losses)) if losses else None,
    )


def mra(prediction, ground_truth):
    """Fraction of the ten relative-error bands the prediction falls strictly below."""
    if not ground_truth > 0:
        raise ValueError(f"ground truth must be positive, got {ground_truth!r}")
    rel = abs(prediction - ground_truth) / ground_truth
    return sum(1 for tol in MRA_THRESHOLDS if rel < tol) / len(MRA_THRESHOLDS)


def compare(trace_a, trace_b):
    """Differences b - a in peak index, final EMA entropy and token count."""
    sa, sb = summarize(trace_a), summarize(trace_b)
    return {
        "delta_peak": sb.peak_index - sa.peak_index,
        "delta_final_entropy": sb.final_entropy - sa.final_entropy,
        "delta_tokens": sb.total_tokens - sa.total_tokens,
        "peak_a": sa.peak_index,
        "peak_b": sb.peak_index,
    }
