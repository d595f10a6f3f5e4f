"""Seeded toy instances and parameter sweeps over them."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
from sklearn.base import clone

from .analysis import summarize
from .errors import ConfigError
from .model import ModelConfig, PromptSpec, init_random

__all__ = ["TOY_CONFIG", "toy_instance", "lr_grid", "sweep", "SWEEP_COLUMNS"]

TOY_CONFIG = ModelConfig(
    vocab_size=17, d_model=16, n_layers=2, n_heads=4, n_kv_heads=2, d_head=4, d_ff=32, max_seq=256, seed=0
)
SWEEP_AXES = {"k": "step_size", "lr": "learning_rate"}
SWEEP_COLUMNS = ("axis", "value", "runs", "failed", "mean_final_entropy", "mean_peak_delay", "mean_tokens")


def toy_instance(seed, config=TOY_CONFIG, prompt_len=12, video_span=(2, 10)):
    """Weights and a random EOS-free prompt, both derived from ``seed``."""
    weights = init_random(replace(config, seed=seed))
    rng = np.random.Generator(np.random.PCG64([seed, 1]))
    tokens = rng.integers(1, config.vocab_size, size=prompt_len)
    return weights, PromptSpec(tokens=tuple(int(t) for t in tokens), video_span=video_span)


def lr_grid(low=5e-5, high=5e-4, n=10):
    return [float(v) for v in np.linspace(low, high, n)]


def _run_cell(estimator, weights, prompt, seed, fixed_instance):
    """Run one (value, seed) cell; returns the paired baseline/steered summaries."""
    if fixed_instance:
        est = clone(estimator).set_params(seed=seed)
    else:
        weights, prompt = toy_instance(seed)
        est = clone(estimator)
    est.fit(weights)
    base = clone(est).set_params(mode="baseline").fit(weights)
    return summarize(base.generate(prompt)[1]), summarize(est.generate(prompt)[1])


def sweep(estimator, axis, values, seeds, weights=None, prompt=None, threads=1):
    """Run ``estimator`` for every value along ``axis`` ("k" or "lr") and every seed.

    With ``weights``/``prompt`` given, seeds vary the sampler; otherwise each
    seed builds its own :func:`toy_instance`. Peak delay is measured against a
    baseline run on the same seed. Cells that raise are counted as failed.
    Rows come back in ``values`` order whatever ``threads`` is.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected 'k' or 'lr'")
    values, seeds = list(values), list(seeds)
    if not values or not seeds:
        raise ConfigError("sweep needs at least one value and one seed")
    fixed = weights is not None
    if fixed and prompt is None:
        raise ConfigError("a prompt is required when weights are given")
    jobs = [(v, s) for v in values for s in seeds]

    def run(job):
        value, seed = job
        est = clone(estimator).set_params(**{SWEEP_AXES[axis]: value})
        try:
            return _run_cell(est, weights, prompt, seed, fixed)
        except Exception as exc:  # noqa: BLE001 - a failed cell is a result
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    rows = []
    for i, value in enumerate(values):
        cell = results[i * len(seeds) : (i + 1) * len(seeds)]
        ok = [r for r in cell if not isinstance(r, Exception)]
        row = {"axis": axis, "value": value, "runs": len(ok), "failed": len(cell) - len(ok)}
        if ok:
            row["mean_final_entropy"] = float(np.mean([s.final_entropy for _, s in ok]))
            row["mean_peak_delay"] = float(np.mean([s.peak_index - b.peak_index for b, s in ok]))
            row["mean_tokens"] = float(np.mean([s.total_tokens for _, s in ok]))
        else:
            row.update(mean_final_entropy=None, mean_peak_delay=None, mean_tokens=None)
        rows.append(row)
    return rows
