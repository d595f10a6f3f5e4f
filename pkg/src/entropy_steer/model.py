"""Toy causal decoder with grouped KV heads, an explicit KV cache and a weights file format.

Pre-norm blocks (RMS norm), grouped-query attention, a GELU feed-forward and
learned absolute position embeddings. Everything runs in float64 on a single
sequence. The last layer's attention can read its video-slot values through
the value-cache controller; every other layer is frozen.
"""
import hashlib
import json
import numbers
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property

import numpy as np

from ._validation import check_scalar_param, check_video_span
from .controller import apply_controller
from .errors import CacheFullError, ConfigError, WeightsFormatError
from .nn import gelu, rms_norm, row_norms, softmax

__all__ = [
    "ModelConfig",
    "Weights",
    "PromptSpec",
    "KVCache",
    "SavedActivations",
    "init_random",
    "save_weights",
    "load_weights",
    "encode",
    "prefill",
    "decode_step",
    "last_layer_forward",
]

WEIGHTS_FORMAT = "entropy_steer.weights/1"
LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 17
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 4
    d_ff: int = 32
    max_seq: int = 256
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "seed":
                continue
            check_scalar_param(getattr(self, f.name), f.name, numbers.Integral, min_val=1)
        check_scalar_param(self.seed, "seed", numbers.Integral, min_val=0, max_val=2**64 - 1)
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_kv_heads > self.n_heads or self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_kv_heads={self.n_kv_heads} must divide n_heads={self.n_heads}"
            )
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads*d_head={self.n_heads * self.d_head} must equal d_model={self.d_model}"
            )

    @property
    def group_size(self):
        return self.n_heads // self.n_kv_heads

    def tensor_shapes(self):
        """Ordered manifest of ``(name, shape)``."""
        d, H, Hkv, dh = self.d_model, self.n_heads, self.n_kv_heads, self.d_head
        shapes = [("tok_emb", (self.vocab_size, d)), ("pos_emb", (self.max_seq, d))]
        per_layer = {
            "attn_norm": (d,),
            "wq": (d, H * dh),
            "wk": (d, Hkv * dh),
            "wv": (d, Hkv * dh),
            "wo": (H * dh, d),
            "ffn_norm": (d,),
            "w1": (d, self.d_ff),
            "b1": (self.d_ff,),
            "w2": (self.d_ff, d),
            "b2": (d,),
        }
        for layer in range(self.n_layers):
            shapes.extend((f"layers.{layer}.{name}", per_layer[name]) for name in LAYER_TENSORS)
        shapes.append(("final_norm", (d,)))
        shapes.append(("lm_head", (d, self.vocab_size)))
        return shapes

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Weights:
    config: ModelConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def layer(self, index):
        prefix = f"layers.{index}."
        return {name: self.tensors[prefix + name] for name in LAYER_TENSORS}

    def to_bytes(self):
        header = {
            "format": WEIGHTS_FORMAT,
            "config": self.config.to_dict(),
            "tensors": [{"name": n, "shape": list(s)} for n, s in self.config.tensor_shapes()],
        }
        parts = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
        for name, _ in self.config.tensor_shapes():
            parts.append(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return b"".join(parts)

    @cached_property
    def _digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def digest(self):
        return self._digest

    def equals(self, other):
        return self.config == other.config and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n, _ in self.config.tensor_shapes()
        )


def init_random(config):
    """Seeded scaled-normal init: std 1/sqrt(d_model) for matrices, ones for norm gains, zeros for biases."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    std = 1.0 / np.sqrt(config.d_model)
    tensors = {}
    for name, shape in config.tensor_shapes():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            tensors[name] = np.ones(shape)
        elif leaf in ("b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.standard_normal(shape) * std
    return Weights(config=config, tensors=tensors)


def save_weights(weights, path):
    with open(path, "wb") as fh:
        fh.write(weights.to_bytes())


def weights_from_bytes(raw):
    line, sep, payload = raw.partition(b"\n")
    if not sep:
        raise WeightsFormatError("missing header line", field="header")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"malformed header: {exc}", field="header") from exc
    if not isinstance(header, dict) or header.get("format") != WEIGHTS_FORMAT:
        raise WeightsFormatError("unrecognized format tag", field="format")
    cfg_fields = header.get("config")
    if not isinstance(cfg_fields, dict):
        raise WeightsFormatError("header has no config object", field="config")
    expected = {f.name for f in fields(ModelConfig)}
    missing = expected - cfg_fields.keys()
    if missing:
        raise WeightsFormatError(f"config is missing {sorted(missing)}", field=sorted(missing)[0])
    for key in sorted(expected):
        if not isinstance(cfg_fields[key], int) or isinstance(cfg_fields[key], bool):
            raise WeightsFormatError(f"config field {key} must be an integer", field=key)
    try:
        config = ModelConfig(**{k: cfg_fields[k] for k in expected})
    except ConfigError as exc:
        bad = next((k for k in sorted(expected) if k in str(exc)), None)
        raise WeightsFormatError(f"invariant violation: {exc}", field=bad) from exc

    manifest = header.get("tensors")
    expected_manifest = config.tensor_shapes()
    if not isinstance(manifest, list) or len(manifest) != len(expected_manifest):
        raise WeightsFormatError("tensor manifest does not match config", field="tensors")
    tensors = {}
    offset = 0
    for entry, (name, shape) in zip(manifest, expected_manifest):
        if entry.get("name") != name or tuple(entry.get("shape", ())) != shape:
            raise WeightsFormatError(
                f"manifest entry {entry!r} inconsistent with config (expected {name} {shape})",
                field=name,
            )
        nbytes = int(np.prod(shape)) * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise WeightsFormatError(
                f"tensor {name}: expected {nbytes} bytes, found {len(chunk)}", field=name
            )
        tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise WeightsFormatError(f"{len(payload) - offset} trailing bytes after last tensor", field="payload")
    return Weights(config=config, tensors=tensors)


def load_weights(path):
    with open(path, "rb") as fh:
        weights = weights_from_bytes(fh.read())
    return weights.config, weights


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple
    video_span: tuple

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        if not tokens:
            raise ConfigError("prompt is empty")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "video_span", check_video_span(tuple(self.video_span), len(tokens)))

    def __len__(self):
        return len(self.tokens)


@dataclass
class KVCache:
    """Per-layer keys/values, each ``[n_kv_heads, cached_len, d_head]``.

    ``positions`` maps cache slots to absolute positions. ``attend_mask`` lets
    tests hide slots from every layer's attention without evicting them.
    ``original_value_norms[h, i]`` is the prefill-time norm of the last
    layer's value at ``video_slots[i]``. ``tokens`` holds the id fed at each
    slot so the cache can be re-encoded over a subset of its slots.
    """

    keys: list
    values: list
    positions: np.ndarray
    video_span: tuple
    video_slots: np.ndarray
    original_value_norms: np.ndarray
    attend_mask: np.ndarray = None
    pruned: bool = False
    tokens: np.ndarray = None
    # evicting the trailing prompt slot must not hand its position out again
    next_pos: int = None

    def __post_init__(self):
        if self.attend_mask is None:
            self.attend_mask = np.ones(len(self.positions), dtype=bool)
        if self.next_pos is None:
            self.next_pos = int(self.positions[-1]) + 1

    @property
    def cached_len(self):
        return len(self.positions)

    @property
    def next_position(self):
        return self.next_pos

    @property
    def n_video(self):
        return len(self.video_slots)

    def video_positions(self):
        return self.positions[self.video_slots]

    def copy(self):
        return KVCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            positions=self.positions.copy(),
            video_span=self.video_span,
            video_slots=self.video_slots.copy(),
            original_value_norms=self.original_value_norms.copy(),
            attend_mask=self.attend_mask.copy(),
            pruned=self.pruned,
            tokens=None if self.tokens is None else self.tokens.copy(),
            next_pos=self.next_pos,
        )


@dataclass
class SavedActivations:
    """Everything needed to re-run or differentiate the last layer for one query."""

    weights: Weights = field(repr=False)
    step: int
    x: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    attend_mask: np.ndarray
    video_slots: np.ndarray
    original_norms: np.ndarray
    delta: np.ndarray
    attn: np.ndarray
    video_values: np.ndarray
    transformed: np.ndarray
    degenerate: np.ndarray
    h1: np.ndarray
    u1: np.ndarray
    h2: np.ndarray
    logits: np.ndarray


def _split_heads(x, n, d_head):
    # [..., T, n*d_head] -> [n, T, d_head]
    return x.reshape(x.shape[0], n, d_head).transpose(1, 0, 2)


def _attend(q, keys, values, mask, cfg):
    """Single-query GQA attention. ``q`` is ``[H, dh]``; returns ``(out [H, dh], weights [H, S])``."""
    kh = np.repeat(keys, cfg.group_size, axis=0)
    vh = np.repeat(values, cfg.group_size, axis=0)
    scores = np.einsum("hd,hsd->hs", q, kh) / np.sqrt(cfg.d_head)
    scores = np.where(mask[None, :], scores, -np.inf)
    a = softmax(scores, axis=-1)
    return np.einsum("hs,hsd->hd", a, vh), a


def _ffn(h, lp):
    u1 = rms_norm(h, lp["ffn_norm"]) @ lp["w1"] + lp["b1"]
    return gelu(u1) @ lp["w2"] + lp["b2"], u1


def _qkv(x, lp, cfg):
    n1 = rms_norm(x, lp["attn_norm"])
    q = n1 @ lp["wq"]
    k = n1 @ lp["wk"]
    v = n1 @ lp["wv"]
    return n1, q, k, v


def last_layer_forward(weights, x, keys, values, attend_mask, video_slots, delta=None, original_norms=None, step=-1):
    """Last block plus head for one query whose own key/value is already in ``keys``/``values``.

    With ``delta`` given, video-slot values are read through the controller.
    The stored ``values`` are never modified.
    """
    cfg = weights.config
    lp = weights.layer(cfg.n_layers - 1)
    _, q, _, _ = _qkv(x, lp, cfg)
    q = q.reshape(cfg.n_heads, cfg.d_head)
    video_values = values[:, video_slots, :]
    if delta is not None:
        transformed, degenerate = apply_controller(video_values, delta, original_norms)
        read = values.copy()
        read[:, video_slots, :] = transformed
    else:
        transformed = video_values
        degenerate = np.zeros(video_values.shape[:-1], dtype=bool)
        read = values
    heads, attn = _attend(q, keys, read, attend_mask, cfg)
    h1 = x + heads.reshape(-1) @ lp["wo"]
    f, u1 = _ffn(h1, lp)
    h2 = h1 + f
    logits = rms_norm(h2, weights["final_norm"]) @ weights["lm_head"]
    saved = SavedActivations(
        weights=weights,
        step=step,
        x=x,
        keys=keys,
        values=values,
        attend_mask=attend_mask,
        video_slots=video_slots,
        original_norms=original_norms,
        delta=None if delta is None else np.array(delta, dtype=np.float64),
        attn=attn,
        video_values=video_values,
        transformed=transformed,
        degenerate=degenerate,
        h1=h1,
        u1=u1,
        h2=h2,
        logits=logits,
    )
    return logits, saved


def _check_token(token, cfg):
    if not (0 <= int(token) < cfg.vocab_size):
        raise ConfigError(f"token id {token} outside vocabulary of size {cfg.vocab_size}")


def encode(weights, tokens, positions):
    """Causal forward over ``tokens`` placed at absolute ``positions``.

    Returns per-layer keys and values plus the residual stream entering the
    last layer at the final position. Positions need not be contiguous, which
    is what re-encoding a pruned cache relies on.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    P = tokens.size
    h = weights["tok_emb"][tokens] + weights["pos_emb"][positions]
    causal = np.tril(np.ones((P, P), dtype=bool))
    keys, values = [], []
    for layer in range(cfg.n_layers):
        lp = weights.layer(layer)
        _, q, k, v = _qkv(h, lp, cfg)
        K = _split_heads(k, cfg.n_kv_heads, cfg.d_head)
        V = _split_heads(v, cfg.n_kv_heads, cfg.d_head)
        keys.append(K)
        values.append(V)
        if layer == cfg.n_layers - 1:
            break
        Q = _split_heads(q, cfg.n_heads, cfg.d_head)
        Kh = np.repeat(K, cfg.group_size, axis=0)
        Vh = np.repeat(V, cfg.group_size, axis=0)
        scores = np.einsum("hqd,hkd->hqk", Q, Kh) / np.sqrt(cfg.d_head)
        scores = np.where(causal[None], scores, -np.inf)
        out = np.einsum("hqk,hkd->hqd", softmax(scores, axis=-1), Vh)
        h = h + out.transpose(1, 0, 2).reshape(P, -1) @ lp["wo"]
        h = h + _ffn(h, lp)[0]
    return keys, values, h[-1]


def prefill(weights, prompt):
    """Run the whole prompt, populate the cache and return next-token logits.

    No controller is involved here. The returned activations describe the
    last prompt position at the last layer.
    """
    cfg = weights.config
    if not isinstance(prompt, PromptSpec):
        raise ConfigError("prompt must be a PromptSpec")
    P = len(prompt)
    if P > cfg.max_seq:
        raise CacheFullError(f"prompt length {P} exceeds max_seq {cfg.max_seq}")
    for t in prompt.tokens:
        _check_token(t, cfg)
    tokens = np.asarray(prompt.tokens, dtype=np.int64)
    positions = np.arange(P, dtype=np.int64)
    keys, values, x = encode(weights, tokens, positions)

    start, end = prompt.video_span
    video_slots = np.arange(start, end, dtype=np.int64)
    cache = KVCache(
        keys=keys,
        values=values,
        positions=positions,
        video_span=(start, end),
        video_slots=video_slots,
        original_value_norms=row_norms(values[-1][:, video_slots, :]),
        tokens=tokens,
    )
    logits, saved = last_layer_forward(
        weights, x, keys[-1], values[-1], cache.attend_mask, video_slots, step=P - 1
    )
    return logits, cache, saved


def decode_step(weights, token, cache, controller=None):
    """Feed one token; returns ``(logits, new_cache, saved)``. The input cache is left untouched."""
    cfg = weights.config
    _check_token(token, cfg)
    pos = cache.next_position
    if pos >= cfg.max_seq or cache.cached_len >= cfg.max_seq:
        raise CacheFullError(f"cache full: next position {pos} >= max_seq {cfg.max_seq}")
    delta = None
    if controller is not None:
        delta = controller.delta if hasattr(controller, "delta") else np.asarray(controller)
        expected = (cfg.n_kv_heads, cache.n_video, cfg.d_head)
        if delta.shape != expected:
            raise ConfigError(f"controller shape {delta.shape} does not match cache {expected}")

    mask = np.append(cache.attend_mask, True)
    x = weights["tok_emb"][int(token)] + weights["pos_emb"][pos]
    new_keys, new_values = [], []
    saved = None
    logits = None
    for layer in range(cfg.n_layers):
        lp = weights.layer(layer)
        _, q, k, v = _qkv(x, lp, cfg)
        K = np.concatenate([cache.keys[layer], k.reshape(cfg.n_kv_heads, 1, cfg.d_head)], axis=1)
        V = np.concatenate([cache.values[layer], v.reshape(cfg.n_kv_heads, 1, cfg.d_head)], axis=1)
        new_keys.append(K)
        new_values.append(V)
        if layer == cfg.n_layers - 1:
            logits, saved = last_layer_forward(
                weights, x, K, V, mask, cache.video_slots, delta, cache.original_value_norms, step=pos
            )
            break
        heads, _ = _attend(q.reshape(cfg.n_heads, cfg.d_head), K, V, mask, cfg)
        x = x + heads.reshape(-1) @ lp["wo"]
        x = x + _ffn(x, lp)[0]

    new_cache = KVCache(
        keys=new_keys,
        values=new_values,
        positions=np.append(cache.positions, pos),
        video_span=cache.video_span,
        video_slots=cache.video_slots,
        original_value_norms=cache.original_value_norms,
        attend_mask=mask,
        pruned=cache.pruned,
        tokens=None if cache.tokens is None else np.append(cache.tokens, int(token)),
        next_pos=pos + 1,
    )
    return logits, new_cache, saved
