"""Toy decoder-only transformer with rotary embeddings and pruning hooks.

The model consumes pre-embedded vectors: a row-major grid of visual tokens
followed by text tokens.  Every layer is pre-norm (RMS with learned scale),
causal multi-head attention with RoPE, then a two-matrix SiLU feed-forward.
All arithmetic is float64 numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, InputError

RMS_EPS = 1e-6
HEAD_AGGREGATIONS = ("mean", "sum", "max")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} is not divisible by num_heads={self.num_heads}"
            )
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary pairing")
        if not (isinstance(self.rope_base, (int, float)) and self.rope_base > 0):
            raise ConfigError(f"rope_base must be positive, got {self.rope_base!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_layers": int(self.num_layers),
            "hidden_dim": int(self.hidden_dim),
            "num_heads": int(self.num_heads),
            "ffn_dim": int(self.ffn_dim),
            "rope_base": float(self.rope_base),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        unknown = set(data) - {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "rope_base"}
        if unknown:
            raise ConfigError(f"unknown model key(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.wq, self.wk, self.wv, self.wo, self.w_up, self.w_down,
                self.attn_norm, self.ffn_norm)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: ModelConfig
    seed: int
    layers: tuple[LayerWeights, ...]

    def tobytes(self) -> bytes:
        return b"".join(a.tobytes() for layer in self.layers for a in layer.arrays())


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Draw weights from N(0, 0.02/sqrt(T)) using a Philox stream keyed by ``seed``.

    Matrices are drawn layer by layer in the fixed order q, k, v, o, up, down;
    normalization scales start at one.  The result is read-only.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("config must be a ModelConfig")
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    d, m = config.hidden_dim, config.ffn_dim
    std = 0.02 / math.sqrt(config.num_layers)

    def draw(*shape):
        a = rng.normal(0.0, std, size=shape)
        a.flags.writeable = False
        return a

    def ones():
        a = np.ones(d)
        a.flags.writeable = False
        return a

    layers = []
    for _ in range(config.num_layers):
        wq, wk, wv, wo = draw(d, d), draw(d, d), draw(d, d), draw(d, d)
        w_up, w_down = draw(d, m), draw(m, d)
        layers.append(LayerWeights(wq, wk, wv, wo, w_up, w_down, ones(), ones()))
    return ModelWeights(config=config, seed=int(seed), layers=tuple(layers))


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Visual grid (row-major, row 0 at the top) followed by text tokens."""

    grid_h: int
    grid_w: int
    visual_embeddings: np.ndarray
    text_embeddings: np.ndarray
    position_ids: np.ndarray = None

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise InputError("grid dimensions must be positive")
        vis = np.asarray(self.visual_embeddings, dtype=np.float64)
        txt = np.asarray(self.text_embeddings, dtype=np.float64)
        if vis.ndim != 2 or vis.shape[0] != self.grid_h * self.grid_w:
            raise InputError(
                f"expected {self.grid_h * self.grid_w} visual vectors, got shape {vis.shape}"
            )
        if txt.ndim != 2 or txt.shape[0] < 1 or txt.shape[1] != vis.shape[1]:
            raise InputError(f"text embeddings must be (t>=1, {vis.shape[1]}), got {txt.shape}")
        if self.position_ids is None:
            pos = np.arange(vis.shape[0] + txt.shape[0], dtype=np.int64)
        else:
            pos = np.asarray(self.position_ids, dtype=np.int64)
            if pos.shape != (vis.shape[0] + txt.shape[0],):
                raise InputError("one position id per token is required")
            if pos.min() < 0 or np.any(np.diff(pos) <= 0):
                raise InputError("position ids must be non-negative and strictly increasing")
        for a in (vis, txt, pos):
            a.flags.writeable = False
        object.__setattr__(self, "visual_embeddings", vis)
        object.__setattr__(self, "text_embeddings", txt)
        object.__setattr__(self, "position_ids", pos)

    @property
    def n_visual(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_text(self) -> int:
        return self.text_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.visual_embeddings.shape[1]

    def __len__(self) -> int:
        return self.n_visual + self.n_text

    @property
    def embeddings(self) -> np.ndarray:
        return np.concatenate([self.visual_embeddings, self.text_embeddings])


# ---------------------------------------------------------------- primitives


class MacCounter:
    """Counts scalar multiply-accumulates of the matrix products it performs."""

    def __init__(self):
        self.total = 0

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = a @ b
        # batch * M * K * N, taken from the operand shapes
        self.total += int(np.prod(out.shape)) * a.shape[-1]
        return out


class _NoCount:
    @staticmethod
    def matmul(a, b):
        return a @ b


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) * scale


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rope_frequencies(head_dim: int, rope_base: float = 10000.0) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError(f"head_dim={head_dim} must be even for rotary pairing")
    return rope_base ** (-2.0 * np.arange(head_dim // 2) / head_dim)


def apply_rope(vectors: np.ndarray, position_ids, rope_base: float = 10000.0) -> np.ndarray:
    """Rotate interleaved pairs ``(2j, 2j+1)`` by ``position * rope_base**(-2j/head_dim)``.

    ``vectors`` has shape ``(..., N, head_dim)`` and ``position_ids`` shape ``(N,)``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    pos = np.asarray(position_ids)
    if np.any(pos < 0):
        raise InputError("position ids must be non-negative")
    theta = rope_frequencies(x.shape[-1], rope_base)
    angles = pos.astype(np.float64)[:, None] * theta[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def run_layer(layer: LayerWeights, config: ModelConfig, x: np.ndarray, position_ids: np.ndarray,
              mac=_NoCount, return_probs: bool = False):
    """One pre-norm decoder layer over the given (already pruned) tokens."""
    n = x.shape[0]
    hd = config.head_dim
    h = rms_norm(x, layer.attn_norm)
    q = _split_heads(mac.matmul(h, layer.wq), config.num_heads)
    k = _split_heads(mac.matmul(h, layer.wk), config.num_heads)
    v = _split_heads(mac.matmul(h, layer.wv), config.num_heads)
    q = apply_rope(q, position_ids, config.rope_base)
    k = apply_rope(k, position_ids, config.rope_base)
    logits = mac.matmul(q, k.transpose(0, 2, 1)) / math.sqrt(hd)
    logits = np.where(np.tril(np.ones((n, n), dtype=bool)), logits, -np.inf)
    probs = _softmax(logits)
    ctx = mac.matmul(probs, v).transpose(1, 0, 2).reshape(n, config.hidden_dim)
    x = x + mac.matmul(ctx, layer.wo)
    h = rms_norm(x, layer.ffn_norm)
    x = x + mac.matmul(silu(mac.matmul(h, layer.w_up)), layer.w_down)
    if return_probs:
        return x, probs
    return x


def _check_layer(weights: ModelWeights, layer_index: int):
    if not 0 <= layer_index < weights.config.num_layers:
        raise ConfigError(
            f"layer index {layer_index} out of range for {weights.config.num_layers} layers"
        )


def attention_row(weights: ModelWeights, layer_inputs: np.ndarray, layer_index: int,
                  position_ids, use_rope: bool = True, pre_softmax: bool = False,
                  mac=_NoCount) -> np.ndarray:
    """Per-head attention row of the last token, shape ``(num_heads, N)``.

    The last token sits at the end of the causal order, so its row covers every
    token in ``layer_inputs``.  With ``use_rope=False`` queries and keys are left
    unrotated; this affects only the returned row, never the model itself.
    """
    _check_layer(weights, layer_index)
    cfg = weights.config
    layer = weights.layers[layer_index]
    x = np.asarray(layer_inputs, dtype=np.float64)
    h = rms_norm(x, layer.attn_norm)
    q = _split_heads(mac.matmul(h[-1:], layer.wq), cfg.num_heads)
    k = _split_heads(mac.matmul(h, layer.wk), cfg.num_heads)
    if use_rope:
        pos = np.asarray(position_ids)
        q = apply_rope(q, pos[-1:], cfg.rope_base)
        k = apply_rope(k, pos, cfg.rope_base)
    logits = mac.matmul(q, k.transpose(0, 2, 1))[:, 0, :] / math.sqrt(cfg.head_dim)
    return logits if pre_softmax else _softmax(logits)


def aggregate_heads(rows: np.ndarray, how: str = "mean") -> np.ndarray:
    if how == "mean":
        return rows.mean(axis=0)
    if how == "sum":
        return rows.sum(axis=0)
    if how == "max":
        return rows.max(axis=0)
    raise ConfigError(f"unknown head aggregation {how!r}; expected one of {HEAD_AGGREGATIONS}")


def last_token_attention(weights: ModelWeights, layer_inputs: np.ndarray, layer_index: int,
                         use_rope: bool, position_ids, num_visual: int,
                         aggregation: str = "mean", pre_softmax: bool = False,
                         mac=_NoCount) -> np.ndarray:
    """Attention paid by the last token to each alive visual token.

    The first ``num_visual`` rows of ``layer_inputs`` must be the alive visual
    tokens.  Scores come from the full causal softmax row and are not
    renormalized after dropping the text columns.
    """
    rows = attention_row(weights, layer_inputs, layer_index, position_ids,
                         use_rope=use_rope, pre_softmax=pre_softmax, mac=mac)
    return aggregate_heads(rows[:, :num_visual], aggregation)


# ------------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    retained: list = field(default_factory=list)
    layer_token_ids: list = field(default_factory=list)
    attention_scores: dict = field(default_factory=dict)
    hidden_states: dict = field(default_factory=dict)
    final_hidden: np.ndarray | None = None
    final_token_ids: np.ndarray | None = None
    final_position_ids: np.ndarray | None = None
    macs: int | None = None
    scoring_macs: int | None = None
    layers_run: int = 0

    @property
    def instrumented(self) -> bool:
        return self.macs is not None

    def alive_counts(self) -> list[int]:
        return [len(ids) for ids in self.layer_token_ids]


def forward(weights: ModelWeights, sequence: TokenSequence, schedule=None,
            instrument: bool = False, record_attention: bool = False,
            record_hidden: bool = False, run_to_end: bool = True) -> ForwardTrace:
    """Run the model, pruning visual tokens per ``schedule``.

    A stage at layer K scores the alive visual tokens with layer K's attention
    over the hidden states entering layer K, then layers K..T-1 see only the
    survivors.  Survivors keep their original position ids.  With
    ``run_to_end=False`` the pass stops once the last stage has selected.
    """
    from .criteria import ScoringContext, select
    from .pruning import PruneSchedule, apply_placement

    cfg = weights.config
    if sequence.dim != cfg.hidden_dim:
        raise InputError(f"embedding dim {sequence.dim} != hidden_dim {cfg.hidden_dim}")
    if schedule is None:
        schedule = PruneSchedule()
    for stage in schedule.stages:
        if stage.layer >= cfg.num_layers:
            raise ConfigError(f"stage layer {stage.layer} >= num_layers {cfg.num_layers}")

    counter = MacCounter() if instrument else _NoCount
    scoring = MacCounter() if instrument else _NoCount
    placed = apply_placement(weights, sequence, schedule)
    trace = ForwardTrace(retained=list(placed.retained))

    ids = placed.token_ids
    x = sequence.embeddings[ids]
    n = sequence.n_visual
    stages = list(placed.stages)
    stage_offset = len(placed.retained)
    last_stage_layer = stages[-1].layer if stages else -1
    stop = cfg.num_layers if run_to_end else min(cfg.num_layers, last_stage_layer + 1)

    for li in range(stop):
        for si, stage in enumerate(stages):
            if stage.layer != li:
                continue
            alive_visual = ids[ids < n]
            ctx = ScoringContext(weights=weights, sequence=sequence, hidden=x, token_ids=ids,
                                 layer_index=li, mac=scoring)
            budget = stage.resolve_count(n_original=n, n_alive=len(alive_visual))
            kept = select(stage.criterion, ctx, budget, stage_index=stage_offset + si)
            keep_mask = (ids >= n) | np.isin(ids, kept.indices)
            ids = ids[keep_mask]
            x = x[keep_mask]
            trace.retained.append(kept)
        if li == stop - 1 and not run_to_end:
            trace.layer_token_ids.append(ids.copy())
            break
        pos = sequence.position_ids[ids]
        if record_hidden:
            trace.hidden_states[li] = x.copy()
        trace.layer_token_ids.append(ids.copy())
        out = run_layer(weights.layers[li], cfg, x, pos, mac=counter,
                        return_probs=record_attention)
        if record_attention:
            x, probs = out
            trace.attention_scores[li] = probs[:, -1, :].mean(axis=0)
        else:
            x = out
        trace.layers_run = li + 1

    if run_to_end:
        trace.final_hidden = x[-1].copy()
    trace.final_token_ids = ids
    trace.final_position_ids = sequence.position_ids[ids]
    if instrument:
        trace.macs = counter.total
        trace.scoring_macs = scoring.total
    return trace
