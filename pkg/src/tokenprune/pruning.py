"""Pruning stages, schedules, named presets and placement modes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .criteria import ATTENTION_KINDS, Criterion, RetainedSet, ScoringContext, select
from .errors import BudgetError, ConfigError
from .model import ModelWeights, TokenSequence

IN_LLM = "in_llm"
PRE_LLM = "pre_llm"
TEXT_ONLY = "text_only"
PLACEMENTS = (IN_LLM, PRE_LLM, TEXT_ONLY)
BASES = ("original", "alive")

# guards floor() against representation error, e.g. 0.29 * 100 = 28.999999999999996
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class PruneStage:
    """Prune at ``layer``: layers ``layer``..T-1 see only the survivors.

    Retention is either ``keep`` (a fraction, floored, of the original visual
    count or of the count alive at stage entry, per ``base``) or ``count``.
    """

    layer: int
    criterion: Criterion
    keep: float | None = None
    count: int | None = None
    base: str = "original"

    def __post_init__(self):
        if isinstance(self.layer, bool) or not isinstance(self.layer, int) or self.layer < 0:
            raise ConfigError(f"stage layer must be a non-negative integer, got {self.layer!r}")
        if (self.keep is None) == (self.count is None):
            raise ConfigError("a stage needs exactly one of 'keep' or 'count'")
        if self.keep is not None and not 0.0 < self.keep <= 1.0:
            raise ConfigError(f"keep must be in (0, 1], got {self.keep!r}")
        if self.count is not None and (not isinstance(self.count, int) or self.count < 0):
            raise ConfigError(f"count must be a non-negative integer, got {self.count!r}")
        if self.base not in BASES:
            raise ConfigError(f"base must be one of {BASES}, got {self.base!r}")

    def resolve_count(self, n_original: int, n_alive: int) -> int:
        if self.count is not None:
            budget = self.count
        else:
            reference = n_original if self.base == "original" else n_alive
            budget = math.floor(self.keep * reference + _FLOOR_EPS)
        if budget > n_alive and self.criterion.kind != "uniform_stride":
            raise BudgetError(
                f"stage at layer {self.layer} keeps {budget} tokens but only {n_alive} are alive")
        return budget

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"layer": self.layer, "criterion": self.criterion.to_dict()}
        if self.keep is not None:
            out["keep"] = float(self.keep)
        else:
            out["count"] = int(self.count)
        out["base"] = self.base
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PruneStage":
        unknown = set(data) - {"layer", "criterion", "keep", "count", "base"}
        if unknown:
            raise ConfigError(f"unknown stage key(s): {', '.join(sorted(unknown))}")
        if "layer" not in data or "criterion" not in data:
            raise ConfigError("a stage needs 'layer' and 'criterion'")
        crit = data["criterion"]
        crit = Criterion(crit) if isinstance(crit, str) else Criterion.from_dict(crit)
        return cls(layer=data["layer"], criterion=crit, keep=data.get("keep"),
                   count=data.get("count"), base=data.get("base", "original"))


@dataclass(frozen=True)
class PruneSchedule:
    stages: tuple[PruneStage, ...] = ()
    placement: str = IN_LLM

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        layers = [s.layer for s in self.stages]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"stage layers must be strictly increasing, got {layers}")
        if self.placement == PRE_LLM and len(self.stages) != 1:
            raise ConfigError("pre_llm placement requires exactly one stage")
        if self.placement == TEXT_ONLY and self.stages:
            raise ConfigError("text_only placement takes no stages")

    def to_dict(self) -> dict[str, Any]:
        return {"placement": self.placement, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PruneSchedule":
        unknown = set(data) - {"placement", "stages"}
        if unknown:
            raise ConfigError(f"unknown schedule key(s): {', '.join(sorted(unknown))}")
        stages = tuple(PruneStage.from_dict(s) for s in data.get("stages") or ())
        return cls(stages=stages, placement=data.get("placement", IN_LLM))

    def describe(self) -> str:
        if self.placement == TEXT_ONLY:
            return "text_only"
        if not self.stages:
            return "none"
        parts = []
        for s in self.stages:
            amount = f"keep={s.keep:g}/{s.base}" if s.keep is not None else f"count={s.count}"
            parts.append(f"{s.criterion.kind}@{s.layer}[{amount}]")
        prefix = "pre_llm:" if self.placement == PRE_LLM else ""
        return prefix + " > ".join(parts)


# -------------------------------------------------------------------- presets


def preset_none() -> PruneSchedule:
    return PruneSchedule()


def preset_fastv(layer: int = 3, ratio: float = 0.75) -> PruneSchedule:
    """One early stage ranked by RoPE attention, keeping (1-ratio) of the original tokens."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"ratio must be in [0, 1), got {ratio}")
    return PruneSchedule((PruneStage(layer, Criterion.original(), keep=1.0 - ratio),))


def preset_pyramiddrop(layers=(8, 16, 24), per_stage_keep=(0.5, 0.5, 0.5)) -> PruneSchedule:
    """Several RoPE-attention stages, each keeping a fraction of the tokens still alive."""
    layers, per_stage_keep = tuple(layers), tuple(per_stage_keep)
    if len(layers) != len(per_stage_keep):
        raise ConfigError("pyramiddrop needs one keep fraction per layer")
    return PruneSchedule(tuple(
        PruneStage(k, Criterion.original(), keep=f, base="alive")
        for k, f in zip(layers, per_stage_keep)))


def preset_feather(layer1: int = 8, layer2: int = 16, ratio: float = 0.75, stride: int = 3,
                   stage2_base: str = "original") -> PruneSchedule:
    """Ensemble (rope-free top + stride lattice) early, then rope-free alone later.

    The second stage keeps (1-ratio)**2 of the original visual count, or of the
    first stage's survivors with ``stage2_base="alive"``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"ratio must be in [0, 1), got {ratio}")
    keep = 1.0 - ratio
    return PruneSchedule((
        PruneStage(layer1, Criterion.ensemble(stride=stride), keep=keep),
        PruneStage(layer2, Criterion.rope_free(), keep=keep * keep, base=stage2_base),
    ))


PRESETS = ("none", "fastv", "pyramiddrop", "feather")


def make_preset(name: str, ratio: float | None = None, layers=None,
                **options) -> PruneSchedule:
    """Build a preset by name; ``ratio`` and ``layers`` override its defaults."""
    layers = tuple(layers) if layers else None
    if name == "none":
        return preset_none()
    if name == "fastv":
        if layers is not None and len(layers) != 1:
            raise ConfigError("fastv takes exactly one layer")
        return preset_fastv(layers[0] if layers else 3, 0.75 if ratio is None else ratio)
    if name == "pyramiddrop":
        layers = layers or (8, 16, 24)
        keep = options.get("per_stage_keep")
        if keep is None:
            keep = (0.5 if ratio is None else 1.0 - ratio,) * len(layers)
        return preset_pyramiddrop(layers, keep)
    if name == "feather":
        if layers is not None and len(layers) != 2:
            raise ConfigError("feather takes exactly two layers")
        k1, k2 = layers or (8, 16)
        return preset_feather(k1, k2, 0.75 if ratio is None else ratio,
                              stride=options.get("stride", 3),
                              stage2_base=options.get("stage2_base", "original"))
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


# ------------------------------------------------------------------ placement


@dataclass(frozen=True, eq=False)
class PlacedInput:
    """The tokens that actually enter layer 0, plus the stages left to run."""

    sequence: TokenSequence
    token_ids: np.ndarray
    stages: tuple[PruneStage, ...]
    retained: tuple[RetainedSet, ...] = ()

    @property
    def embeddings(self) -> np.ndarray:
        return self.sequence.embeddings[self.token_ids]

    @property
    def position_ids(self) -> np.ndarray:
        return self.sequence.position_ids[self.token_ids]


def apply_placement(weights: ModelWeights, sequence: TokenSequence,
                    schedule: PruneSchedule) -> PlacedInput:
    """Resolve the placement mode into the token set entering layer 0.

    pre_llm scores with the unpruned model at the stage's layer and then drops
    the losers before layer 0; text_only drops every visual token.
    """
    n = sequence.n_visual
    all_ids = np.arange(len(sequence))
    if schedule.placement == IN_LLM:
        return PlacedInput(sequence, all_ids, schedule.stages)
    if schedule.placement == TEXT_ONLY:
        return PlacedInput(sequence, all_ids[n:], ())

    stage = schedule.stages[0]
    if stage.layer >= weights.config.num_layers:
        raise ConfigError(f"stage layer {stage.layer} >= num_layers {weights.config.num_layers}")
    if stage.criterion.kind in ATTENTION_KINDS:
        ctx = ScoringContext.from_inputs(weights, sequence, stage.layer)
    else:
        ctx = ScoringContext(weights, sequence, sequence.embeddings, all_ids, stage.layer)
    kept = select(stage.criterion, ctx, stage.resolve_count(n, n), stage_index=0)
    ids = np.concatenate([kept.indices, all_ids[n:]])
    return PlacedInput(sequence, ids, (), (kept,))
