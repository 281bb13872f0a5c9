"""Visual-token ranking criteria and budgeted selection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .errors import BudgetError, ConfigError, InputError
from .model import (HEAD_AGGREGATIONS, ModelWeights, TokenSequence, _NoCount,
                    last_token_attention, run_layer)

ORIGINAL = "original"
ROPE_FREE = "rope_free"
UNIFORM_STRIDE = "uniform_stride"
KNN_DENSITY = "knn_density"
ENSEMBLE = "ensemble"
KINDS = (ORIGINAL, ROPE_FREE, UNIFORM_STRIDE, KNN_DENSITY, ENSEMBLE)
ATTENTION_KINDS = (ORIGINAL, ROPE_FREE, ENSEMBLE)


@dataclass(frozen=True)
class Criterion:
    """A ranking strategy plus its parameters.

    ``stride`` is used by uniform_stride and by the uniform part of ensemble;
    ``k`` and ``bandwidth`` by knn_density; ``aggregation`` and
    ``pre_softmax`` by the attention-based kinds.
    """

    kind: str
    stride: int = 2
    k: int = 5
    aggregation: str = "mean"
    pre_softmax: bool = False
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown criterion kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.stride, int) or self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride!r}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k!r}")
        if self.aggregation not in HEAD_AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {HEAD_AGGREGATIONS}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive when given")

    @classmethod
    def original(cls, **kw) -> "Criterion":
        return cls(ORIGINAL, **kw)

    @classmethod
    def rope_free(cls, **kw) -> "Criterion":
        return cls(ROPE_FREE, **kw)

    @classmethod
    def uniform(cls, stride: int = 2) -> "Criterion":
        return cls(UNIFORM_STRIDE, stride=stride)

    @classmethod
    def knn(cls, k: int = 5, bandwidth: float | None = None) -> "Criterion":
        return cls(KNN_DENSITY, k=k, bandwidth=bandwidth)

    @classmethod
    def ensemble(cls, stride: int = 3, **kw) -> "Criterion":
        return cls(ENSEMBLE, stride=stride, **kw)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Criterion":
        fields = {"kind", "stride", "k", "aggregation", "pre_softmax", "bandwidth"}
        unknown = set(data) - fields
        if unknown:
            raise ConfigError(f"unknown criterion key(s): {', '.join(sorted(unknown))}")
        if "kind" not in data:
            raise ConfigError("criterion requires 'kind'")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class RetainedSet:
    """Sorted original indices of the visual tokens kept by one stage."""

    indices: np.ndarray
    stage_index: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise InputError("retained indices must be one-dimensional")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0
                         or idx[-1] >= self.grid_h * self.grid_w):
            raise InputError("retained indices must be sorted, unique and inside the grid")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetainedSet):
            return NotImplemented
        return (self.grid_h, self.grid_w) == (other.grid_h, other.grid_w) and np.array_equal(
            self.indices, other.indices)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        m.flat[self.indices] = True
        return m


@dataclass(frozen=True, eq=False)
class ScoringContext:
    """What a criterion sees at a pruning point.

    ``hidden`` holds the states entering ``layer_index`` for the alive tokens
    ``token_ids`` (original indices, visual first, ascending).
    """

    weights: ModelWeights
    sequence: TokenSequence
    hidden: np.ndarray
    token_ids: np.ndarray
    layer_index: int
    mac: Any = _NoCount

    @property
    def alive_visual(self) -> np.ndarray:
        return self.token_ids[self.token_ids < self.sequence.n_visual]

    @property
    def position_ids(self) -> np.ndarray:
        return self.sequence.position_ids[self.token_ids]

    @classmethod
    def from_inputs(cls, weights: ModelWeights, sequence: TokenSequence,
                    layer_index: int = 0) -> "ScoringContext":
        """Context at ``layer_index`` with every token alive (no prior pruning)."""
        x = sequence.embeddings
        for li in range(layer_index):
            x = run_layer(weights.layers[li], weights.config, x, sequence.position_ids)
        return cls(weights, sequence, x, np.arange(len(sequence)), layer_index)


def score_attention(ctx: ScoringContext, rope_free: bool, aggregation: str = "mean",
                    pre_softmax: bool = False) -> np.ndarray:
    """Last-token attention over the alive visual tokens, in ``ctx.alive_visual`` order."""
    if not np.any(ctx.token_ids >= ctx.sequence.n_visual):
        raise InputError("attention criteria need at least one alive text token")
    return last_token_attention(
        ctx.weights, ctx.hidden, ctx.layer_index, use_rope=not rope_free,
        position_ids=ctx.position_ids, num_visual=ctx.alive_visual.size,
        aggregation=aggregation, pre_softmax=pre_softmax, mac=ctx.mac)


def uniform_indices(grid_h: int, grid_w: int, stride: int) -> np.ndarray:
    """Row-major indices of cells whose row and column are multiples of ``stride``."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    rows = np.arange(0, grid_h, stride)
    cols = np.arange(0, grid_w, stride)
    return (rows[:, None] * grid_w + cols[None, :]).ravel()


@dataclass(frozen=True, eq=False)
class DensityScore:
    rho: np.ndarray
    delta: np.ndarray

    @property
    def importance(self) -> np.ndarray:
        return self.rho * self.delta


def pairwise_sq_distances(features: np.ndarray) -> np.ndarray:
    z = np.asarray(features, dtype=np.float64)
    out = np.empty((z.shape[0], z.shape[0]))
    for i in range(z.shape[0]):
        diff = z - z[i]
        out[i] = (diff * diff).sum(axis=-1)
    return out


def knn_scores(features, k: int, bandwidth: float | None = None) -> DensityScore:
    """Density-peak importance from k-nearest-neighbour density.

    rho_i = exp(-mean_{j in kNN(i)} ||z_i - z_j||^2 / bandwidth), kNN excluding
    i itself with distance ties going to the lower index.  When ``bandwidth`` is
    None it is the mean of those per-token kNN means, which makes the ranking
    independent of feature scale; if that mean is zero every rho is 1.

    delta_i is the squared distance to the nearest strictly denser token, or to
    the farthest token when none is denser.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InputError("knn_scores needs at least two feature vectors")
    n = z.shape[0]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the token count {n}")
    if not np.all(np.isfinite(z)):
        raise InputError("features must be finite")

    dist = pairwise_sq_distances(z)
    others = np.arange(n)
    knn_mean = np.empty(n)
    for i in range(n):
        row = dist[i].copy()
        row[i] = np.inf
        nearest = np.lexsort((others, row))[:k]
        knn_mean[i] = math.fsum(row[nearest]) / k

    if bandwidth is None:
        bandwidth = math.fsum(knn_mean) / n
    if bandwidth == 0.0:
        rho = np.ones(n)
    else:
        rho = np.array([math.exp(-v / bandwidth) for v in knn_mean])

    delta = np.empty(n)
    for i in range(n):
        denser = rho > rho[i]
        delta[i] = dist[i, denser].min() if denser.any() else dist[i].max()
    return DensityScore(rho=rho, delta=delta)


def top_by_score(ids: np.ndarray, scores: np.ndarray, budget: int) -> np.ndarray:
    """The ``budget`` highest-scoring ids, ties to the lower id, returned sorted."""
    order = np.lexsort((ids, -np.asarray(scores)))
    return np.sort(ids[order[:budget]])


def select(criterion: Criterion, ctx: ScoringContext, budget: int,
           stage_index: int = 0) -> RetainedSet:
    """Keep ``budget`` alive visual tokens ranked by ``criterion``.

    uniform_stride ignores the budget and keeps its lattice; ensemble keeps the
    rope-free top ``budget`` plus the stride lattice, so it may keep more.
    """
    seq = ctx.sequence
    alive = ctx.alive_visual
    if criterion.kind != UNIFORM_STRIDE and not 0 <= budget <= alive.size:
        raise BudgetError(f"budget {budget} exceeds the {alive.size} alive visual tokens")

    def retained(idx):
        return RetainedSet(np.sort(np.asarray(idx, dtype=np.int64)), stage_index,
                           seq.grid_h, seq.grid_w)

    kind = criterion.kind
    if kind == UNIFORM_STRIDE:
        lattice = uniform_indices(seq.grid_h, seq.grid_w, criterion.stride)
        return retained(np.intersect1d(lattice, alive))
    if budget == 0 and kind != ENSEMBLE:
        return retained([])
    if kind == KNN_DENSITY:
        if criterion.k >= alive.size:
            raise ConfigError(f"k={criterion.k} must be smaller than the {alive.size} alive tokens")
        scores = knn_scores(seq.visual_embeddings[alive], criterion.k,
                            criterion.bandwidth).importance
        return retained(top_by_score(alive, scores, budget))

    scores = score_attention(ctx, rope_free=kind != ORIGINAL,
                             aggregation=criterion.aggregation,
                             pre_softmax=criterion.pre_softmax)
    top = top_by_score(alive, scores, budget)
    if kind == ENSEMBLE:
        lattice = uniform_indices(seq.grid_h, seq.grid_w, criterion.stride)
        top = np.union1d(top, np.intersect1d(lattice, alive))
    return retained(top)
