"""Analytic per-layer cost model and schedule-aware reduction ratio.

Per layer with n tokens: C(n) = 4*n*d^2 + 2*n^2*d + 2*n*d*m, i.e. the QKVO
projections, the score and value products over the full square, and a
two-matrix feed-forward.  Counted in multiply-accumulates, which is also what
the instrumented forward pass counts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

from .criteria import ENSEMBLE, UNIFORM_STRIDE, uniform_indices
from .errors import ConfigError, StateError

# Llama-2-7B language model on a 27x27 visual grid
REFERENCE = {"num_layers": 32, "hidden_dim": 4096, "ffn_dim": 11008, "grid_h": 27, "grid_w": 27}


def layer_cost(n_tokens: int, d: int, m: int) -> int:
    n, d, m = int(n_tokens), int(d), int(m)
    if min(n, d, m) < 0:
        raise ValueError("layer_cost inputs must be non-negative")
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def reduction_ratio(num_layers: int, d: int, m: int, n: int,
                    layer_tokens: Sequence[int]) -> float:
    """1 - sum_l C(n_l) / (T * C(n)), with ``layer_tokens[l]`` the tokens alive in layer l."""
    if len(layer_tokens) != num_layers:
        raise ConfigError(f"expected {num_layers} per-layer counts, got {len(layer_tokens)}")
    base = num_layers * layer_cost(n, d, m)
    if base == 0:
        return 0.0
    return 1.0 - sum(layer_cost(c, d, m) for c in layer_tokens) / base


def layer_token_counts(num_layers: int, n: int, stage_counts: Sequence[tuple[int, int]],
                       extra: int = 0) -> list[int]:
    """Expand ``[(layer, kept), ...]`` into one count per layer, plus ``extra`` everywhere."""
    counts, alive = [], n
    pending = sorted(stage_counts)
    for li in range(num_layers):
        while pending and pending[0][0] == li:
            alive = pending.pop(0)[1]
        counts.append(alive + extra)
    return counts


def expected_union(budget: int, grid_h: int, grid_w: int, stride: int) -> int:
    """Expected size of top-``budget`` united with the stride lattice, for position-blind scores."""
    n = grid_h * grid_w
    lattice = len(uniform_indices(grid_h, grid_w, stride))
    return round(budget + lattice - budget * lattice / n)


def resolve_stage_counts(schedule, grid_h: int, grid_w: int,
                         realized: Sequence[int] | None = None) -> list[tuple[int, int]]:
    """Kept visual tokens per stage as ``(layer, count)``.

    Ensemble unions use ``realized`` sizes when given, else the expected size;
    uniform stride keeps its lattice.
    """
    n = grid_h * grid_w
    out, alive = [], n
    if schedule.placement == "text_only":
        return [(0, 0)]
    for i, stage in enumerate(schedule.stages):
        layer = 0 if schedule.placement == "pre_llm" else stage.layer
        if realized is not None:
            kept = int(realized[i])
        elif stage.criterion.kind == UNIFORM_STRIDE:
            kept = len(uniform_indices(grid_h, grid_w, stage.criterion.stride))
        else:
            kept = stage.resolve_count(n, alive)
            if stage.criterion.kind == ENSEMBLE:
                kept = expected_union(kept, grid_h, grid_w, stage.criterion.stride)
        out.append((layer, kept))
        alive = kept
    return out


@dataclass
class FlopsReport:
    num_layers: int
    hidden_dim: int
    ffn_dim: int
    n_tokens: int
    layer_tokens: list[int]
    layer_costs: list[int] = field(init=False)
    baseline_total: int = field(init=False)
    pruned_total: int = field(init=False)
    reduction: float = field(init=False)

    def __post_init__(self):
        d, m = self.hidden_dim, self.ffn_dim
        self.layer_costs = [layer_cost(c, d, m) for c in self.layer_tokens]
        self.baseline_total = self.num_layers * layer_cost(self.n_tokens, d, m)
        self.pruned_total = sum(self.layer_costs)
        self.reduction = reduction_ratio(self.num_layers, d, m, self.n_tokens, self.layer_tokens)

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "n_tokens": self.n_tokens,
            "layer_tokens": list(self.layer_tokens),
            "baseline_total": self.baseline_total,
            "pruned_total": self.pruned_total,
            "reduction": self.reduction,
        }

    def table(self) -> str:
        lines = [f"{'layer':>5} {'tokens':>7} {'cost':>20}"]
        for i, (c, cost) in enumerate(zip(self.layer_tokens, self.layer_costs)):
            lines.append(f"{i:>5} {c:>7} {cost:>20,}")
        lines.append(f"baseline {self.baseline_total:,}")
        lines.append(f"pruned   {self.pruned_total:,}")
        lines.append(f"reduction {self.reduction:.4f}")
        return "\n".join(lines)


def schedule_report(schedule, num_layers: int = REFERENCE["num_layers"],
                    hidden_dim: int = REFERENCE["hidden_dim"],
                    ffn_dim: int = REFERENCE["ffn_dim"], grid_h: int = REFERENCE["grid_h"],
                    grid_w: int = REFERENCE["grid_w"], realized=None,
                    text_tokens: int = 0) -> FlopsReport:
    """FlopsReport for a schedule; visual tokens only unless ``text_tokens`` is set."""
    n = grid_h * grid_w
    stages = resolve_stage_counts(schedule, grid_h, grid_w, realized)
    counts = layer_token_counts(num_layers, n, stages, extra=text_tokens)
    return FlopsReport(num_layers, hidden_dim, ffn_dim, n + text_tokens, counts)


def measured_multiply_accumulates(trace) -> int:
    """Multiply-accumulates counted during an instrumented forward pass.

    Criterion scoring work is tracked separately in ``trace.scoring_macs`` and is
    not included, matching the analytic model.
    """
    if getattr(trace, "macs", None) is None:
        raise StateError("trace was produced without instrumentation")
    return trace.macs


def analytic_forward_macs(config, layer_tokens: Sequence[int]) -> int:
    return sum(layer_cost(c, config.hidden_dim, config.ffn_dim) for c in layer_tokens)


def measured_reduction(pruned_trace, full_trace) -> float:
    return 1.0 - measured_multiply_accumulates(pruned_trace) / measured_multiply_accumulates(
        full_trace)
