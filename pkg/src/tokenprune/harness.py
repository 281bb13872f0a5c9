"""Config-driven experiments over planted scenes: run, compare, write results."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import flops
from .analysis import (Rect, accumulate_heatmap, bottom_bias, make_planted_scene, object_recall,
                       sample_rect, write_heatmap)
from .criteria import RetainedSet
from .errors import ConfigError, InputError
from .model import ModelConfig, forward, init_model
from .pruning import PRESETS, PruneSchedule, make_preset

WORKERS_ENV = "TOKENPRUNE_WORKERS"
DESK_MODEL = {"num_layers": 32, "hidden_dim": 128, "num_heads": 2, "ffn_dim": 256,
              "rope_base": 10000.0}
RESULT_COLUMNS = ("experiment_id", "seed", "stage", "layer", "criterion", "retained",
                  "object_recall", "bottom_bias", "macs")

_TOP_KEYS = {"experiment_id", "model", "model_seed", "grid", "scene", "schedule", "flops",
             "instrument", "out"}
_SCENE_KEYS = {"seeds", "correlation", "text_len", "object_strength", "rect_min", "rect_max"}
_SCHEDULE_KEYS = {"preset", "ratio", "layers", "per_stage_keep", "stride", "stage2_base",
                  "placement", "stages"}
_FLOPS_KEYS = {"num_layers", "hidden_dim", "ffn_dim", "grid_h", "grid_w"}


def _reject_unknown(section: str, data: dict, allowed: set):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


def parse_seeds(value) -> tuple[int, ...]:
    """``N`` -> 0..N-1; ``"a,b,c"`` or a list -> those seeds."""
    if isinstance(value, bool):
        raise ConfigError("scene.seeds must be a count or a list of integers")
    if isinstance(value, int):
        if value < 1:
            raise ConfigError("scene.seeds count must be positive")
        return tuple(range(value))
    if isinstance(value, str):
        value = value.strip()
        if "," not in value:
            try:
                return parse_seeds(int(value))
            except ValueError:
                raise ConfigError(f"scene.seeds: cannot parse {value!r}") from None
        value = [v for v in value.split(",") if v.strip()]
    try:
        seeds = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"scene.seeds: cannot parse {value!r}") from None
    if not seeds or len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise ConfigError("scene.seeds must be distinct non-negative integers")
    return seeds


@dataclass(frozen=True)
class SceneParams:
    seeds: tuple[int, ...] = tuple(range(20))
    correlation: float = 1.0
    text_len: int = 8
    object_strength: float = 1.0
    rect_min: int = 3
    rect_max: int = 6

    def to_dict(self) -> dict[str, Any]:
        return {"seeds": list(self.seeds), "correlation": self.correlation,
                "text_len": self.text_len, "object_strength": self.object_strength,
                "rect_min": self.rect_min, "rect_max": self.rect_max}


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved run plan."""

    experiment_id: str = "default"
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**DESK_MODEL))
    model_seed: int = 0
    grid_h: int = 16
    grid_w: int = 16
    scene: SceneParams = field(default_factory=SceneParams)
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    preset: str | None = "none"
    flops_reference: tuple = tuple(flops.REFERENCE.items())
    instrument: bool = False
    out: str = "results"

    def validate(self) -> "ExperimentConfig":
        for stage in self.schedule.stages:
            if stage.layer >= self.model.num_layers:
                raise ConfigError(f"schedule.stages: layer {stage.layer} >= model.num_layers "
                                  f"{self.model.num_layers}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid: dimensions must be positive")
        s = self.scene
        if not 0.0 <= s.correlation <= 1.0:
            raise ConfigError("scene.correlation must be in [0, 1]")
        if s.text_len < 1:
            raise ConfigError("scene.text_len must be >= 1")
        if not 1 <= s.rect_min <= s.rect_max:
            raise ConfigError("scene.rect_min/rect_max must satisfy 1 <= min <= max")
        return self

    def to_dict(self) -> dict[str, Any]:
        sched = {"preset": self.preset} if self.preset else {}
        sched.update(self.schedule.to_dict())
        return {
            "experiment_id": self.experiment_id,
            "model": self.model.to_dict(),
            "model_seed": self.model_seed,
            "grid": {"h": self.grid_h, "w": self.grid_w},
            "scene": self.scene.to_dict(),
            "schedule": sched,
            "flops": dict(self.flops_reference),
            "instrument": self.instrument,
            "out": self.out,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "ExperimentConfig":
        data = dict(data or {})
        _reject_unknown("config", data, _TOP_KEYS)
        kw: dict[str, Any] = {}
        if "experiment_id" in data:
            kw["experiment_id"] = str(data["experiment_id"])
        if "model" in data:
            kw["model"] = ModelConfig.from_dict({**DESK_MODEL, **data["model"]})
        if "model_seed" in data:
            kw["model_seed"] = _int("model_seed", data["model_seed"])
        if "grid" in data:
            grid = data["grid"]
            _reject_unknown("grid", grid, {"h", "w"})
            kw["grid_h"] = _int("grid.h", grid.get("h", 16))
            kw["grid_w"] = _int("grid.w", grid.get("w", 16))
        if "scene" in data:
            scene = data["scene"]
            _reject_unknown("scene", scene, _SCENE_KEYS)
            scene = dict(scene)
            if "seeds" in scene:
                scene["seeds"] = parse_seeds(scene["seeds"])
            try:
                kw["scene"] = SceneParams(**scene)
            except TypeError as exc:
                raise ConfigError(f"scene: {exc}") from None
        if "schedule" in data:
            kw["preset"], kw["schedule"] = parse_schedule(data["schedule"])
        if "flops" in data:
            _reject_unknown("flops", data["flops"], _FLOPS_KEYS)
            ref = {**flops.REFERENCE, **data["flops"]}
            kw["flops_reference"] = tuple((k, _int(f"flops.{k}", ref[k]))
                                          for k in flops.REFERENCE)
        if "instrument" in data:
            kw["instrument"] = bool(data["instrument"])
        if "out" in data:
            kw["out"] = str(data["out"])
        return cls(**kw).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        return cls.from_dict(data)


def _int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return value


def parse_schedule(data: dict) -> tuple[str | None, PruneSchedule]:
    """Explicit ``stages`` win over a preset; returns (preset name, schedule)."""
    _reject_unknown("schedule", data, _SCHEDULE_KEYS)
    preset = data.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"schedule.preset: unknown preset {preset!r}; expected one of {PRESETS}")
    if "stages" in data:
        sched = PruneSchedule.from_dict({"placement": data.get("placement", "in_llm"),
                                         "stages": data["stages"]})
        return preset, sched
    options = {k: data[k] for k in ("per_stage_keep", "stride", "stage2_base") if k in data}
    sched = make_preset(preset or "none", ratio=data.get("ratio"), layers=data.get("layers"),
                        **options)
    if "placement" in data:
        sched = PruneSchedule(sched.stages, data["placement"])
    return preset or "none", sched


# -------------------------------------------------------------------- running


@lru_cache(maxsize=4)
def _weights(model: ModelConfig, seed: int):
    return init_model(model, seed)


def build_scene(cfg: ExperimentConfig, seed: int):
    s = cfg.scene
    weights = _weights(cfg.model, cfg.model_seed)
    rng = np.random.default_rng([seed, 1])
    rect = sample_rect(rng, cfg.grid_h, cfg.grid_w, s.rect_min, s.rect_max)
    return make_planted_scene(weights, cfg.grid_h, cfg.grid_w, rect, seed,
                              correlation=s.correlation, text_len=s.text_len,
                              object_strength=s.object_strength)


@dataclass
class SeedResult:
    seed: int
    retained: list[RetainedSet]
    recall: list[float]
    bias: list[float]
    macs: int | None


def stage_sets(cfg: ExperimentConfig, trace) -> list[RetainedSet]:
    """Retained sets to report; a schedule with no stages reports the full grid."""
    if trace.retained:
        return list(trace.retained)
    n = cfg.grid_h * cfg.grid_w
    keep = [] if cfg.schedule.placement == "text_only" else range(n)
    return [RetainedSet(np.asarray(keep, dtype=np.int64), 0, cfg.grid_h, cfg.grid_w)]


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    weights = _weights(cfg.model, cfg.model_seed)
    scene = build_scene(cfg, seed)
    trace = forward(weights, scene.sequence, cfg.schedule, instrument=cfg.instrument,
                    run_to_end=cfg.instrument)
    sets = stage_sets(cfg, trace)
    recall = [object_recall(r, scene) for r in sets]
    bias = [bottom_bias(r.mask()) if len(r) else math.nan for r in sets]
    return SeedResult(seed, sets, recall, bias, trace.macs)


def _run_seed_args(args):
    return run_seed(*args)


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, workers)


def run_seeds(cfg: ExperimentConfig, workers: int | None = None) -> list[SeedResult]:
    """Evaluate every seed; results come back in seed-list order for any worker count."""
    workers = worker_count(workers)
    jobs = [(cfg, s) for s in cfg.scene.seeds]
    if workers == 1 or len(jobs) == 1:
        return [run_seed(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_args, jobs))


@dataclass
class ResultRecord:
    experiment_id: str
    schedule: str
    stage_counts: list[list[int]]
    reduction: float
    rows: list[dict[str, Any]]
    aggregates: list[dict[str, Any]]
    flops_report: flops.FlopsReport
    toy_reduction: dict[str, float] | None = None

    def final_stage(self) -> dict[str, Any]:
        return self.aggregates[-1]

    def summary(self, timestamp: str | None = None) -> dict[str, Any]:
        return {
            "experiment_id": self.experiment_id,
            "schedule": self.schedule,
            "stage_counts": self.stage_counts,
            "reduction": self.reduction,
            "toy_reduction": self.toy_reduction,
            "aggregates": self.aggregates,
            "created": timestamp,
        }


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return None, None
    arr = np.asarray(vals)
    return float(arr.mean()), float(arr.std())


def aggregate(cfg: ExperimentConfig, results: list[SeedResult]) -> ResultRecord:
    rows, aggregates = [], []
    n_stages = len(results[0].retained)
    layers = [s.layer for s in cfg.schedule.stages] or [0]
    if cfg.schedule.placement == "pre_llm":
        layers = [0]
    kinds = [s.criterion.kind for s in cfg.schedule.stages]
    if not kinds:
        kinds = ["text_only" if cfg.schedule.placement == "text_only" else "none"]
    for res in results:
        for i in range(n_stages):
            rows.append({
                "experiment_id": cfg.experiment_id, "seed": res.seed, "stage": i,
                "layer": layers[i], "criterion": kinds[i], "retained": len(res.retained[i]),
                "object_recall": res.recall[i], "bottom_bias": res.bias[i],
                "macs": res.macs if res.macs is not None else "",
            })
    for i in range(n_stages):
        rec_mean, rec_std = _mean_std([r.recall[i] for r in results])
        bias_mean, bias_std = _mean_std([r.bias[i] for r in results])
        heat = accumulate_heatmap((r.retained[i] for r in results), i)
        aggregates.append({
            "stage": i, "layer": layers[i], "criterion": kinds[i],
            "retained_mean": float(np.mean([len(r.retained[i]) for r in results])),
            "recall_mean": rec_mean, "recall_std": rec_std,
            "bias_mean": bias_mean, "bias_std": bias_std,
            "heatmap_bias": bottom_bias(heat) if heat.counts.sum() else None,
        })

    ref = dict(cfg.flops_reference)
    report = flops.schedule_report(cfg.schedule, **ref)
    toy = None
    if cfg.instrument:
        toy = toy_flops_check(cfg, results)
    counts = [[len(r.retained[i]) for i in range(n_stages)] for r in results]
    return ResultRecord(cfg.experiment_id, cfg.schedule.describe(), counts, report.reduction,
                        rows, aggregates, report, toy)


def toy_flops_check(cfg: ExperimentConfig, results: list[SeedResult]) -> dict[str, float]:
    """Measured vs analytic reduction at toy scale, counting visual and text tokens."""
    t = cfg.scene.text_len
    n = cfg.grid_h * cfg.grid_w
    baseline = cfg.model.num_layers * flops.layer_cost(n + t, cfg.model.hidden_dim,
                                                       cfg.model.ffn_dim)
    measured, analytic = [], []
    for res in results:
        realized = [len(r) for r in res.retained] if cfg.schedule.stages else None
        report = flops.schedule_report(
            cfg.schedule, num_layers=cfg.model.num_layers, hidden_dim=cfg.model.hidden_dim,
            ffn_dim=cfg.model.ffn_dim, grid_h=cfg.grid_h, grid_w=cfg.grid_w,
            realized=realized, text_tokens=t)
        measured.append(1.0 - res.macs / baseline)
        analytic.append(report.reduction)
    return {"measured": float(np.mean(measured)), "analytic": float(np.mean(analytic))}


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def results_csv(record: ResultRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in record.rows:
        writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def write_outputs(cfg: ExperimentConfig, record: ResultRecord, results: list[SeedResult],
                  out: str | Path, timestamp: str | None = None) -> list[Path]:
    """Write the run directory; existing result files are never overwritten."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def create(name: str, content: str | bytes) -> Path:
        path = out / name
        mode = "xb" if isinstance(content, bytes) else "x"
        try:
            with open(path, mode) as fh:
                fh.write(content)
        except FileExistsError:
            raise FileExistsError(f"{path} already exists; use a fresh output directory") from None
        written.append(path)
        return path

    create("results.csv", results_csv(record))
    create("summary.json", json.dumps(record.summary(timestamp), indent=2) + "\n")
    create("flops.json", json.dumps(record.flops_report.to_dict(), indent=2) + "\n")
    create("flops.txt", record.flops_report.table() + "\n")
    create("config.yaml", cfg.dump())
    for i in range(len(record.aggregates)):
        heat = accumulate_heatmap((r.retained[i] for r in results), i)
        for path in (out / f"heatmap_stage{i}.txt", out / f"heatmap_stage{i}.pgm"):
            if path.exists():
                raise FileExistsError(f"{path} already exists; use a fresh output directory")
        written.extend(write_heatmap(heat, out / f"heatmap_stage{i}"))
    return written


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None,
                   workers: int | None = None, write: bool = True) -> ResultRecord:
    results = run_seeds(cfg, workers)
    record = aggregate(cfg, results)
    if write:
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        write_outputs(cfg, record, results, out if out is not None else cfg.out, stamp)
    return record


def compare(configs: list[ExperimentConfig], workers: int | None = None) -> list[dict[str, Any]]:
    """One row per schedule: reference reduction, final-stage recall and bias."""
    if not configs:
        raise InputError("compare needs at least one config")
    first = configs[0]
    for cfg in configs[1:]:
        if cfg.scene.seeds != first.scene.seeds:
            raise InputError(f"{cfg.experiment_id}: seed list differs from {first.experiment_id}")
        if (cfg.grid_h, cfg.grid_w) != (first.grid_h, first.grid_w):
            raise InputError(f"{cfg.experiment_id}: grid differs from {first.experiment_id}")
        if (cfg.model, cfg.model_seed) != (first.model, first.model_seed):
            raise InputError(f"{cfg.experiment_id}: model differs from {first.experiment_id}")
    rows = []
    for cfg in configs:
        rec = run_experiment(cfg, workers=workers, write=False)
        final = rec.final_stage()
        rows.append({"experiment_id": cfg.experiment_id, "schedule": rec.schedule,
                     "reduction": rec.reduction, "final_retained": final["retained_mean"],
                     "recall_mean": final["recall_mean"], "bias_mean": final["bias_mean"]})
    return rows


def comparison_table(rows: list[dict[str, Any]]) -> str:
    head = f"{'experiment':<16} {'reduction':>9} {'kept':>7} {'recall':>7} {'bias':>6}  schedule"
    lines = [head]
    for r in rows:
        bias = "-" if r["bias_mean"] is None else f"{r['bias_mean']:.3f}"
        recall = "-" if r["recall_mean"] is None else f"{r['recall_mean']:.3f}"
        lines.append(f"{r['experiment_id']:<16} {r['reduction']:>9.4f} "
                     f"{r['final_retained']:>7.1f} {recall:>7} {bias:>6}  {r['schedule']}")
    return "\n".join(lines)


__all__ = ["ExperimentConfig", "ResultRecord", "SceneParams", "Rect", "compare",
           "comparison_table", "parse_seeds", "run_experiment", "run_seeds", "build_scene"]
