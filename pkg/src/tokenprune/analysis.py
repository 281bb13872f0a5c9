"""Retention heatmaps, positional-bias metric, and synthetic scenes with known relevance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .criteria import RetainedSet
from .errors import InputError, UndefinedValueError
from .model import ModelWeights, TokenSequence


@dataclass(frozen=True, eq=False)
class RetentionHeatmap:
    counts: np.ndarray
    samples: int

    @property
    def frequencies(self) -> np.ndarray:
        if self.samples == 0:
            return np.zeros(self.counts.shape)
        return self.counts / self.samples

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


def accumulate_heatmap(traces: Iterable, stage_index: int, grid=None) -> RetentionHeatmap:
    """Per-cell count of membership in stage ``stage_index``'s retained set.

    Accepts ForwardTraces or RetainedSets.  Integer counts make the result
    independent of the order the traces arrive in.
    """
    counts, samples = None, 0
    if grid is not None:
        counts = np.zeros(grid, dtype=np.int64)
    for item in traces:
        kept = item if isinstance(item, RetainedSet) else item.retained[stage_index]
        shape = (kept.grid_h, kept.grid_w)
        if counts is None:
            counts = np.zeros(shape, dtype=np.int64)
        elif counts.shape != shape:
            raise InputError(f"grid {shape} does not match {counts.shape}")
        counts += kept.mask()
        samples += 1
    if counts is None:
        raise InputError("no traces and no grid given")
    counts.flags.writeable = False
    return RetentionHeatmap(counts, samples)


def bottom_bias(heatmap) -> float:
    """Mass-weighted mean of row/(grid_h - 1): 0 all top, 1 all bottom, 0.5 balanced."""
    grid = heatmap.frequencies if isinstance(heatmap, RetentionHeatmap) else np.asarray(
        heatmap, dtype=np.float64)
    row_mass = grid.sum(axis=1)
    total = row_mass.sum()
    if total <= 0:
        raise UndefinedValueError("bottom_bias is undefined for a heatmap with no retained mass")
    h = grid.shape[0]
    if h == 1:
        return 0.5
    return float((row_mass * np.arange(h)).sum() / total / (h - 1))


# --------------------------------------------------------------- export


def heatmap_text(heatmap: RetentionHeatmap) -> str:
    lines = [f"# samples {heatmap.samples}"]
    for row in heatmap.frequencies:
        lines.append(" ".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def read_heatmap_text(text: str) -> RetentionHeatmap:
    rows, samples = [], 0
    for line in text.splitlines():
        if line.startswith("# samples"):
            samples = int(line.split()[-1])
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    freq = np.array(rows)
    return RetentionHeatmap(np.rint(freq * samples).astype(np.int64), samples)


def heatmap_pgm(heatmap: RetentionHeatmap, scale: int = 1) -> bytes:
    """Binary 8-bit PGM (P5); frequency 1.0 maps to white."""
    pixels = np.rint(np.clip(heatmap.frequencies, 0.0, 1.0) * 255).astype(np.uint8)
    if scale > 1:
        pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    magic, w, h, maxval, rest = data.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise InputError("expected an 8-bit binary PGM")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w))


def write_heatmap(heatmap: RetentionHeatmap, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    txt, pgm = stem.with_suffix(".txt"), stem.with_suffix(".pgm")
    txt.write_text(heatmap_text(heatmap))
    pgm.write_bytes(heatmap_pgm(heatmap))
    return txt, pgm


# --------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Rect:
    """Half-open grid rectangle ``[row0, row1) x [col0, col1)``."""

    row0: int
    row1: int
    col0: int
    col1: int

    def indices(self, grid_w: int) -> np.ndarray:
        rows = np.arange(self.row0, self.row1)
        cols = np.arange(self.col0, self.col1)
        return (rows[:, None] * grid_w + cols[None, :]).ravel()

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)


@dataclass(frozen=True, eq=False)
class PlantedScene:
    sequence: TokenSequence
    rect: Rect
    seed: int

    @property
    def object_indices(self) -> np.ndarray:
        return self.rect.indices(self.sequence.grid_w)


def query_direction(weights: ModelWeights, u: np.ndarray, layers: Sequence[int] | None = None):
    """Unit input direction whose queries best match the keys of ``u``.

    For one layer this maximizes (x Wq) . (u Wk) over unit x, i.e.
    x ~ u Wk Wq^T.  With several layers the per-layer unit directions are
    summed, so each layer keeps a positive share of the match.
    """
    layers = range(weights.config.num_layers) if layers is None else layers
    acc = np.zeros_like(u)
    for li in layers:
        layer = weights.layers[li]
        v = (u @ layer.wk) @ layer.wq.T
        acc += v / np.linalg.norm(v)
    return acc / np.linalg.norm(acc)


def sample_rect(rng: np.random.Generator, grid_h: int, grid_w: int,
                min_side: int = 3, max_side: int = 6) -> Rect:
    hi_h, hi_w = min(max_side, grid_h), min(max_side, grid_w)
    h = int(rng.integers(min(min_side, hi_h), hi_h + 1))
    w = int(rng.integers(min(min_side, hi_w), hi_w + 1))
    r0 = int(rng.integers(0, grid_h - h + 1))
    c0 = int(rng.integers(0, grid_w - w + 1))
    return Rect(r0, r0 + h, c0, c0 + w)


def make_planted_scene(weights: ModelWeights, grid_h: int, grid_w: int, rect: Rect | None,
                       seed: int, correlation: float = 1.0, text_len: int = 8,
                       object_strength: float = 1.0, align_layers=None) -> PlantedScene:
    """Grid with an object rectangle the last text token is tuned to attend to.

    Background tokens are i.i.d. N(0, I).  Object tokens are
    ``object_strength * sqrt(d) * u + N(0, I)`` for one random unit ``u``.
    The last text token is ``sqrt(d) * (c * u' + sqrt(1 - c^2) * g)`` with
    ``g`` a random unit vector and ``u'`` from :func:`query_direction`, so with
    ``c = 1`` its query points at the object keys before rotation.  When
    ``rect`` is None one is drawn from the seed.
    """
    if not 0.0 <= correlation <= 1.0:
        raise InputError(f"correlation must be in [0, 1], got {correlation}")
    d = weights.config.hidden_dim
    rng = np.random.default_rng(seed)
    if rect is None:
        rect = sample_rect(rng, grid_h, grid_w)
    if not (0 <= rect.row0 < rect.row1 <= grid_h and 0 <= rect.col0 < rect.col1 <= grid_w):
        raise InputError(f"rectangle {rect} is empty or outside the {grid_h}x{grid_w} grid")

    visual = rng.standard_normal((grid_h * grid_w, d))
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    visual[rect.indices(grid_w)] += object_strength * math.sqrt(d) * u
    text = rng.standard_normal((text_len, d))
    g = rng.standard_normal(d)
    g /= np.linalg.norm(g)
    u_query = query_direction(weights, u, align_layers)
    text[-1] = math.sqrt(d) * (correlation * u_query + math.sqrt(1.0 - correlation**2) * g)
    seq = TokenSequence(grid_h, grid_w, visual, text)
    return PlantedScene(seq, rect, seed)


def make_identical_scene(weights: ModelWeights, grid_h: int, grid_w: int, layer: int,
                         seed: int = 0, text_len: int = 8) -> TokenSequence:
    """Every visual token gets one embedding; the last text token's query equals their key.

    The query is matched to the key at ``layer`` before rotation (solving
    x Wq = e Wk), so the rotary long-term decay alone orders the scores.
    """
    d = weights.config.hidden_dim
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(d)
    lw = weights.layers[layer]
    x = np.linalg.solve(lw.wq.T, e @ lw.wk)
    text = rng.standard_normal((text_len, d))
    text[-1] = math.sqrt(d) * x / np.linalg.norm(x)
    return TokenSequence(grid_h, grid_w, np.tile(e, (grid_h * grid_w, 1)), text)


def object_recall(retained: RetainedSet, scene: PlantedScene) -> float:
    obj = scene.object_indices
    return float(np.isin(obj, retained.indices).sum() / obj.size)
