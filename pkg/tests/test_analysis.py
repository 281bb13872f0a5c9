import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenprune import (Criterion, InputError, PruneSchedule, PruneStage, RetainedSet,
                        UndefinedValueError, forward, uniform_indices)
from tokenprune.analysis import (Rect, accumulate_heatmap, bottom_bias, heatmap_pgm,
                                 heatmap_text, make_identical_scene, make_planted_scene,
                                 object_recall, read_heatmap_text, read_pgm, sample_rect,
                                 write_heatmap)
from tokenprune.harness import ExperimentConfig, _weights, build_scene


def rset(ids, h=27, w=27, stage=0):
    return RetainedSet(np.asarray(sorted(ids), dtype=np.int64), stage, h, w)


# ------------------------------------------------------------------ heatmaps

def test_keep_everything_heatmap():
    heat = accumulate_heatmap([rset(range(729))] * 3, 0)
    assert np.all(heat.frequencies == 1.0)
    assert bottom_bias(heat) == pytest.approx(0.5)


def test_uniform_lattice_heatmap():
    heat = accumulate_heatmap([rset(uniform_indices(27, 27, 2))], 0)
    assert int(heat.counts.sum()) == 196
    assert bottom_bias(heat) == pytest.approx(0.5)


def test_heatmap_is_order_independent():
    rng = np.random.default_rng(0)
    sets = [rset(rng.choice(729, 100, replace=False)) for _ in range(10)]
    a = accumulate_heatmap(sets, 0)
    b = accumulate_heatmap(sets[::-1], 0)
    assert np.array_equal(a.counts, b.counts) and a.samples == b.samples == 10


def test_heatmap_accepts_traces(small_weights, small_sequence):
    sched = PruneSchedule((PruneStage(1, Criterion.original(), keep=0.5),))
    trace = forward(small_weights, small_sequence, sched)
    heat = accumulate_heatmap([trace, trace], 0)
    assert heat.shape == (6, 6) and int(heat.counts.sum()) == 36


def test_heatmap_grid_mismatch_and_empty():
    with pytest.raises(InputError):
        accumulate_heatmap([rset([0]), rset([0], 4, 4)], 0)
    with pytest.raises(InputError):
        accumulate_heatmap([], 0)
    assert accumulate_heatmap([], 0, grid=(3, 3)).samples == 0


def test_bias_extremes():
    grid = np.zeros((5, 5))
    grid[0] = 1
    assert bottom_bias(grid) == 0.0
    grid = np.zeros((5, 5))
    grid[4] = 1
    assert bottom_bias(grid) == 1.0
    assert bottom_bias(np.ones((1, 4))) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.integers(1, 12))
def test_bias_mirror(seed, h, w):
    grid = np.random.default_rng(seed).random((h, w))
    assert bottom_bias(grid) + bottom_bias(grid[::-1]) == pytest.approx(1.0)
    assert bottom_bias(grid) == pytest.approx(bottom_bias(grid[:, ::-1]))


def test_bias_undefined_for_empty_mass():
    with pytest.raises(UndefinedValueError):
        bottom_bias(np.zeros((4, 4)))
    with pytest.raises(UndefinedValueError):
        bottom_bias(accumulate_heatmap([rset([])], 0))


def test_text_round_trip():
    rng = np.random.default_rng(1)
    sets = [rset(rng.choice(729, 50, replace=False)) for _ in range(7)]
    heat = accumulate_heatmap(sets, 0)
    back = read_heatmap_text(heatmap_text(heat))
    assert back.samples == 7 and np.array_equal(back.counts, heat.counts)


def test_pgm_round_trip(tmp_path):
    heat = accumulate_heatmap([rset(range(0, 729, 2)), rset(range(729))], 0)
    pix = read_pgm(heatmap_pgm(heat))
    assert pix.shape == (27, 27) and pix.dtype == np.uint8
    np.testing.assert_array_equal(pix, np.rint(heat.frequencies * 255).astype(np.uint8))
    assert read_pgm(heatmap_pgm(heat, scale=3)).shape == (81, 81)
    txt, pgm = write_heatmap(heat, tmp_path / "h")
    assert pgm.read_bytes().startswith(b"P5\n27 27\n255\n")
    assert read_heatmap_text(txt.read_text()).samples == 2


def test_pgm_rejects_other_formats():
    with pytest.raises(InputError):
        read_pgm(b"P2\n1 1\n255\n0")


# -------------------------------------------------------------------- scenes

def test_rect_indices():
    r = Rect(1, 3, 2, 4)
    assert r.indices(5).tolist() == [7, 8, 12, 13] and r.area == 4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 30), st.integers(3, 30))
def test_sample_rect_fits(seed, h, w):
    r = sample_rect(np.random.default_rng(seed), h, w)
    assert 0 <= r.row0 < r.row1 <= h and 0 <= r.col0 < r.col1 <= w
    assert 3 <= r.row1 - r.row0 <= 6 and 3 <= r.col1 - r.col0 <= 6


def test_scene_determinism(small_weights):
    a = make_planted_scene(small_weights, 8, 8, None, seed=5)
    b = make_planted_scene(small_weights, 8, 8, None, seed=5)
    c = make_planted_scene(small_weights, 8, 8, None, seed=6)
    assert a.rect == b.rect
    assert np.array_equal(a.sequence.embeddings, b.sequence.embeddings)
    assert not np.array_equal(a.sequence.embeddings, c.sequence.embeddings)


@pytest.mark.parametrize("rect", [Rect(2, 2, 0, 3), Rect(0, 3, 5, 9), Rect(-1, 2, 0, 2)])
def test_bad_rect(small_weights, rect):
    with pytest.raises(InputError):
        make_planted_scene(small_weights, 8, 8, rect, seed=0)


def test_bad_correlation(small_weights):
    with pytest.raises(InputError):
        make_planted_scene(small_weights, 8, 8, None, seed=0, correlation=1.5)


@pytest.mark.parametrize("c", [0.0, 1.0])
def test_last_text_token_norm_at_the_extremes(small_weights, c):
    # the two mixed directions are not orthogonal, so only c in {0, 1} pins the norm
    scene = make_planted_scene(small_weights, 8, 8, None, seed=0, correlation=c)
    assert np.linalg.norm(scene.sequence.text_embeddings[-1]) == pytest.approx(8.0)


def test_identical_scene_query_matches_key(small_weights):
    seq = make_identical_scene(small_weights, 6, 6, layer=2)
    lw = small_weights.layers[2]
    e, x = seq.visual_embeddings[0], seq.text_embeddings[-1]
    q, k = x @ lw.wq, e @ lw.wk
    cos = q @ k / np.linalg.norm(q) / np.linalg.norm(k)
    assert cos == pytest.approx(1.0)
    assert np.all(seq.visual_embeddings == e)


def test_object_recall_properties(small_weights):
    scene = make_planted_scene(small_weights, 8, 8, Rect(0, 2, 0, 2), seed=0)
    assert object_recall(rset(range(64), 8, 8), scene) == 1.0
    assert object_recall(rset([], 8, 8), scene) == 0.0
    assert object_recall(rset([0, 9, 50], 8, 8), scene) == 0.5


def test_uncorrelated_query_gives_chance_recall():
    """With correlation 0 the query carries no object information.

    Object tokens within one scene share a direction, so their fates are
    correlated; sampling one object token per scene keeps trials independent.
    """
    scipy_stats = pytest.importorskip("scipy.stats")
    cfg = ExperimentConfig.from_dict({"scene": {"correlation": 0.0}})
    weights = _weights(cfg.model, cfg.model_seed)
    sched = PruneSchedule((PruneStage(8, Criterion.rope_free(), keep=0.25),))
    pick = np.random.default_rng(123)
    hits, trials = 0, 200
    for seed in range(trials):
        scene = build_scene(cfg, seed)
        trace = forward(weights, scene.sequence, sched, run_to_end=False)
        token = pick.choice(scene.object_indices)
        hits += int(token in set(trace.retained[0].indices.tolist()))
    assert scipy_stats.binomtest(hits, trials, 0.25).pvalue > 0.01
