import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import knn_brute_force, union_size_monte_carlo
from tokenprune import (BudgetError, ConfigError, Criterion, RetainedSet, ScoringContext,
                        TokenSequence, knn_scores, score_attention, select, uniform_indices)
from tokenprune.criteria import top_by_score
from tokenprune.harness import ExperimentConfig, _weights, build_scene


def brute_lattice(h, w, s):
    return [r * w + c for r in range(h) for c in range(w) if r % s == 0 and c % s == 0]


# ---------------------------------------------------------------- uniform

def test_uniform_reference_grid_count():
    assert len(uniform_indices(27, 27, 2)) == 196


def test_uniform_small_grid():
    assert uniform_indices(4, 4, 2).tolist() == [0, 2, 8, 10]


def test_uniform_stride_three_count():
    assert len(uniform_indices(27, 27, 3)) == len(brute_lattice(27, 27, 3)) == 81


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 10))
def test_uniform_matches_enumeration(h, w, s):
    got = uniform_indices(h, w, s)
    assert got.tolist() == brute_lattice(h, w, s)
    assert len(got) == math.ceil(h / s) * math.ceil(w / s)


def test_uniform_rejects_zero_stride():
    with pytest.raises(ConfigError):
        uniform_indices(4, 4, 0)


# -------------------------------------------------------------------- knn

def test_knn_identical_features():
    d = knn_scores(np.ones((6, 3)), 2)
    assert np.all(d.delta == 0) and np.all(d.importance == 0)


def test_knn_three_points_on_a_line():
    z = np.array([[0.0], [1.0], [10.0]])
    d = knn_scores(z, 1)
    rho, delta, ranking = knn_brute_force(z, 1)
    assert d.rho[0] == d.rho[1] > d.rho[2]
    assert d.delta[2] == 81.0
    # no token is denser than 0 or 1, so both take the farthest distance
    assert d.delta.tolist() == [100.0, 81.0, 81.0]
    assert d.rho.tolist() == rho and ranking == [0, 1, 2]
    # mean kNN distances are 1, 1, 81 -> bandwidth 83/3
    assert d.rho[0] == math.exp(-1 / (83 / 3))


def test_knn_fixed_bandwidth_is_the_plain_exponential():
    d = knn_scores(np.array([[0.0], [1.0], [10.0]]), 1, bandwidth=1.0)
    assert d.rho.tolist() == [math.exp(-1), math.exp(-1), math.exp(-81)]


def test_knn_only_densest_take_the_otherwise_branch():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((30, 4))
    d = knn_scores(z, 3)
    dist = ((z[:, None] - z[None]) ** 2).sum(-1)
    top = d.rho == d.rho.max()
    np.testing.assert_array_equal(d.delta[top], dist[top].max(axis=1))
    assert np.all(d.delta >= 0)


def test_knn_k_too_large():
    with pytest.raises(ConfigError):
        knn_scores(np.zeros((3, 2)), 3)


@pytest.mark.parametrize("seed", range(12))
def test_knn_duplicated_features_match_oracle(seed):
    """Duplication changes kNN neighbourhoods; the implementation must still agree with brute force."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    z = rng.standard_normal((n, 3))
    zz = np.vstack([z, z])
    k = int(rng.integers(1, n))
    d = knn_scores(zz, k)
    rho, delta, ranking = knn_brute_force(zz, k)
    assert d.rho.tolist() == rho and d.delta.tolist() == delta
    assert np.lexsort((np.arange(2 * n), -d.importance)).tolist() == ranking


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 40), st.sampled_from([1, 3, 5]),
       st.floats(0.01, 100.0))
def test_knn_selection_is_scale_invariant(seed, n, k, c):
    if k >= n:
        k = 1
    z = np.random.default_rng(seed).standard_normal((n, 5))
    ids = np.arange(n)
    a = top_by_score(ids, knn_scores(z, k).importance, n // 3)
    b = top_by_score(ids, knn_scores(z * c, k).importance, n // 3)
    assert set(a.tolist()) == set(b.tolist())


# --------------------------------------------------------------- criterion

def test_criterion_round_trip():
    for crit in (Criterion.original(aggregation="sum"), Criterion.rope_free(),
                 Criterion.uniform(3), Criterion.knn(4, bandwidth=2.0), Criterion.ensemble(3)):
        assert Criterion.from_dict(crit.to_dict()) == crit


@pytest.mark.parametrize("bad", [dict(kind="bogus"), dict(kind="uniform_stride", stride=0),
                                 dict(kind="knn_density", k=0),
                                 dict(kind="original", aggregation="median")])
def test_criterion_validation(bad):
    with pytest.raises(ConfigError):
        Criterion(**bad)


def test_retained_set_invariants():
    with pytest.raises(Exception):
        RetainedSet(np.array([3, 1]), 0, 2, 2)
    with pytest.raises(Exception):
        RetainedSet(np.array([4]), 0, 2, 2)
    assert RetainedSet(np.array([0, 3]), 0, 2, 2).mask().tolist() == [[True, False],
                                                                      [False, True]]


# ----------------------------------------------------------------- select

def _ctx(weights, seq, layer=0):
    return ScoringContext.from_inputs(weights, seq, layer)


@pytest.mark.parametrize("crit", [Criterion.original(), Criterion.rope_free(),
                                  Criterion.knn(3), Criterion.ensemble(3)])
def test_full_budget_keeps_all(small_weights, small_sequence, crit):
    kept = select(crit, _ctx(small_weights, small_sequence, 1), 36)
    assert kept.indices.tolist() == list(range(36))


def test_zero_budget(small_weights, small_sequence):
    assert len(select(Criterion.rope_free(), _ctx(small_weights, small_sequence), 0)) == 0


def test_budget_error(small_weights, small_sequence):
    with pytest.raises(BudgetError):
        select(Criterion.original(), _ctx(small_weights, small_sequence), 37)


def test_uniform_ignores_budget(small_weights, small_sequence):
    kept = select(Criterion.uniform(2), _ctx(small_weights, small_sequence), 5)
    assert kept.indices.tolist() == uniform_indices(6, 6, 2).tolist()


@pytest.mark.parametrize("budget", [0, 5, 17, 36])
@pytest.mark.parametrize("kind", ["original", "rope_free", "knn_density"])
def test_selection_size_and_subset(small_weights, small_sequence, kind, budget):
    crit = Criterion(kind, k=3)
    kept = select(crit, _ctx(small_weights, small_sequence, 2), budget)
    assert len(kept) == budget
    assert set(kept.indices.tolist()) <= set(range(36))


def test_top_by_score_breaks_ties_low_index():
    ids = np.array([4, 7, 9, 12])
    assert top_by_score(ids, np.array([1.0, 2.0, 2.0, 2.0]), 2).tolist() == [7, 9]


def test_attention_scores_in_unit_interval(small_weights, small_sequence):
    for rf in (False, True):
        s = score_attention(_ctx(small_weights, small_sequence, 1), rope_free=rf)
        assert s.shape == (36,) and np.all((s >= 0) & (s <= 1))


def test_identical_content_rope_free_is_canonical_prefix(small_weights):
    rng = np.random.default_rng(0)
    seq = TokenSequence(6, 6, np.tile(rng.standard_normal(64), (36, 1)),
                        rng.standard_normal((3, 64)))
    s = score_attention(_ctx(small_weights, seq), rope_free=True)
    np.testing.assert_allclose(s, s[0], atol=1e-9)
    assert select(Criterion.rope_free(), _ctx(small_weights, seq), 10).indices.tolist() == list(
        range(10))


def test_ensemble_union_bounds_27x27():
    """Ensemble on a 27x27 grid: |union| in [182, 263], about 243 for position-blind scores."""
    rng = np.random.default_rng(11)
    lattice = uniform_indices(27, 27, 3)
    ids = np.arange(729)
    sizes = []
    for _ in range(200):
        top = top_by_score(ids, rng.random(729), 182)
        size = len(np.union1d(top, lattice))
        assert 182 <= size <= 263
        sizes.append(size)
    expected = 182 + 81 - 182 * 81 / 729
    assert expected == pytest.approx(242.78, abs=0.01)
    mc = union_size_monte_carlo(27, 27, 182, 3, 2000, np.random.default_rng(12))
    assert mc == pytest.approx(expected, abs=0.5)
    assert np.mean(sizes) == pytest.approx(expected, abs=1.0)


def test_ensemble_select_union(small_weights, small_sequence):
    ctx = _ctx(small_weights, small_sequence, 1)
    top = select(Criterion.rope_free(), ctx, 9)
    ens = select(Criterion.ensemble(3), ctx, 9)
    assert set(ens.indices.tolist()) == set(top.indices.tolist()) | set(
        uniform_indices(6, 6, 3).tolist())


def test_planted_object_gets_more_rope_free_attention():
    cfg = ExperimentConfig()
    weights = _weights(cfg.model, cfg.model_seed)
    scene = build_scene(cfg, 0)
    s = score_attention(ScoringContext.from_inputs(weights, scene.sequence, 8), rope_free=True)
    obj = np.zeros(256, dtype=bool)
    obj[scene.object_indices] = True
    margin = s[obj].mean() - s[~obj].mean()
    assert margin > 0
    # measured on seed 0 of the desk model, frozen as a regression baseline
    assert margin == pytest.approx(6.832651671105118e-06, rel=1e-6)


def test_scale_invariance_of_selection_in_context(small_weights):
    rng = np.random.default_rng(9)
    vis = rng.standard_normal((36, 64))
    txt = rng.standard_normal((2, 64))
    a = TokenSequence(6, 6, vis, txt)
    b = TokenSequence(6, 6, vis * 4.0, txt)
    sa = select(Criterion.knn(3), ScoringContext.from_inputs(small_weights, a), 12)
    sb = select(Criterion.knn(3), ScoringContext.from_inputs(small_weights, b), 12)
    assert sa == sb
