import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netrec.core import RatingScale, RatingsTable
from netrec.sbm import (McmcConfig, Move, SbmPosterior, SbmState, hamiltonian, mh_accept,
                        mh_step, propose_move, sample_posterior)

# 4x4 toy set (labels 0..2) and its posterior predictive for all 16 pairs,
# computed by enumerating every one of the 2^4 * 2^4 capped partition pairs
# weighted by exp(-H) (independent pure-Python lgamma evaluation).
TOY = [[0, 0, 2, None],
       [0, None, 2, 2],
       [None, 1, 1, 0],
       [2, 1, None, 1]]
TOY_ORACLE = np.array([
    [[0.514211, 0.206154, 0.279635], [0.444223, 0.240677, 0.3151],
     [0.288796, 0.224147, 0.487058], [0.330358, 0.232195, 0.437447]],
    [[0.496349, 0.207107, 0.296544], [0.408087, 0.24756, 0.344353],
     [0.270987, 0.221806, 0.507207], [0.300209, 0.225954, 0.473837]],
    [[0.30435, 0.369927, 0.325723], [0.270763, 0.490152, 0.239085],
     [0.273369, 0.469858, 0.256773], [0.337019, 0.432434, 0.230548]],
    [[0.268698, 0.362331, 0.368972], [0.243115, 0.495381, 0.261503],
     [0.262629, 0.455655, 0.281716], [0.283559, 0.461993, 0.254447]],
])


def toy_table():
    obs = [(u, i, TOY[u][i]) for u in range(4) for i in range(4) if TOY[u][i] is not None]
    u, i, r = map(np.array, zip(*obs))
    return RatingsTable(u, i, r, RatingScale.integers(1, 3), 4, 4)


def random_table(n_users, n_items, n_obs, n_labels, seed):
    rng = np.random.default_rng(seed)
    pairs = rng.choice(n_users * n_items, n_obs, replace=False)
    u, i = np.divmod(pairs, n_items)
    return RatingsTable(u, i, rng.integers(0, n_labels, n_obs), RatingScale.integers(1, n_labels),
                        n_users, n_items)


# Hamiltonian ---------------------------------------------------------------

def test_empty_network_energy():
    counts = np.zeros((3, 4, 5), dtype=np.int64)
    assert hamiltonian(counts, 5) == pytest.approx(12 * math.log(24), rel=1e-14)


def test_homogeneous_block_energy():
    assert hamiltonian(np.array([[[3, 0]]]), 2) == pytest.approx(math.log(4), rel=1e-14)


def test_split_block_energy():
    assert hamiltonian(np.array([[[1, 1]]]), 2) == pytest.approx(math.log(6), rel=1e-14)


def test_cached_energy_matches_recount():
    t = random_table(10, 8, 40, 3, seed=0)
    s = SbmState.random(t, 3, 2, np.random.default_rng(1))
    s.check(1e-9)
    assert s.counts.sum() == len(t)


# moves ---------------------------------------------------------------------

def test_isolated_node_move_costs_nothing():
    t = RatingsTable([0, 1], [0, 1], [0, 1], RatingScale.integers(1, 2), n_users=3, n_items=2)
    s = SbmState(t, [0, 1, 0], [0, 1], 2, 2)
    assert s.delta_energy(True, 2, 1) == 0.0


def test_proposals_never_target_current_group():
    t = random_table(6, 6, 20, 2, seed=3)
    s = SbmState.random(t, 3, 3, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(2000):
        m = propose_move(s, rng)
        assert m.source != m.target


def test_incremental_delta_matches_full_recompute():
    t = random_table(12, 10, 70, 4, seed=5)
    s = SbmState.random(t, 4, 3, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1500):
        m = propose_move(s, rng)
        before = hamiltonian(s)
        s.apply(m)
        worst = max(worst, abs((hamiltonian(s) - before) - m.delta))
        assert abs(s.energy - hamiltonian(s)) <= 1e-8
    assert worst <= 1e-8
    s.check(1e-8)


def test_accept_rule():
    rng = np.random.default_rng(0)
    assert all(mh_accept(d, rng) for d in (-3.0, -1e-12, 0.0))
    n = 20_000
    hits = sum(mh_accept(math.log(2.0), rng) for _ in range(n))
    assert abs(hits - n / 2) <= 3 * math.sqrt(n * 0.25)


def test_rejected_step_leaves_state_untouched():
    t = random_table(8, 8, 40, 5, seed=9)
    s = SbmState.random(t, 3, 3, np.random.default_rng(0))
    rng = np.random.default_rng(4)
    rejected = 0
    for _ in range(300):
        before = s.copy()
        if not mh_step(s, rng):
            rejected += 1
            assert np.array_equal(before.user_group, s.user_group)
            assert np.array_equal(before.item_group, s.item_group)
            assert np.array_equal(before.counts, s.counts)
            assert before.energy == s.energy
    assert rejected > 0
    s.check()


def test_homogeneous_partition_has_lower_energy():
    rng = np.random.default_rng(0)
    gu, gi = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
    label = (gu[:, None] + gi[None, :]) % 5
    U, I = np.divmod(rng.choice(900, 400, replace=False), 30)
    t = RatingsTable(U, I, label[U, I], RatingScale.integers(1, 5))
    planted = hamiltonian(SbmState(t, gu, gi, 3, 3))
    for seed in range(5):
        r = np.random.default_rng(seed)
        shuffled = SbmState(t, r.permutation(gu), r.permutation(gi), 3, 3)
        assert planted < hamiltonian(shuffled)


# posterior predictive ------------------------------------------------------

def test_empty_block_predicts_uniform():
    counts = np.zeros((1, 2, 2, 4), dtype=np.int64)
    counts[0, 0, 0] = [5, 0, 0, 0]
    post = SbmPosterior(np.array([[0]]), np.array([[0, 1]]), counts,
                        np.array([True]), np.array([True, False]))
    assert np.allclose(post.predict_proba([0], [1])[0], 0.25)
    assert np.allclose(post.predict_proba([0], [0])[0], [6 / 9, 1 / 9, 1 / 9, 1 / 9])


def test_single_group_is_smoothed_histogram():
    t = random_table(9, 9, 30, 3, seed=1)
    post = sample_posterior(t, McmcConfig(1, 1, burn_in_sweeps=2, n_samples=3, sample_stride_sweeps=1))
    hist = np.bincount(t.ratings, minlength=3)
    assert np.allclose(post.predict_proba([0, 4], [1, 2]), (hist + 1) / (len(t) + 3))


def test_predictions_are_distributions_and_cold_start_flagged():
    t = random_table(9, 9, 30, 3, seed=1)
    post = sample_posterior(t, McmcConfig(burn_in_sweeps=5, n_samples=4, sample_stride_sweeps=1))
    P = post.predict_proba([0, 3, -1, 20], [1, 2, 0, 0])
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert post.cold_start_mask([0, -1, 20], [1, 0, 0]).tolist()[1:] == [True, True]


def test_chain_keeps_counts_consistent():
    t = random_table(15, 12, 60, 3, seed=2)
    post = sample_posterior(t, McmcConfig(burn_in_sweeps=20, n_samples=5, sample_stride_sweeps=3))
    for ug, ig, c in zip(post.user_groups, post.item_groups, post.counts):
        s = SbmState(t, ug, ig, c.shape[0], c.shape[1])
        assert np.array_equal(s.counts, c)
    assert 0.0 < post.acceptance_rate < 1.0


def test_sampling_is_deterministic():
    t = toy_table()
    cfg = McmcConfig(2, 2, burn_in_sweeps=10, n_samples=20, sample_stride_sweeps=1, seed=4)
    a = sample_posterior(t, cfg)
    b = sample_posterior(t, cfg)
    assert np.array_equal(a.user_groups, b.user_groups) and np.array_equal(a.counts, b.counts)


def toy_predictive(seed, n_samples=40_000):
    t = toy_table()
    cfg = McmcConfig(2, 2, burn_in_sweeps=100, n_samples=n_samples, sample_stride_sweeps=2, seed=seed)
    U, I = np.divmod(np.arange(16), 4)
    return sample_posterior(t, cfg).predict_proba(U, I, seed=seed).reshape(4, 4, 3)


def test_mcmc_matches_exhaustive_enumeration():
    assert np.max(np.abs(toy_predictive(1) - TOY_ORACLE)) < 0.01


def test_two_seeds_agree():
    assert np.max(np.abs(toy_predictive(11, 10_000) - toy_predictive(12, 10_000))) < 0.02


def test_config_caps_and_validation():
    assert McmcConfig().caps(943, 1682) == (31, 42)
    with pytest.raises(ValueError):
        McmcConfig(burn_in_sweeps=0)
    with pytest.raises(ValueError):
        McmcConfig(max_groups_users=5).caps(3, 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_random_moves_keep_energy_exact(seed):
    t = random_table(5, 4, 12, 3, seed=seed)
    s = SbmState.random(t, 2, 2, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for _ in range(50):
        m = propose_move(s, rng)
        s.apply(Move(m.is_user, m.node, m.source, m.target, m.delta))
    s.check(1e-8)
