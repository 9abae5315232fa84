import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netrec.baselines import (DivergenceError, ItemItemModel, ItemMeans, MfConfig, MfModel,
                              cosine_similarity, item_item_fit, item_item_predict,
                              item_item_predict_many, mf_predict, mf_predict_many, mf_train,
                              naive_predict, squared_error, squared_error_gradient)
from netrec.core import RatingScale, RatingsTable

FIVE = RatingScale.integers(1, 5)


def table(triples, n_users=None, n_items=None, scale=FIVE):
    u, i, r = map(np.array, zip(*triples))
    return RatingsTable(u, i, r, scale, n_users=n_users, n_items=n_items)


def random_table(n_users, n_items, n_obs, seed):
    rng = np.random.default_rng(seed)
    pairs = rng.choice(n_users * n_items, n_obs, replace=False)
    u, i = np.divmod(pairs, n_items)
    return RatingsTable(u, i, rng.integers(0, 5, n_obs), FIVE, n_users, n_items)


# naive ---------------------------------------------------------------------

def test_item_mean_examples():
    # ratings are label indices; value = index + 1
    t = table([(0, 0, 3), (1, 0, 3), (2, 0, 3), (0, 1, 0), (1, 1, 4)], n_items=3)
    assert naive_predict(t, 0) == 4.0
    assert naive_predict(t, 1) == 3.0


def test_unseen_item_falls_back_to_global_mean():
    t = table([(0, 0, 1), (1, 1, 3)], n_items=3)
    assert naive_predict(t, 2) == 3.0
    assert ItemMeans.fit(t).predict([-1, 7]).tolist() == [3.0, 3.0]


# item-item -----------------------------------------------------------------

def test_cosine_examples():
    t = table([(1, 0, 0), (2, 0, 0), (1, 1, 0), (2, 1, 0), (3, 2, 0), (1, 3, 0), (3, 3, 0)])
    assert cosine_similarity(t, 0, 1) == pytest.approx(1.0)
    assert cosine_similarity(t, 0, 2) == 0.0
    assert cosine_similarity(t, 0, 3) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_properties(seed):
    t = random_table(8, 6, 20, seed)
    fit = item_item_fit(t, k=10)
    for i in range(t.n_items):
        if t.item_degree[i]:
            assert cosine_similarity(t, i, i) == pytest.approx(1.0)
        for j in range(t.n_items):
            s = cosine_similarity(t, i, j)
            assert 0.0 <= s <= 1.0 + 1e-12
            assert s == cosine_similarity(t, j, i)
            if i != j and s > 0:
                pos = fit.neighbors[i].tolist().index(j)
                assert fit.sims[i][pos] == pytest.approx(s, rel=1e-12)


def fixed_model(neighbors, sims, data):
    return ItemItemModel(50, tuple(np.array(n, dtype=np.int64) for n in neighbors),
                         tuple(np.array(s, dtype=float) for s in sims), ItemMeans.fit(data))


def test_item_item_weighted_average_examples():
    # user 0 rated item 1 with 5 and item 2 with 1; item 0 is the target
    t = table([(0, 1, 4), (0, 2, 0), (1, 0, 2), (1, 1, 1), (1, 2, 3)])
    m = fixed_model([[1, 2], [], []], [[0.8, 0.2], [], []], t)
    assert item_item_predict(m, t, 0, 0) == pytest.approx(4.2, abs=1e-12)
    m = fixed_model([[1, 2], [], []], [[1.0, 1.0], [], []], t)
    assert item_item_predict(m, t, 0, 0) == pytest.approx(3.0)
    t3 = table([(0, 1, 2), (0, 2, 2), (1, 0, 0)])
    m = fixed_model([[1, 2], [], []], [[0.3, 0.9], [], []], t3)
    assert item_item_predict(m, t3, 0, 0) == pytest.approx(3.0)


def test_item_item_fallback_to_item_mean():
    t = table([(0, 0, 4), (1, 0, 2), (1, 1, 0), (2, 2, 3)])
    m = item_item_fit(t, k=50)
    values, fb = item_item_predict_many(m, t, [2, 0], [0, 2])
    assert fb.tolist() == [True, True]
    assert values.tolist() == [4.0, 4.0]


def test_neighbour_ties_break_by_index():
    # items 1, 2, 3 share the same raters as item 0 -> equal similarity
    t = table([(u, i, 0) for u in range(3) for i in range(4)])
    m = item_item_fit(t, k=2)
    assert m.neighbors[0].tolist() == [1, 2]
    assert m.neighbors[3].tolist() == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_item_item_predictions_stay_on_scale(seed):
    t = random_table(10, 10, 40, seed)
    m = item_item_fit(t, k=5)
    U, I = np.divmod(np.arange(100), 10)
    v, _ = item_item_predict_many(m, t, U, I)
    assert np.all((v >= 1.0) & (v <= 5.0))


# matrix factorization ------------------------------------------------------

def rank_one_table():
    a = np.array([1.0, 2.0] * 10)
    b = np.array([1.0, 1.5, 2.0, 1.0] * 5)
    scale = RatingScale(tuple(sorted(set((a[:, None] * b[None, :]).ravel()))))
    U, I = np.divmod(np.arange(400), 20)
    R = np.array([scale.index_of(a[u] * b[i]) for u, i in zip(U, I)])
    return RatingsTable(U, I, R, scale), a[U] * b[I]


def test_mf_recovers_rank_one_matrix():
    t, truth = rank_one_table()
    m = mf_train(t, MfConfig(K=1, learning_rate=0.01, n_epochs=200, seed=0))
    pred, fb = mf_predict_many(m, t.users, t.items, t.scale)
    assert not fb.any()
    assert np.sqrt(np.mean((pred - truth) ** 2)) < 0.01


def test_mf_constant_ratings():
    U, I = np.divmod(np.arange(100), 10)
    t = RatingsTable(U, I, np.full(100, 2), FIVE)
    m = mf_train(t, MfConfig(K=1, learning_rate=0.01, n_epochs=200))
    assert np.max(np.abs(mf_predict_many(m, U, I, FIVE)[0] - 3.0)) < 0.01


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    p, q, r = rng.normal(size=6), rng.normal(size=6), 3.5
    gp, gq = squared_error_gradient(p, q, r)
    h = 1e-6
    for vec, grad, other_first in ((p, gp, True), (q, gq, False)):
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            if other_first:
                fd = (squared_error(p + e, q, r) - squared_error(p - e, q, r)) / (2 * h)
            else:
                fd = (squared_error(p, q + e, r) - squared_error(p, q - e, r)) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-5 * max(1.0, abs(grad[k]))


def test_first_epoch_reduces_loss():
    t = random_table(40, 30, 500, seed=1)
    for schedule in ("sequential", "joint"):
        m = mf_train(t, MfConfig(K=1, n_epochs=1, schedule=schedule))
        pred = m.P[t.users, 0] * m.Qf[0, t.items]
        initial = np.sqrt(np.mean((t.values() - 0.01) ** 2))
        assert np.sqrt(np.mean((t.values() - pred) ** 2)) < initial


def test_sequential_schedule_epoch_count():
    t = random_table(10, 10, 30, seed=2)
    assert mf_train(t, MfConfig(K=3, n_epochs=4)).n_epochs == 12
    assert mf_train(t, MfConfig(K=3, n_epochs=4, schedule="joint")).n_epochs == 4


def test_divergence_reports_epoch():
    t = random_table(10, 10, 50, seed=3)
    with pytest.raises(DivergenceError) as exc:
        mf_train(t, MfConfig(K=2, learning_rate=1e6, n_epochs=5))
    assert exc.value.epoch == 1


def test_mf_training_is_deterministic():
    t = random_table(20, 20, 100, seed=4)
    a = mf_train(t, MfConfig(K=3, n_epochs=3, seed=7))
    b = mf_train(t, MfConfig(K=3, n_epochs=3, seed=7))
    assert np.array_equal(a.P, b.P) and np.array_equal(a.Qf, b.Qf)


def _mf(P, Q):
    P, Q = np.atleast_2d(P).astype(float), np.atleast_2d(Q).astype(float).T
    return MfModel(P, Q, np.ones(len(P), bool), np.ones(Q.shape[1], bool), 3.0, 0.002, 1)


def test_prediction_clamping_examples():
    K = 4
    assert mf_predict(_mf(np.zeros(K), np.ones(K)), 0, 0, FIVE) == 1.0
    assert mf_predict(_mf([7.0], [1.0]), 0, 0, FIVE) == 5.0
    v = np.full(K, np.sqrt(3.0 / K))
    assert mf_predict(_mf(v, v), 0, 0, FIVE) == pytest.approx(3.0)


def test_mf_cold_start_uses_global_mean():
    m = _mf([[1.0], [2.0]], [[2.0]])
    vals, fb = mf_predict_many(m, [1, 5, -1], [0, 0, 0], FIVE)
    assert vals.tolist() == [4.0, 3.0, 3.0]
    assert fb.tolist() == [False, True, True]


def test_config_validation():
    with pytest.raises(ValueError):
        MfConfig(schedule="adam")
    with pytest.raises(ValueError):
        MfConfig(K=0)
