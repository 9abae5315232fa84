from pathlib import Path

import numpy as np
import pytest

from netrec import baselines, mmsbm
from netrec.core import RatingScale, RatingsTable
from netrec.io import (DatasetError, DatasetSpec, ModelFile, ModelFormatError, SavedModel,
                       infer_scale, load_model, parse_dataset, read_model_file, save_model,
                       write_dataset, write_model_file)
from netrec.sbm import McmcConfig, sample_posterior

ML100K = Path(__file__).resolve().parent.parent / "data" / "ml-100k" / "u.data"
FIVE = RatingScale.integers(1, 5)


def write(tmp_path, text, name="r.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# parsing -------------------------------------------------------------------

def test_two_line_file(tmp_path):
    p = write(tmp_path, "u1\tm9\t4\t881250949\nu2\tm9\t1\t881250950\n")
    t = parse_dataset(DatasetSpec(p))
    assert (t.n_users, t.n_items, len(t)) == (2, 1, 2)
    assert list(t.user_ids) == ["u1", "u2"] and list(t.item_ids) == ["m9"]
    assert t.by_item(0)[0].tolist() == [0, 1]
    assert t.scale.labels == ("1", "4")


def test_out_of_scale_rating_names_the_line(tmp_path):
    p = write(tmp_path, "1\t1\t5\n1\t2\t6\n")
    with pytest.raises(DatasetError, match=r":2: rating 6"):
        parse_dataset(DatasetSpec(p, scale=FIVE))


def test_malformed_lines(tmp_path):
    with pytest.raises(DatasetError, match=":2:"):
        parse_dataset(DatasetSpec(write(tmp_path, "1\t1\t5\n1\t2\n")))
    with pytest.raises(DatasetError, match=":1: rating 'x'"):
        parse_dataset(DatasetSpec(write(tmp_path, "1\t1\tx\n")))


def test_empty_and_missing_files(tmp_path):
    with pytest.raises(DatasetError, match="no ratings"):
        parse_dataset(DatasetSpec(write(tmp_path, "\n\n")))
    with pytest.raises(DatasetError, match="no such"):
        parse_dataset(DatasetSpec(tmp_path / "absent.tsv"))


def test_format_options(tmp_path):
    p = write(tmp_path, "rating,item,user\n2.5,a,x\n5,b,y\n0.5,a,y\n")
    t = parse_dataset(DatasetSpec(p, ",", user_col=2, item_col=1, rating_col=0, skip_header=True))
    assert list(t.user_ids) == ["x", "y"] and list(t.item_ids) == ["a", "b"]
    assert t.scale.values == (0.5, 2.5, 5.0)
    assert sorted(t.observations) == [(0, 0, 1), (1, 0, 0), (1, 1, 2)]


def test_explicit_scale_overrides_inference(tmp_path):
    t = parse_dataset(DatasetSpec(write(tmp_path, "1 1 2\n2 1 4\n"), None, scale=FIVE))
    assert t.scale == FIVE
    assert sorted(t.ratings.tolist()) == [1, 3]


def test_duplicate_pairs_keep_last(tmp_path):
    with pytest.warns(UserWarning):
        t = parse_dataset(DatasetSpec(write(tmp_path, "1\t1\t2\n1\t1\t5\n")))
    assert len(t) == 1 and t.values().tolist() == [5.0]


@pytest.mark.parametrize("values, size", [
    (range(1, 6), 5),
    (np.arange(1, 11) / 2, 10),
    (range(1, 11), 10),
])
def test_infer_scale(values, size):
    s = infer_scale(list(values) * 2)
    assert s.size == size
    assert list(s.values) == sorted(s.values)


def test_infer_scale_empty():
    with pytest.raises(DatasetError):
        infer_scale([])


def test_parse_write_parse_is_idempotent(tmp_path):
    src = write(tmp_path, "b\tz\t3\na\tz\t1\nb\ty\t5\nc\tx\t3\n")
    first = parse_dataset(DatasetSpec(src))
    write_dataset(first, tmp_path / "again.tsv")
    second = parse_dataset(DatasetSpec(tmp_path / "again.tsv"))

    def raw(t):
        return sorted((t.user_ids[u], t.item_ids[i], t.scale.labels[r]) for u, i, r in t.observations)

    assert raw(first) == raw(second)
    # dense -> raw -> dense
    index = {u: n for n, u in enumerate(first.user_ids)}
    assert [index[u] for u in first.user_ids] == list(range(first.n_users))


@pytest.mark.skipif(not ML100K.is_file(), reason="MovieLens 100K not fetched (scripts/fetch_ml100k.py)")
def test_movielens_100k_counts():
    t = parse_dataset(DatasetSpec(ML100K))
    assert (t.n_users, t.n_items, len(t)) == (943, 1682, 100000)
    assert t.scale == FIVE


# model files ---------------------------------------------------------------

def small_table(seed=0):
    rng = np.random.default_rng(seed)
    U, I = np.divmod(rng.choice(120, 60, replace=False), 12)
    return RatingsTable(U, I, rng.integers(0, 5, 60), FIVE, 10, 12,
                        user_ids=[f"u{k}" for k in range(10)], item_ids=[f"i {k}" for k in range(12)])


def roundtrip(tmp_path, saved):
    path = tmp_path / "m.txt"
    save_model(saved, path)
    again = load_model(path)
    save_model(again, tmp_path / "m2.txt")
    assert path.read_bytes() == (tmp_path / "m2.txt").read_bytes()
    return again


def test_trivial_mmsbm_roundtrips_bit_exactly(tmp_path):
    t = small_table()
    m = mmsbm.MmsbmModel(np.ones((10, 1)), np.ones((12, 1)), np.full((5, 1, 1), 0.2),
                         t.user_degree > 0, t.item_degree > 0, t.rating_histogram())
    back = roundtrip(tmp_path, SavedModel("mmsbm", [m], FIVE, t.user_ids, t.item_ids)).model[0]
    assert np.array_equal(back.Q, m.Q) and np.array_equal(back.theta, m.theta)


def test_trained_models_roundtrip_with_identical_predictions(tmp_path):
    t = small_table()
    U, I = np.divmod(np.arange(120), 12)
    ens = mmsbm.train_ensemble(t, mmsbm.EmConfig(K=3, L=2, max_iters=30, n_runs=2))
    back = roundtrip(tmp_path, SavedModel("mmsbm", ens, FIVE, t.user_ids, t.item_ids)).model
    for a, b in zip(ens, back):
        for name in ("theta", "eta", "Q", "rating_hist"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert a.loglik_trace == b.loglik_trace
    assert np.array_equal(mmsbm.predict_proba(ens, U, I), mmsbm.predict_proba(back, U, I))

    post = sample_posterior(t, McmcConfig(burn_in_sweeps=3, n_samples=4, sample_stride_sweeps=1))
    back = roundtrip(tmp_path, SavedModel("sbm", post, FIVE)).model
    assert np.array_equal(post.predict_proba(U, I, seed=1), back.predict_proba(U, I, seed=1))

    mf = baselines.mf_train(t, baselines.MfConfig(K=3, n_epochs=2))
    back = roundtrip(tmp_path, SavedModel("mf", mf, FIVE)).model
    assert np.array_equal(baselines.mf_predict_many(mf, U, I, FIVE)[0],
                          baselines.mf_predict_many(back, U, I, FIVE)[0])

    ii = baselines.item_item_fit(t, 5)
    saved = roundtrip(tmp_path, SavedModel("itemitem", ii, FIVE, t.user_ids, t.item_ids, t))
    assert np.array_equal(baselines.item_item_predict_many(ii, t, U, I)[0],
                          baselines.item_item_predict_many(saved.model, saved.train, U, I)[0])
    assert saved.item_ids == list(t.item_ids)

    means = baselines.ItemMeans.fit(t)
    back = roundtrip(tmp_path, SavedModel("naive", means, FIVE)).model
    assert np.array_equal(means.predict(I), back.predict(I))


def test_float_rendering_is_exact(tmp_path):
    x = np.array([[0.1, 1 / 3, 2.0 ** -1074], [np.nextafter(1.0, 2.0), -0.0, 1e300]])
    write_model_file(ModelFile("demo", arrays={"x": x}), tmp_path / "f")
    y = read_model_file(tmp_path / "f").arrays["x"]
    assert y.tobytes() == x.tobytes()


@pytest.mark.parametrize("mutate, match", [
    (lambda s: s.replace("netrec-model 1", "netrec-model 7", 1), "version 7"),
    (lambda s: "garbage\n" + s, "not a netrec-model"),
    (lambda s: s[: len(s) // 2], "truncated|end"),
    (lambda s: s.replace("dims 10 12 1 1", "dims 10 12 2 1"), "shapes"),
])
def test_corrupted_files_are_rejected(tmp_path, mutate, match):
    t = small_table()
    m = mmsbm.MmsbmModel(np.ones((10, 1)), np.ones((12, 1)), np.full((5, 1, 1), 0.2),
                         t.user_degree > 0, t.item_degree > 0, t.rating_histogram())
    path = tmp_path / "m.txt"
    save_model(SavedModel("mmsbm", [m], FIVE), path)
    path.write_text(mutate(path.read_text()))
    with pytest.raises(ModelFormatError, match=match):
        load_model(path)
