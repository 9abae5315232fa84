"""Comparison algorithms: item-mean, item-item kNN and SGD matrix factorization.

All three emit a single real number per query, on the numeric value
scale of the ratings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import jit
from numpy.typing import ArrayLike, NDArray

from .core import RatingScale, RatingsTable

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """SGD produced a non-finite factor."""

    def __init__(self, epoch: int):
        super().__init__(f"matrix factorization diverged during epoch {epoch}")
        self.epoch = epoch


# naive --------------------------------------------------------------------

@dataclass(frozen=True)
class ItemMeans:
    means: NDArray[np.float64]
    seen: NDArray[np.bool_]
    global_mean: float

    @classmethod
    def fit(cls, data: RatingsTable) -> "ItemMeans":
        vals = data.values()
        sums = np.bincount(data.items, weights=vals, minlength=data.n_items)
        deg = data.item_degree
        gmean = float(vals.mean()) if len(vals) else float(np.mean(data.scale.values))
        means = np.divide(sums, deg, out=np.full(data.n_items, gmean), where=deg > 0)
        return cls(means, deg > 0, gmean)

    def predict(self, items: ArrayLike) -> NDArray[np.float64]:
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        ok = (items >= 0) & (items < len(self.means))
        out = np.full(len(items), self.global_mean)
        out[ok] = self.means[items[ok]]
        return out


def naive_predict(data: RatingsTable, i: int) -> float:
    """Mean observed rating of item ``i``; global mean if the item is unrated."""
    return float(ItemMeans.fit(data).predict([i])[0])


# item-item ----------------------------------------------------------------

def _binary_matrix(data: RatingsTable) -> sp.csc_matrix:
    ones = np.ones(len(data))
    return sp.csc_matrix((ones, (data.users, data.items)), shape=(data.n_users, data.n_items))


def cosine_similarity(data: RatingsTable, i: int, j: int) -> float:
    """Cosine between the 0/1 rater-indicator vectors of items i and j."""
    ui = set(data.by_item(i)[0].tolist())
    uj = set(data.by_item(j)[0].tolist())
    if not ui or not uj:
        return 0.0
    return len(ui & uj) / float(np.sqrt(len(ui) * len(uj)))


@dataclass(frozen=True)
class ItemItemModel:
    """Top-k neighbour lists per item.

    ``neighbors[i]`` / ``sims[i]`` hold at most k items with positive
    similarity, sorted by descending similarity then ascending index.
    """

    k: int
    neighbors: tuple[NDArray[np.int64], ...]
    sims: tuple[NDArray[np.float64], ...]
    item_means: ItemMeans


def item_item_fit(data: RatingsTable, k: int = 50, block: int = 512) -> ItemItemModel:
    X = _binary_matrix(data)
    deg = data.item_degree.astype(np.float64)
    norm = np.sqrt(deg)
    XT = X.T.tocsr()
    neighbors, sims = [], []
    for lo in range(0, data.n_items, block):
        hi = min(lo + block, data.n_items)
        co = (XT[lo:hi] @ X).toarray()  # co-rater counts
        denom = norm[lo:hi, None] * norm[None, :]
        S = np.divide(co, denom, out=np.zeros_like(co), where=denom > 0)
        np.clip(S, 0.0, 1.0, out=S)
        for row, i in enumerate(range(lo, hi)):
            s = S[row]
            s[i] = 0.0
            cand = np.flatnonzero(s > 0)
            # descending similarity, ascending index on ties
            order = np.lexsort((cand, -s[cand]))[:k]
            neighbors.append(cand[order].astype(np.int64))
            sims.append(s[cand[order]])
    return ItemItemModel(k, tuple(neighbors), tuple(sims), ItemMeans.fit(data))


def item_item_predict_many(model: ItemItemModel, data: RatingsTable, users: ArrayLike,
                           items: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Similarity-weighted mean of u's ratings on i's neighbours.

    Returns (predictions, fallback mask); queries with no rated neighbour
    get the item mean.
    """
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    vals = data.scale.array
    user_ratings: dict[int, dict[int, float]] = {}
    out = np.empty(len(users))
    fallback = np.zeros(len(users), dtype=bool)
    for n, (u, i) in enumerate(zip(users.tolist(), items.tolist())):
        if u not in user_ratings:
            if 0 <= u < data.n_users:
                its, rs = data.by_user(u)
                user_ratings[u] = dict(zip(its.tolist(), vals[rs].tolist()))
            else:
                user_ratings[u] = {}
        rated = user_ratings[u]
        num = den = 0.0
        if 0 <= i < len(model.neighbors):
            for j, s in zip(model.neighbors[i].tolist(), model.sims[i].tolist()):
                r = rated.get(j)
                if r is not None:
                    num += s * r
                    den += abs(s)
        if den > 0:
            # a convex combination, up to round-off
            out[n] = min(max(num / den, vals[0]), vals[-1])
        else:
            out[n] = model.item_means.predict([i])[0]
            fallback[n] = True
    return out, fallback


def item_item_predict(model: ItemItemModel, data: RatingsTable, u: int, i: int) -> float:
    return float(item_item_predict_many(model, data, [u], [i])[0][0])


# matrix factorization -----------------------------------------------------

@dataclass(frozen=True)
class MfConfig:
    K: int = 50
    learning_rate: float = 0.002
    n_epochs: int = 30
    init: float = 0.1
    regularization: float = 0.0
    schedule: str = "sequential"
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("sequential", "joint"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.K < 1 or self.n_epochs < 1:
            raise ValueError("K and n_epochs must be >= 1")


@dataclass(frozen=True)
class MfModel:
    """R ~ P @ Qf with P (N, K) user factors and Qf (K, M) item factors."""

    P: NDArray[np.float64]
    Qf: NDArray[np.float64]
    user_seen: NDArray[np.bool_]
    item_seen: NDArray[np.bool_]
    global_mean: float
    learning_rate: float
    n_epochs: int
    train_rmse: tuple[float, ...] = ()

    @property
    def K(self) -> int:
        return self.P.shape[1]


def squared_error(p_u: ArrayLike, q_i: ArrayLike, r: float) -> float:
    return float((r - np.dot(p_u, q_i)) ** 2)


def squared_error_gradient(p_u: ArrayLike, q_i: ArrayLike, r: float) -> tuple[NDArray, NDArray]:
    """Gradient of (r - p_u . q_i)^2 with respect to p_u and q_i."""
    p_u = np.asarray(p_u, dtype=np.float64)
    q_i = np.asarray(q_i, dtype=np.float64)
    e = r - p_u @ q_i
    return -2.0 * e * q_i, -2.0 * e * p_u


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _sgd_epoch(order, users, items, values, P, Qf, lr, reg):
    K = P.shape[1]
    sse = 0.0
    for n in order:
        u = users[n]
        i = items[n]
        pred = 0.0
        for k in range(K):
            pred += P[u, k] * Qf[k, i]
        e = values[n] - pred
        sse += e * e
        for k in range(K):
            pu = P[u, k]
            qi = Qf[k, i]
            # step along -1/2 of the squared-error gradient
            P[u, k] = pu + lr * (e * qi - reg * pu)
            Qf[k, i] = qi + lr * (e * pu - reg * qi)
    return sse


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _sgd_feature_epoch(order, users, items, values, cache, P, Qf, f, lr, reg):
    sse = 0.0
    for n in order:
        u = users[n]
        i = items[n]
        pu = P[u, f]
        qi = Qf[f, i]
        e = values[n] - cache[n] - pu * qi
        sse += e * e
        P[u, f] = pu + lr * (e * qi - reg * pu)
        Qf[f, i] = qi + lr * (e * pu - reg * qi)
    return sse


def mf_train(data: RatingsTable, config: MfConfig = MfConfig()) -> MfModel:
    """Stochastic gradient descent on the squared error of observed ratings.

    Observations are visited in a freshly shuffled order each epoch.  The
    step for one rating is p_u += lr * e * q_i (and symmetrically for q_i),
    i.e. gradient descent on half the squared error.

    With the default ``"sequential"`` schedule the K features are fitted one
    after another, ``n_epochs`` epochs each, against the residual of the
    features already trained.  ``"joint"`` updates all features together;
    from the constant start every feature then receives identical updates,
    so the fit never leaves the rank-1 subspace.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty ratings table")
    rng = np.random.default_rng(config.seed)
    P = np.full((data.n_users, config.K), config.init)
    Qf = np.full((config.K, data.n_items), config.init)
    vals = data.values()
    lr, reg = config.learning_rate, config.regularization
    rmse = []
    cache = np.zeros(len(data))
    n_feat = config.K if config.schedule == "sequential" else 1
    epoch = 0
    for f in range(n_feat):
        for _ in range(config.n_epochs):
            epoch += 1
            order = rng.permutation(len(data))
            if config.schedule == "sequential":
                sse = _sgd_feature_epoch(order, data.users, data.items, vals, cache, P, Qf, f, lr, reg)
            else:
                sse = _sgd_epoch(order, data.users, data.items, vals, P, Qf, lr, reg)
            if not (np.isfinite(sse) and np.all(np.isfinite(P)) and np.all(np.isfinite(Qf))):
                raise DivergenceError(epoch)
            rmse.append(float(np.sqrt(sse / len(data))))
        if config.schedule == "sequential":
            cache += P[data.users, f] * Qf[f, data.items]
    log.debug("mf: %d epochs, final train rmse %.4f", epoch, rmse[-1])
    return MfModel(P, Qf, data.user_degree > 0, data.item_degree > 0, float(vals.mean()),
                   config.learning_rate, epoch, tuple(rmse))


def mf_predict_many(model: MfModel, users: ArrayLike, items: ArrayLike,
                    scale: RatingScale) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Clamped inner products; global mean when the user or item is unseen."""
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    ok = (users >= 0) & (users < len(model.user_seen)) & (items >= 0) & (items < len(model.item_seen))
    ok[ok] = model.user_seen[users[ok]] & model.item_seen[items[ok]]
    out = np.full(len(users), model.global_mean)
    out[ok] = np.einsum("nk,kn->n", model.P[users[ok]], model.Qf[:, items[ok]])
    return np.clip(out, scale.values[0], scale.values[-1]), ~ok


def mf_predict(model: MfModel, u: int, i: int, scale: RatingScale) -> float:
    return float(mf_predict_many(model, [u], [i], scale)[0][0])
