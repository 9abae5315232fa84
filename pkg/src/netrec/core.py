"""Shared domain types: rating scales, sparse bipartite ratings, estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

# CDF comparisons in the median estimator tolerate summation round-off.
_CDF_SLACK = 1e-12


def _format_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass(frozen=True)
class RatingScale:
    """Ordered set of admissible rating labels.

    Ratings are handled as category indices everywhere; ``values`` only
    matters for mean estimates and MAE.
    """

    values: tuple[float, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(_format_value(v) for v in vals))
        if len(vals) < 2:
            raise ValueError("a rating scale needs at least two labels")
        if len(self.labels) != len(vals):
            raise ValueError("labels and values differ in length")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"scale values must be strictly increasing: {vals}")

    @classmethod
    def integers(cls, lo: int, hi: int) -> "RatingScale":
        return cls(tuple(range(lo, hi + 1)))

    @property
    def size(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def array(self) -> NDArray[np.float64]:
        return np.asarray(self.values, dtype=np.float64)

    def index_of(self, value: float) -> int:
        """Index of the label whose value equals ``value``; KeyError otherwise."""
        for idx, v in enumerate(self.values):
            if abs(v - value) <= 1e-9 * max(1.0, abs(v)):
                return idx
        raise KeyError(f"rating {value!r} is not on the scale {self.labels}")

    def nearest_index(self, x: ArrayLike) -> NDArray[np.int64]:
        """Round real-valued predictions to the closest label; ties go down."""
        x = np.asarray(x, dtype=np.float64)
        vals = self.array
        # first label whose value is >= x, then compare with its lower neighbour
        hi = np.clip(np.searchsorted(vals, x, side="left"), 1, len(vals) - 1)
        lo = hi - 1
        pick_hi = (vals[hi] - x) < (x - vals[lo])
        return np.where(pick_hi, hi, lo).astype(np.int64)


class RatingsTable:
    """Sparse bipartite network of observed ratings.

    Observations are stored as three parallel arrays (user, item, rating
    index) plus CSR-style adjacency indexes for both node types.  Instances
    are treated as immutable; arrays are flagged read-only.
    """

    def __init__(
        self,
        users: ArrayLike,
        items: ArrayLike,
        ratings: ArrayLike,
        scale: RatingScale,
        n_users: int | None = None,
        n_items: int | None = None,
        user_ids: Sequence[str] | None = None,
        item_ids: Sequence[str] | None = None,
        dedupe: bool = True,
    ):
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        ratings = np.asarray(ratings, dtype=np.int64).ravel()
        if not (len(users) == len(items) == len(ratings)):
            raise ValueError("users, items and ratings must have equal length")
        if n_users is None:
            n_users = int(users.max()) + 1 if len(users) else 0
        if n_items is None:
            n_items = int(items.max()) + 1 if len(items) else 0
        if len(users):
            if users.min() < 0 or users.max() >= n_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= n_items:
                raise ValueError("item index out of range")
            if ratings.min() < 0 or ratings.max() >= scale.size:
                raise ValueError("rating index out of range for the scale")

        if dedupe and len(users):
            users, items, ratings = _keep_last(users, items, ratings, n_items)

        self.scale = scale
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.users = users
        self.items = items
        self.ratings = ratings
        self.user_ids = tuple(user_ids) if user_ids is not None else None
        self.item_ids = tuple(item_ids) if item_ids is not None else None

        self.user_ptr, self.user_order = _csr(users, self.n_users)
        self.item_ptr, self.item_order = _csr(items, self.n_items)
        for arr in (self.users, self.items, self.ratings, self.user_ptr,
                    self.user_order, self.item_ptr, self.item_order):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.users)

    def __repr__(self) -> str:
        return (f"RatingsTable(n_users={self.n_users}, n_items={self.n_items}, "
                f"n_ratings={len(self)}, scale={list(self.scale.labels)})")

    @property
    def observations(self) -> Iterator[tuple[int, int, int]]:
        return zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist())

    @property
    def user_degree(self) -> NDArray[np.int64]:
        return np.diff(self.user_ptr)

    @property
    def item_degree(self) -> NDArray[np.int64]:
        return np.diff(self.item_ptr)

    def by_user(self, u: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        """(items, ratings) rated by user ``u``."""
        idx = self.user_order[self.user_ptr[u]:self.user_ptr[u + 1]]
        return self.items[idx], self.ratings[idx]

    def by_item(self, i: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        """(users, ratings) for item ``i``."""
        idx = self.item_order[self.item_ptr[i]:self.item_ptr[i + 1]]
        return self.users[idx], self.ratings[idx]

    def user_adjacency(self) -> tuple[NDArray, NDArray, NDArray]:
        """CSR arrays (ptr, neighbour items, ratings) keyed by user."""
        return self.user_ptr, self.items[self.user_order], self.ratings[self.user_order]

    def item_adjacency(self) -> tuple[NDArray, NDArray, NDArray]:
        """CSR arrays (ptr, neighbour users, ratings) keyed by item."""
        return self.item_ptr, self.users[self.item_order], self.ratings[self.item_order]

    def values(self) -> NDArray[np.float64]:
        """Numeric rating values of every observation."""
        return self.scale.array[self.ratings]

    def rating_histogram(self) -> NDArray[np.float64]:
        counts = np.bincount(self.ratings, minlength=self.scale.size).astype(np.float64)
        total = counts.sum()
        return counts / total if total else np.full(self.scale.size, 1.0 / self.scale.size)

    def subset(self, index: ArrayLike) -> "RatingsTable":
        """Table restricted to the given observations, same node index space."""
        index = np.asarray(index)
        return RatingsTable(
            self.users[index], self.items[index], self.ratings[index], self.scale,
            n_users=self.n_users, n_items=self.n_items,
            user_ids=self.user_ids, item_ids=self.item_ids, dedupe=False,
        )


def _keep_last(users, items, ratings, n_items):
    key = users * n_items + items
    # last occurrence wins: unique over the reversed key array
    _, rev_first = np.unique(key[::-1], return_index=True)
    if len(rev_first) == len(key):
        return users, items, ratings
    keep = np.sort(len(key) - 1 - rev_first)
    warnings.warn(
        f"{len(key) - len(keep)} duplicate (user, item) ratings; keeping the last occurrence",
        stacklevel=3,
    )
    return users[keep], items[keep], ratings[keep]


def _csr(keys: NDArray[np.int64], n: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    order = np.argsort(keys, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=n), out=ptr[1:])
    return ptr, order.astype(np.int64)


@dataclass(frozen=True)
class RatingDistribution:
    """Probability vector over the labels of a rating scale."""

    probs: NDArray[np.float64] = field(repr=False)

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("a rating distribution is a vector over at least two labels")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector: {p}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return len(self.probs)

    def __repr__(self) -> str:
        return f"RatingDistribution({np.array2string(self.probs, precision=4)})"


def _probs(dist) -> NDArray[np.float64]:
    return dist.probs if isinstance(dist, RatingDistribution) else np.asarray(dist, dtype=np.float64)


def estimator_mode(dist) -> int:
    """Most likely label; ties resolve to the lowest index."""
    return int(np.argmax(_probs(dist)))


def estimator_median(dist) -> int:
    """Smallest label index whose cumulative probability reaches 0.5."""
    cdf = np.cumsum(_probs(dist))
    return int(np.searchsorted(cdf, 0.5 - _CDF_SLACK, side="left"))


def estimator_mean(dist, scale: RatingScale) -> float:
    return float(np.dot(_probs(dist), scale.array))


def mode_indices(P: ArrayLike) -> NDArray[np.int64]:
    """Row-wise :func:`estimator_mode` for an (n, |S|) array."""
    return np.argmax(np.asarray(P), axis=1).astype(np.int64)


def median_indices(P: ArrayLike) -> NDArray[np.int64]:
    """Row-wise :func:`estimator_median` for an (n, |S|) array."""
    cdf = np.cumsum(np.asarray(P, dtype=np.float64), axis=1)
    idx = np.argmax(cdf >= 0.5 - _CDF_SLACK, axis=1)
    return idx.astype(np.int64)


def mean_values(P: ArrayLike, scale: RatingScale) -> NDArray[np.float64]:
    return np.asarray(P, dtype=np.float64) @ scale.array


def generate_synthetic(
    n_users: int,
    n_items: int,
    theta: ArrayLike,
    eta: ArrayLike,
    Q: ArrayLike,
    density: float,
    seed: int,
    scale: RatingScale | None = None,
) -> RatingsTable:
    """Sample a ratings table from a planted mixed-membership model.

    A random ``density`` fraction of all (user, item) pairs is observed.
    Each observed pair draws a user group from ``theta[u]``, an item group
    from ``eta[i]`` and then a label from ``Q[:, k, l]``, which is the same
    as sampling from the convex combination sum_kl theta_uk eta_il Q^r_kl.

    ``Q`` has shape (|S|, K, L).  The default scale is 1..|S|.
    """
    theta = np.asarray(theta, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if theta.shape[0] != n_users or eta.shape[0] != n_items:
        raise ValueError("membership matrices do not match the node counts")
    if Q.shape[1:] != (theta.shape[1], eta.shape[1]):
        raise ValueError("Q must have shape (|S|, K, L)")
    for name, arr, axis in (("theta", theta, 1), ("eta", eta, 1), ("Q", Q, 0)):
        if np.any(arr < 0) or not np.allclose(arr.sum(axis=axis), 1.0, atol=1e-9):
            raise ValueError(f"{name} is not normalised")
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    n_obs = int(round(density * n_users * n_items))
    if n_obs == 0:
        raise ValueError("density yields no observations")
    if scale is None:
        scale = RatingScale.integers(1, Q.shape[0])
    elif scale.size != Q.shape[0]:
        raise ValueError("scale size differs from the first axis of Q")

    rng = np.random.default_rng(seed)
    pairs = rng.choice(n_users * n_items, size=n_obs, replace=False)
    pairs.sort()
    users, items = np.divmod(pairs, n_items)

    k = _categorical(theta[users], rng)
    l = _categorical(eta[items], rng)
    r = _categorical(np.moveaxis(Q[:, k, l], 0, 1), rng)
    return RatingsTable(users, items, r, scale, n_users=n_users, n_items=n_items, dedupe=False)


def _categorical(P: NDArray[np.float64], rng: np.random.Generator) -> NDArray[np.int64]:
    """One draw per row of the probability matrix ``P`` by inverse CDF."""
    cdf = np.cumsum(P, axis=1)
    u = rng.random(len(P)) * cdf[:, -1]
    out = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(out, P.shape[1] - 1).astype(np.int64)
