"""Mixed-membership stochastic block model recommender trained by EM.

Every user holds a membership vector ``theta[u]`` over K user groups, every
item a vector ``eta[i]`` over L item groups, and ``Q[r, k, l]`` is the
probability that a user of group k gives label r to an item of group l.
The predicted rating distribution is sum_kl theta_uk eta_il Q[:, k, l].

The E and M steps are fused into one streaming pass over the observations:
responsibilities are normalised on the fly and folded straight into the
M-step numerators, so memory stays O(NK + ML + |S|KL).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import jit
from numpy.typing import ArrayLike, NDArray

from .core import RatingDistribution, RatingsTable

log = logging.getLogger(__name__)

# Probabilities below this are treated as underflow.
TINY = 1e-300


class DegenerateParametersError(FloatingPointError):
    """An observed rating has zero probability under the current parameters."""


@dataclass(frozen=True)
class EmConfig:
    K: int = 10
    L: int = 10
    max_iters: int = 500
    tol: float = 1e-6
    check_every: int = 10
    n_runs: int = 500
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be >= 1")
        if self.max_iters < 1 or self.check_every < 1:
            raise ValueError("max_iters and check_every must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")


@dataclass(frozen=True)
class MmsbmModel:
    """Trained parameters of one EM run.

    ``user_seen``/``item_seen`` mark nodes with training ratings; the rest
    get uniform membership at prediction time.  ``rating_hist`` is the
    training label histogram used when both endpoints are unseen.
    """

    theta: NDArray[np.float64]
    eta: NDArray[np.float64]
    Q: NDArray[np.float64]
    user_seen: NDArray[np.bool_]
    item_seen: NDArray[np.bool_]
    rating_hist: NDArray[np.float64]
    loglik_trace: tuple[float, ...] = ()
    converged: bool = False
    n_iter: int = 0
    seconds_per_iter: float = float("nan")

    @property
    def K(self) -> int:
        return self.theta.shape[1]

    @property
    def L(self) -> int:
        return self.eta.shape[1]

    @property
    def n_users(self) -> int:
        return self.theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.eta.shape[0]

    @property
    def n_labels(self) -> int:
        return self.Q.shape[0]

    def check_normalised(self, atol: float = 1e-9) -> None:
        """Raise AssertionError if any normalisation constraint is broken."""
        for name, arr, axis in (("theta", self.theta, 1), ("eta", self.eta, 1), ("Q", self.Q, 0)):
            if np.any(arr < 0):
                raise AssertionError(f"{name} has negative entries")
            err = np.max(np.abs(arr.sum(axis=axis) - 1.0))
            if err > atol:
                raise AssertionError(f"{name} normalisation off by {err:.3g}")


@dataclass
class EmAccumulators:
    """Running M-step numerators gathered by the expectation pass."""

    theta_num: NDArray[np.float64]
    eta_num: NDArray[np.float64]
    q_num: NDArray[np.float64]
    loglik: float = 0.0

    @classmethod
    def zeros(cls, n_users: int, n_items: int, n_labels: int, K: int, L: int) -> "EmAccumulators":
        return cls(np.zeros((n_users, K)), np.zeros((n_items, L)), np.zeros((n_labels, K, L)))

    def merge(self, other: "EmAccumulators") -> "EmAccumulators":
        return EmAccumulators(
            self.theta_num + other.theta_num,
            self.eta_num + other.eta_num,
            self.q_num + other.q_num,
            self.loglik + other.loglik,
        )


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _em_pass(users, items, ratings, start, stop, theta, eta, Q, theta_num, eta_num, q_num):
    K = theta.shape[1]
    L = eta.shape[1]
    w = np.empty((K, L))
    loglik = 0.0
    for n in range(start, stop):
        u = users[n]
        i = items[n]
        r = ratings[n]
        total = 0.0
        for k in range(K):
            tk = theta[u, k]
            for l in range(L):
                x = tk * eta[i, l] * Q[r, k, l]
                w[k, l] = x
                total += x
        if not total > TINY:
            return loglik, n
        loglik += math.log(total)
        inv = 1.0 / total
        for k in range(K):
            row = 0.0
            for l in range(L):
                x = w[k, l] * inv
                row += x
                eta_num[i, l] += x
                q_num[r, k, l] += x
            theta_num[u, k] += row
    return loglik, -1


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _loglik_pass(users, items, ratings, theta, eta, Q):
    K = theta.shape[1]
    L = eta.shape[1]
    loglik = 0.0
    for n in range(len(users)):
        u = users[n]
        i = items[n]
        r = ratings[n]
        total = 0.0
        for k in range(K):
            tk = theta[u, k]
            for l in range(L):
                total += tk * eta[i, l] * Q[r, k, l]
        if not total > TINY:
            return loglik, n
        loglik += math.log(total)
    return loglik, -1


def _check_dims(model: MmsbmModel, data: RatingsTable) -> None:
    if (model.n_users, model.n_items, model.n_labels) != (data.n_users, data.n_items, data.scale.size):
        raise ValueError(
            f"model dimensions {(model.n_users, model.n_items, model.n_labels)} do not match "
            f"data {(data.n_users, data.n_items, data.scale.size)}"
        )


def _degenerate(data: RatingsTable, n: int) -> DegenerateParametersError:
    u, i, r = int(data.users[n]), int(data.items[n]), int(data.ratings[n])
    return DegenerateParametersError(
        f"observation #{n} (user {u}, item {i}, label {r}) has zero model probability"
    )


def log_likelihood(model: MmsbmModel, data: RatingsTable) -> float:
    """Sum over observations of log sum_kl theta_uk eta_il Q^{r_ui}_kl."""
    _check_dims(model, data)
    ll, bad = _loglik_pass(data.users, data.items, data.ratings, model.theta, model.eta, model.Q)
    if bad >= 0:
        raise _degenerate(data, bad)
    return float(ll)


def expectation_step(
    model: MmsbmModel,
    data: RatingsTable,
    acc: EmAccumulators | None = None,
    n_workers: int = 1,
) -> EmAccumulators:
    """Stream the responsibilities of every observation into M-step sums.

    With ``n_workers > 1`` the observations are split into contiguous
    ranges, each with private accumulators, merged by summation.
    """
    _check_dims(model, data)
    shape = (data.n_users, data.n_items, data.scale.size, model.K, model.L)
    n_obs = len(data)
    n_workers = max(1, min(n_workers, n_obs))
    bounds = np.linspace(0, n_obs, n_workers + 1).astype(np.int64)

    def run(lo, hi, part):
        ll, bad = _em_pass(data.users, data.items, data.ratings, lo, hi,
                           model.theta, model.eta, model.Q,
                           part.theta_num, part.eta_num, part.q_num)
        if bad >= 0:
            raise _degenerate(data, bad)
        part.loglik += ll
        return part

    if n_workers == 1:
        parts = [run(0, n_obs, EmAccumulators.zeros(*shape))]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            futures = [pool.submit(run, bounds[w], bounds[w + 1], EmAccumulators.zeros(*shape))
                       for w in range(n_workers)]
            parts = [f.result() for f in futures]
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    return total if acc is None else acc.merge(total)


def maximization_step(acc: EmAccumulators, data: RatingsTable) -> MmsbmModel:
    """Re-estimate theta, eta and Q from the accumulated responsibilities.

    Nodes without training ratings get uniform membership.  A (k, l) block
    that received no weight has its rating distribution reset to uniform.
    """
    K = acc.theta_num.shape[1]
    L = acc.eta_num.shape[1]
    S = acc.q_num.shape[0]
    d_u = data.user_degree.astype(np.float64)
    d_i = data.item_degree.astype(np.float64)
    user_seen = d_u > 0
    item_seen = d_i > 0

    theta = np.full((data.n_users, K), 1.0 / K)
    theta[user_seen] = acc.theta_num[user_seen] / d_u[user_seen, None]
    eta = np.full((data.n_items, L), 1.0 / L)
    eta[item_seen] = acc.eta_num[item_seen] / d_i[item_seen, None]

    block = acc.q_num.sum(axis=0)
    empty = block <= TINY
    if np.any(empty):
        log.debug("%d empty (k, l) blocks reset to uniform", int(empty.sum()))
    Q = np.divide(acc.q_num, block, out=np.full_like(acc.q_num, 1.0 / S), where=~empty)

    return MmsbmModel(theta, eta, Q, user_seen, item_seen, data.rating_histogram())


def init_model(data: RatingsTable, K: int, L: int, rng: np.random.Generator) -> MmsbmModel:
    """Random start: every membership vector and Q fibre uniform on its simplex."""
    S = data.scale.size
    theta = rng.dirichlet(np.ones(K), size=data.n_users) if K > 1 else np.ones((data.n_users, 1))
    eta = rng.dirichlet(np.ones(L), size=data.n_items) if L > 1 else np.ones((data.n_items, 1))
    Q = rng.dirichlet(np.ones(S), size=(K, L)).transpose(2, 0, 1).copy()
    deg_u = data.user_degree
    deg_i = data.item_degree
    return MmsbmModel(theta, eta, Q, deg_u > 0, deg_i > 0, data.rating_histogram())


def train(
    data: RatingsTable,
    config: EmConfig = EmConfig(),
    seed: int | None = None,
    n_workers: int = 1,
    callback: Callable[[int, MmsbmModel], None] | None = None,
) -> MmsbmModel:
    """One EM run from a seeded random start.

    Iterates until the relative log-likelihood change between two checks
    (``check_every`` iterations apart) drops below ``tol`` or ``max_iters``
    is reached.  The returned model carries the full log-likelihood trace;
    its last entry is the likelihood of the returned parameters.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty ratings table")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    model = init_model(data, config.K, config.L, rng)
    trace: list[float] = []
    last_check = None
    converged = False
    t0 = time.perf_counter()
    it = 0
    for it in range(1, config.max_iters + 1):
        acc = expectation_step(model, data, n_workers=n_workers)
        trace.append(acc.loglik)
        model = maximization_step(acc, data)
        if config.debug:
            model.check_normalised()
        if callback is not None:
            callback(it, model)
        if it % config.check_every == 0:
            ll = trace[-1]
            if last_check is not None and abs(ll - last_check) <= config.tol * abs(ll):
                converged = True
                break
            last_check = ll
    elapsed = time.perf_counter() - t0
    trace.append(log_likelihood(model, data))
    if not converged:
        log.info("EM stopped at max_iters=%d without meeting tol=%g", config.max_iters, config.tol)
    return replace(model, loglik_trace=tuple(trace), converged=converged, n_iter=it,
                   seconds_per_iter=elapsed / it)


def run_seeds(seed: int, n_runs: int) -> list[int]:
    """Deterministic per-run seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_runs)]


def train_ensemble(
    data: RatingsTable,
    config: EmConfig = EmConfig(),
    n_workers: int = 1,
    progress: Callable[[int, MmsbmModel], None] | None = None,
) -> list[MmsbmModel]:
    """``config.n_runs`` independent EM runs; runs are spread over threads."""
    seeds = run_seeds(config.seed, config.n_runs)

    def one(r):
        m = train(data, config, seed=seeds[r])
        if progress is not None:
            progress(r, m)
        return m

    if n_workers <= 1:
        return [one(r) for r in range(config.n_runs)]
    with ThreadPoolExecutor(n_workers) as pool:
        return list(pool.map(one, range(config.n_runs)))


def _memberships(model: MmsbmModel, users: NDArray, items: NDArray):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    u_ok = (users >= 0) & (users < model.n_users)
    i_ok = (items >= 0) & (items < model.n_items)
    u_ok[u_ok] = model.user_seen[users[u_ok]]
    i_ok[i_ok] = model.item_seen[items[i_ok]]
    th = np.full((len(users), model.K), 1.0 / model.K)
    th[u_ok] = model.theta[users[u_ok]]
    et = np.full((len(items), model.L), 1.0 / model.L)
    et[i_ok] = model.eta[items[i_ok]]
    return th, et, u_ok, i_ok


def predict_proba(models: Sequence[MmsbmModel] | MmsbmModel, users: ArrayLike, items: ArrayLike) -> NDArray[np.float64]:
    """Rating distributions for many (user, item) queries, shape (n, |S|).

    Distributions are averaged uniformly over the given models.  Unseen
    users (items) fall back to uniform membership; if both are unseen the
    training label histogram is used.
    """
    if isinstance(models, MmsbmModel):
        models = [models]
    if not models:
        raise ValueError("need at least one model")
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    out = np.zeros((len(users), models[0].n_labels))
    for m in models:
        th, et, u_ok, i_ok = _memberships(m, users, items)
        p = np.einsum("nk,rkl,nl->nr", th, m.Q, et, optimize=True)
        cold = ~u_ok & ~i_ok
        p[cold] = m.rating_hist
        out += p
    out /= len(models)
    out /= out.sum(axis=1, keepdims=True)
    return out


def cold_start_mask(model: MmsbmModel, users: ArrayLike, items: ArrayLike) -> NDArray[np.bool_]:
    """True where the user or the item had no training ratings."""
    _, _, u_ok, i_ok = _memberships(model, np.atleast_1d(users), np.atleast_1d(items))
    return ~(u_ok & i_ok)


def predict(models: Sequence[MmsbmModel] | MmsbmModel, u: int, i: int) -> RatingDistribution:
    return RatingDistribution(predict_proba(models, [u], [i])[0])
