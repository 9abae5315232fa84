"""Bipartite stochastic block model recommender sampled by Metropolis-Hastings.

Users and items are each split into hard groups.  With the per-block
rating probabilities integrated out under a flat prior, a pair of
partitions has weight exp(-H) where

    H = sum_{a,b} [ ln((n_ab + |S| - 1)!) - sum_s ln(n^s_ab!) ]

and the posterior predictive of one sampled partition pair is the
Laplace-smoothed block frequency (n^r_ab + 1) / (n_ab + |S|).  Partitions
live in a capped label space (at most ``max_groups_*`` groups per side) and
the sum over (a, b) runs over every label pair of that space, so an empty
block always contributes ln((|S| - 1)!).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import jit
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln

from .core import RatingsTable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class McmcConfig:
    """Sampler schedule.  ``None`` group caps mean ceil(sqrt(node count))."""

    max_groups_users: int | None = None
    max_groups_items: int | None = None
    burn_in_sweeps: int = 200
    n_samples: int = 100
    sample_stride_sweeps: int = 5
    n_chains: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("burn_in_sweeps", "n_samples", "sample_stride_sweeps", "n_chains"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("max_groups_users", "max_groups_items"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")

    def caps(self, n_users: int, n_items: int) -> tuple[int, int]:
        cu = self.max_groups_users or math.ceil(math.sqrt(n_users))
        ci = self.max_groups_items or math.ceil(math.sqrt(n_items))
        if cu > max(n_users, 1) or ci > max(n_items, 1):
            raise ValueError("group cap exceeds the number of nodes")
        return max(cu, 1), max(ci, 1)


def log_factorials(n_max: int) -> NDArray[np.float64]:
    """Table of ln(k!) for k = 0..n_max."""
    return gammaln(np.arange(n_max + 1, dtype=np.float64) + 1.0)


class Move(NamedTuple):
    is_user: bool
    node: int
    source: int
    target: int
    delta: float


class SbmState:
    """Hard user and item partitions with block rating counts.

    ``counts[a, b, r]`` is the number of observed ratings with label r from
    users in group a to items in group b.  ``energy`` caches H and is
    updated incrementally by accepted moves.
    """

    def __init__(self, data: RatingsTable, user_group: ArrayLike, item_group: ArrayLike,
                 n_user_groups: int, n_item_groups: int):
        self.data = data
        self.user_group = np.array(user_group, dtype=np.int64)
        self.item_group = np.array(item_group, dtype=np.int64)
        if len(self.user_group) != data.n_users or len(self.item_group) != data.n_items:
            raise ValueError("partition sizes do not match the data")
        if len(self.user_group) and not 0 <= self.user_group.min() <= self.user_group.max() < n_user_groups:
            raise ValueError("user group label out of range")
        if len(self.item_group) and not 0 <= self.item_group.min() <= self.item_group.max() < n_item_groups:
            raise ValueError("item group label out of range")
        self.n_user_groups = int(n_user_groups)
        self.n_item_groups = int(n_item_groups)
        self.n_labels = data.scale.size
        self.logfact = log_factorials(len(data) + self.n_labels)
        self.user_adj = tuple(np.ascontiguousarray(a) for a in data.user_adjacency())
        self.item_adj = tuple(np.ascontiguousarray(a) for a in data.item_adjacency())
        self.counts = block_counts(data, self.user_group, self.item_group,
                                   self.n_user_groups, self.n_item_groups)
        self.energy = hamiltonian(self.counts, self.n_labels)
        self._scratch = np.zeros((max(self.n_user_groups, self.n_item_groups), self.n_labels),
                                 dtype=np.int64)
        self._touched = np.zeros(max(self.n_user_groups, self.n_item_groups), dtype=np.int64)

    @classmethod
    def random(cls, data: RatingsTable, n_user_groups: int, n_item_groups: int,
               rng: np.random.Generator) -> "SbmState":
        return cls(data, rng.integers(n_user_groups, size=data.n_users),
                   rng.integers(n_item_groups, size=data.n_items), n_user_groups, n_item_groups)

    @property
    def block_totals(self) -> NDArray[np.int64]:
        return self.counts.sum(axis=2)

    @property
    def g_u(self) -> int:
        return len(np.unique(self.user_group))

    @property
    def g_i(self) -> int:
        return len(np.unique(self.item_group))

    def copy(self) -> "SbmState":
        new = object.__new__(SbmState)
        new.__dict__.update(self.__dict__)
        new.user_group = self.user_group.copy()
        new.item_group = self.item_group.copy()
        new.counts = self.counts.copy()
        new._scratch = self._scratch.copy()
        new._touched = self._touched.copy()
        return new

    def check(self, atol: float = 1e-6) -> None:
        """Recount everything from scratch and compare with the cached state."""
        fresh = block_counts(self.data, self.user_group, self.item_group,
                             self.n_user_groups, self.n_item_groups)
        if not np.array_equal(fresh, self.counts):
            raise AssertionError("block counts are inconsistent with the partition")
        if self.counts.sum() != len(self.data):
            raise AssertionError("block counts do not cover every observation")
        h = hamiltonian(self.counts, self.n_labels)
        if abs(h - self.energy) > atol:
            raise AssertionError(f"cached energy {self.energy} differs from {h}")

    def _side(self, is_user: bool):
        if is_user:
            return self.user_adj, self.item_group
        return self.item_adj, self.user_group

    def delta_energy(self, is_user: bool, node: int, target: int) -> float:
        (ptr, nbr, rat), other = self._side(is_user)
        group = self.user_group if is_user else self.item_group
        return _delta_energy(is_user, node, group[node], target, ptr, nbr, rat, other,
                             self.counts, self.logfact, self._scratch, self._touched)

    def apply(self, move: Move) -> None:
        (ptr, nbr, rat), other = self._side(move.is_user)
        group = self.user_group if move.is_user else self.item_group
        _apply_move(move.is_user, move.node, move.target, ptr, nbr, rat, other, group, self.counts)
        self.energy += move.delta


def block_counts(data: RatingsTable, user_group: NDArray, item_group: NDArray,
                 n_user_groups: int, n_item_groups: int) -> NDArray[np.int64]:
    counts = np.zeros((n_user_groups, n_item_groups, data.scale.size), dtype=np.int64)
    np.add.at(counts, (user_group[data.users], item_group[data.items], data.ratings), 1)
    return counts


def hamiltonian(counts: NDArray | SbmState, n_labels: int | None = None) -> float:
    """Energy of a partition pair from its block counts (all label pairs)."""
    if isinstance(counts, SbmState):
        n_labels = counts.n_labels
        counts = counts.counts
    counts = np.asarray(counts)
    if n_labels is None:
        n_labels = counts.shape[-1]
    n = counts.sum(axis=-1)
    return float(np.sum(gammaln(n + n_labels)) - np.sum(gammaln(counts + 1.0)))


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _block_term(counts, a, b, is_user, delta_row, sign, logfact, S):
    # energy of block (a, b) after adding sign * delta_row; axes follow is_user
    total = 0
    acc = 0.0
    for s in range(S):
        if is_user:
            c = counts[a, b, s] + sign * delta_row[s]
        else:
            c = counts[b, a, s] + sign * delta_row[s]
        total += c
        acc -= logfact[c]
    return acc + logfact[total + S - 1]


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _delta_energy(is_user, node, source, target, ptr, nbr, rat, other_group, counts,
                  logfact, scratch, touched):
    if source == target:
        return 0.0
    S = counts.shape[2]
    n_touched = 0
    for e in range(ptr[node], ptr[node + 1]):
        b = other_group[nbr[e]]
        fresh = True
        for s in range(S):
            if scratch[b, s] != 0:
                fresh = False
                break
        if fresh:
            touched[n_touched] = b
            n_touched += 1
        scratch[b, rat[e]] += 1
    zero = np.zeros(S, dtype=np.int64)
    dh = 0.0
    for t in range(n_touched):
        b = touched[t]
        row = scratch[b]
        dh += _block_term(counts, source, b, is_user, row, -1, logfact, S)
        dh -= _block_term(counts, source, b, is_user, zero, 0, logfact, S)
        dh += _block_term(counts, target, b, is_user, row, 1, logfact, S)
        dh -= _block_term(counts, target, b, is_user, zero, 0, logfact, S)
        for s in range(S):
            scratch[b, s] = 0
    return dh


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _apply_move(is_user, node, target, ptr, nbr, rat, other_group, group, counts):
    source = group[node]
    for e in range(ptr[node], ptr[node + 1]):
        b = other_group[nbr[e]]
        r = rat[e]
        if is_user:
            counts[source, b, r] -= 1
            counts[target, b, r] += 1
        else:
            counts[b, source, r] -= 1
            counts[b, target, r] += 1
    group[node] = target


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _seed_chain(seed):
    np.random.seed(seed)


@jit(nopython=True, nogil=True, cache=True)  # pragma: no cover
def _sweeps(n_sweeps, ug, ig, counts, uptr, unbr, urat, iptr, inbr, irat,
            logfact, scratch, touched, energy):
    n_users = len(ug)
    n_items = len(ig)
    cu = counts.shape[0]
    ci = counts.shape[1]
    accepted = 0
    for _ in range(n_sweeps * (n_users + n_items)):
        pick = np.random.randint(0, n_users + n_items)
        if pick < n_users:
            if cu < 2:
                continue
            node = pick
            source = ug[node]
            target = np.random.randint(0, cu - 1)
            if target >= source:
                target += 1
            dh = _delta_energy(True, node, source, target, uptr, unbr, urat, ig, counts,
                               logfact, scratch, touched)
            if dh <= 0.0 or np.random.random() < math.exp(-dh):
                _apply_move(True, node, target, uptr, unbr, urat, ig, ug, counts)
                energy += dh
                accepted += 1
        else:
            if ci < 2:
                continue
            node = pick - n_users
            source = ig[node]
            target = np.random.randint(0, ci - 1)
            if target >= source:
                target += 1
            dh = _delta_energy(False, node, source, target, iptr, inbr, irat, ug, counts,
                               logfact, scratch, touched)
            if dh <= 0.0 or np.random.random() < math.exp(-dh):
                _apply_move(False, node, target, iptr, inbr, irat, ug, ig, counts)
                energy += dh
                accepted += 1
    return energy, accepted


def propose_move(state: SbmState, rng: np.random.Generator) -> Move:
    """Uniform node (users and items pooled), uniform new group != current.

    Returns a zero-delta self-move only when the node's side has a single
    group, i.e. no proposal is possible.
    """
    n_u, n_i = state.data.n_users, state.data.n_items
    pick = int(rng.integers(n_u + n_i))
    is_user = pick < n_u
    node = pick if is_user else pick - n_u
    groups = state.user_group if is_user else state.item_group
    cap = state.n_user_groups if is_user else state.n_item_groups
    source = int(groups[node])
    if cap < 2:
        return Move(is_user, node, source, source, 0.0)
    target = int(rng.integers(cap - 1))
    if target >= source:
        target += 1
    return Move(is_user, node, source, target, state.delta_energy(is_user, node, target))


def mh_accept(delta: float, rng: np.random.Generator) -> bool:
    """Metropolis rule for target weight exp(-H)."""
    return delta <= 0.0 or rng.random() < math.exp(-delta)


def mh_step(state: SbmState, rng: np.random.Generator) -> bool:
    """Propose one move and apply it if accepted; returns the accept flag."""
    move = propose_move(state, rng)
    if move.source == move.target:
        return False
    if mh_accept(move.delta, rng):
        state.apply(move)
        return True
    return False


@dataclass
class SbmPosterior:
    """Partition samples collected from one or more chains.

    ``user_groups`` (T, N), ``item_groups`` (T, M) and ``counts``
    (T, Gu, Gi, |S|) hold the T sampled states.
    """

    user_groups: NDArray[np.int64]
    item_groups: NDArray[np.int64]
    counts: NDArray[np.int64]
    user_seen: NDArray[np.bool_]
    item_seen: NDArray[np.bool_]
    energies: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    acceptance_rate: float = float("nan")
    seconds_per_sweep: float = float("nan")

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def n_labels(self) -> int:
        return self.counts.shape[3]

    def predict_proba(self, users: ArrayLike, items: ArrayLike, seed: int = 0) -> NDArray[np.float64]:
        """Average of (n^r + 1)/(n + |S|) over samples, one row per query.

        Node indices outside the training index space are placed in a
        uniformly random group in every sample.
        """
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        T, cu, ci, S = self.counts.shape
        N, M = self.user_groups.shape[1], self.item_groups.shape[1]
        rng = np.random.default_rng(seed)
        u_in = (users >= 0) & (users < N)
        i_in = (items >= 0) & (items < M)
        out = np.zeros((len(users), S))
        for t in range(T):
            a = rng.integers(cu, size=len(users))
            b = rng.integers(ci, size=len(items))
            a[u_in] = self.user_groups[t, users[u_in]]
            b[i_in] = self.item_groups[t, items[i_in]]
            c = self.counts[t, a, b].astype(np.float64)
            out += (c + 1.0) / (c.sum(axis=1, keepdims=True) + S)
        return out / T

    def cold_start_mask(self, users: ArrayLike, items: ArrayLike) -> NDArray[np.bool_]:
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        N, M = len(self.user_seen), len(self.item_seen)
        u_ok = (users >= 0) & (users < N)
        i_ok = (items >= 0) & (items < M)
        u_ok[u_ok] = self.user_seen[users[u_ok]]
        i_ok[i_ok] = self.item_seen[items[i_ok]]
        return ~(u_ok & i_ok)

    @classmethod
    def merge(cls, chains: list["SbmPosterior"]) -> "SbmPosterior":
        """Pool samples of independent chains; equal sample counts mean equal weights."""
        first = chains[0]
        return cls(
            np.concatenate([c.user_groups for c in chains]),
            np.concatenate([c.item_groups for c in chains]),
            np.concatenate([c.counts for c in chains]),
            first.user_seen, first.item_seen,
            np.concatenate([c.energies for c in chains]),
            float(np.mean([c.acceptance_rate for c in chains])),
            float(np.mean([c.seconds_per_sweep for c in chains])),
        )


def run_chain(data: RatingsTable, config: McmcConfig, seed: int | None = None) -> SbmPosterior:
    """Burn in, then record ``n_samples`` states ``sample_stride_sweeps`` apart.

    One sweep is N + M proposed single-node moves.
    """
    import time

    seed = config.seed if seed is None else seed
    cu, ci = config.caps(data.n_users, data.n_items)
    rng = np.random.default_rng(seed)
    state = SbmState.random(data, cu, ci, rng)
    _seed_chain(int(rng.integers(2**31 - 1)))
    uptr, unbr, urat = state.user_adj
    iptr, inbr, irat = state.item_adj

    def advance(n):
        energy, acc = _sweeps(n, state.user_group, state.item_group, state.counts,
                              uptr, unbr, urat, iptr, inbr, irat, state.logfact,
                              state._scratch, state._touched, state.energy)
        state.energy = energy
        return acc

    t0 = time.perf_counter()
    accepted = advance(config.burn_in_sweeps)
    ugs, igs, cts, energies = [], [], [], []
    for _ in range(config.n_samples):
        accepted += advance(config.sample_stride_sweeps)
        ugs.append(state.user_group.copy())
        igs.append(state.item_group.copy())
        cts.append(state.counts.copy())
        energies.append(state.energy)
    n_sweeps = config.burn_in_sweeps + config.n_samples * config.sample_stride_sweeps
    elapsed = time.perf_counter() - t0
    # resync the incrementally tracked energy against a full recount
    drift = abs(state.energy - hamiltonian(state))
    if drift > 1e-6:
        log.warning("energy drift %.3g after %d sweeps", drift, n_sweeps)
    log.info("chain seed=%d: g_u=%d g_i=%d H=%.2f", seed, state.g_u, state.g_i, state.energy)
    return SbmPosterior(
        np.array(ugs), np.array(igs), np.array(cts),
        data.user_degree > 0, data.item_degree > 0,
        np.array(energies),
        accepted / max(1, n_sweeps * (data.n_users + data.n_items)),
        elapsed / n_sweeps,
    )


def sample_posterior(data: RatingsTable, config: McmcConfig = McmcConfig()) -> SbmPosterior:
    """Run ``config.n_chains`` chains with seeds split from ``config.seed``."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(config.n_chains)]
    chains = [run_chain(data, config, seed=s) for s in seeds]
    return chains[0] if len(chains) == 1 else SbmPosterior.merge(chains)


def sample_predictive(data: RatingsTable, queries: ArrayLike, config: McmcConfig = McmcConfig()) -> NDArray[np.float64]:
    """Posterior predictive rating distributions for (user, item) queries."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    post = sample_posterior(data, config)
    return post.predict_proba(queries[:, 0], queries[:, 1], seed=config.seed)
