"""Cross-validation protocol, metrics and report formatting.

Probabilistic algorithms (MMSBM, SBM) are scored with the most likely
label for accuracy and the median label for MAE.  Point algorithms are
rounded to the closest label for accuracy and scored on the raw value for
MAE.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import baselines, mmsbm, sbm
from .core import RatingsTable, median_indices, mode_indices

log = logging.getLogger(__name__)


# folds and metrics --------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignments: NDArray[np.int64]
    seed: int

    def test_index(self, fold: int) -> NDArray[np.int64]:
        return np.flatnonzero(self.assignments == fold)

    def train_index(self, fold: int) -> NDArray[np.int64]:
        return np.flatnonzero(self.assignments != fold)

    def split(self, data: RatingsTable, fold: int) -> tuple[RatingsTable, RatingsTable]:
        return data.subset(self.train_index(fold)), data.subset(self.test_index(fold))

    def fold_seed(self, fold: int) -> int:
        return int(np.random.SeedSequence([self.seed, fold]).generate_state(1)[0])


def make_folds(data: RatingsTable | int, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of the observations, then round-robin fold labels."""
    n = data if isinstance(data, int) else len(data)
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if n < n_folds:
        raise ValueError(f"{n} observations cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[perm] = np.arange(n) % n_folds
    assignments.setflags(write=False)
    return FoldPlan(n_folds, assignments, seed)


def _paired(predicted, actual):
    p = np.asarray(predicted)
    a = np.asarray(actual)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("nothing to score")
    return p, a


def accuracy(predicted: ArrayLike, actual: ArrayLike) -> float:
    """Fraction of exactly matching label indices."""
    p, a = _paired(predicted, actual)
    return float(np.mean(p == a))


def mae(predicted: ArrayLike, actual: ArrayLike) -> float:
    p, a = _paired(predicted, actual)
    return float(np.mean(np.abs(p.astype(np.float64) - a.astype(np.float64))))


def relative_improvement(acc_a: float, acc_b: float) -> float:
    """Percent improvement of accuracy ``acc_a`` over ``acc_b``."""
    if acc_b == 0:
        raise ZeroDivisionError("reference accuracy is zero")
    return (acc_a - acc_b) / acc_b * 100.0


# algorithms ---------------------------------------------------------------

@dataclass
class Predictions:
    """Output of one algorithm on one test split.

    Exactly one of ``dists`` (n, |S|) and ``values`` (n,) is set.
    ``fallback`` marks queries answered by a fallback rule.
    """

    dists: NDArray[np.float64] | None = None
    values: NDArray[np.float64] | None = None
    fallback: NDArray[np.bool_] | None = None
    seconds_per_iter: float = float("nan")
    notes: str = ""


class Algorithm(Protocol):
    name: str

    def fit_predict(self, train: RatingsTable, users: NDArray, items: NDArray, seed: int) -> Predictions: ...


@dataclass
class Naive:
    name: str = "naive"

    def fit_predict(self, train, users, items, seed):
        t0 = time.perf_counter()
        means = baselines.ItemMeans.fit(train)
        items = np.asarray(items)
        ok = (items >= 0) & (items < len(means.seen))
        fb = ~ok
        fb[ok] = ~means.seen[items[ok]]
        return Predictions(values=means.predict(items), fallback=fb,
                           seconds_per_iter=time.perf_counter() - t0)


@dataclass
class ItemItem:
    k: int = 50
    name: str = "itemitem"

    def fit_predict(self, train, users, items, seed):
        t0 = time.perf_counter()
        model = baselines.item_item_fit(train, self.k)
        values, fb = baselines.item_item_predict_many(model, train, users, items)
        return Predictions(values=values, fallback=fb, seconds_per_iter=time.perf_counter() - t0)


@dataclass
class MatrixFactorization:
    config: baselines.MfConfig = field(default_factory=baselines.MfConfig)
    name: str = "mf"

    def fit_predict(self, train, users, items, seed):
        t0 = time.perf_counter()
        model = baselines.mf_train(train, replace(self.config, seed=seed))
        elapsed = time.perf_counter() - t0
        values, fb = baselines.mf_predict_many(model, users, items, train.scale)
        return Predictions(values=values, fallback=fb, seconds_per_iter=elapsed / model.n_epochs)


@dataclass
class Mmsbm:
    config: mmsbm.EmConfig = field(default_factory=mmsbm.EmConfig)
    n_workers: int = 1
    name: str = "mmsbm"

    def fit_predict(self, train, users, items, seed):
        models = mmsbm.train_ensemble(train, replace(self.config, seed=seed), n_workers=self.n_workers)
        dists = mmsbm.predict_proba(models, users, items)
        n_conv = sum(m.converged for m in models)
        return Predictions(
            dists=dists, fallback=mmsbm.cold_start_mask(models[0], users, items),
            seconds_per_iter=float(np.mean([m.seconds_per_iter for m in models])),
            notes=f"K={self.config.K} L={self.config.L} runs={len(models)} converged={n_conv}",
        )


@dataclass
class Sbm:
    config: sbm.McmcConfig = field(default_factory=sbm.McmcConfig)
    name: str = "sbm"

    def fit_predict(self, train, users, items, seed):
        cfg = replace(self.config, seed=seed)
        post = sbm.sample_posterior(train, cfg)
        dists = post.predict_proba(users, items, seed=seed)
        cu, ci = cfg.caps(train.n_users, train.n_items)
        return Predictions(
            dists=dists, fallback=post.cold_start_mask(users, items),
            seconds_per_iter=post.seconds_per_sweep,
            notes=(f"caps={cu}x{ci} burn_in={cfg.burn_in_sweeps} samples={cfg.n_samples}"
                   f" stride={cfg.sample_stride_sweeps} chains={cfg.n_chains}"
                   f" accept={post.acceptance_rate:.3f}"),
        )


# reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    algorithm: str
    fold_accuracy: list[float] = field(default_factory=list)
    fold_mae: list[float] = field(default_factory=list)
    fold_fallback: list[float] = field(default_factory=list)
    fold_cold_start: list[float] = field(default_factory=list)
    fold_seconds_per_iter: list[float] = field(default_factory=list)
    notes: str = ""
    error: str | None = None

    @staticmethod
    def _mean_se(xs: Sequence[float]) -> tuple[float, float]:
        if not xs:
            return math.nan, math.nan
        arr = np.asarray(xs, dtype=np.float64)
        se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
        return float(arr.mean()), se

    @property
    def accuracy(self) -> tuple[float, float]:
        """(mean, standard error) over folds."""
        return self._mean_se(self.fold_accuracy)

    @property
    def mae(self) -> tuple[float, float]:
        return self._mean_se(self.fold_mae)


def score(pred: Predictions, test: RatingsTable) -> tuple[float, float]:
    """(accuracy, MAE) of one prediction batch against the test labels."""
    vals = test.scale.array
    if pred.dists is not None:
        acc = accuracy(mode_indices(pred.dists), test.ratings)
        err = mae(vals[median_indices(pred.dists)], vals[test.ratings])
    else:
        acc = accuracy(test.scale.nearest_index(pred.values), test.ratings)
        err = mae(pred.values, vals[test.ratings])
    return acc, err


def run_benchmark(
    data: RatingsTable,
    algorithms: Sequence[Algorithm],
    plan: FoldPlan,
    n_workers: int = 1,
) -> dict[str, EvalReport]:
    """Train and score every algorithm on every fold of the plan.

    A failing algorithm gets its error recorded in its report; the others
    keep running.
    """
    reports = {a.name: EvalReport(a.name) for a in algorithms}
    splits = [plan.split(data, f) for f in range(plan.n_folds)]

    def job(alg, f):
        train, test = splits[f]
        t0 = time.perf_counter()
        pred = alg.fit_predict(train, test.users, test.items, plan.fold_seed(f))
        acc, err = score(pred, test)
        log.info("%s fold %d: accuracy %.4f MAE %.4f (%.1fs)", alg.name, f, acc, err,
                 time.perf_counter() - t0)
        return pred, acc, err

    tasks = [(a, f) for a in algorithms for f in range(plan.n_folds)]
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            futures = [pool.submit(job, a, f) for a, f in tasks]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # reported per algorithm below
                    outcomes.append(exc)
    else:
        outcomes = []
        for a, f in tasks:
            if reports[a.name].error is not None:
                outcomes.append(None)
                continue
            try:
                outcomes.append(job(a, f))
            except Exception as exc:
                log.error("%s failed on fold %d: %s", a.name, f, exc)
                reports[a.name].error = f"fold {f}: {type(exc).__name__}: {exc}"
                outcomes.append(None)

    for (a, f), out in zip(tasks, outcomes):
        rep = reports[a.name]
        if isinstance(out, Exception):
            rep.error = rep.error or f"fold {f}: {type(out).__name__}: {out}"
            continue
        if out is None or rep.error is not None:
            continue
        pred, acc, err = out
        test = splits[f][1]
        train = splits[f][0]
        rep.fold_accuracy.append(acc)
        rep.fold_mae.append(err)
        rep.fold_fallback.append(float(np.mean(pred.fallback)) if pred.fallback is not None else 0.0)
        cold = (train.user_degree[test.users] == 0) | (train.item_degree[test.items] == 0)
        rep.fold_cold_start.append(float(np.mean(cold)))
        rep.fold_seconds_per_iter.append(pred.seconds_per_iter)
        rep.notes = pred.notes
    for rep in reports.values():
        if rep.error is not None:
            rep.fold_accuracy.clear()
            rep.fold_mae.clear()
    return reports


def improvements(reports: dict[str, EvalReport], reference: str = "mf") -> dict[str, float]:
    """Relative accuracy improvement (%) of every algorithm over ``reference``."""
    ref = reports.get(reference)
    if ref is None or ref.error is not None or not ref.fold_accuracy:
        return {}
    base = ref.accuracy[0]
    return {name: relative_improvement(r.accuracy[0], base)
            for name, r in reports.items() if name != reference and r.error is None and r.fold_accuracy}


def format_table(reports: dict[str, EvalReport], reference: str = "mf") -> str:
    """Aligned plain-text summary, one line per algorithm."""
    imp = improvements(reports, reference)
    header = ["algorithm", "accuracy", "+-se", "MAE", "+-se", "fallback", "cold", f"vs {reference} %", "s/iter"]
    rows = [header]
    for name, r in reports.items():
        if r.error is not None:
            rows.append([name, "FAILED", "", "", "", "", "", "", r.error])
            continue
        (a, ase), (m, mse) = r.accuracy, r.mae
        rows.append([
            name, f"{a:.4f}", f"{ase:.4f}", f"{m:.4f}", f"{mse:.4f}",
            f"{np.mean(r.fold_fallback):.4f}", f"{np.mean(r.fold_cold_start):.4f}",
            f"{imp[name]:+.2f}" if name in imp else "",
            f"{np.nanmean(r.fold_seconds_per_iter):.4g}" if r.fold_seconds_per_iter else "",
        ])
    widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    notes = [f"  {name}: {r.notes}" for name, r in reports.items() if r.notes]
    return "\n".join(lines + (["notes:"] + notes if notes else [])) + "\n"


def report_rows(reports: dict[str, EvalReport], reference: str = "mf", timing: bool = True) -> list[list[str]]:
    """Machine-readable rows: one per algorithm x fold plus mean/se rows."""
    imp = improvements(reports, reference)
    head = ["algorithm", "fold", "accuracy", "mae", "fallback_rate", "cold_start_rate",
            f"improvement_vs_{reference}_pct"]
    if timing:
        head.append("seconds_per_iter")
    rows = [head]
    for name, r in reports.items():
        if r.error is not None:
            rows.append([name, "error", r.error] + [""] * (len(head) - 3))
            continue
        for f, (a, m) in enumerate(zip(r.fold_accuracy, r.fold_mae)):
            row = [name, str(f), repr(a), repr(m), repr(r.fold_fallback[f]), repr(r.fold_cold_start[f]), ""]
            if timing:
                row.append(repr(r.fold_seconds_per_iter[f]))
            rows.append(row)
        (a, ase), (m, mse) = r.accuracy, r.mae
        mean_row = [name, "mean", repr(a), repr(m), repr(float(np.mean(r.fold_fallback))),
                    repr(float(np.mean(r.fold_cold_start))), repr(imp[name]) if name in imp else ""]
        se_row = [name, "se", repr(ase), repr(mse), "", "", ""]
        if timing:
            mean_row.append(repr(float(np.nanmean(r.fold_seconds_per_iter))))
            se_row.append("")
        rows += [mean_row, se_row]
    return rows


def write_report(reports: dict[str, EvalReport], path, reference: str = "mf",
                 delimiter: str = "\t", timing: bool = True) -> None:
    buf = io.StringIO()
    csv.writer(buf, delimiter=delimiter, lineterminator="\n").writerows(report_rows(reports, reference, timing))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
