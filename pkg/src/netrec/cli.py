"""``netrec`` command line: ingest-check, train, predict, benchmark, synth.

Settings are resolved as command-line flags, then ``--config`` (key=value
lines, keys named like the long flags with dashes or underscores), then
built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluation, mmsbm, sbm
from .core import RatingScale, RatingsTable, generate_synthetic, mean_values, median_indices, mode_indices
from .io import (DatasetError, DatasetSpec, ModelFormatError, SavedModel, load_model,
                 parse_dataset, save_model, write_dataset)

log = logging.getLogger("netrec")

ALGOS = ("mmsbm", "sbm", "itemitem", "mf", "naive")

DEFAULTS = {
    "delimiter": "\t",
    "columns": "0,1,2",
    "skip_header": False,
    "scale": None,
    "algo": "mmsbm",
    "algos": ",".join(ALGOS),
    "K": 10,
    "L": 10,
    "runs": 500,
    "max_iters": 500,
    "tol": 1e-6,
    "check_every": 10,
    "k_neighbors": 50,
    "mf_dim": 50,
    "mf_rate": 0.002,
    "mf_epochs": 30,
    "mf_reg": 0.0,
    "mf_schedule": "sequential",
    "burn_in": 200,
    "samples": 100,
    "stride": 5,
    "chains": 1,
    "max_groups_users": None,
    "max_groups_items": None,
    "seed": 0,
    "folds": 5,
    "reference": "mf",
    "threads": os.cpu_count() or 1,
    "users": 300,
    "items": 300,
    "labels": 5,
    "density": 0.1,
    "alpha": 1.0,
    "expect": None,
    "verbose": 0,
}


class CliError(Exception):
    pass


# argument parsing ---------------------------------------------------------

def _add_dataset(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset format")
    g.add_argument("--dataset", help="delimited ratings file")
    g.add_argument("--delimiter", help=r"field separator (default tab; 'ws' for any whitespace)")
    g.add_argument("--columns", help="0-based user,item,rating columns (default 0,1,2)")
    g.add_argument("--skip-header", action="store_true", default=argparse.SUPPRESS)
    g.add_argument("--scale", help="comma separated rating values (default: inferred)")


def _add_algo(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--K", type=int, help="MMSBM user groups (default 10)")
    g.add_argument("--L", type=int, help="MMSBM item groups (default 10)")
    g.add_argument("--runs", type=int, help="independent EM runs to average (default 500)")
    g.add_argument("--max-iters", type=int)
    g.add_argument("--tol", type=float)
    g.add_argument("--check-every", type=int)
    g.add_argument("--k-neighbors", type=int, help="item-item neighbourhood size (default 50)")
    g.add_argument("--mf-dim", type=int, help="MF latent dimension (default 50)")
    g.add_argument("--mf-rate", type=float, help="MF learning rate (default 0.002)")
    g.add_argument("--mf-epochs", type=int, help="MF epochs per feature (default 30)")
    g.add_argument("--mf-reg", type=float)
    g.add_argument("--mf-schedule", choices=("sequential", "joint"))
    g.add_argument("--burn-in", type=int, help="SBM burn-in sweeps (default 200)")
    g.add_argument("--samples", type=int, help="SBM recorded samples (default 100)")
    g.add_argument("--stride", type=int, help="SBM sweeps between samples (default 5)")
    g.add_argument("--chains", type=int)
    g.add_argument("--max-groups-users", type=int)
    g.add_argument("--max-groups-items", type=int)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, help="worker limit (default: processor count)")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("-v", "--verbose", action="count", help="more log output on stderr")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netrec", description=__doc__.splitlines()[0],
                                 argument_default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", help="parse a dataset and print its statistics",
                       argument_default=argparse.SUPPRESS)
    _add_dataset(p)
    _add_common(p)
    p.add_argument("--expect", help="N,M,R that the dataset must match")

    p = sub.add_parser("train", help="fit one algorithm and save it", argument_default=argparse.SUPPRESS)
    _add_dataset(p)
    _add_algo(p)
    _add_common(p)
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--out", help="model file to write")

    p = sub.add_parser("predict", help="answer (user, item) queries with a saved model",
                       argument_default=argparse.SUPPRESS)
    _add_common(p)
    p.add_argument("--model", help="model file from 'train'")
    p.add_argument("--queries", help="file with raw user and item ids in the first two columns")
    p.add_argument("--delimiter", help="query and output separator (default tab)")
    p.add_argument("--skip-header", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--out", help="output file (default stdout)")

    p = sub.add_parser("benchmark", help="k-fold comparison of several algorithms",
                       argument_default=argparse.SUPPRESS)
    _add_dataset(p)
    _add_algo(p)
    _add_common(p)
    p.add_argument("--algos", help="comma separated subset of " + ",".join(ALGOS))
    p.add_argument("--folds", type=int, help="number of folds (default 5)")
    p.add_argument("--reference", help="algorithm that relative improvements refer to (default mf)")
    p.add_argument("--out", help="output directory for report.tsv, timing.tsv, summary.txt")

    p = sub.add_parser("synth", help="sample a dataset from a random planted model",
                       argument_default=argparse.SUPPRESS)
    _add_common(p)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--K", type=int, help="planted user groups (default 10)")
    p.add_argument("--L", type=int, help="planted item groups (default 10)")
    p.add_argument("--labels", type=int, help="number of rating labels 1..S (default 5)")
    p.add_argument("--density", type=float, help="observed fraction of pairs (default 0.1)")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration of memberships (default 1)")
    p.add_argument("--delimiter", help="output separator (default tab)")
    p.add_argument("--out", help="ratings file to write")
    p.add_argument("--params-out", help="also save the planted parameters as a model file")
    return ap


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def read_config_file(path: str | Path, parser: argparse.ArgumentParser) -> dict:
    """Typed settings from a key=value file, checked against ``parser``."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise CliError(f"{path}:{lineno}: unknown setting {key!r} for this command")
        if isinstance(action, (argparse._StoreTrueAction, argparse._CountAction)):
            out[dest] = _parse_bool(value) if isinstance(action, argparse._StoreTrueAction) else int(value)
        else:
            try:
                out[dest] = action.type(value) if action.type else value
            except ValueError:
                raise CliError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
            if action.choices and out[dest] not in action.choices:
                raise CliError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
    return out


def resolve(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse ``argv`` and merge flags over config file over defaults."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    cfg = read_config_file(flags["config"], sub) if "config" in flags else {}
    merged = {k: v for k, v in DEFAULTS.items()}
    merged.update(cfg)
    merged.update(flags)
    merged["command"] = ns.command
    return argparse.Namespace(**merged)


# helpers ------------------------------------------------------------------

def _delimiter(text: str | None) -> str | None:
    if text in ("ws", "whitespace"):
        return None
    if text in ("\\t", "tab"):
        return "\t"
    return text


def _dataset(args) -> RatingsTable:
    if not getattr(args, "dataset", None):
        raise CliError("--dataset is required")
    try:
        cols = [int(c) for c in args.columns.split(",")]
    except ValueError:
        raise CliError(f"--columns must be three integers, got {args.columns!r}") from None
    if len(cols) != 3:
        raise CliError("--columns needs exactly user,item,rating")
    scale = None
    if args.scale:
        try:
            scale = RatingScale(tuple(float(v) for v in args.scale.split(",")))
        except ValueError as exc:
            raise CliError(f"--scale: {exc}") from None
    spec = DatasetSpec(args.dataset, _delimiter(args.delimiter), *cols,
                       skip_header=args.skip_header, scale=scale)
    return parse_dataset(spec)


def em_config(args) -> mmsbm.EmConfig:
    return mmsbm.EmConfig(K=args.K, L=args.L, max_iters=args.max_iters, tol=args.tol,
                          check_every=args.check_every, n_runs=args.runs, seed=args.seed)


def mf_config(args) -> baselines.MfConfig:
    return baselines.MfConfig(K=args.mf_dim, learning_rate=args.mf_rate, n_epochs=args.mf_epochs,
                              regularization=args.mf_reg, schedule=args.mf_schedule, seed=args.seed)


def mcmc_config(args) -> sbm.McmcConfig:
    return sbm.McmcConfig(max_groups_users=args.max_groups_users, max_groups_items=args.max_groups_items,
                          burn_in_sweeps=args.burn_in, n_samples=args.samples,
                          sample_stride_sweeps=args.stride, n_chains=args.chains, seed=args.seed)


def _threads(args) -> int:
    if args.threads < 1:
        raise CliError("--threads must be >= 1")
    return args.threads


# commands -----------------------------------------------------------------

def cmd_ingest_check(args) -> int:
    data = _dataset(args)
    deg_u, deg_i = data.user_degree, data.item_degree
    print(f"users\t{data.n_users}")
    print(f"items\t{data.n_items}")
    print(f"ratings\t{len(data)}")
    print(f"scale\t{','.join(data.scale.labels)}")
    print(f"density\t{len(data) / (data.n_users * data.n_items):.6g}")
    print(f"user_degree_min_median_max\t{deg_u.min()}\t{np.median(deg_u):g}\t{deg_u.max()}")
    print(f"item_degree_min_median_max\t{deg_i.min()}\t{np.median(deg_i):g}\t{deg_i.max()}")
    hist = np.bincount(data.ratings, minlength=data.scale.size)
    print("histogram\t" + "\t".join(f"{lab}:{c}" for lab, c in zip(data.scale.labels, hist)))
    if args.expect:
        want = tuple(int(x) for x in args.expect.split(","))
        got = (data.n_users, data.n_items, len(data))
        if want != got:
            log.error("expected N,M,R = %s, found %s", want, got)
            return 1
    return 0


def cmd_train(args) -> int:
    if not getattr(args, "out", None):
        raise CliError("--out is required")
    data = _dataset(args)
    algo = args.algo
    if algo == "mmsbm":
        cfg = em_config(args)

        def progress(r, m):
            checks = m.loglik_trace[cfg.check_every - 1::cfg.check_every]
            log.info("run %d: %d iterations, converged=%s, logL %.6f, %.4g s/iter",
                     r, m.n_iter, m.converged, m.loglik_trace[-1], m.seconds_per_iter)
            log.debug("run %d checkpoint logL: %s", r, " ".join(f"{x:.6f}" for x in checks))

        model: object = mmsbm.train_ensemble(data, cfg, n_workers=_threads(args), progress=progress)
    elif algo == "sbm":
        model = sbm.sample_posterior(data, mcmc_config(args))
        log.info("sbm: %d samples, acceptance %.4f, %.4g s/sweep", model.n_samples,
                 model.acceptance_rate, model.seconds_per_sweep)
        log.info("sbm energy trace: %s", " ".join(f"{e:.3f}" for e in model.energies))
    elif algo == "mf":
        import time

        t0 = time.perf_counter()
        model = baselines.mf_train(data, mf_config(args))
        per = (time.perf_counter() - t0) / model.n_epochs
        log.info("mf: %d epochs, %.4g s/epoch", model.n_epochs, per)
        log.info("mf train rmse trace: %s", " ".join(f"{x:.5f}" for x in model.train_rmse))
    elif algo == "itemitem":
        model = baselines.item_item_fit(data, args.k_neighbors)
    else:
        model = baselines.ItemMeans.fit(data)
    save_model(SavedModel(algo, model, data.scale, data.user_ids, data.item_ids,
                          data if algo == "itemitem" else None), args.out)
    log.info("wrote %s", args.out)
    return 0


def _read_queries(path, delimiter, skip_header) -> list[tuple[str, str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read queries: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines, start=1):
        if (skip_header and lineno == 1) or not line.strip():
            continue
        parts = line.split(delimiter)
        if len(parts) < 2:
            raise CliError(f"{path}:{lineno}: expected user and item ids")
        out.append((parts[0].strip(), parts[1].strip()))
    if not out:
        raise CliError(f"{path}: no queries")
    return out


def _indices(saved: SavedModel, queries, n_users: int, n_items: int):
    if saved.user_ids is not None and saved.item_ids is not None:
        ui, ii = saved.user_index(), saved.item_index()
        users = np.array([ui.get(u, -1) for u, _ in queries], dtype=np.int64)
        items = np.array([ii.get(i, -1) for _, i in queries], dtype=np.int64)
        return users, items
    # models without an id table are indexed by position
    try:
        users = np.array([int(u) for u, _ in queries], dtype=np.int64)
        items = np.array([int(i) for _, i in queries], dtype=np.int64)
    except ValueError:
        raise CliError("model has no id table, so queries must be integer indices") from None
    users[(users < 0) | (users >= n_users)] = -1
    items[(items < 0) | (items >= n_items)] = -1
    return users, items


def _model_dims(saved: SavedModel) -> tuple[int, int]:
    m = saved.model
    if saved.kind == "mmsbm":
        return m[0].n_users, m[0].n_items
    if saved.kind == "sbm":
        return len(m.user_seen), len(m.item_seen)
    if saved.kind == "mf":
        return len(m.user_seen), len(m.item_seen)
    if saved.kind == "itemitem":
        return saved.train.n_users, saved.train.n_items
    return (len(saved.user_ids) if saved.user_ids else 0), len(m.means)


def cmd_predict(args) -> int:
    for name in ("model", "queries"):
        if not getattr(args, name, None):
            raise CliError(f"--{name} is required")
    saved = load_model(args.model)
    delim = _delimiter(args.delimiter) or "\t"
    queries = _read_queries(args.queries, _delimiter(args.delimiter), args.skip_header)
    n_users, n_items = _model_dims(saved)
    users, items = _indices(saved, queries, n_users, n_items)
    scale = saved.scale
    m = saved.model
    dists = values = None
    if saved.kind == "mmsbm":
        dists = mmsbm.predict_proba(m, users, items)
        cold = mmsbm.cold_start_mask(m[0], users, items)
    elif saved.kind == "sbm":
        dists = m.predict_proba(users, items, seed=args.seed)
        cold = m.cold_start_mask(users, items)
    elif saved.kind == "mf":
        values, cold = baselines.mf_predict_many(m, users, items, scale)
    elif saved.kind == "itemitem":
        values, _ = baselines.item_item_predict_many(m, saved.train, users, items)
        cold = (users < 0) | (items < 0)
        cold[~cold] = (saved.train.user_degree[users[~cold]] == 0) | (saved.train.item_degree[items[~cold]] == 0)
    else:
        values = m.predict(items)
        cold = (users < 0) | (items < 0)
        cold[~cold] = ~m.seen[items[~cold]]

    head = ["user", "item", "cold_start"] + [f"p_{lab}" for lab in scale.labels] + ["mode", "median", "mean", "value"]
    rows = [delim.join(head)]
    if dists is not None:
        mo, me, mu = mode_indices(dists), median_indices(dists), mean_values(dists, scale)
    for n, (u, i) in enumerate(queries):
        if dists is not None:
            cells = [repr(float(p)) for p in dists[n]]
            cells += [scale.labels[mo[n]], scale.labels[me[n]], repr(float(mu[n])), ""]
        else:
            cells = [""] * scale.size + ["", "", "", repr(float(values[n]))]
        rows.append(delim.join([u, i, str(int(cold[n]))] + cells))
    text = "\n".join(rows) + "\n"
    if getattr(args, "out", None):
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def make_algorithms(args, names) -> list:
    algs = []
    for name in names:
        if name == "naive":
            algs.append(evaluation.Naive())
        elif name == "itemitem":
            algs.append(evaluation.ItemItem(args.k_neighbors))
        elif name == "mf":
            algs.append(evaluation.MatrixFactorization(mf_config(args)))
        elif name == "mmsbm":
            algs.append(evaluation.Mmsbm(em_config(args), n_workers=_threads(args)))
        elif name == "sbm":
            algs.append(evaluation.Sbm(mcmc_config(args)))
        else:
            raise CliError(f"unknown algorithm {name!r}; choose from {', '.join(ALGOS)}")
    return algs


def cmd_benchmark(args) -> int:
    if not getattr(args, "out", None):
        raise CliError("--out is required")
    data = _dataset(args)
    names = [n.strip() for n in args.algos.split(",") if n.strip()]
    if len(set(names)) != len(names):
        raise CliError("--algos lists an algorithm twice")
    algs = make_algorithms(args, names)
    plan = evaluation.make_folds(data, args.folds, args.seed)
    reports = evaluation.run_benchmark(data, algs, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(reports, out / "report.tsv", args.reference, timing=False)
    timing = [["algorithm", "fold", "seconds_per_iter"]]
    for name, r in reports.items():
        timing += [[name, str(f), repr(t)] for f, t in enumerate(r.fold_seconds_per_iter)]
    (out / "timing.tsv").write_text("".join("\t".join(row) + "\n" for row in timing), encoding="utf-8")
    table = evaluation.format_table(reports, args.reference)
    (out / "summary.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    failed = [name for name, r in reports.items() if r.error is not None]
    for name in failed:
        log.error("%s failed: %s", name, reports[name].error)
    return 1 if failed else 0


def cmd_synth(args) -> int:
    if not getattr(args, "out", None):
        raise CliError("--out is required")
    if args.alpha <= 0:
        raise CliError("--alpha must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
    theta = rng.dirichlet(np.full(args.K, args.alpha), size=args.users)
    eta = rng.dirichlet(np.full(args.L, args.alpha), size=args.items)
    Q = rng.dirichlet(np.ones(args.labels), size=(args.K, args.L)).transpose(2, 0, 1).copy()
    data = generate_synthetic(args.users, args.items, theta, eta, Q, args.density,
                              seed=int(np.random.SeedSequence([args.seed, 1]).generate_state(1)[0]))
    write_dataset(data, args.out, _delimiter(args.delimiter) or "\t")
    log.info("wrote %d ratings (N=%d M=%d) to %s", len(data), data.n_users, data.n_items, args.out)
    if getattr(args, "params_out", None):
        planted = mmsbm.MmsbmModel(theta, eta, Q, data.user_degree > 0, data.item_degree > 0,
                                   data.rating_histogram())
        save_model(SavedModel("mmsbm", [planted], data.scale), args.params_out)
    return 0


COMMANDS = {
    "ingest-check": cmd_ingest_check,
    "train": cmd_train,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = resolve(argv)
    except CliError as exc:
        print(f"netrec: error: {exc}", file=sys.stderr)
        return 2
    level = logging.WARNING - 10 * min(int(args.verbose or 0) + 1, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        return COMMANDS[args.command](args)
    except (CliError, DatasetError, ModelFormatError, ValueError, FloatingPointError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
