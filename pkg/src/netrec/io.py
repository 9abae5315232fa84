"""Dataset parsing and model persistence.

Model files are line-oriented text::

    netrec-model <version>
    kind <kind>
    <key> <value ...>            # free-form metadata, one key per line
    ...
    array <name> <dtype> <dim0> [<dim1> ...]
    <row>                        # one line per leading index, space separated
    ...
    strings <name> <count>
    <string>                     # one per line
    ...
    end

Floats are written with ``repr`` (shortest round-trip form), so a
save/load cycle reproduces every parameter bit for bit.  Arrays with more
than two dimensions are written as a 2-D view (first axis by the rest).
Wall-clock timings are not persisted, so equal seeds give identical files.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import ItemItemModel, ItemMeans, MfModel
from .core import RatingScale, RatingsTable
from .mmsbm import MmsbmModel
from .sbm import SbmPosterior

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = "netrec-model"


class DatasetError(ValueError):
    """Malformed or out-of-scale input data."""


class ModelFormatError(ValueError):
    """Unreadable, truncated or version-mismatched model file."""


# datasets -----------------------------------------------------------------

@dataclass
class DatasetSpec:
    path: str | Path
    delimiter: str | None = "\t"
    user_col: int = 0
    item_col: int = 1
    rating_col: int = 2
    skip_header: bool = False
    scale: RatingScale | None = None


def infer_scale(values: Iterable[float]) -> RatingScale:
    """Sorted distinct values as the rating scale."""
    distinct = sorted(set(float(v) for v in values))
    if not distinct:
        raise DatasetError("cannot infer a rating scale from no ratings")
    if len(distinct) > 20:
        warnings.warn(f"{len(distinct)} distinct rating values; the data may be continuous",
                      stacklevel=2)
    return RatingScale(tuple(distinct))


def parse_dataset(spec: DatasetSpec) -> RatingsTable:
    """Read a delimited ratings file into a dense-indexed RatingsTable.

    Raw user and item ids are kept as strings and remapped to indices in
    order of first appearance.  Repeated (user, item) pairs keep the last
    rating.
    """
    path = Path(spec.path)
    if not path.is_file():
        raise DatasetError(f"no such dataset file: {path}")
    need = max(spec.user_col, spec.item_col, spec.rating_col) + 1
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, raw = [], [], []
    lines = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if spec.skip_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(spec.delimiter)
            if len(parts) < need:
                raise DatasetError(f"{path}:{lineno}: expected at least {need} fields, got {len(parts)}")
            try:
                value = float(parts[spec.rating_col])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: rating {parts[spec.rating_col]!r} is not numeric") from None
            u = user_index.setdefault(parts[spec.user_col].strip(), len(user_index))
            i = item_index.setdefault(parts[spec.item_col].strip(), len(item_index))
            users.append(u)
            items.append(i)
            raw.append(value)
            lines.append(lineno)
    if not raw:
        raise DatasetError(f"{path}: no ratings found")

    scale = spec.scale or infer_scale(raw)
    lookup = {v: idx for idx, v in enumerate(scale.values)}
    ratings = []
    for value, lineno in zip(raw, lines):
        idx = lookup.get(value)
        if idx is None:
            try:
                idx = scale.index_of(value)
            except KeyError:
                raise DatasetError(
                    f"{path}:{lineno}: rating {value:g} is outside the scale {list(scale.labels)}"
                ) from None
        ratings.append(idx)
    table = RatingsTable(users, items, ratings, scale,
                         n_users=len(user_index), n_items=len(item_index),
                         user_ids=list(user_index), item_ids=list(item_index))
    log.info("parsed %s: N=%d M=%d |R|=%d", path, table.n_users, table.n_items, len(table))
    return table


def write_dataset(table: RatingsTable, path: str | Path, delimiter: str = "\t") -> None:
    """Write observations as ``user<delim>item<delim>rating`` using raw ids."""
    uid = table.user_ids or [str(u) for u in range(table.n_users)]
    iid = table.item_ids or [str(i) for i in range(table.n_items)]
    labels = table.scale.labels
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, r in table.observations:
            fh.write(f"{uid[u]}{delimiter}{iid[i]}{delimiter}{labels[r]}\n")


# model files --------------------------------------------------------------

@dataclass
class ModelFile:
    """Generic content of a model file: metadata, numeric arrays, string lists."""

    kind: str
    meta: dict[str, list[str]] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    strings: dict[str, list[str]] = field(default_factory=dict)


def _fmt(x, kind: str) -> str:
    if kind == "f":
        return repr(float(x))
    return str(int(x))


def write_model_file(mf: ModelFile, path: str | Path) -> None:
    out = [f"{MAGIC} {FORMAT_VERSION}", f"kind {mf.kind}"]
    for key, vals in mf.meta.items():
        out.append(" ".join([key, *map(str, vals)]))
    for name, arr in mf.arrays.items():
        arr = np.asarray(arr)
        kind = "f" if arr.dtype.kind == "f" else ("b" if arr.dtype.kind == "b" else "i")
        out.append(" ".join(["array", name, kind, *map(str, arr.shape)]))
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in rows:
            out.append(" ".join(_fmt(x, kind) for x in row.tolist()))
    for name, vals in mf.strings.items():
        out.append(f"strings {name} {len(vals)}")
        for s in vals:
            if "\n" in s:
                raise ValueError("identifiers cannot contain newlines")
            out.append(s)
    out.append("end")
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(out) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_model_file(path: str | Path) -> ModelFile:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != MAGIC:
        raise ModelFormatError(f"{path}: not a {MAGIC} file")
    if head[1] != str(FORMAT_VERSION):
        raise ModelFormatError(f"{path}: format version {head[1]} unsupported (expected {FORMAT_VERSION})")
    if len(lines) < 2 or not lines[1].startswith("kind "):
        raise ModelFormatError(f"{path}: missing kind line")
    if "end" not in (ln.strip() for ln in lines[-3:]):
        raise ModelFormatError(f"{path}: truncated (no end marker)")
    mf = ModelFile(lines[1].split()[1])
    pos = 2
    ended = False
    try:
        while pos < len(lines):
            line = lines[pos]
            pos += 1
            if line == "end":
                ended = True
                break
            if not line:
                continue
            fields = line.split(" ")
            if fields[0] == "array":
                name, kind, shape = fields[1], fields[2], tuple(int(x) for x in fields[3:])
                n_rows = shape[0] if len(shape) > 1 else 1
                if pos + n_rows > len(lines):
                    raise ModelFormatError(f"{path}: array {name} is truncated")
                conv = float if kind == "f" else int
                data = [conv(x) for row in lines[pos:pos + n_rows] for x in row.split(" ") if x != ""]
                pos += n_rows
                if len(data) != int(np.prod(shape)):
                    raise ModelFormatError(f"{path}: array {name} has {len(data)} values, expected shape {shape}")
                dtype = {"f": np.float64, "i": np.int64, "b": bool}[kind]
                mf.arrays[name] = np.array(data, dtype=dtype).reshape(shape)
            elif fields[0] == "strings":
                name, count = fields[1], int(fields[2])
                if pos + count > len(lines):
                    raise ModelFormatError(f"{path}: string list {name} is truncated")
                mf.strings[name] = lines[pos:pos + count]
                pos += count
            else:
                mf.meta[fields[0]] = fields[1:]
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}:{pos}: malformed line ({exc})") from exc
    if not ended:
        raise ModelFormatError(f"{path}: truncated (no end marker)")
    return mf


def _scale_meta(scale: RatingScale) -> dict[str, list[str]]:
    return {"scale": [repr(v) for v in scale.values], "labels": list(scale.labels)}


def _scale_from(mf: ModelFile) -> RatingScale:
    return RatingScale(tuple(float(v) for v in mf.meta["scale"]), tuple(mf.meta["labels"]))


@dataclass
class SavedModel:
    """A trained model plus what is needed to answer raw-id queries."""

    kind: str
    model: object
    scale: RatingScale
    user_ids: list[str] | None = None
    item_ids: list[str] | None = None
    train: RatingsTable | None = None  # item-item needs the training ratings

    def user_index(self) -> dict[str, int]:
        return {u: n for n, u in enumerate(self.user_ids or [])}

    def item_index(self) -> dict[str, int]:
        return {i: n for n, i in enumerate(self.item_ids or [])}


def save_model(saved: SavedModel, path: str | Path) -> None:
    mf = ModelFile(saved.kind, meta=_scale_meta(saved.scale))
    m = saved.model
    if saved.kind == "mmsbm":
        models: list[MmsbmModel] = list(m)
        mf.meta["n_runs"] = [str(len(models))]
        mf.meta["dims"] = [str(x) for x in (models[0].n_users, models[0].n_items, models[0].K, models[0].L)]
        for r, mm in enumerate(models):
            p = f"run{r}."
            mf.arrays[p + "theta"] = mm.theta
            mf.arrays[p + "eta"] = mm.eta
            mf.arrays[p + "Q"] = mm.Q
            mf.arrays[p + "user_seen"] = mm.user_seen
            mf.arrays[p + "item_seen"] = mm.item_seen
            mf.arrays[p + "rating_hist"] = mm.rating_hist
            mf.arrays[p + "loglik_trace"] = np.asarray(mm.loglik_trace, dtype=np.float64)
            mf.meta[p + "status"] = [str(int(mm.converged)), str(mm.n_iter)]
    elif saved.kind == "sbm":
        post: SbmPosterior = m
        mf.arrays.update(user_groups=post.user_groups, item_groups=post.item_groups,
                         counts=post.counts, user_seen=post.user_seen, item_seen=post.item_seen,
                         energies=post.energies)
        mf.meta["acceptance_rate"] = [repr(post.acceptance_rate)]
    elif saved.kind == "mf":
        mf.arrays.update(P=m.P, Qf=m.Qf, user_seen=m.user_seen, item_seen=m.item_seen,
                         train_rmse=np.asarray(m.train_rmse, dtype=np.float64))
        mf.meta["mf"] = [repr(m.global_mean), repr(m.learning_rate), str(m.n_epochs)]
    elif saved.kind in ("itemitem", "naive"):
        means: ItemMeans = m.item_means if saved.kind == "itemitem" else m
        mf.arrays.update(item_means=means.means, item_seen=means.seen)
        mf.meta["global_mean"] = [repr(means.global_mean)]
        if saved.kind == "itemitem":
            mf.meta["k"] = [str(m.k)]
            lengths = np.array([len(n) for n in m.neighbors], dtype=np.int64)
            mf.arrays["neighbor_ptr"] = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
            mf.arrays["neighbors"] = (np.concatenate(m.neighbors) if len(m.neighbors) else np.zeros(0)).astype(np.int64)
            mf.arrays["sims"] = (np.concatenate(m.sims) if len(m.sims) else np.zeros(0)).astype(np.float64)
            t = saved.train
            mf.meta["train_dims"] = [str(t.n_users), str(t.n_items)]
            mf.arrays.update(train_users=t.users, train_items=t.items, train_ratings=t.ratings)
    else:
        raise ValueError(f"unknown model kind {saved.kind!r}")
    if saved.user_ids is not None:
        mf.strings["user_ids"] = list(saved.user_ids)
    if saved.item_ids is not None:
        mf.strings["item_ids"] = list(saved.item_ids)
    write_model_file(mf, path)


def load_model(path: str | Path) -> SavedModel:
    mf = read_model_file(path)
    try:
        return _decode(mf)
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing field {exc}") from exc


def _decode(mf: ModelFile) -> SavedModel:
    scale = _scale_from(mf)
    a = mf.arrays
    train = None
    if mf.kind == "mmsbm":
        n_runs = int(mf.meta["n_runs"][0])
        N, M, K, L = (int(x) for x in mf.meta["dims"])
        models = []
        for r in range(n_runs):
            p = f"run{r}."
            conv, n_iter = mf.meta[p + "status"]
            mm = MmsbmModel(a[p + "theta"], a[p + "eta"], a[p + "Q"], a[p + "user_seen"],
                            a[p + "item_seen"], a[p + "rating_hist"],
                            tuple(a[p + "loglik_trace"].tolist()), bool(int(conv)), int(n_iter))
            if mm.theta.shape != (N, K) or mm.eta.shape != (M, L) or mm.Q.shape != (scale.size, K, L):
                raise ModelFormatError(f"run {r}: parameter shapes do not match the header dims")
            models.append(mm)
        model: object = models
    elif mf.kind == "sbm":
        model = SbmPosterior(a["user_groups"], a["item_groups"], a["counts"], a["user_seen"],
                             a["item_seen"], a["energies"], float(mf.meta["acceptance_rate"][0]))
        if a["counts"].shape[-1] != scale.size:
            raise ModelFormatError("count tensor does not match the scale size")
    elif mf.kind == "mf":
        gm, lr, ne = mf.meta["mf"]
        model = MfModel(a["P"], a["Qf"], a["user_seen"], a["item_seen"], float(gm), float(lr),
                        int(ne), tuple(a["train_rmse"].tolist()))
        if a["P"].shape[1] != a["Qf"].shape[0]:
            raise ModelFormatError("factor matrices have mismatched latent dimension")
    elif mf.kind in ("itemitem", "naive"):
        means = ItemMeans(a["item_means"], a["item_seen"], float(mf.meta["global_mean"][0]))
        model = means
        if mf.kind == "itemitem":
            ptr = a["neighbor_ptr"]
            nb = tuple(a["neighbors"][ptr[j]:ptr[j + 1]] for j in range(len(ptr) - 1))
            sims = tuple(a["sims"][ptr[j]:ptr[j + 1]] for j in range(len(ptr) - 1))
            model = ItemItemModel(int(mf.meta["k"][0]), nb, sims, means)
            n_u, n_i = (int(x) for x in mf.meta["train_dims"])
            train = RatingsTable(a["train_users"], a["train_items"], a["train_ratings"], scale,
                                 n_users=n_u, n_items=n_i, dedupe=False)
    else:
        raise ModelFormatError(f"unknown model kind {mf.kind!r}")
    return SavedModel(mf.kind, model, scale, mf.strings.get("user_ids"), mf.strings.get("item_ids"), train)
