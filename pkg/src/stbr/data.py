"""Correlated time series containers, CSV ingestion, splits and normalization."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, CoverageError, ParseError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CtsDataset:
    """N instances x T timestamps of univariate measurements plus an observed mask."""

    values: np.ndarray
    observed: np.ndarray
    instance_ids: tuple[str, ...]
    start_time: object = 0
    step: object = 1

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        observed = np.array(self.observed, dtype=bool)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"dataset values must be a non-empty N x T matrix, got {values.shape}")
        if observed.shape != values.shape:
            raise ValidationError(f"observed mask {observed.shape} does not match values {values.shape}")
        if not np.all(np.isfinite(values[observed])):
            raise ValidationError("non-finite value at an observed position")
        if len(self.instance_ids) != values.shape[0]:
            raise ValidationError(f"{len(self.instance_ids)} instance ids for {values.shape[0]} rows")
        values[~observed] = np.where(np.isfinite(values[~observed]), values[~observed], 0.0)
        values.flags.writeable = False
        observed.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "instance_ids", tuple(str(i) for i in self.instance_ids))

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def index_of(self, instance_id: str) -> int:
        return self.instance_ids.index(instance_id)

    def subset(self, instances) -> CtsDataset:
        idx = [self.index_of(i) if isinstance(i, str) else int(i) for i in instances]
        return replace(self, values=self.values[idx], observed=self.observed[idx],
                       instance_ids=tuple(self.instance_ids[i] for i in idx))

    def with_observed(self, observed: np.ndarray) -> CtsDataset:
        return replace(self, observed=observed)


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    weights: np.ndarray
    instance_ids: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"adjacency must be square, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("adjacency contains non-finite weights")
        neg = np.argwhere(w < 0)
        if len(neg):
            i, j = neg[0]
            raise ValidationError(f"negative adjacency weight {w[i, j]} at ({i}, {j})")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        ids = tuple(str(i) for i in self.instance_ids) or tuple(str(i) for i in range(w.shape[0]))
        if len(ids) != w.shape[0]:
            raise ValidationError(f"{len(ids)} ids for a {w.shape[0]}-node adjacency")
        object.__setattr__(self, "instance_ids", ids)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def neighbor_weights(self, i: int) -> np.ndarray:
        """Row ``i`` with the diagonal zeroed."""
        row = self.weights[i].copy()
        row[i] = 0.0
        return row

    @property
    def spatially_degenerate(self) -> bool:
        off = self.weights.copy()
        np.fill_diagonal(off, 0.0)
        return not np.any(off > 0)

    def subset(self, instances) -> AdjacencyGraph:
        idx = [self.instance_ids.index(i) if isinstance(i, str) else int(i) for i in instances]
        return AdjacencyGraph(self.weights[np.ix_(idx, idx)], tuple(self.instance_ids[i] for i in idx))


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split: train ``[0, t_train_end)``, val ``[t_train_end, t_val_end)``, test ``[t_val_end, T)``."""

    t_train_end: int
    t_val_end: int
    T: int

    def __post_init__(self):
        if not 0 < self.t_train_end <= self.t_val_end <= self.T:
            raise ConfigError(
                f"split needs 0 < t_train_end <= t_val_end <= T, got {self.t_train_end}, {self.t_val_end}, {self.T}")

    @classmethod
    def from_fractions(cls, T: int, train: float = 0.7, val: float = 0.1) -> SplitSpec:
        if train <= 0 or val < 0 or train + val > 1:
            raise ConfigError(f"bad split fractions train={train}, val={val}")
        return cls(int(round(T * train)), int(round(T * (train + val))), T)

    def bounds(self, name: str) -> tuple[int, int]:
        return {
            "train": (0, self.t_train_end),
            "val": (self.t_train_end, self.t_val_end),
            "test": (self.t_val_end, self.T),
        }[name]


@dataclass(frozen=True, eq=False)
class NormStats:
    instance_ids: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            object.__setattr__(self, "constant", np.zeros(len(self.mean), dtype=bool))

    def lookup(self, ids) -> tuple[np.ndarray, np.ndarray]:
        idx = [self.instance_ids.index(i) for i in ids]
        return self.mean[idx], self.std[idx]

    def apply(self, ds: CtsDataset) -> CtsDataset:
        """z-score every instance; missing positions become 0."""
        mu, sd = self.lookup(ds.instance_ids)
        z = (ds.values - mu[:, None]) / sd[:, None]
        z[~ds.observed] = 0.0
        return replace(ds, values=z)

    def invert(self, values: np.ndarray, ids) -> np.ndarray:
        """Map normalized rows (one per id, leading axis) back to original scale."""
        mu, sd = self.lookup(ids)
        shape = (-1,) + (1,) * (np.ndim(values) - 1)
        return np.asarray(values) * sd.reshape(shape) + mu.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "instance_ids": list(self.instance_ids),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "constant": [bool(v) for v in self.constant],
        }

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(tuple(d["instance_ids"]), np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64), np.array(d["constant"], dtype=bool))


def fit_normalizer(ds: CtsDataset, split: SplitSpec, region: str = "train") -> NormStats:
    """Per-instance mean and population std over observed points of one split region.

    ``region`` is a split name, ``"history"`` (train plus validation) or
    ``"all"`` (the whole series, only meant for instances seen nowhere else).
    """
    lo, hi = {"history": (0, split.t_val_end), "all": (0, split.T)}.get(region) or split.bounds(region)
    vals = ds.values[:, lo:hi]
    obs = ds.observed[:, lo:hi]
    counts = obs.sum(axis=1)
    if np.any(counts == 0):
        bad = [ds.instance_ids[i] for i in np.flatnonzero(counts == 0)]
        raise CoverageError(f"no observed points in [{lo}, {hi}) for instance(s) {bad}")
    mu = np.where(obs, vals, 0.0).sum(axis=1) / counts
    var = np.where(obs, (vals - mu[:, None]) ** 2, 0.0).sum(axis=1) / counts
    sd = np.sqrt(var)
    constant = sd <= 1e-12
    if np.any(constant):
        log.warning("constant training series for %s; using std = 1",
                    [ds.instance_ids[i] for i in np.flatnonzero(constant)])
    sd = np.where(constant, 1.0, sd)
    return NormStats(ds.instance_ids, mu, sd, constant)


def inject_missing(ds: CtsDataset, rate: float, seed: int) -> CtsDataset:
    """Hide exactly ``round(rate * n_observed)`` observed points, chosen uniformly by ``seed``.

    The chosen points are a prefix of one seeded permutation, so for a fixed
    seed a higher rate always hides a superset of a lower rate's points.
    """
    if not 0 <= rate < 1:
        raise ConfigError(f"missing rate must be in [0, 1), got {rate}")
    flat = np.flatnonzero(ds.observed.ravel())
    n_hide = int(round(rate * len(flat)))
    if n_hide == 0:
        return ds
    order = np.random.default_rng(seed).permutation(len(flat))
    observed = ds.observed.copy().ravel()
    observed[flat[order[:n_hide]]] = False
    return ds.with_observed(observed.reshape(ds.observed.shape))


# ----------------------------------------------------------------------------
# CSV ingestion


def _parse_ts(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        return text


def load_dataset(path, format: str = "wide-csv") -> CtsDataset:
    """Read a wide CSV: ``ts`` column then one column per instance; empty cell = missing."""
    if format != "wide-csv":
        raise ConfigError(f"unsupported dataset format {format!r}")
    path = Path(path)
    if not path.exists():
        raise ParseError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise ParseError(f"{path}: header needs a ts column and at least one instance column")
    ids = header[1:]
    width = len(header)
    ts, cols, mask = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
        ts.append(row[0].strip())
        vals, obs = [], []
        for c, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell == "":
                vals.append(0.0)
                obs.append(False)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell {cell!r} at line {lineno}, column {c}") from None
            vals.append(v)
            obs.append(bool(np.isfinite(v)))
        cols.append(vals)
        mask.append(obs)
    if not cols:
        raise ParseError(f"{path}: no data rows")
    start = _parse_ts(ts[0])
    step = 1
    if len(ts) > 1:
        second = _parse_ts(ts[1])
        try:
            step = second - start
        except TypeError:
            step = 1
    return CtsDataset(np.array(cols).T, np.array(mask).T, tuple(ids), start, step)


def save_dataset(ds: CtsDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ts", *ds.instance_ids])
        for t in range(ds.length):
            w.writerow([t] + [repr(float(ds.values[i, t])) if ds.observed[i, t] else ""
                              for i in range(ds.n_instances)])


def load_adjacency(path, dataset: CtsDataset | None = None) -> AdjacencyGraph:
    """Read an N x N CSV of nonnegative weights, with an optional header row of ids."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"adjacency file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError(f"{path}: empty adjacency")
    ids: tuple[str, ...] = ()
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        ids = tuple(c.strip() for c in rows[0])
        rows = rows[1:]
    mat = []
    for lineno, row in enumerate(rows, start=2 if ids else 1):
        if len(row) != len(rows):
            raise ParseError(f"{path}: line {lineno} has {len(row)} fields; adjacency must be square ({len(rows)})")
        try:
            mat.append([float(c) for c in row])
        except ValueError:
            raise ParseError(f"{path}: non-numeric weight on line {lineno}") from None
    graph = AdjacencyGraph(np.array(mat), ids)
    if dataset is not None:
        graph = align_adjacency(graph, dataset)
    if graph.spatially_degenerate:
        log.warning("adjacency %s has no positive off-diagonal weight (spatially degenerate)", path)
    return graph


def align_adjacency(graph: AdjacencyGraph, ds: CtsDataset) -> AdjacencyGraph:
    if graph.n != ds.n_instances:
        raise AlignmentError(f"adjacency is {graph.n} x {graph.n} but dataset has {ds.n_instances} instances")
    numeric_default = graph.instance_ids == tuple(str(i) for i in range(graph.n))
    if not numeric_default and graph.instance_ids != ds.instance_ids:
        raise AlignmentError(f"adjacency ids {graph.instance_ids} do not match dataset ids {ds.instance_ids}")
    return AdjacencyGraph(graph.weights, ds.instance_ids)


def save_adjacency(graph: AdjacencyGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(graph.instance_ids)
        for row in graph.weights:
            w.writerow([repr(float(v)) for v in row])
