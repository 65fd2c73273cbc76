"""Frozen-encoder evaluation: linear-probe forecasting, HA baseline, transfer, robustness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import CtsDataset, NormStats, SplitSpec, fit_normalizer, inject_missing
from .errors import AlignmentError, CheckpointError, CompatibilityError, ConfigError, CoverageError
from .model import EncoderConfig, STBRModel, infer

log = logging.getLogger(__name__)

EPS_MAPE = 1e-8
DEFAULT_LAMBDAS = tuple(float(v) for v in np.logspace(-4, 2, 7))


def infer_representations(model: STBRModel, ds: CtsDataset,
                          expected_config: EncoderConfig | None = None) -> np.ndarray:
    """``[N, T, K]`` representations, one causal pass per instance over the whole series.

    ``ds`` must already be normalized with the training statistics. Missing
    timestamps are blanked in latent space; no augmentation mask is applied.
    """
    if expected_config is not None and expected_config.hash() != model.config.hash():
        raise CompatibilityError("checkpoint encoder config does not match the requested config")
    out = np.empty((ds.n_instances, ds.length, model.config.repr_dim))
    for i in range(ds.n_instances):
        out[i] = infer(model, ds.values[i], ds.observed[i])
    return out


# ----------------------------------------------------------------------------
# probe pairs and ridge


@dataclass(frozen=True, eq=False)
class ProbeData:
    features: np.ndarray   # [n, K]
    targets: np.ndarray    # [n, p], original scale
    instance: np.ndarray   # [n] row index into the dataset
    origin: np.ndarray     # [n] time index t of the representation
    horizon: int

    def __len__(self):
        return len(self.targets)


def build_probe_dataset(reprs: np.ndarray, ds: CtsDataset, p: int, split: SplitSpec, region: str = "test",
                        instances: Iterable[int] | None = None) -> ProbeData:
    """Pairs ``(r[i, t], x[i, t+1 .. t+p])`` with ``t`` and ``t + p`` inside ``region``.

    Pairs whose targets are not all observed are dropped; targets come from
    ``ds`` as given (pass the raw dataset to get original-scale targets).
    """
    if p < 1:
        raise ConfigError(f"horizon must be >= 1, got {p}")
    lo, hi = split.bounds(region)
    rows = range(ds.n_instances) if instances is None else list(instances)
    feats, targs, inst, orig = [], [], [], []
    origins = np.arange(lo, max(lo, hi - p))
    if len(origins):
        offs = origins[:, None] + np.arange(1, p + 1)[None, :]
        for i in rows:
            ok = ds.observed[i][offs].all(axis=1)
            t = origins[ok]
            feats.append(reprs[i, t])
            targs.append(ds.values[i][offs[ok]])
            inst.append(np.full(len(t), i))
            orig.append(t)
    n = sum(len(t) for t in orig)
    if n == 0:
        raise CoverageError(f"no probe pairs for horizon {p} in the {region} split [{lo}, {hi})")
    return ProbeData(np.concatenate(feats), np.concatenate(targs).reshape(n, p),
                     np.concatenate(inst), np.concatenate(orig), p)


@dataclass(frozen=True, eq=False)
class RidgeModel:
    W: np.ndarray        # [K, p]
    b: np.ndarray        # [p]
    lam: float
    horizon: int
    val_mae: dict = field(default_factory=dict)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return features @ self.W + self.b

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "lambda": self.lam, "W": self.W.tolist(), "b": self.b.tolist(),
                "val_mae": {repr(k): v for k, v in self.val_mae.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> RidgeModel:
        return cls(np.array(d["W"], dtype=np.float64), np.array(d["b"], dtype=np.float64), float(d["lambda"]),
                   int(d["horizon"]), {float(k): v for k, v in d.get("val_mae", {}).items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> RidgeModel:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"ridge model not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"ridge model {path} is invalid: {exc}") from None


def ridge_solve(F: np.ndarray, Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge with an unpenalized intercept (via mean-centering)."""
    mu_f, mu_y = F.mean(axis=0), Y.mean(axis=0)
    Fc, Yc = F - mu_f, Y - mu_y
    A = Fc.T @ Fc + lam * np.eye(F.shape[1])
    W = np.linalg.solve(A, Fc.T @ Yc)
    return W, mu_y - mu_f @ W


def _singular(F: np.ndarray) -> bool:
    Fc = F - F.mean(axis=0)
    return np.linalg.matrix_rank(Fc.T @ Fc) < F.shape[1]


def ridge_fit(train: ProbeData, val: ProbeData | None = None,
              lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> RidgeModel:
    """Fit one ridge per lambda on ``train``; keep the one with the lowest validation MAE."""
    F, Y = train.features, train.targets
    if len(F) < F.shape[1] + 1:
        raise CoverageError(f"ridge needs at least {F.shape[1] + 1} training pairs, got {len(F)}")
    grid = []
    for lam in lambdas:
        lam = float(lam)
        if lam < 0:
            raise ConfigError(f"ridge lambda must be >= 0, got {lam}")
        if lam == 0 and _singular(F):
            log.warning("ridge: design matrix is singular; dropping lambda = 0 from the grid")
            continue
        grid.append(lam)
    if not grid:
        raise ConfigError("ridge: lambda grid is empty")
    if val is None and len(grid) > 1:
        raise ConfigError("ridge: a validation set is needed to choose among several lambdas")
    best, scores = None, {}
    for lam in grid:
        W, b = ridge_solve(F, Y, lam)
        if val is None:
            best = (lam, W, b)
            break
        mae = float(np.mean(np.abs(val.features @ W + b - val.targets)))
        scores[lam] = mae
        if best is None or mae < scores[best[0]]:
            best = (lam, W, b)
    lam, W, b = best
    return RidgeModel(W, b, lam, train.horizon, scores)


# ----------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    mape: float | None   # None when every truth value is ~0
    count: int
    mape_excluded: int


def metrics(pred, truth) -> Metrics:
    """RMSE, MAE and MAPE (percent, skipping |truth| <= 1e-8)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.size == 0:
        raise CoverageError("no entries to score")
    err = pred - truth
    keep = np.abs(truth) > EPS_MAPE
    mape = float(np.mean(np.abs(err[keep]) / np.abs(truth[keep])) * 100) if keep.any() else None
    return Metrics(float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err))), mape,
                   int(pred.size), int((~keep).sum()))


@dataclass
class MetricsReport:
    """Scores at step ``horizon`` (headline), broken down per step and per instance."""

    horizon: int
    overall: Metrics
    per_step: list[Metrics]
    per_instance: dict[str, Metrics]
    skipped: list[str] = field(default_factory=list)
    label: str = "probe"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "horizon": self.horizon,
            **asdict(self.overall),
            "per_step": [asdict(m) for m in self.per_step],
            "per_instance": {k: asdict(v) for k, v in self.per_instance.items()},
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n"


def build_report(pred: np.ndarray, truth: np.ndarray, instance: np.ndarray, ids: Sequence[str],
                 horizon: int, label: str = "probe") -> MetricsReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    per_step = [metrics(pred[:, h], truth[:, h]) for h in range(pred.shape[1])]
    per_inst = {}
    for i in np.unique(instance):
        sel = instance == i
        per_inst[ids[i]] = metrics(pred[sel, -1], truth[sel, -1])
    return MetricsReport(horizon, per_step[-1], per_step, per_inst, label=label)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def format_reports(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table, one row per report."""
    lines = [f"{'model':<10} {'horizon':>7} {'rmse':>10} {'mae':>10} {'mape(%)':>10} {'n':>7} {'mape_excl':>9}"]
    for r in reports:
        m = r.overall
        lines.append(f"{r.label:<10} {r.horizon:>7d} {_fmt(m.rmse):>10} {_fmt(m.mae):>10} "
                     f"{_fmt(m.mape):>10} {m.count:>7d} {m.mape_excluded:>9d}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# historical average


def historical_average(ds: CtsDataset, period: int, horizon: int) -> np.ndarray:
    """``pred[i, t]`` forecasts ``x[i, t + horizon]`` from origin ``t``.

    It is the mean of observed ``x[i, s]`` over ``s < t`` in the same phase
    (``s = t + horizon mod period``). Without such history it falls back to
    the mean of everything observed before ``t``, then to the instance's
    overall observed mean. Entries with ``t + horizon >= T`` are NaN.
    """
    if period < 1:
        raise ConfigError(f"HA period must be >= 1, got {period}")
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    N, T = ds.values.shape
    vals = np.where(ds.observed, ds.values, 0.0)
    obs = ds.observed.astype(np.float64)
    t = np.arange(T)
    phase = (t + horizon) % period
    n_prior = np.maximum(0, (t - phase + period - 1) // period)   # count of s < t with s = phase mod period
    pred = np.full((N, T), np.nan)
    run_sum = np.concatenate([np.zeros((N, 1)), np.cumsum(vals, axis=1)], axis=1)
    run_cnt = np.concatenate([np.zeros((N, 1)), np.cumsum(obs, axis=1)], axis=1)
    tot_cnt = obs.sum(axis=1)
    overall = np.divide(vals.sum(axis=1), tot_cnt, out=np.zeros(N), where=tot_cnt > 0)
    for ph in range(period):
        sel = phase == ph
        if not sel.any():
            continue
        cs = np.concatenate([np.zeros((N, 1)), np.cumsum(vals[:, ph::period], axis=1)], axis=1)
        cc = np.concatenate([np.zeros((N, 1)), np.cumsum(obs[:, ph::period], axis=1)], axis=1)
        k = n_prior[sel]
        s, c = cs[:, k], cc[:, k]
        ts = t[sel]
        fs, fc = run_sum[:, ts], run_cnt[:, ts]
        fallback = np.where(fc > 0, fs / np.maximum(fc, 1), overall[:, None])
        pred[:, sel] = np.where(c > 0, s / np.maximum(c, 1), fallback)
    pred[:, T - horizon:] = np.nan
    return pred


def ha_probe_predictions(ds: CtsDataset, pairs: ProbeData, period: int) -> np.ndarray:
    """HA forecasts aligned with a probe set: ``[n, p]``."""
    out = np.empty_like(pairs.targets)
    for h in range(1, pairs.horizon + 1):
        out[:, h - 1] = historical_average(ds, period, h)[pairs.instance, pairs.origin]
    return out


# ----------------------------------------------------------------------------
# evaluation pipelines


@dataclass
class ForecastResult:
    horizon: int
    ridge: RidgeModel
    probe: MetricsReport
    ha: MetricsReport
    test_pairs: ProbeData
    test_pred: np.ndarray


def evaluate_frozen(model: STBRModel, ridge: RidgeModel, ds: CtsDataset, stats: NormStats, split: SplitSpec,
                    instances: Iterable[int] | None = None, observed: np.ndarray | None = None,
                    reprs: np.ndarray | None = None) -> tuple[MetricsReport, ProbeData, np.ndarray]:
    """Score a frozen encoder + ridge on the test split of ``ds`` (original scale).

    ``observed`` replaces the input mask for inference only; targets and the
    pair set always come from ``ds`` itself.
    """
    if reprs is None:
        inputs = ds if observed is None else ds.with_observed(observed)
        reprs = infer_representations(model, stats.apply(inputs))
    pairs = build_probe_dataset(reprs, ds, ridge.horizon, split, "test", instances)
    pred = ridge.predict(pairs.features)
    return build_report(pred, pairs.targets, pairs.instance, ds.instance_ids, ridge.horizon), pairs, pred


def forecast(model: STBRModel, ds: CtsDataset, stats: NormStats, split: SplitSpec, horizons: Sequence[int],
             period: int, lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> list[ForecastResult]:
    """One representation pass, then one ridge per horizon (train-once)."""
    for p in horizons:
        if int(p) < 1:
            raise ConfigError(f"horizon must be >= 1, got {p}")
    reprs = infer_representations(model, stats.apply(ds))
    results = []
    for p in horizons:
        p = int(p)
        ridge = ridge_fit(build_probe_dataset(reprs, ds, p, split, "train"),
                          build_probe_dataset(reprs, ds, p, split, "val"), lambdas)
        report, pairs, pred = evaluate_frozen(model, ridge, ds, stats, split, reprs=reprs)
        ha_pred = ha_probe_predictions(ds, pairs, period)
        ha = build_report(ha_pred, pairs.targets, pairs.instance, ds.instance_ids, p, label="HA")
        results.append(ForecastResult(p, ridge, report, ha, pairs, pred))
    return results


def stats_for(ds: CtsDataset, stats: NormStats, split: SplitSpec) -> tuple[NormStats, list[str]]:
    """Training stats for known ids; new ids use their own history. Returns (stats, skipped ids)."""
    ids, mu, sd, const, skipped = [], [], [], [], []
    for i, iid in enumerate(ds.instance_ids):
        if iid in stats.instance_ids:
            k = stats.instance_ids.index(iid)
            ids.append(iid), mu.append(stats.mean[k]), sd.append(stats.std[k]), const.append(stats.constant[k])
            continue
        one = ds.subset([i])
        for region in ("train", "history", "all"):
            try:
                s = fit_normalizer(one, split, region)
                break
            except CoverageError:
                s = None
        if s is None:
            skipped.append(iid)
            continue
        ids.append(iid), mu.append(s.mean[0]), sd.append(s.std[0]), const.append(s.constant[0])
    return NormStats(tuple(ids), np.array(mu), np.array(sd), np.array(const, dtype=bool)), skipped


def cold_start_transfer(model: STBRModel, ridge: RidgeModel, ds_new: CtsDataset, stats: NormStats,
                        split: SplitSpec, graph_new=None, instances: Sequence[str] | None = None) -> MetricsReport:
    """Apply the frozen encoder and frozen ridge to (possibly unseen) instances.

    New instances are normalized with statistics from their own data: the
    training region if observed there, else train plus validation, else
    every observed point (a station that joined during the test period has
    nothing else). Instances without any observed point are skipped and
    listed in the report. ``graph_new`` is only checked for alignment, since
    inference is per instance.
    """
    if graph_new is not None and graph_new.n != ds_new.n_instances:
        raise AlignmentError(f"new adjacency has {graph_new.n} nodes, dataset has {ds_new.n_instances}")
    full_stats, skipped = stats_for(ds_new, stats, split)
    wanted = list(ds_new.instance_ids) if instances is None else list(instances)
    usable = [i for i in wanted if i not in skipped]
    if not usable:
        raise CoverageError("no transferable instance has observed data")
    sub = ds_new.subset(usable)
    report, _, _ = evaluate_frozen(model, ridge, sub, full_stats, split)
    report.skipped = [i for i in wanted if i in skipped]
    report.label = "transfer"
    return report


def ha_report(ds: CtsDataset, split: SplitSpec, period: int, horizon: int,
              instances: Sequence[str] | None = None) -> MetricsReport:
    """HA scores on the same test pairs the probe would use."""
    sub = ds if instances is None else ds.subset(instances)
    pairs = build_probe_dataset(np.zeros((sub.n_instances, sub.length, 1)), sub, horizon, split, "test")
    pred = ha_probe_predictions(sub, pairs, period)
    return build_report(pred, pairs.targets, pairs.instance, sub.instance_ids, horizon, label="HA")


ROBUSTNESS_HEADER = ("rate", "seed", "horizon", "rmse", "mae", "mape")


def robustness_eval(model: STBRModel, ridge: RidgeModel, ds: CtsDataset, stats: NormStats, split: SplitSpec,
                    rates: Sequence[float] = (0.2, 0.4, 0.6), seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    """Hide a fraction of observed inputs at inference time and re-score against clean targets."""
    rows = []
    for rate in rates:
        for seed in seeds:
            degraded = inject_missing(ds, rate, seed)
            report, _, _ = evaluate_frozen(model, ridge, ds, stats, split, observed=degraded.observed)
            m = report.overall
            rows.append({"rate": float(rate), "seed": int(seed), "horizon": ridge.horizon,
                         "rmse": m.rmse, "mae": m.mae, "mape": m.mape if m.mape is not None else math.nan})
    return rows
