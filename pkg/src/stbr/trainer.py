"""Bootstrapped spatiotemporal training.

Each step encodes a masked view with the online network, predicts from it
once, and pulls that prediction toward the (detached, l2-normalized) target
representations of the temporal and spatial targets:

    L_t  = mean_u || y_u/|y_u| - rt_u/|rt_u| ||^2
    L_s  = mean_u || y_u/|y_u| - rs_u/|rs_u| ||^2
    L    = alpha * L_t + (1 - alpha) * L_s

Adam updates the online parameters only; afterwards the target parameters
track them by EMA: target <- tau * target + (1 - tau) * online.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import AdjacencyGraph, CtsDataset, SplitSpec, fit_normalizer
from .errors import ConfigError, ContractError, TrainingDivergenceError
from .model import EncoderConfig, STBRModel, encode_online, encode_target, infer, predict
from .sampler import TrainingTriplet, TripletSampler, check_lengths
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)

LOSS_CURVE_HEADER = ("step", "loss_total", "loss_temporal", "loss_spatial", "fallback_count")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    tau: float = 0.99
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    L1: int = 200
    l: int = 100
    mask_ratio: float = 0.15
    mask_mean_seg_len: float = 5.0
    neighbor_sampling: str = "weighted"
    loss_mode: str = "positionwise"   # positionwise | pooled
    temporal_region: str = "full"     # full | overlap
    normalize: bool = True
    strict_coverage: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        check_alpha(self.alpha)
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        check_lengths(self.L0, self.L1, self.l)
        if self.loss_mode not in ("positionwise", "pooled"):
            raise ConfigError(f"loss_mode must be 'positionwise' or 'pooled', got {self.loss_mode!r}")
        if self.temporal_region not in ("full", "overlap"):
            raise ConfigError(f"temporal_region must be 'full' or 'overlap', got {self.temporal_region!r}")
        if self.strict_coverage and self.encoder.receptive_field < self.L1:
            raise ConfigError(
                f"receptive field {self.encoder.receptive_field} is shorter than L1={self.L1} (strict coverage)")

    @property
    def L0(self) -> int:
        return self.L1 + self.l

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = asdict(self.encoder)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        enc = d.pop("encoder", {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(encoder=enc if isinstance(enc, EncoderConfig) else EncoderConfig.from_dict(enc), **d)


@dataclass(frozen=True)
class LossBreakdown:
    step: int
    total: float
    temporal: float
    spatial: float
    fallback_count: int

    def row(self) -> tuple:
        return (self.step, repr(self.total), repr(self.temporal), repr(self.spatial), self.fallback_count)


def check_alpha(alpha: float) -> None:
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")


def _normalized_target(r) -> np.ndarray:
    with tn.no_grad():
        return tn.l2_normalize(r).data


def _distance_loss(y: Tensor, r) -> Tensor:
    """mean over all positions of ||y/|y| - r/|r|||^2 (in [0, 4]); r is a constant."""
    r = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64)
    if y.shape != r.shape:
        raise ContractError(f"prediction {y.shape} and target {r.shape} differ in shape")
    return tn.mean(tn.sq_norm(tn.sub(tn.l2_normalize(y), _normalized_target(r))))


def temporal_loss(y: Tensor, r_t) -> Tensor:
    return _distance_loss(y, r_t)


def spatial_loss(y: Tensor, r_s) -> Tensor:
    return _distance_loss(y, r_s)


def combined_loss(Lt, Ls, alpha: float):
    """alpha * Lt + (1 - alpha) * Ls for floats or scalar tensors."""
    check_alpha(alpha)
    if isinstance(Lt, Tensor) or isinstance(Ls, Tensor):
        return tn.add(tn.scale(Lt, alpha), tn.scale(Ls, 1.0 - alpha))
    return alpha * Lt + (1.0 - alpha) * Ls


def _complement(tau: float) -> float:
    """``1 - tau`` evaluated on tau's shortest decimal form, e.g. exactly 0.01 for 0.99."""
    return float(1 - Decimal(repr(float(tau))))


def ema_update(target: dict, online: dict, tau: float) -> None:
    """In place: target <- tau * target + (1 - tau) * online, for every target entry."""
    if not 0 <= tau <= 1:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    for name, tgt in target.items():
        if name not in online:
            raise ContractError(f"EMA: online set has no parameter {name!r}")
        src = online[name]
        if tgt.shape != src.shape:
            raise ContractError(f"EMA: shape mismatch for {name!r}: {tgt.shape} vs {src.shape}")
        if tau == 1.0:
            continue
        if tau == 0.0:
            tgt.data[...] = src.data
        else:
            tgt.data[...] = tau * tgt.data + _complement(tau) * src.data


def _stack(batch: Sequence[TrainingTriplet], attr: str) -> np.ndarray:
    return np.stack([getattr(tr, attr) for tr in batch])


def train_step(model: STBRModel, batch: Sequence[TrainingTriplet], cfg: TrainConfig, adam: Adam) -> LossBreakdown:
    """One forward/backward/Adam/EMA step; returns the losses before the update."""
    if not batch:
        raise ContractError("train_step needs a nonempty batch")
    view = _stack(batch, "view")
    view_obs = _stack(batch, "view_observed")
    aug = np.stack([tr.mask.masked for tr in batch])
    targets = np.concatenate([_stack(batch, "temporal"), _stack(batch, "spatial")])
    targets_obs = np.concatenate([_stack(batch, "temporal_observed"), _stack(batch, "spatial_observed")])
    fallback = sum(tr.fallback for tr in batch)
    B = len(batch)

    r_targets = encode_target(model, targets, targets_obs).data
    r_t, r_s = r_targets[:B], r_targets[B:]
    with tn.Tape() as tape:
        y = predict(model, encode_online(model, view, view_obs, aug))
        y_t, y_s = y, y
        if cfg.temporal_region == "overlap":
            y_t = tn.slice_time(y, cfg.l, cfg.L1)
            r_t = r_t[:, cfg.l:]
        if cfg.loss_mode == "pooled":
            y_t, y_s = tn.mean(y_t, axis=1), tn.mean(y_s, axis=1)
            r_t, r_s = r_t.mean(axis=1), r_s.mean(axis=1)
        Lt = temporal_loss(y_t, r_t)
        Ls = spatial_loss(y_s, r_s)
        total = combined_loss(Lt, Ls, cfg.alpha)
    step = model.step + 1
    if not math.isfinite(total.item()):
        raise TrainingDivergenceError(f"non-finite loss at step {step}")
    tn.backward(total, tape)
    try:
        adam.step()
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"step {step}: {exc}") from None
    ema_update(model.target, model.online, cfg.tau)
    model.step = step
    return LossBreakdown(step, total.item(), Lt.item(), Ls.item(), int(fallback))


def make_optimizer(model: STBRModel, cfg: TrainConfig) -> Adam:
    return Adam(model.online_params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)


def derive_seeds(seed: int) -> tuple[int, int]:
    """Independent (init, sampling) seeds from one 64-bit seed."""
    a, b = np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)
    return int(a), int(b)


def mean_pairwise_cosine(reprs: np.ndarray) -> float:
    """Mean off-diagonal cosine similarity between the rows of ``reprs[n, K]``."""
    n = reprs.shape[0]
    if n < 2:
        return 0.0
    unit = reprs / np.maximum(np.linalg.norm(reprs, axis=1, keepdims=True), tn.EPS_NORM)
    sim = unit @ unit.T
    return float((sim.sum() - np.trace(sim)) / (n * (n - 1)))


def collapse_check(model: STBRModel, ds: CtsDataset, split: SplitSpec, threshold: float = 0.999,
                   probe_size: int = 256, seed: int = 0) -> float:
    """Warn when representations of a random probe set are nearly all parallel."""
    hi = split.t_train_end
    reprs = infer(model, ds.values[:, :hi], ds.observed[:, :hi]).reshape(-1, model.config.repr_dim)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(reprs), size=min(probe_size, len(reprs)), replace=False)
    score = mean_pairwise_cosine(reprs[np.sort(idx)])
    if score > threshold:
        log.warning("representation collapse suspected: mean pairwise cosine similarity %.6f > %g",
                    score, threshold)
    return score


@dataclass
class TrainResult:
    model: STBRModel
    curve: list[LossBreakdown]
    norm_stats: object = None
    collapse_score: float = float("nan")


def train_loop(ds: CtsDataset, graph: AdjacencyGraph, cfg: TrainConfig, split: SplitSpec | None = None,
               progress_every: int = 0) -> TrainResult:
    """Train for ``cfg.steps`` steps on the training split of ``ds``.

    With ``cfg.normalize`` the data are z-scored by training-split statistics,
    which are returned alongside the model for downstream use.
    """
    split = split or SplitSpec.from_fractions(ds.length)
    stats = None
    if cfg.normalize:
        stats = fit_normalizer(ds, split)
        ds = stats.apply(ds)
    init_seed, sample_seed = derive_seeds(cfg.seed)
    model = STBRModel(cfg.encoder, seed=init_seed)
    model.seed = cfg.seed
    sampler = TripletSampler(ds, graph, split, L1=cfg.L1, l=cfg.l, mask_ratio=cfg.mask_ratio,
                             mask_mean_seg_len=cfg.mask_mean_seg_len,
                             neighbor_sampling=cfg.neighbor_sampling, seed=sample_seed)
    if graph.spatially_degenerate:
        log.warning("graph is spatially degenerate; every triplet uses the temporal-only fallback")
    adam = make_optimizer(model, cfg)
    curve = []
    for s in range(cfg.steps):
        rec = train_step(model, sampler.batch(cfg.batch_size), cfg, adam)
        curve.append(rec)
        if progress_every and (s + 1) % progress_every == 0:
            log.info("step %d  loss %.5f  (temporal %.5f, spatial %.5f)", rec.step, rec.total,
                     rec.temporal, rec.spatial)
    score = collapse_check(model, ds, split, seed=sample_seed)
    return TrainResult(model, curve, stats, score)


def write_loss_curve(curve: Sequence[LossBreakdown], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CURVE_HEADER)
        for rec in curve:
            w.writerow(rec.row())


def read_loss_curve(path) -> list[LossBreakdown]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossBreakdown(int(r["step"]), float(r["loss_total"]), float(r["loss_temporal"]),
                          float(r["loss_spatial"]), int(r["fallback_count"])) for r in rows]
