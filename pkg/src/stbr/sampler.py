"""Training triplets: a masked view, its temporal target and a spatial target.

For a window starting at ``t`` on instance ``i`` the view covers
``[t, t + L1)``, the temporal target ``[t + l, t + l + L1)`` of the same
instance, and the spatial target ``[t, t + L1)`` of a graph neighbor ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AdjacencyGraph, CtsDataset, SplitSpec
from .errors import ConfigError


@dataclass(frozen=True)
class WindowSpec:
    instance: int
    start: int
    L0: int
    L1: int
    l: int


@dataclass(frozen=True, eq=False)
class MaskPattern:
    masked: np.ndarray
    ratio: float
    mean_seg_len: float

    @property
    def realized_ratio(self) -> float:
        return float(self.masked.mean())


@dataclass(frozen=True, eq=False)
class TrainingTriplet:
    window: WindowSpec
    view: np.ndarray
    view_observed: np.ndarray
    mask: MaskPattern
    temporal: np.ndarray
    temporal_observed: np.ndarray
    spatial: np.ndarray
    spatial_observed: np.ndarray
    neighbor: int | None

    @property
    def fallback(self) -> bool:
        """True when the instance had no neighbor and the temporal target stands in."""
        return self.neighbor is None


def check_lengths(L0: int, L1: int, l: int) -> None:
    if not (0 < l < L1 < L0 and L0 == l + L1):
        raise ConfigError(f"window lengths must satisfy l < L1 < L0 and L0 = l + L1; got L0={L0}, L1={L1}, l={l}")


def sample_window(ds: CtsDataset, split: SplitSpec, L0: int, L1: int, l: int,
                  rng: np.random.Generator) -> WindowSpec:
    """Uniform instance, uniform start in ``[0, t_train_end - L0]``."""
    check_lengths(L0, L1, l)
    if split.t_train_end < L0:
        raise ConfigError(f"training span {split.t_train_end} is shorter than L0={L0}")
    i = int(rng.integers(ds.n_instances))
    t = int(rng.integers(split.t_train_end - L0 + 1))
    return WindowSpec(i, t, L0, L1, l)


def sample_neighbor(graph: AdjacencyGraph, i: int, rng: np.random.Generator,
                    mode: str = "weighted") -> int | None:
    """Neighbor of ``i`` drawn proportionally to its weight (or uniformly); None if isolated."""
    w = graph.neighbor_weights(i)
    pos = w > 0
    if not pos.any():
        return None
    if mode == "uniform":
        p = pos / pos.sum()
    elif mode == "weighted":
        p = w / w.sum()
    else:
        raise ConfigError(f"neighbor_sampling must be 'weighted' or 'uniform', got {mode!r}")
    return int(rng.choice(len(w), p=p))


def gen_continuous_mask(L1: int, ratio: float, mean_seg_len: float,
                        rng: np.random.Generator) -> MaskPattern:
    """Mask ``round(ratio * L1)`` steps (at least one) in contiguous segments.

    Segment lengths are geometric with mean ``mean_seg_len``; the last
    segment is clipped so the masked count lands exactly on target.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    if not 1 <= mean_seg_len <= L1:
        raise ConfigError(f"mask mean segment length must be in [1, {L1}], got {mean_seg_len}")
    target = max(1, int(round(ratio * L1)))
    masked = np.zeros(L1, dtype=bool)
    count = 0
    p = 1.0 / mean_seg_len
    while count < target:
        seg = min(int(rng.geometric(p)), target - count)
        s = int(rng.integers(L1 - seg + 1))
        masked[s:s + seg] = True
        count = int(masked.sum())
    return MaskPattern(masked, ratio, mean_seg_len)


def make_triplet(ds: CtsDataset, graph: AdjacencyGraph, spec: WindowSpec, rng: np.random.Generator,
                 mask_ratio: float = 0.15, mask_mean_seg_len: float = 5.0,
                 neighbor_sampling: str = "weighted") -> TrainingTriplet:
    """Crop view/targets for ``spec``; an isolated node yields a fallback triplet."""
    i, t, L1, l = spec.instance, spec.start, spec.L1, spec.l
    j = sample_neighbor(graph, i, rng, neighbor_sampling)
    mask = gen_continuous_mask(L1, mask_ratio, mask_mean_seg_len, rng)
    view = slice(t, t + L1)
    temporal = slice(t + l, t + l + L1)
    sp_row, sp_sl = (i, temporal) if j is None else (j, view)
    return TrainingTriplet(
        window=spec,
        view=ds.values[i, view],
        view_observed=ds.observed[i, view],
        mask=mask,
        temporal=ds.values[i, temporal],
        temporal_observed=ds.observed[i, temporal],
        spatial=ds.values[sp_row, sp_sl],
        spatial_observed=ds.observed[sp_row, sp_sl],
        neighbor=j,
    )


class TripletSampler:
    """Seeded stream of triplet batches over the training split."""

    def __init__(self, ds: CtsDataset, graph: AdjacencyGraph, split: SplitSpec, *, L1: int = 200,
                 l: int = 100, mask_ratio: float = 0.15, mask_mean_seg_len: float = 5.0,
                 neighbor_sampling: str = "weighted", seed: int = 0):
        self.L0 = L1 + l
        check_lengths(self.L0, L1, l)
        if graph.n != ds.n_instances:
            raise ConfigError(f"graph has {graph.n} nodes but dataset has {ds.n_instances} instances")
        if neighbor_sampling not in ("weighted", "uniform"):
            raise ConfigError(f"neighbor_sampling must be 'weighted' or 'uniform', got {neighbor_sampling!r}")
        self.ds, self.graph, self.split = ds, graph, split
        self.L1, self.l = L1, l
        self.mask_ratio, self.mask_mean_seg_len = mask_ratio, mask_mean_seg_len
        self.neighbor_sampling = neighbor_sampling
        self.rng = np.random.default_rng(seed)

    def batch(self, size: int) -> list[TrainingTriplet]:
        out = []
        for _ in range(size):
            spec = sample_window(self.ds, self.split, self.L0, self.L1, self.l, self.rng)
            out.append(make_triplet(self.ds, self.graph, spec, self.rng, self.mask_ratio,
                                    self.mask_mean_seg_len, self.neighbor_sampling))
        return out
