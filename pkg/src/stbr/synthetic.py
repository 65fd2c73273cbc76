"""Seeded synthetic benchmark: a seasonal graph-diffusion AR process on a ring.

    x[i, t] = level + amp * season((t + shift_i) / period) + e[i, t]
    e[:, t] = ar * ((1 - mix) * e[:, t-1] + mix * P @ e[:, t-1]) + noise * eps_t

``P`` is the row-normalized ring adjacency, so each node's deviation is
partly pulled toward its neighbors' deviations (spatial correlation) and
decays geometrically (temporal correlation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pathlib import Path

from .data import AdjacencyGraph, CtsDataset, save_adjacency, save_dataset


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 10
    length: int = 3000
    period: int = 48
    level: float = 50.0
    amp: float = 5.0
    phase_step: int = 2
    ar: float = 0.9
    mix: float = 0.4
    noise: float = 1.0
    burn_in: int = 500
    seed: int = 20240611


BENCHMARK = SyntheticSpec()
TOY = SyntheticSpec(n_nodes=4, length=600, burn_in=100, seed=7)


def ring_graph(n: int, ids=None) -> AdjacencyGraph:
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i + 1) % n] = w[(i + 1) % n, i] = 1.0
    return AdjacencyGraph(w, tuple(ids) if ids is not None else tuple(f"s{i}" for i in range(n)))


def seasonal_profile(phase: np.ndarray) -> np.ndarray:
    """Daily-like shape with two harmonics; ``phase`` in cycles."""
    return np.sin(2 * np.pi * phase) + 0.5 * np.sin(4 * np.pi * phase + 0.7)


def generate(spec: SyntheticSpec = SyntheticSpec()) -> tuple[CtsDataset, AdjacencyGraph]:
    ids = tuple(f"s{i}" for i in range(spec.n_nodes))
    graph = ring_graph(spec.n_nodes, ids)
    P = graph.weights / graph.weights.sum(axis=1, keepdims=True)
    rng = np.random.default_rng(spec.seed)
    steps = spec.length + spec.burn_in
    eps = rng.standard_normal((steps, spec.n_nodes))
    e = np.zeros(spec.n_nodes)
    dev = np.empty((steps, spec.n_nodes))
    for t in range(steps):
        e = spec.ar * ((1 - spec.mix) * e + spec.mix * (P @ e)) + spec.noise * eps[t]
        dev[t] = e
    dev = dev[spec.burn_in:].T
    t = np.arange(spec.length)
    shifts = spec.phase_step * np.arange(spec.n_nodes)
    season = seasonal_profile((t[None, :] + shifts[:, None]) / spec.period)
    values = spec.level + spec.amp * season + dev
    return CtsDataset(values, np.ones_like(values, dtype=bool), ids), graph


def write_bundle(spec: SyntheticSpec, directory, stem: str) -> tuple[Path, Path]:
    """Write ``{stem}.csv`` and ``{stem}_adjacency.csv`` for ``spec`` into ``directory``."""
    directory = Path(directory)
    ds, graph = generate(spec)
    data, adj = directory / f"{stem}.csv", directory / f"{stem}_adjacency.csv"
    save_dataset(ds, data)
    save_adjacency(graph, adj)
    return data, adj


if __name__ == "__main__":
    import sys

    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("resources")
    out.mkdir(parents=True, exist_ok=True)
    write_bundle(BENCHMARK, out, "benchmark")
    write_bundle(TOY, out, "toy")
