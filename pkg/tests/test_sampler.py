import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stbr.data import AdjacencyGraph, CtsDataset, SplitSpec
from stbr.errors import ConfigError
from stbr.sampler import (
    TripletSampler, WindowSpec, check_lengths, gen_continuous_mask, make_triplet, sample_neighbor, sample_window,
)


def index_dataset(n, T):
    """values[i, t] = 1000 * i + t, so every entry identifies its own position."""
    vals = 1000.0 * np.arange(n)[:, None] + np.arange(T)[None, :]
    return CtsDataset(vals, np.ones_like(vals, dtype=bool), tuple(f"s{i}" for i in range(n)))


def runs(mask):
    """Lengths of the contiguous True runs of a boolean vector."""
    padded = np.concatenate([[0], mask.astype(int), [0]])
    d = np.diff(padded)
    return np.flatnonzero(d == -1) - np.flatnonzero(d == 1)


class TestLengths:
    def test_defaults_valid(self):
        check_lengths(300, 200, 100)

    @pytest.mark.parametrize("L0,L1,l", [(299, 200, 100), (301, 200, 100), (300, 100, 200), (200, 200, 0)])
    def test_violations(self, L0, L1, l):
        with pytest.raises(ConfigError, match="L0 = l \\+ L1"):
            check_lengths(L0, L1, l)


class TestSampleWindow:
    def test_only_start_at_boundary(self):
        ds = index_dataset(3, 400)
        rng = np.random.default_rng(0)
        starts = {sample_window(ds, SplitSpec(300, 350, 400), 300, 200, 100, rng).start for _ in range(50)}
        assert starts == {0}

    def test_training_span_too_short(self):
        with pytest.raises(ConfigError):
            sample_window(index_dataset(2, 400), SplitSpec(299, 350, 400), 300, 200, 100, np.random.default_rng(0))

    def test_instance_frequencies(self):
        ds = index_dataset(4, 400)
        rng = np.random.default_rng(2024)
        counts = np.bincount([sample_window(ds, SplitSpec(350, 380, 400), 300, 200, 100, rng).instance
                              for _ in range(10_000)], minlength=4)
        assert np.all(np.abs(counts / 10_000 - 0.25) <= 0.02)

    def test_window_fits_training_split(self):
        ds = index_dataset(2, 500)
        split = SplitSpec(350, 400, 500)
        rng = np.random.default_rng(1)
        starts = [sample_window(ds, split, 30, 20, 10, rng).start for _ in range(2000)]
        assert min(starts) == 0 and max(starts) == 350 - 30


class TestNeighbor:
    def test_proportional(self):
        g = AdjacencyGraph([[0, 1, 0, 3], [1, 0, 0, 0], [0, 0, 0, 0], [3, 0, 0, 0]])
        rng = np.random.default_rng(5)
        draws = np.bincount([sample_neighbor(g, 0, rng) for _ in range(10_000)], minlength=4) / 10_000
        assert draws[0] == draws[2] == 0
        assert abs(draws[1] - 0.25) <= 0.02 and abs(draws[3] - 0.75) <= 0.02

    def test_uniform_mode(self):
        g = AdjacencyGraph([[0, 1, 0, 3], [1, 0, 0, 0], [0, 0, 0, 0], [3, 0, 0, 0]])
        rng = np.random.default_rng(5)
        draws = np.bincount([sample_neighbor(g, 0, rng, "uniform") for _ in range(10_000)], minlength=4) / 10_000
        assert abs(draws[1] - 0.5) <= 0.02

    def test_isolated(self):
        g = AdjacencyGraph([[7, 0], [0, 0]])
        assert sample_neighbor(g, 0, np.random.default_rng(0)) is None

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            sample_neighbor(AdjacencyGraph([[0, 1], [1, 0]]), 0, np.random.default_rng(0), "nearest")


class TestMask:
    def test_single_step(self):
        m = gen_continuous_mask(100, 0.01, 1, np.random.default_rng(0))
        assert m.masked.sum() == 1

    def test_band_and_contiguity(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            m = gen_continuous_mask(100, 0.15, 5, rng)
            assert 10 <= m.masked.sum() <= 20
            assert runs(m.masked).sum() == m.masked.sum()

    def test_segments_are_runs(self):
        rng = np.random.default_rng(4)
        lens = np.concatenate([runs(gen_continuous_mask(200, 0.15, 5, rng).masked) for _ in range(300)])
        assert lens.mean() > 2.0  # geometric segments, not scattered single steps

    def test_deterministic(self):
        a = gen_continuous_mask(200, 0.2, 4, np.random.default_rng(11)).masked
        b = gen_continuous_mask(200, 0.2, 4, np.random.default_rng(11)).masked
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, 1.2])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ConfigError):
            gen_continuous_mask(100, ratio, 5, np.random.default_rng(0))

    def test_bad_segment_length(self):
        with pytest.raises(ConfigError):
            gen_continuous_mask(100, 0.1, 101, np.random.default_rng(0))

    @settings(max_examples=60)
    @given(st.integers(50, 400), st.floats(0.02, 0.6), st.floats(1, 20), st.integers(0, 2**32 - 1))
    def test_ratio_within_ten_percent(self, L1, ratio, seg, seed):
        m = gen_continuous_mask(L1, ratio, min(seg, L1), np.random.default_rng(seed))
        assert abs(m.realized_ratio - ratio) <= 0.1 * ratio + 0.5 / L1


class TestTriplet:
    def setup_method(self):
        self.ds = index_dataset(4, 600)
        self.graph = AdjacencyGraph([[0, 1, 0, 0], [1, 0, 2, 0], [0, 2, 0, 0], [0, 0, 0, 0]])

    def test_alignment(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            spec = sample_window(self.ds, SplitSpec(500, 550, 600), 300, 200, 100, rng)
            tr = make_triplet(self.ds, self.graph, spec, rng)
            i, t = spec.instance, spec.start
            np.testing.assert_array_equal(tr.view, 1000 * i + np.arange(t, t + 200))
            # overlap identity: view[l + u] and temporal[u] share a timestamp
            np.testing.assert_array_equal(tr.view[100:], tr.temporal[:100])
            if tr.fallback:
                assert i == 3
                np.testing.assert_array_equal(tr.spatial, tr.temporal)
            else:
                assert self.graph.weights[i, tr.neighbor] > 0
                np.testing.assert_array_equal(tr.spatial % 1000, tr.view % 1000)

    def test_targets_unmasked(self):
        tr = make_triplet(self.ds, self.graph, WindowSpec(1, 10, 300, 200, 100), np.random.default_rng(0))
        assert tr.mask.masked.any()
        assert tr.temporal_observed.all() and tr.spatial_observed.all()
        np.testing.assert_array_equal(tr.temporal, 1000 + np.arange(110, 310))

    def test_sampler_reproducible(self):
        split = SplitSpec(500, 550, 600)
        a = TripletSampler(self.ds, self.graph, split, seed=42).batch(8)
        b = TripletSampler(self.ds, self.graph, split, seed=42).batch(8)
        for x, y in zip(a, b):
            assert x.window == y.window and x.neighbor == y.neighbor
            assert np.array_equal(x.mask.masked, y.mask.masked)

    def test_sampler_rejects_misaligned_graph(self):
        with pytest.raises(ConfigError):
            TripletSampler(self.ds, AdjacencyGraph(np.ones((3, 3))), SplitSpec(500, 550, 600))
