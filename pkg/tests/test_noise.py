import math

import numpy as np
import pytest

from gridsde.grids import GridLevel
from gridsde.noise import (
    NoiseAlphabet,
    NoiseError,
    NoisePath,
    conditional,
    enumerate_paths,
    expectation,
    expectation_detail,
    sample_paths,
)


class TestAlphabet:
    def test_white_is_normalized(self):
        a = NoiseAlphabet.white()
        assert a.symbols == (-1.0, 1.0)

    def test_from_symbols_rescales_to_unit_mean_square(self):
        a = NoiseAlphabet.from_symbols([-1.0, 0.0, 1.0])
        assert math.fsum(a.symbols) == pytest.approx(0.0, abs=1e-15)
        assert math.fsum(s * s for s in a.symbols) / 3 == pytest.approx(1.0, rel=1e-14)

    def test_nonzero_sum_rejected(self):
        with pytest.raises(NoiseError):
            NoiseAlphabet.from_symbols([0.0, 1.0])

    def test_unnormalized_direct_construction_rejected(self):
        with pytest.raises(NoiseError):
            NoiseAlphabet((-0.5, 0.5))

    def test_scaled_values(self):
        level = GridLevel(9)
        scaled = NoiseAlphabet.white().scaled(level)
        assert list(scaled) == [-3.0, 3.0]


class TestEnumeration:
    def test_count_is_two_to_n_plus_one(self):
        ens = enumerate_paths(GridLevel(8))
        assert ens.count == 512

    def test_n_equal_one_paths_in_lexicographic_order(self):
        ens = enumerate_paths(GridLevel(1))
        paths = [tuple(p.values) for p in ens.paths()]
        assert paths == [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]

    def test_each_path_exactly_once(self):
        ens = enumerate_paths(GridLevel(3))
        seen = {tuple(p.values) for p in ens.paths()}
        assert len(seen) == 16

    def test_cap_exceeded_advises_sampling(self):
        with pytest.raises(NoiseError, match="sampled"):
            enumerate_paths(GridLevel(40))

    def test_restriction_counting(self):
        # |R[0,t)| * |R_tau[t,1]| = |R| at t = k/n
        n = 6
        ens = enumerate_paths(GridLevel(n))
        for k in (0, 2, 5):
            prefixes = 2**k
            suffix = conditional(ens, tuple([math.sqrt(n)] * k)).count
            assert prefixes * suffix == ens.count

    def test_generalized_alphabet_count(self):
        alpha = NoiseAlphabet.from_symbols([-1.0, 0.0, 1.0])
        ens = enumerate_paths(GridLevel(2), alpha)
        assert ens.count == 3**3
        assert len({tuple(p.values) for p in ens.paths()}) == 27


class TestSampling:
    def test_same_seed_same_path(self):
        level = GridLevel(16)
        a = sample_paths(level, 10, seed=42).path(3)
        b = sample_paths(level, 10, seed=42).path(3)
        assert np.array_equal(a.values, b.values)

    def test_path_independent_of_batching(self):
        level = GridLevel(8)
        ens = sample_paths(level, 1000, seed=5)
        big = np.concatenate([block for _, block in ens.batches(1000)])
        small = np.concatenate([block for _, block in ens.batches(17)])
        assert np.array_equal(big, small)

    def test_different_seeds_differ(self):
        level = GridLevel(16)
        a = sample_paths(level, 1, seed=1).path(0)
        b = sample_paths(level, 1, seed=2).path(0)
        assert not np.array_equal(a.values, b.values)

    def test_sample_mean_clt_bound(self):
        n, m = 64, 1_000_000
        ens = sample_paths(GridLevel(n), m, seed=101)
        # single grid point suffices; pull it from the batch stream
        total = 0.0
        for _, block in ens.batches(1 << 16):
            total += float(block[:, 10].sum())
        mean = total / m
        assert abs(mean) <= 4.0 * math.sqrt(n) / math.sqrt(m)

    def test_mean_square_exact_for_binary(self):
        n, m = 64, 10_000
        ens = sample_paths(GridLevel(n), m, seed=7)
        block = next(ens.batches(m))[1]
        ms = float((block[:, 3] ** 2).mean())
        assert ms == pytest.approx(n, rel=1e-12)

    def test_values_lie_in_scaled_alphabet(self):
        level = GridLevel(9)
        ens = sample_paths(level, 500, seed=3)
        block = next(ens.batches(500))[1]
        assert set(np.unique(block)) <= {-3.0, 3.0}


class TestConditional:
    def test_count_formula(self):
        # n=2, binary, prefix of length 1 -> 2^(3-1) = 4 members
        ens = enumerate_paths(GridLevel(2))
        cond = conditional(ens, (math.sqrt(2),))
        assert cond.count == 4

    def test_members_agree_with_prefix(self):
        n = 4
        ens = enumerate_paths(GridLevel(n))
        prefix = (math.sqrt(n), -math.sqrt(n))
        cond = conditional(ens, prefix)
        for path in cond.paths():
            assert tuple(path.values[:2]) == prefix

    def test_count_independent_of_prefix(self):
        n = 5
        ens = enumerate_paths(GridLevel(n))
        s = math.sqrt(n)
        counts = {
            conditional(ens, p).count
            for p in [(s, s), (s, -s), (-s, s), (-s, -s)]
        }
        assert counts == {2 ** (n - 1)}

    def test_conditional_moments_exact(self):
        n = 4
        ens = enumerate_paths(GridLevel(n))
        cond = conditional(ens, (math.sqrt(n), math.sqrt(n)))
        mean = expectation(cond, lambda p: float(p.values[2]))
        second = expectation(cond, lambda p: float(p.values[2] ** 2))
        assert mean == 0.0
        assert second == pytest.approx(n, rel=1e-14)

    def test_sampled_mode_unsupported(self):
        ens = sample_paths(GridLevel(4), 10, seed=1)
        with pytest.raises(NoiseError, match="exhaustive"):
            conditional(ens, (2.0,))

    def test_bad_prefix_symbol_rejected(self):
        ens = enumerate_paths(GridLevel(4))
        with pytest.raises(NoiseError):
            conditional(ens, (0.5,))


class TestExpectation:
    def test_constant_functional(self):
        ens = enumerate_paths(GridLevel(3))
        assert expectation(ens, lambda p: 2.5) == 2.5

    def test_single_point_mean_zero_exact(self):
        ens = enumerate_paths(GridLevel(6))
        assert expectation(ens, lambda p: float(p.values[4])) == 0.0

    def test_tower_property_exact_for_arbitrary_functionals(self):
        n = 4
        ens = enumerate_paths(GridLevel(n))
        functionals = [
            lambda p: float(np.max(np.cumsum(p.values))),
            lambda p: float(math.sin(p.values[1]) * p.values[3] ** 2),
            lambda p: float(abs(p.values).sum()),
        ]
        s = math.sqrt(n)
        for phi in functionals:
            full = expectation(ens, phi)
            partials = []
            for bits in range(4):
                prefix = (s if bits & 2 else -s, s if bits & 1 else -s)
                partials.append(expectation(conditional(ens, prefix), phi))
            assert full == pytest.approx(math.fsum(partials) / 4, rel=1e-12, abs=1e-12)

    def test_non_finite_value_names_path(self):
        ens = enumerate_paths(GridLevel(2))
        def bad(p):
            return float("inf") if p.path_index == 5 else 0.0
        with pytest.raises(NoiseError, match="path 5"):
            expectation(ens, bad)

    def test_sampled_standard_error_reported(self):
        ens = sample_paths(GridLevel(4), 400, seed=9)
        detail = expectation_detail(ens, lambda p: float(p.values[0]))
        assert detail.count == 400
        assert detail.stderr > 0.0

    def test_exhaustive_cross_moments_exact(self):
        n = 6
        ens = enumerate_paths(GridLevel(n))
        block = np.concatenate([b for _, b in ens.batches()])
        second = block.T @ block / ens.count
        assert np.max(np.abs(second - n * np.eye(n + 1))) <= 1e-10 * n


class TestNoisePath:
    def test_length_enforced(self):
        with pytest.raises(NoiseError):
            NoisePath(GridLevel(4), np.zeros(3))

    def test_values_read_only(self):
        path = enumerate_paths(GridLevel(2)).path(0)
        with pytest.raises(ValueError):
            path.values[0] = 0.0
