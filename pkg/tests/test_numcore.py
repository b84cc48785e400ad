import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainshift.errors import ConfigError, ShapeError
from domainshift.numcore import Rng, fft_real, fft_real_many, matmul, window_values

# Reference SplitMix64 outputs for seed 0 (published test vectors).
SPLITMIX64_SEED0 = (0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F)


def naive_dft(x):
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (np.exp(-2j * math.pi * k * t / n) * x[None, :]).sum(axis=1)


class TestRng:
    def test_known_vectors(self):
        rng = Rng(0)
        assert tuple(rng.next_u64() for _ in range(3)) == SPLITMIX64_SEED0

    def test_same_seed_same_stream(self):
        a = Rng(1234).uniform((64,))
        b = Rng(1234).uniform((64,))
        assert a.tobytes() == b.tobytes()

    def test_stream_independent_of_call_grouping(self):
        whole = Rng(7).uniform((10,))
        rng = Rng(7)
        parts = np.concatenate([rng.uniform((3,)), rng.uniform((7,))])
        assert whole.tobytes() == parts.tobytes()

    def test_empty_draw(self):
        assert Rng(5).uniform((0,)).shape == (0,)

    def test_uniform_range_and_mean(self):
        u = Rng(42).uniform((100_000,))
        assert np.all(u >= 0.0) and np.all(u < 1.0)
        assert abs(u.mean() - 0.5) < 0.01

    def test_normal_moments(self):
        z = Rng(9).normal((100_000,))
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_normal_odd_count(self):
        z = Rng(3).normal((7,))
        assert z.shape == (7,) and np.all(np.isfinite(z))

    def test_split_children_differ(self):
        rng = Rng(100)
        c1, c2 = rng.split(), rng.split()
        assert c1.seed != c2.seed
        assert not np.allclose(c1.uniform((8,)), c2.uniform((8,)))

    def test_split_reproducible(self):
        a = Rng(100).split().uniform((8,))
        b = Rng(100).split().uniform((8,))
        assert a.tobytes() == b.tobytes()

    def test_permutation_is_permutation(self):
        p = Rng(11).permutation(257)
        assert sorted(p.tolist()) == list(range(257))

    def test_permutation_deterministic(self):
        assert np.array_equal(Rng(11).permutation(64), Rng(11).permutation(64))

    @given(st.integers(min_value=0, max_value=2**64 - 1))
    @settings(max_examples=25, deadline=None)
    def test_uniform_in_unit_interval_any_seed(self, seed):
        u = Rng(seed).uniform((16,))
        assert np.all((u >= 0.0) & (u < 1.0))


class TestMatmul:
    def test_identity(self):
        a = Rng(1).normal((3, 3))
        assert np.allclose(matmul(np.eye(3), a), a)

    def test_zero(self):
        a = Rng(2).normal((4, 3))
        assert np.all(matmul(a, np.zeros((3, 5))) == 0.0)

    def test_against_triple_loop(self):
        a = Rng(3).normal((4, 3))
        b = Rng(4).normal((3, 5))
        ref = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(matmul(a, b) - ref)) < 1e-12

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros(3), np.zeros((3, 2)))


class TestFft:
    def test_zero_frame(self):
        assert np.all(fft_real(np.zeros(2048)) == 0.0)

    def test_pure_cosine_bin(self):
        t = np.arange(2048)
        spec = fft_real(np.cos(2.0 * math.pi * 4.0 * t / 2048.0))
        mags = np.abs(spec)
        assert abs(mags[4] - 1024.0) < 1e-9
        mags[4] = 0.0
        assert np.max(mags) < 1e-9

    def test_bin_count(self):
        assert fft_real(np.ones(256)).shape == (129,)

    def test_matches_naive_dft(self):
        x = Rng(50).normal((512,))
        assert np.max(np.abs(fft_real(x) - naive_dft(x))) < 1e-9

    def test_matches_naive_dft_hann(self):
        x = Rng(51).normal((256,))
        ref = naive_dft(x * window_values("hann", 256))
        assert np.max(np.abs(fft_real(x, "hann") - ref)) < 1e-9

    def test_linearity(self):
        rng = Rng(60)
        x, y = rng.normal((1024,)), rng.normal((1024,))
        lhs = fft_real(2.5 * x - 1.25 * y)
        rhs = 2.5 * fft_real(x) - 1.25 * fft_real(y)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_parseval(self):
        x = Rng(61).normal((2048,))
        spec = fft_real(x)
        # rebuild the full spectrum from the half via conjugate symmetry
        full = np.concatenate([spec, np.conj(spec[-2:0:-1])])
        time_energy = np.sum(x * x)
        freq_energy = np.sum(np.abs(full) ** 2) / 2048.0
        assert abs(time_energy - freq_energy) / time_energy < 1e-6

    def test_batched_matches_single(self):
        frames = Rng(62).normal((5, 256))
        batch = fft_real_many(frames, "hann")
        for i in range(5):
            assert np.max(np.abs(batch[i] - fft_real(frames[i], "hann"))) < 1e-12

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ConfigError):
            fft_real(np.zeros(1000))

    def test_unknown_window_rejected(self):
        with pytest.raises(ConfigError):
            fft_real(np.zeros(64), "hamming")

    @given(st.integers(min_value=0, max_value=2**32))
    @settings(max_examples=20, deadline=None)
    def test_dft_oracle_any_seed(self, seed):
        x = Rng(seed).normal((128,))
        assert np.max(np.abs(fft_real(x) - naive_dft(x))) < 1e-9
