"""Deterministic numeric substrate: seeded RNG, radix-2 real FFT, matrix ops.

All arrays are float64 (complex128 for spectra). The RNG is counter-based so
identical seeds give bit-identical streams on every platform; the algorithm
is written out in docs/formats.md. The FFT is an iterative radix-2
Cooley-Tukey with precomputed twiddle factors, vectorized over a batch of
frames; no FFT library is involved.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = x.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based pseudo-random generator (SplitMix64 output function).

    Output i of a generator with seed s is mix64(s + (i+1)*GOLDEN mod 2^64),
    which reproduces the reference SplitMix64 sequence started at state s.
    Jumping the counter is O(1), so block draws vectorize, and the stream
    for a given seed never depends on how draws were grouped into calls.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def _next_block(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.seed) + idx * np.uint64(_GOLDEN))

    def next_u64(self) -> int:
        return int(self._next_block(1)[0])

    def split(self) -> "Rng":
        """Child generator seeded from the next output; independent stream."""
        return Rng(self.next_u64())

    def uniform(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Uniform doubles in [0, 1): top 53 bits of each output word."""
        if shape == ():
            return float(self.next_u64() >> 11) * _INV_2_53
        n = int(np.prod(shape))
        if n < 0:
            raise ConfigError(f"negative draw count {shape}")
        u = (self._next_block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape)

    def normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        if shape == ():
            return float(self.normal((1,))[0])
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform((2, pairs))
        r = np.sqrt(-2.0 * np.log(1.0 - u[0]))  # 1-u in (0,1], log finite
        theta = 2.0 * math.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): stable argsort of n uniforms."""
        if n == 0:
            return np.empty(0, dtype=np.int64)
        return np.argsort(self.uniform((n,)), kind="stable").astype(np.int64)


# ---------------------------------------------------------------------------
# Matrix helpers. The carrier type is a C-ordered float64 ndarray; these
# wrappers pin the shape/validity contracts the rest of the code relies on.
# ---------------------------------------------------------------------------


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    from .errors import NumericError

    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


# ---------------------------------------------------------------------------
# Radix-2 FFT for real frames.
# ---------------------------------------------------------------------------

_WINDOWS = ("rectangular", "hann")

_twiddle_cache: dict[int, list[np.ndarray]] = {}
_bitrev_cache: dict[int, np.ndarray] = {}


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    perm = _bitrev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.int64)
        for i in range(n):
            r = 0
            x = i
            for _ in range(bits):
                r = (r << 1) | (x & 1)
                x >>= 1
            perm[i] = r
        _bitrev_cache[n] = perm
    return perm


def _twiddles(n: int) -> list[np.ndarray]:
    tws = _twiddle_cache.get(n)
    if tws is None:
        tws = []
        m = 2
        while m <= n:
            k = np.arange(m // 2)
            tws.append(np.exp(-2j * math.pi * k / m))
            m *= 2
        _twiddle_cache[n] = tws
    return tws


def _fft_complex(frames: np.ndarray) -> np.ndarray:
    """In-place-style iterative radix-2 DIT FFT over the last axis."""
    n = frames.shape[-1]
    a = frames[..., _bit_reversal(n)].astype(np.complex128)
    for stage, tw in enumerate(_twiddles(n)):
        m = 2 << stage
        half = m >> 1
        v = a.reshape(a.shape[:-1] + (n // m, m))
        hi = v[..., half:] * tw
        lo = v[..., :half].copy()
        v[..., :half] = lo + hi
        v[..., half:] = lo - hi
    return a


def window_values(kind: str, n: int) -> np.ndarray:
    """Analysis window samples; hann is the periodic variant used for STFT."""
    if kind == "rectangular":
        return np.ones(n)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(n) / n)
    raise ConfigError(f"unknown window {kind!r}; expected one of {_WINDOWS}")


def fft_real(frame: np.ndarray, window: str = "rectangular") -> np.ndarray:
    """Windowed DFT of one real frame, returning bins 0..n/2 (complex).

    The frame length must be a power of two. bins[k] = sum_n w[n] x[n]
    exp(-2i pi k n / n_fft) for k = 0..n_fft/2.
    """
    x = np.asarray(frame, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"frame must be 1-D, got shape {x.shape}")
    return fft_real_many(x[None, :], window)[0]


def fft_real_many(frames: np.ndarray, window: str = "rectangular") -> np.ndarray:
    """Batched fft_real: frames (n_frames, n_fft) -> (n_frames, 1 + n_fft/2)."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"frames must be 2-D, got shape {x.shape}")
    n = x.shape[1]
    if not _is_pow2(n):
        raise ConfigError(f"frame length {n} is not a power of two")
    spec = _fft_complex(x * window_values(window, n))
    return spec[:, : n // 2 + 1]
