"""Audio feature pipeline: WAV decoding, dB spectrogram rows, intensity transforms.

A feature row is the dB power spectrum of one analysis frame (1 + n_fft/2
bins). Framing is centered with reflect padding and hop = n_fft/4, so a file
of n samples yields 1 + floor(n/hop) frames. The dB reference is the per-file
maximum power, clipped below at db_floor, giving values in [db_floor, 0].
The reference convention and the on-disk cache layout are documented in
docs/formats.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from .numcore import fft_real_many

POWER_FLOOR = 1e-10
TRANSFORM_KINDS = ("idx", "stanx", "logx", "sigmoidx", "gammax")
CACHE_MAGIC = b"DSF1"
_CACHE_HEADER = "<4sQQII"  # magic, n_frames, n_bins, sample_rate, hop


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 48000
    n_fft: int = 2048
    hop: int = 512
    window: str = "hann"
    db_floor: float = -80.0
    db_ref: str = "max_power"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_fft <= 0 or (self.n_fft & (self.n_fft - 1)) != 0:
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.hop <= 0:
            raise ConfigError(f"hop must be positive, got {self.hop}")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.db_floor >= 0:
            raise ConfigError(f"db_floor must be negative, got {self.db_floor}")
        if self.db_ref not in ("max_power", "unity"):
            raise ConfigError(f"db_ref must be max_power or unity, got {self.db_ref!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class FrameFeatureSet:
    features: np.ndarray  # (n_frames, n_bins) float64, dB
    frame_times: np.ndarray  # (n_frames,) seconds, frame centers
    source_file: str
    config: FeatureConfig


def load_wav(path) -> tuple[np.ndarray, int]:
    """Decode a RIFF/WAVE file to mono float64 samples in [-1, 1].

    Supports PCM 16-bit and IEEE float 32-bit, any channel count
    (channels are averaged). Integer samples are scaled by 1/32768.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    fmt = data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        pos += 8
        chunk = raw[pos : pos + size]
        if len(chunk) < size:
            raise DataError(f"{path}: truncated {cid.decode(errors='replace')!r} chunk")
        if cid == b"fmt ":
            fmt = chunk
        elif cid == b"data":
            data = chunk
        pos += size + (size & 1)  # RIFF chunks are 2-byte aligned
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    if len(fmt) < 16:
        raise FormatError(f"{path}: fmt chunk too short")
    tag, n_channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if n_channels < 1 or rate < 1:
        raise FormatError(f"{path}: invalid fmt chunk (channels={n_channels}, rate={rate})")
    if tag == 1 and bits == 16:
        width = 2
        if len(data) % (width * n_channels):
            raise DataError(f"{path}: data chunk is not a whole number of sample frames")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        width = 4
        if len(data) % (width * n_channels):
            raise DataError(f"{path}: data chunk is not a whole number of sample frames")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise FormatError(
            f"{path}: unsupported codec (format tag {tag}, {bits}-bit); "
            "expected PCM 16-bit or IEEE float 32-bit"
        )
    if n_channels > 1:
        samples = samples.reshape(-1, n_channels).mean(axis=1)
    return samples, int(rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono PCM 16-bit WAV (used by fixtures and the synthetic tools)."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, sample_rate, sample_rate * 2, 2, 16)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    Path(path).write_bytes(blob)


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    """Frames produced for n_samples under centered framing: 1 + n // hop."""
    if n_samples < 0:
        raise ConfigError(f"n_samples must be nonnegative, got {n_samples}")
    return 1 + n_samples // cfg.hop


def extract_features(samples, cfg: FeatureConfig, source_file: str = "") -> FrameFeatureSet:
    """dB power-spectrum rows for every centered frame of a sample vector.

    Per frame: window, real FFT, power = re^2 + im^2, then
    dB = 10 log10(max(power, 1e-10) / ref). With db_ref = max_power the
    reference is the largest power in the file and rows are clipped below at
    db_floor; a file whose max power is at or below 1e-10 (silence) maps to
    db_floor everywhere.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"samples must be 1-D, got shape {x.shape}")
    n = x.size
    n_frames = frame_count(n, cfg)
    half = cfg.n_fft // 2
    power = np.empty((n_frames, cfg.n_bins))
    if n == 0:
        power[:] = 0.0  # nothing to reflect; treat as one silent frame
    else:
        padded = np.pad(x, half, mode="reflect")
        offsets = np.arange(cfg.n_fft)
        for lo in range(0, n_frames, 4096):  # chunked: index matrix is large
            hi = min(lo + 4096, n_frames)
            idx = (np.arange(lo, hi) * cfg.hop)[:, None] + offsets[None, :]
            spec = fft_real_many(padded[idx], cfg.window)
            power[lo:hi] = spec.real**2 + spec.imag**2
    if cfg.db_ref == "max_power":
        ref = power.max()
        if ref <= POWER_FLOOR:
            db = np.full_like(power, cfg.db_floor)
        else:
            db = 10.0 * np.log10(np.maximum(power, POWER_FLOOR) / ref)
            np.maximum(db, cfg.db_floor, out=db)
    else:
        db = 10.0 * np.log10(np.maximum(power, POWER_FLOOR))
    times = np.arange(n_frames) * (cfg.hop / cfg.sample_rate)
    return FrameFeatureSet(db, times, source_file, cfg)


def extract_file(path, cfg: FeatureConfig) -> FrameFeatureSet:
    samples, rate = load_wav(path)
    if rate != cfg.sample_rate:
        raise DataError(
            f"{path}: sample rate {rate} Hz differs from configured "
            f"{cfg.sample_rate} Hz (resampling is not supported)"
        )
    return extract_features(samples, cfg, source_file=str(path))


# ---------------------------------------------------------------------------
# Intensity transforms. stanx/logx/gammax depend on matrix-level statistics;
# the stats are fitted once (on training features) and stored alongside model
# checkpoints so the identical mapping is replayed at evaluation time.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "idx"
    gamma: float = 4.2  # gammax exponent only

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform {self.kind!r}; expected one of {TRANSFORM_KINDS}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")

    @property
    def needs_stats(self) -> bool:
        return self.kind in ("stanx", "logx", "gammax")


@dataclass(frozen=True)
class TransformStats:
    x_min: float
    x_max: float


def fit_transform_stats(x) -> TransformStats:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise DataError("cannot fit transform statistics on an empty matrix")
    return TransformStats(float(a.min()), float(a.max()))


def apply_transform(x, spec: TransformSpec, stats: TransformStats | None = None) -> np.ndarray:
    """Elementwise intensity transform; fits stats from x when not supplied.

    idx(x) = x
    stanx(x) = (x - min) / (max - min), all-zero when max == min
    logx(x) = 255 log(81 + x) / log(81 + max)
    sigmoidx(x) = 255 e^(x+41) / (1 + e^(x+41))
    gammax(x) = 255 ((81 + x) / (81 + max))^gamma
    """
    a = np.asarray(x, dtype=np.float64)
    if spec.kind == "idx":
        return a.copy()
    if spec.kind == "sigmoidx":
        t = a + 41.0
        out = np.empty_like(t)
        pos = t >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
        e = np.exp(t[~pos])
        out[~pos] = e / (1.0 + e)
        return 255.0 * out
    if stats is None:
        stats = fit_transform_stats(a)
    if spec.kind == "stanx":
        span = stats.x_max - stats.x_min
        if span == 0.0:
            return np.zeros_like(a)
        return (a - stats.x_min) / span
    shifted = 81.0 + a
    top = 81.0 + stats.x_max
    if top <= 0.0 or np.any(shifted <= 0.0):
        raise NumericError(
            f"{spec.kind} domain error: 81 + x must be positive "
            "(inputs are expected to be dB values >= -80)"
        )
    if spec.kind == "logx":
        denom = np.log(top)
        if denom == 0.0:  # every value at the -80 floor
            return np.zeros_like(a)
        return 255.0 * np.log(shifted) / denom
    return 255.0 * (shifted / top) ** spec.gamma


# ---------------------------------------------------------------------------
# Feature cache: 28-byte header then row-major float64 LE. Layout in
# docs/formats.md.
# ---------------------------------------------------------------------------


def write_feature_cache(path, fs: FrameFeatureSet) -> None:
    f = np.ascontiguousarray(fs.features, dtype="<f8")
    if f.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {f.shape}")
    header = struct.pack(
        _CACHE_HEADER, CACHE_MAGIC, f.shape[0], f.shape[1],
        fs.config.sample_rate, fs.config.hop,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.tobytes())


def read_feature_cache(path) -> FrameFeatureSet:
    """Read a cache written by write_feature_cache.

    The header stores geometry only (frame/bin counts, rate, hop); window and
    dB settings are not round-tripped and default values are assumed.
    """
    path = Path(path)
    raw = path.read_bytes()
    head = struct.calcsize(_CACHE_HEADER)
    if len(raw) < head:
        raise FormatError(f"{path}: shorter than the feature-cache header")
    magic, n_frames, n_bins, rate, hop = struct.unpack_from(_CACHE_HEADER, raw, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    expected = head + n_frames * n_bins * 8
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f8", offset=head).reshape(n_frames, n_bins).copy()
    try:
        cfg = FeatureConfig(sample_rate=rate, n_fft=(n_bins - 1) * 2, hop=hop)
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid geometry in cache header ({exc})") from exc
    times = np.arange(n_frames) * (hop / rate)
    return FrameFeatureSet(feats, times, str(path), cfg)
