"""Labeled frame datasets: interval labels, seeded splits, batching, synthesis.

A DomainDataset is a feature matrix plus parallel label/origin arrays and an
optional split assignment. Splits are contiguous slices of one seeded
permutation with largest-remainder rounding of the requested ratios, so the
assignment is reproducible sample-for-sample. The synthetic generator builds
a controllable two-domain benchmark with a known Bayes accuracy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError
from .features import FeatureConfig, extract_file, read_feature_cache
from .numcore import Rng

SPLIT_NAMES = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}
_UNUSED = -1  # samples dropped by subsample keep their rows but leave the split

INTERVAL_HEADER = ("file", "start_s", "end_s")


@dataclass
class DomainDataset:
    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int64, 0 = non-cut, 1 = cut
    domain: str  # source | target | mixed (mixed only via concatenation)
    origins: list  # (file id, frame index) per row
    split_codes: np.ndarray | None = None  # (n,) int8: 0/1/2, -1 = unused

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or len(self.origins) != n:
            raise ShapeError("features, labels, and origins must have equal length")
        if n and not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        if self.domain not in ("source", "target", "mixed"):
            raise DataError(f"domain must be source, target, or mixed, got {self.domain!r}")
        if self.split_codes is not None and self.split_codes.shape != (n,):
            raise ShapeError("split_codes length must match sample count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in _SPLIT_CODE:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
        if self.split_codes is None:
            raise DataError("dataset has no split assignment; call split() first")
        return np.flatnonzero(self.split_codes == _SPLIT_CODE[split])

    def n(self, split: str) -> int:
        return self.indices(split).size

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]


def concat_datasets(a: DomainDataset, b: DomainDataset) -> DomainDataset:
    """Row-concatenate two datasets (split assignments carried over)."""
    if a.dim != b.dim:
        raise ShapeError(f"feature dims differ: {a.dim} vs {b.dim}")
    if (a.split_codes is None) != (b.split_codes is None):
        raise DataError("cannot concatenate a split dataset with an unsplit one")
    codes = None
    if a.split_codes is not None:
        codes = np.concatenate([a.split_codes, b.split_codes])
    domain = a.domain if a.domain == b.domain else "mixed"
    return DomainDataset(
        np.vstack([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        domain,
        list(a.origins) + list(b.origins),
        codes,
    )


# ---------------------------------------------------------------------------
# Interval labels.
# ---------------------------------------------------------------------------


def normalize_intervals(intervals) -> list[tuple[float, float]]:
    """Validate, sort, and merge overlapping/adjacent [start, end) intervals."""
    out: list[tuple[float, float]] = []
    for start, end in sorted((float(s), float(e)) for s, e in intervals):
        if not (0.0 <= start < end):
            raise DataError(f"malformed interval [{start}, {end}): need 0 <= start < end")
        if out and start <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], end))
        else:
            out.append((start, end))
    return out


def label_frames(frame_times, intervals) -> np.ndarray:
    """label[i] = 1 iff frame_times[i] falls inside any [start, end) interval."""
    t = np.asarray(frame_times, dtype=np.float64)
    merged = normalize_intervals(intervals)
    labels = np.zeros(t.shape[0], dtype=np.int64)
    if merged:
        starts = np.array([s for s, _ in merged])
        ends = np.array([e for _, e in merged])
        pos = np.searchsorted(starts, t, side="right") - 1
        inside = (pos >= 0) & (t < ends[np.maximum(pos, 0)])
        labels[inside] = 1
    return labels


def read_interval_csv(path) -> dict[str, list[tuple[float, float]]]:
    """Parse a label CSV with the exact header file,start_s,end_s."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty label CSV") from None
        if tuple(h.strip() for h in header) != INTERVAL_HEADER:
            raise FormatError(
                f"{path}: expected header {','.join(INTERVAL_HEADER)}, got {','.join(header)}"
            )
        table: dict[str, list[tuple[float, float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            name = row[0].strip()
            try:
                start, end = float(row[1]), float(row[2])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric interval bound") from exc
            table.setdefault(name, []).append((start, end))
    return {name: normalize_intervals(ivs) for name, ivs in table.items()}


# ---------------------------------------------------------------------------
# Splits, subsampling, batches.
# ---------------------------------------------------------------------------


def split_sizes(n: int, ratios) -> tuple[int, ...]:
    """Largest-remainder apportionment of n samples across ratios.

    Floors of n*r are topped up in order of descending fractional part
    (ties broken toward the earlier split), so counts always sum to n.
    """
    r = [float(v) for v in ratios]
    if any(v < 0 for v in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {ratios}")
    exact = [n * v for v in r]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(r)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def split(ds: DomainDataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DomainDataset:
    """Assign train/val/test as contiguous slices of one seeded permutation."""
    if len(ratios) != 3:
        raise ConfigError(f"expected 3 ratios (train, val, test), got {len(ratios)}")
    counts = split_sizes(len(ds), ratios)
    perm = Rng(seed).permutation(len(ds))
    codes = np.empty(len(ds), dtype=np.int8)
    lo = 0
    for code, count in enumerate(counts):
        codes[perm[lo : lo + count]] = code
        lo += count
    return replace(ds, split_codes=codes)


def subsample(ds: DomainDataset, n: int, seed: int, split_name: str = "train") -> DomainDataset:
    """Keep the first n of a seeded shuffle of one split; other splits intact."""
    idx = ds.indices(split_name)
    if n < 0 or n > idx.size:
        raise DataError(f"cannot subsample {n} of {idx.size} {split_name} samples")
    keep = idx[Rng(seed).permutation(idx.size)[:n]]
    codes = ds.split_codes.copy()
    codes[idx] = _UNUSED
    codes[keep] = _SPLIT_CODE[split_name]
    return replace(ds, split_codes=codes)


def batches(ds: DomainDataset, split_name: str, batch_size: int, seed: int,
            cycle: bool = False, epochs: int = 1):
    """Yield (features, labels) batches from one split.

    Each pass reshuffles with Rng(seed + epoch). Without cycling the iterator
    runs `epochs` passes and the final batch of each pass may be short. With
    cycling it is an endless stream: the index sequence is perm_e[i mod n]
    with e = i // n, cut into exact batch_size chunks across wrap points
    (small splits are reused many times per consumer epoch).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = ds.indices(split_name)
    n = idx.size
    if n == 0:
        if cycle:
            raise DataError(f"cannot cycle an empty {split_name} split")
        return
    if cycle:
        epoch = 0
        order = idx[Rng(seed + epoch).permutation(n)]
        pos = 0
        while True:
            chosen = np.empty(batch_size, dtype=np.int64)
            filled = 0
            while filled < batch_size:
                take = min(batch_size - filled, n - pos)
                chosen[filled : filled + take] = order[pos : pos + take]
                filled += take
                pos += take
                if pos == n:
                    epoch += 1
                    order = idx[Rng(seed + epoch).permutation(n)]
                    pos = 0
            yield ds.features[chosen], ds.labels[chosen]
    else:
        for epoch in range(epochs):
            order = idx[Rng(seed + epoch).permutation(n)]
            for lo in range(0, n, batch_size):
                chosen = order[lo : lo + batch_size]
                yield ds.features[chosen], ds.labels[chosen]


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return -(-n_train // batch_size)


# ---------------------------------------------------------------------------
# Synthetic two-domain benchmark.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    dim: int = 1025
    n_source: int = 3000
    n_target: int = 1000
    class_sep: float = 4.0
    domain_shift: float = 3.0
    domain_scale: float = 1.0
    seed: int = 0
    embed_seed_source: int | None = None  # default: one embedding shared by both
    embed_seed_target: int | None = None

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.n_source < 0 or self.n_target < 0:
            raise ConfigError("sample counts must be nonnegative")
        if self.class_sep < 0 or self.domain_scale <= 0:
            raise ConfigError("class_sep must be >= 0 and domain_scale > 0")


def _orthonormal_columns(rng: Rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs  # sign-fixed so the factorization is unique


def _latent_cloud(rng: Rng, n: int, axis: np.ndarray, class_sep: float) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(n, dtype=np.int64) % 2
    z = rng.normal((n, axis.size))
    z += (labels[:, None] - 0.5) * class_sep * axis[None, :]
    return z, labels


def synth_domains(spec: SynthSpec) -> tuple[DomainDataset, DomainDataset, float]:
    """Two-domain Gaussian benchmark with an analytically known Bayes accuracy.

    Latents are 2-class Gaussians with unit noise, class means at
    +/- class_sep/2 along a random unit axis. Each domain embeds its latents
    through orthonormal columns into dim dimensions; by default both domains
    share one embedding (required for the zero-shift sanity property), and
    embed_seed_source/embed_seed_target override it per domain. The target
    additionally scales by domain_scale and offsets by domain_shift along its
    embedded class axis, which is what degrades source-only classifiers.
    Bayes accuracy is Phi(class_sep / 2) regardless of the embedding.
    """
    master = Rng(spec.seed)
    r_axis = master.split()
    r_embed = master.split()
    r_source = master.split()
    r_target = master.split()

    latent_dim = min(16, spec.dim)
    axis = r_axis.normal((latent_dim,))
    norm = float(np.linalg.norm(axis))
    axis = axis / norm if norm > 1e-12 else np.eye(latent_dim)[0]

    q_shared = _orthonormal_columns(r_embed, spec.dim, latent_dim)
    q_s = q_shared if spec.embed_seed_source is None else _orthonormal_columns(
        Rng(spec.embed_seed_source), spec.dim, latent_dim)
    q_t = q_shared if spec.embed_seed_target is None else _orthonormal_columns(
        Rng(spec.embed_seed_target), spec.dim, latent_dim)

    z_s, y_s = _latent_cloud(r_source, spec.n_source, axis, spec.class_sep)
    z_t, y_t = _latent_cloud(r_target, spec.n_target, axis, spec.class_sep)
    x_s = z_s @ q_s.T
    x_t = spec.domain_scale * (z_t @ q_t.T) + spec.domain_shift * (q_t @ axis)[None, :]

    source = DomainDataset(x_s, y_s, "source", [("synth:source", i) for i in range(spec.n_source)])
    target = DomainDataset(x_t, y_t, "target", [("synth:target", i) for i in range(spec.n_target)])
    bayes = 0.5 * (1.0 + math.erf(spec.class_sep / (2.0 * math.sqrt(2.0))))
    return source, target, bayes


# ---------------------------------------------------------------------------
# Dataset manifest: JSON listing audio files, their domain, and label CSVs.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path  # resolved audio path
    domain: str
    labels: Path | None  # resolved label CSV path


@dataclass(frozen=True)
class Manifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def domain_entries(self, domain: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.domain == domain]


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise FormatError(f"{path}: expected an object with version 1")
    files = doc.get("files")
    if not isinstance(files, list):
        raise FormatError(f"{path}: missing files list")
    root = path.parent
    entries = []
    for i, item in enumerate(files):
        if not isinstance(item, dict):
            raise FormatError(f"{path}: files[{i}] is not an object")
        unknown = set(item) - {"path", "domain", "labels"}
        if unknown:
            raise FormatError(f"{path}: files[{i}] has unknown keys {sorted(unknown)}")
        if "path" not in item or "domain" not in item:
            raise FormatError(f"{path}: files[{i}] needs path and domain")
        if not isinstance(item["path"], str):
            raise FormatError(f"{path}: files[{i}] path must be a string")
        if item["domain"] not in ("source", "target"):
            raise DataError(f"{path}: files[{i}] domain must be source or target")
        labels = item.get("labels")
        if labels is not None and not isinstance(labels, str):
            raise FormatError(
                f"{path}: files[{i}] labels must be a CSV path string, "
                f"got {type(labels).__name__}"
            )
        entries.append(ManifestEntry(
            root / item["path"], item["domain"],
            (root / labels) if labels else None,
        ))
    return Manifest(root, tuple(entries))


def cache_path_for(entry: ManifestEntry, cache_dir) -> Path:
    return Path(cache_dir) / (entry.path.stem + ".dsf")


def load_domain(manifest: Manifest, domain: str, cfg: FeatureConfig,
                cache_dir=None) -> DomainDataset:
    """Assemble one domain's labeled frames from the manifest.

    Uses a feature cache file when cache_dir holds one for the audio file,
    otherwise extracts from the WAV. Every entry needs a label CSV here;
    unlabeled files are only usable through the timeline-inference path.
    """
    entries = manifest.domain_entries(domain)
    if not entries:
        raise DataError(f"manifest has no {domain} files")
    feats, labels, origins = [], [], []
    for entry in entries:
        if entry.labels is None:
            raise DataError(f"{entry.path}: no label CSV in manifest; cannot build a training set")
        fs = None
        if cache_dir is not None:
            cache = cache_path_for(entry, cache_dir)
            if cache.exists():
                fs = read_feature_cache(cache)
        if fs is None:
            fs = extract_file(entry.path, cfg)
        table = read_interval_csv(entry.labels)
        y = label_frames(fs.frame_times, table.get(entry.path.name, []))
        feats.append(fs.features)
        labels.append(y)
        origins.extend((str(entry.path), i) for i in range(fs.features.shape[0]))
    return DomainDataset(np.vstack(feats), np.concatenate(labels), domain, origins)
