"""Frozen-embedding dataset model, EMB1 binary I/O, synthetic generation, batching.

The EMB1 format (little-endian, no padding):

    magic "EMB1" | u32 version=1 | u32 N | u32 D | u32 C | u32 flags
    N x i32 labels | N*D x f32 features (row-major)
    [flags bit0] C*D x f32 prototypes
    [flags bit1] N x u8 ood flags

flags bit2 records that features are already L2-normalized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .numkit import RandomStream

MAGIC = b"EMB1"
VERSION = 1
FLAG_PROTOTYPES = 1
FLAG_OOD_MASK = 2
FLAG_NORMALIZED = 4

_HEADER = struct.Struct("<4sIIIII")


@dataclass
class EmbeddingDataset:
    """Frozen backbone outputs with partial labels.

    ``labels`` holds -1 for unlabeled rows. ``ood_mask`` and ``true_labels`` are
    evaluation-only ground truth; ``true_labels`` never round-trips through EMB1
    (the format has no block for it) and is only populated by in-process
    generators.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    prototypes: Optional[np.ndarray] = None
    ood_mask: Optional[np.ndarray] = None
    normalized: bool = False
    true_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.prototypes is not None:
            self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        if self.ood_mask is not None:
            self.ood_mask = np.ascontiguousarray(self.ood_mask, dtype=bool)
        if self.true_labels is not None:
            self.true_labels = np.ascontiguousarray(self.true_labels, dtype=np.int32)
        self.validate()

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels < 0)

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n, d = self.features.shape
        if self.labels.shape != (n,):
            raise ValueError("labels length must match feature rows")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        bad = (self.labels < -1) | (self.labels >= self.num_classes)
        if np.any(bad):
            raise ValueError(f"label out of range at row {int(np.flatnonzero(bad)[0])}")
        if self.prototypes is not None and self.prototypes.shape != (self.num_classes, d):
            raise ValueError("prototypes must be C x D")
        if self.ood_mask is not None:
            if self.ood_mask.shape != (n,):
                raise ValueError("ood_mask length must match feature rows")
            if np.any(self.ood_mask & (self.labels >= 0)):
                raise ValueError("ood_mask set on a labeled row")
        if self.true_labels is not None and self.true_labels.shape != (n,):
            raise ValueError("true_labels length must match feature rows")


def ensure_normalized(dataset: EmbeddingDataset) -> EmbeddingDataset:
    """Return a copy with unit-L2 feature rows (no-op when already flagged)."""
    if dataset.normalized:
        return dataset
    norms = np.linalg.norm(dataset.features.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    feats = (dataset.features / norms).astype(np.float32)
    return replace(dataset, features=feats, normalized=True)


# ---------------------------------------------------------------------------
# EMB1 I/O
# ---------------------------------------------------------------------------


def write_emb1(dataset: EmbeddingDataset, path) -> None:
    dataset.validate()
    flags = 0
    if dataset.prototypes is not None:
        flags |= FLAG_PROTOTYPES
    if dataset.ood_mask is not None:
        flags |= FLAG_OOD_MASK
    if dataset.normalized:
        flags |= FLAG_NORMALIZED
    header = _HEADER.pack(MAGIC, VERSION, dataset.n, dataset.d, dataset.num_classes, flags)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.labels.astype("<i4").tobytes())
        fh.write(dataset.features.astype("<f4").tobytes())
        if dataset.prototypes is not None:
            fh.write(dataset.prototypes.astype("<f4").tobytes())
        if dataset.ood_mask is not None:
            fh.write(dataset.ood_mask.astype(np.uint8).tobytes())


class _Cursor:
    """Sequential reader that reports the byte offset of any shortfall."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, nbytes: int, what: str) -> bytes:
        if self.offset + nbytes > len(self.data):
            raise FormatError(
                f"truncated {what}: need {nbytes} bytes at offset {self.offset}, "
                f"file has {len(self.data) - self.offset}"
            )
        out = self.data[self.offset : self.offset + nbytes]
        self.offset += nbytes
        return out


def read_emb1(path) -> EmbeddingDataset:
    """Parse an EMB1 file bit-exactly (no normalization is applied here)."""
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    raw = cur.take(_HEADER.size, "header")
    magic, version, n, d, c, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError("bad magic at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if d == 0 or c == 0:
        raise FormatError("zero dimension or class count at offset 8")

    labels_off = cur.offset
    labels = np.frombuffer(cur.take(4 * n, "label block"), dtype="<i4").copy()
    bad = np.flatnonzero((labels < -1) | (labels >= c))
    if bad.size:
        raise FormatError(
            f"label out of range at offset {labels_off + 4 * int(bad[0])}"
        )

    feat_off = cur.offset
    features = (
        np.frombuffer(cur.take(4 * n * d, "feature block"), dtype="<f4")
        .copy()
        .reshape(n, d)
    )
    nonfinite = np.flatnonzero(~np.isfinite(features.ravel()))
    if nonfinite.size:
        raise FormatError(
            f"non-finite feature at offset {feat_off + 4 * int(nonfinite[0])}"
        )

    prototypes = None
    if flags & FLAG_PROTOTYPES:
        proto_off = cur.offset
        prototypes = (
            np.frombuffer(cur.take(4 * c * d, "prototype block"), dtype="<f4")
            .copy()
            .reshape(c, d)
        )
        nonfinite = np.flatnonzero(~np.isfinite(prototypes.ravel()))
        if nonfinite.size:
            raise FormatError(
                f"non-finite prototype at offset {proto_off + 4 * int(nonfinite[0])}"
            )

    ood_mask = None
    if flags & FLAG_OOD_MASK:
        ood_off = cur.offset
        raw_mask = np.frombuffer(cur.take(n, "ood block"), dtype=np.uint8)
        bad = np.flatnonzero(raw_mask > 1)
        if bad.size:
            raise FormatError(f"ood flag not 0/1 at offset {ood_off + int(bad[0])}")
        ood_mask = raw_mask.astype(bool)
        clash = np.flatnonzero(ood_mask & (labels >= 0))
        if clash.size:
            raise FormatError(
                f"ood flag set on labeled row {int(clash[0])} (offset {ood_off + int(clash[0])})"
            )

    if cur.offset != len(data):
        raise FormatError(f"trailing bytes at offset {cur.offset}")

    return EmbeddingDataset(
        features=features,
        labels=labels,
        num_classes=c,
        prototypes=prototypes,
        ood_mask=ood_mask,
        normalized=bool(flags & FLAG_NORMALIZED),
    )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def longtail_counts(n1: int, c: int, rho: float) -> np.ndarray:
    """Per-class counts decaying geometrically from n1 down to ~n1/rho.

    Entry k (1-based) is round(n1 * rho^(-(k-1)/(c-1))), floored at 1.
    """
    if n1 < 1 or c < 2 or rho < 1:
        raise ValueError("longtail_counts requires n1 >= 1, c >= 2, rho >= 1")
    k = np.arange(c, dtype=np.float64)
    raw = n1 * rho ** (-k / (c - 1))
    counts = np.floor(raw + 0.5).astype(np.int64)
    return np.maximum(counts, 1)


def _as_per_class(value, c: int, name: str) -> np.ndarray:
    if np.isscalar(value):
        out = np.full(c, int(value), dtype=np.int64)
    else:
        out = np.asarray(value, dtype=np.int64)
        if out.shape != (c,):
            raise ConfigError(f"{name} must be a scalar or length-{c} vector")
    if np.any(out < 0):
        raise ConfigError(f"{name} entries must be >= 0")
    return out


# Sphere radii tried for mean placement, as multiples of the separation floor.
# The tightest feasible radius wins so pairwise distances concentrate just
# above the floor and class_sep acts as the actual difficulty knob; larger
# radii are fallbacks for crowded (c, d) combinations.
_RADIUS_SCHEDULE = (0.75, 0.85, 1.0, 1.2, 1.5, 2.0, 3.0)


def _try_place(n_means, d, min_dist, radius, rng, existing, max_attempts):
    means = list(existing)
    placed = []
    for _ in range(n_means):
        for _attempt in range(max_attempts):
            v = rng.normal(d)
            norm = float(np.linalg.norm(v))
            if norm == 0.0:
                continue
            cand = v / norm * radius
            if all(np.linalg.norm(cand - m) >= min_dist for m in means):
                means.append(cand)
                placed.append(cand)
                break
        else:
            return None
    return placed


def _place_means(
    n_means: int, d: int, min_dist: float, rng: RandomStream,
    existing: Optional[np.ndarray] = None, max_attempts: int = 300,
) -> np.ndarray:
    """Place means on a sphere with pairwise distance >= min_dist.

    Rejection sampling over a schedule of growing sphere radii; a failed
    placement restarts wholesale at the next radius, so the outcome is a pure
    function of the rng.
    """
    prior = [] if existing is None else [m for m in existing]
    for factor in _RADIUS_SCHEDULE:
        placed = _try_place(
            n_means, d, min_dist, factor * min_dist, rng, prior, max_attempts
        )
        if placed is not None:
            return np.array(placed)
    raise ConfigError(
        f"infeasible geometry: cannot place {n_means} means in {d} dims "
        f"with separation {min_dist:g}"
    )


def gen_blobs(
    c: int,
    d: int,
    n_labeled_per_class,
    m_unlabeled_per_class,
    class_sep: float,
    noise_sd: float,
    rng: RandomStream,
    bias_profile: Optional[Sequence[float]] = None,
    n_ood: int = 0,
    sample_key: str = "train",
) -> EmbeddingDataset:
    """Gaussian-blob embeddings with a labeled/unlabeled split and optional OOD tail.

    Class means sit on a sphere of radius class_sep*noise_sd with pairwise
    distance at least that radius. ``sample_key`` selects an independent sample
    sub-stream while keeping the means fixed, so matched train/test splits come
    from the same geometry. ``true_labels`` carries generation ground truth for
    every in-distribution row (-1 for OOD rows).
    """
    if c < 2 or d < 2:
        raise ConfigError("gen_blobs requires c >= 2 and d >= 2")
    if noise_sd <= 0:
        raise ConfigError("gen_blobs requires noise_sd > 0")
    if n_ood < 0:
        raise ConfigError("gen_blobs requires n_ood >= 0")
    labeled = _as_per_class(n_labeled_per_class, c, "n_labeled_per_class")
    unlabeled = _as_per_class(m_unlabeled_per_class, c, "m_unlabeled_per_class")
    if bias_profile is None:
        bias = np.ones(c)
    else:
        bias = np.asarray(bias_profile, dtype=np.float64)
        if bias.shape != (c,) or np.any(bias <= 0):
            raise ConfigError("bias_profile must be a length-c vector of positive scales")

    sep = class_sep * noise_sd
    mean_rng = rng.derive("means")
    means = _place_means(c, d, min_dist=sep, rng=mean_rng)
    # OOD clusters emulate a 50% novel-class mix: about c/2 extra means.
    ood_means = np.zeros((0, d))
    if n_ood > 0:
        n_ood_means = max(1, round(c / 2))
        ood_means = _place_means(
            n_ood_means, d, min_dist=sep, rng=mean_rng, existing=means
        )

    sample_rng = rng.derive(f"samples/{sample_key}")
    feats, labels, truth, ood_flags = [], [], [], []
    for k in range(c):
        total = int(labeled[k] + unlabeled[k])
        if total == 0:
            continue
        block = sample_rng.normal((total, d), sd=noise_sd * bias[k]) + means[k]
        feats.append(block)
        labels.extend([k] * int(labeled[k]) + [-1] * int(unlabeled[k]))
        truth.extend([k] * total)
        ood_flags.extend([False] * total)
    for j in range(n_ood):
        m = ood_means[j % len(ood_means)]
        feats.append(sample_rng.normal((1, d), sd=noise_sd) + m)
        labels.append(-1)
        truth.append(-1)
        ood_flags.append(True)

    if not feats:
        raise ConfigError("gen_blobs produced an empty dataset")
    features = np.vstack(feats)
    return EmbeddingDataset(
        features=features,
        labels=np.array(labels, dtype=np.int32),
        num_classes=c,
        ood_mask=np.array(ood_flags, dtype=bool) if n_ood > 0 else None,
        normalized=False,
        true_labels=np.array(truth, dtype=np.int32),
    )


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sd: float = 0.0
    strong_noise_sd: float = 0.05
    strong_drop_frac: float = 0.10

    def validate(self) -> None:
        if self.weak_noise_sd < 0 or self.strong_noise_sd < 0:
            raise ConfigError("augmentation noise sds must be >= 0")
        if not (0.0 <= self.strong_drop_frac < 1.0):
            raise ConfigError("strong_drop_frac must be in [0, 1)")


def augment_view(x: np.ndarray, view: str, cfg: AugmentConfig, rng: RandomStream) -> np.ndarray:
    """Weak: additive Gaussian noise. Strong: dimension dropout then noise."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if view == "weak":
        if cfg.weak_noise_sd == 0.0:
            return x.copy()
        return x + rng.normal(x.shape, sd=cfg.weak_noise_sd)
    if view == "strong":
        out = x.copy()
        k = int(np.floor(cfg.strong_drop_frac * d))
        if k > 0:
            if out.ndim == 1:
                out[rng.subset(d, k)] = 0.0
            else:
                for row in out:
                    row[rng.subset(d, k)] = 0.0
        if cfg.strong_noise_sd > 0.0:
            out = out + rng.normal(out.shape, sd=cfg.strong_noise_sd)
        return out
    raise ValueError(f"unknown view {view!r}")


@dataclass
class Batch:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_weak: np.ndarray
    unlabeled_strong: np.ndarray
    unlabeled_index: np.ndarray
    labeled_index: np.ndarray


class _Cycler:
    """Shuffled index pool that reshuffles at every wraparound."""

    def __init__(self, indices: np.ndarray, rng: RandomStream):
        self.base = indices
        self.rng = rng
        self.order = indices[rng.permutation(len(indices))]
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            avail = len(self.order) - self.pos
            chunk = min(avail, k - filled)
            out[filled : filled + chunk] = self.order[self.pos : self.pos + chunk]
            self.pos += chunk
            filled += chunk
            if self.pos == len(self.order):
                self.order = self.base[self.rng.permutation(len(self.base))]
                self.pos = 0
        return out


class BatchSampler:
    """Deterministic labeled/unlabeled batch stream over a dataset.

    Labeled rows receive the weak view; unlabeled rows receive aligned weak and
    strong views of the same source sample. Pools cycle with reshuffle across
    epoch boundaries.
    """

    def __init__(
        self,
        dataset: EmbeddingDataset,
        b: int,
        mu: int,
        rng: RandomStream,
        aug: AugmentConfig = AugmentConfig(),
    ):
        if b < 1 or mu < 1:
            raise ConfigError("batch size b and ratio mu must be >= 1")
        labeled = dataset.labeled_indices()
        unlabeled = dataset.unlabeled_indices()
        if labeled.size == 0:
            raise ConfigError("dataset has no labeled samples")
        if unlabeled.size == 0:
            raise ConfigError("dataset has no unlabeled samples")
        aug.validate()
        self.dataset = dataset
        self.b = b
        self.mu = mu
        self.aug = aug
        self._labeled = _Cycler(labeled, rng.derive("order/labeled"))
        self._unlabeled = _Cycler(unlabeled, rng.derive("order/unlabeled"))
        self._aug_rng = rng.derive("augment")

    def next_batch(self) -> Batch:
        li = self._labeled.take(self.b)
        ui = self._unlabeled.take(self.b * self.mu)
        feats = self.dataset.features
        lx = augment_view(feats[li].astype(np.float64), "weak", self.aug, self._aug_rng)
        uw = augment_view(feats[ui].astype(np.float64), "weak", self.aug, self._aug_rng)
        us = augment_view(feats[ui].astype(np.float64), "strong", self.aug, self._aug_rng)
        return Batch(
            labeled_x=lx,
            labeled_y=self.dataset.labels[li].astype(np.int64),
            unlabeled_weak=uw,
            unlabeled_strong=us,
            unlabeled_index=ui,
            labeled_index=li,
        )

    def take(self, steps: int) -> Iterator[Batch]:
        for _ in range(steps):
            yield self.next_batch()


def sample_batches(
    dataset: EmbeddingDataset,
    b: int,
    mu: int,
    epoch_steps: int,
    rng: RandomStream,
    aug: AugmentConfig = AugmentConfig(),
) -> Iterator[Batch]:
    """One epoch worth of batches from a fresh sampler."""
    sampler = BatchSampler(dataset, b, mu, rng, aug)
    return sampler.take(epoch_steps)
