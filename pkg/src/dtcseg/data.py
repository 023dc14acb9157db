"""Synthetic blob dataset: generation, labeled/unlabeled split, batching, augmentation, persistence.

Dataset file layout (little-endian)::

    b"DTCD" | version u32 | config_len u32 | config JSON (GenConfig + seed)
    | sample_count u32
    | per sample: id u32 | flags u8 | H u16 | W u16 | image f64[H*W]
    |             [mask u8[H*W]]  [lsf f64[H*W] | pos_max f64 | neg_max f64]
    | crc32 u32 over every preceding byte

``flags``: bit 0 mask present, bit 1 level-set target present, bits 2-3 role
(0 labeled, 1 unlabeled, 2 test).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .lsf import LevelSetMap, signed_distance

DATASET_MAGIC = b"DTCD"
DATASET_VERSION = 1

_ROLE_LABELED, _ROLE_UNLABELED, _ROLE_TEST = 0, 1, 2


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    train_count: int = 80
    test_count: int = 20
    noise_std: float = 0.3
    contrast: float = 1.0
    background: float = 0.0
    # semi-axes as fractions of image_size
    axis_min: float = 0.12
    axis_max: float = 0.3
    # amplitude of the low-order radial (cos m*theta, m = 2..4) deformation
    deform: float = 0.25
    # std of a smooth multiplicative intensity field on the foreground
    texture: float = 0.0
    # number of random background bars with foreground-like intensity
    clutter: int = 0

    def validate(self) -> None:
        if self.image_size < 4 or self.train_count < 1 or self.test_count < 0:
            raise ValueError("image_size >= 4, train_count >= 1, test_count >= 0 required")
        if not 0 < self.axis_min <= self.axis_max:
            raise ValueError("need 0 < axis_min <= axis_max")
        if self.noise_std < 0 or self.deform < 0 or self.texture < 0 or self.clutter < 0:
            raise ValueError("noise_std, deform, texture and clutter must be non-negative")
        reach = self.axis_max * (1.0 + self.deform * (1 / 2 + 1 / 3 + 1 / 4))
        if reach >= 0.5:
            raise ValueError(f"shape can reach {reach:.3f} x image_size from its center; must stay below 0.5")


@dataclass
class Sample:
    id: int
    image: np.ndarray
    mask: np.ndarray | None = None
    lsf_target: LevelSetMap | None = None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and _opt_equal(self.mask, other.mask)
            and self.lsf_target == other.lsf_target
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass
class Dataset:
    samples: list[Sample]
    labeled_ids: list[int]
    unlabeled_ids: list[int]
    test_ids: list[int]
    config: GenConfig = field(default_factory=GenConfig)
    seed: int = 0

    def __post_init__(self):
        self._index = {s.id: s for s in self.samples}

    def __getitem__(self, sample_id: int) -> Sample:
        return self._index[sample_id]

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.samples == other.samples
            and self.labeled_ids == other.labeled_ids
            and self.unlabeled_ids == other.unlabeled_ids
            and self.test_ids == other.test_ids
            and self.config == other.config
            and self.seed == other.seed
        )

    @property
    def train_ids(self) -> list[int]:
        return sorted(self.labeled_ids + self.unlabeled_ids)

    def check_partition(self) -> None:
        groups = [set(self.labeled_ids), set(self.unlabeled_ids), set(self.test_ids)]
        total = sum(len(g) for g in groups)
        if total != len(set().union(*groups)) or set().union(*groups) != set(self._index):
            raise ValueError("labeled/unlabeled/test ids must partition the sample ids")
        for sid in self.labeled_ids + self.test_ids:
            if self[sid].mask is None:
                raise ValueError(f"sample {sid} is labeled/test but has no mask")


# ---------------------------------------------------------------------------
# generation


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Zero-mean, unit-peak field built from a few random low-frequency cosines."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / 4.0


def _blob(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    n = cfg.image_size
    a, b = rng.uniform(cfg.axis_min, cfg.axis_max, size=2) * n
    rot = rng.uniform(0, np.pi)
    amps = rng.uniform(-cfg.deform, cfg.deform, size=3) / np.array([2.0, 3.0, 4.0])
    phases = rng.uniform(0, 2 * np.pi, size=3)
    reach = max(a, b) * (1.0 + np.abs(amps).sum())
    lo, hi = reach, n - 1 - reach
    cy, cx = rng.uniform(lo, hi, size=2) if hi > lo else (np.array([n / 2 - 0.5] * 2))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    phi = theta - rot
    ellipse_r = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
    wobble = 1.0 + sum(amp * np.cos(m * theta + ph) for m, amp, ph in zip((2, 3, 4), amps, phases))
    return (rho <= ellipse_r * wobble).astype(np.uint8)


def _clutter(rng: np.random.Generator, cfg: GenConfig, mask: np.ndarray) -> np.ndarray:
    """Thin bright bars placed in the background only."""
    n = cfg.image_size
    out = np.zeros((n, n))
    for _ in range(cfg.clutter):
        length = int(rng.integers(n // 6, n // 3 + 1))
        thick = int(rng.integers(1, 3))
        y, x = rng.integers(0, n, size=2)
        if rng.random() < 0.5:
            out[y : y + thick, x : x + length] = 1.0
        else:
            out[y : y + length, x : x + thick] = 1.0
    return out * (mask == 0)


def _make_sample(cfg: GenConfig, seed: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    while True:
        mask = _blob(rng, cfg)
        if 0 < mask.sum() < mask.size:
            break
    n = cfg.image_size
    fg = cfg.contrast * mask.astype(np.float64)
    if cfg.texture > 0:
        fg = fg * (1.0 + cfg.texture * _smooth_field(rng, n))
    image = cfg.background + fg
    if cfg.clutter > 0:
        image = image + cfg.contrast * _clutter(rng, cfg, mask)
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=(n, n))
    return Sample(id=index, image=image, mask=mask)


def generate(config: GenConfig, seed: int) -> Dataset:
    """Deterministic in ``(config, seed)``; each sample depends only on ``(seed, index)``.

    All training samples start out labeled; use :func:`split` to hide labels.
    """
    config.validate()
    total = config.train_count + config.test_count
    samples = [_make_sample(config, seed, i) for i in range(total)]
    return Dataset(
        samples=samples,
        labeled_ids=list(range(config.train_count)),
        unlabeled_ids=[],
        test_ids=list(range(config.train_count, total)),
        config=config,
        seed=seed,
    )


def split(dataset: Dataset, labeled_fraction: float, seed: int) -> Dataset:
    """Keep masks for ``round(fraction * n_train)`` seeded-random training samples, strip the rest."""
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    train = dataset.train_ids
    for sid in train:
        if dataset[sid].mask is None:
            raise ValueError(f"cannot re-split: training sample {sid} has no mask")
    n_labeled = int(math.floor(labeled_fraction * len(train) + 0.5))
    if n_labeled < 1:
        raise ValueError(f"labeled_fraction {labeled_fraction} leaves no labeled samples out of {len(train)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    labeled = sorted(train[i] for i in order[:n_labeled])
    unlabeled = sorted(train[i] for i in order[n_labeled:])
    hidden = set(unlabeled)
    samples = [
        Sample(s.id, s.image, None, None) if s.id in hidden else replace(s)
        for s in dataset.samples
    ]
    return Dataset(samples, labeled, unlabeled, list(dataset.test_ids), dataset.config, dataset.seed)


def precompute_lsf(dataset: Dataset, normalize: bool = True) -> Dataset:
    """Fill ``lsf_target`` for every labeled sample (in place; also returned)."""
    for sid in dataset.labeled_ids:
        sample = dataset[sid]
        if sample.mask is None:
            raise ValueError(f"labeled sample {sid} has no mask")
        if sample.mask.all() or not sample.mask.any():
            raise ValueError(f"sample {sid}: degenerate mask (no contour)")
        if sample.lsf_target is None:
            sample.lsf_target = signed_distance(sample.mask, normalize=normalize)
    return dataset


# ---------------------------------------------------------------------------
# batching + augmentation


def sample_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    labeled_batch: int = 2,
    unlabeled_batch: int = 2,
    supervised: bool = False,
) -> tuple[list[Sample], list[Sample]]:
    """Draw with replacement. Without an unlabeled pool (or when ``supervised``) the
    whole batch is labeled."""
    if not dataset.labeled_ids:
        raise ValueError("sample_batch: labeled pool is empty")
    if supervised or not dataset.unlabeled_ids:
        n_l, n_u = labeled_batch + unlabeled_batch, 0
    else:
        n_l, n_u = labeled_batch, unlabeled_batch
    lab = [dataset[dataset.labeled_ids[i]] for i in rng.integers(0, len(dataset.labeled_ids), size=n_l)]
    unl = [dataset[dataset.unlabeled_ids[i]] for i in rng.integers(0, len(dataset.unlabeled_ids), size=n_u)]
    return lab, unl


def _apply(arr: np.ndarray, flip_h: bool, flip_v: bool, rot: int) -> np.ndarray:
    if flip_h:
        arr = arr[:, ::-1]
    if flip_v:
        arr = arr[::-1, :]
    return np.ascontiguousarray(np.rot90(arr, rot))


def augment(sample: Sample, rng: np.random.Generator, enabled: bool = True) -> Sample:
    """Random flips and quarter turns, applied identically to image, mask and level-set target."""
    if not enabled:
        return sample
    flip_h, flip_v = (bool(b) for b in rng.integers(0, 2, size=2))
    rot = int(rng.integers(0, 4))
    return transform_sample(sample, flip_h, flip_v, rot)


def transform_sample(sample: Sample, flip_h: bool = False, flip_v: bool = False, rot: int = 0) -> Sample:
    mask = None if sample.mask is None else _apply(sample.mask, flip_h, flip_v, rot)
    lsf = sample.lsf_target
    if lsf is not None:
        lsf = LevelSetMap(_apply(lsf.values, flip_h, flip_v, rot), lsf.pos_max, lsf.neg_max)
    return Sample(sample.id, _apply(sample.image, flip_h, flip_v, rot), mask, lsf)


# ---------------------------------------------------------------------------
# persistence


def to_bytes(dataset: Dataset) -> bytes:
    dataset.check_partition()
    roles = {sid: _ROLE_LABELED for sid in dataset.labeled_ids}
    roles.update({sid: _ROLE_UNLABELED for sid in dataset.unlabeled_ids})
    roles.update({sid: _ROLE_TEST for sid in dataset.test_ids})
    cfg = json.dumps({"config": asdict(dataset.config), "seed": dataset.seed}, sort_keys=True).encode()
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(cfg)), cfg, struct.pack("<I", len(dataset))]
    for s in dataset.samples:
        h, w = s.image.shape
        flags = (s.mask is not None) | ((s.lsf_target is not None) << 1) | (roles[s.id] << 2)
        parts.append(struct.pack("<IBHH", s.id, flags, h, w))
        parts.append(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        if s.mask is not None:
            parts.append(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
        if s.lsf_target is not None:
            parts.append(np.ascontiguousarray(s.lsf_target.values, dtype="<f8").tobytes())
            parts.append(struct.pack("<dd", s.lsf_target.pos_max, s.lsf_target.neg_max))
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(dataset))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise DatasetFormatError(f"truncated file: need {n} bytes for {what} at offset {self.off}, have {len(self.buf) - self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Dataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0 (expected {DATASET_MAGIC!r})")
    (version,) = r.unpack("<I", "version")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} at offset 4 (expected {DATASET_VERSION})")
    if len(buf) < 12:
        raise DatasetFormatError(f"truncated file: {len(buf)} bytes, no room for the checksum")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise DatasetFormatError(f"checksum mismatch (crc32 stored at offset {len(buf) - 4})")
    r.buf = buf[:-4]
    (cfg_len,) = r.unpack("<I", "config length")
    meta = json.loads(r.take(cfg_len, "config block"))
    config = GenConfig(**meta["config"])
    (count,) = r.unpack("<I", "sample count")
    samples, groups = [], ([], [], [])
    for _ in range(count):
        sid, flags, h, w = r.unpack("<IBHH", "sample header")
        image = np.frombuffer(r.take(8 * h * w, f"image of sample {sid}"), dtype="<f8").reshape(h, w).astype(np.float64)
        mask = lsf = None
        if flags & 1:
            mask = np.frombuffer(r.take(h * w, f"mask of sample {sid}"), dtype=np.uint8).reshape(h, w).copy()
        if flags & 2:
            values = np.frombuffer(r.take(8 * h * w, f"lsf of sample {sid}"), dtype="<f8").reshape(h, w).astype(np.float64)
            pos_max, neg_max = r.unpack("<dd", f"lsf maxima of sample {sid}")
            lsf = LevelSetMap(values, pos_max, neg_max)
        role = (flags >> 2) & 3
        if role > _ROLE_TEST:
            raise DatasetFormatError(f"sample {sid}: invalid role bits in flags 0x{flags:02x}")
        groups[role].append(sid)
        samples.append(Sample(sid, image, mask, lsf))
    if r.off != len(r.buf):
        raise DatasetFormatError(f"{len(r.buf) - r.off} unexpected bytes at offset {r.off}")
    ds = Dataset(samples, groups[0], groups[1], groups[2], config, int(meta["seed"]))
    ds.check_partition()
    return ds


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])[:, None].astype(np.float64)


def stack_masks(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples])[:, None].astype(np.float64)


def stack_lsf(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.lsf_target.values for s in samples])[:, None]
