"""Synthetic image datasets, trigger application and dataset poisoning."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

DET_FRACTION = 0.10  # detection budget relative to train+val
VAL_FRACTION = 0.10  # of the data left after the detection split
NOISE_SIGMA = 0.1
BLEND_STRENGTH = 0.2

SPLITS = ("train", "val", "detection_clean")


class DatasetError(ValueError):
    pass


class Sample(NamedTuple):
    image: np.ndarray
    label: int
    poisoned: bool


@dataclass
class Split:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    poisoned: np.ndarray = None  # (n,) bool

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poisoned is None:
            self.poisoned = np.zeros(len(self.labels), dtype=bool)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        if not (len(self.images) == len(self.labels) == len(self.poisoned)):
            raise DatasetError("images, labels and provenance flags differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), bool(self.poisoned[i]))

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.labels[idx], self.poisoned[idx])

    def copy(self) -> "Split":
        return Split(self.images.copy(), self.labels.copy(), self.poisoned.copy())


@dataclass
class DatasetBundle:
    train: Split
    val: Split
    detection_clean: Split
    num_classes: int
    seed: int = 0
    poison: dict | None = field(default=None)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)


@dataclass
class TriggerSpec:
    mask: np.ndarray  # (h, w)
    pattern: np.ndarray  # (c, h, w)
    kind: str = "patch"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.pattern.ndim != 3 or self.mask.shape != self.pattern.shape[1:]:
            raise DatasetError(f"mask {self.mask.shape} does not match pattern {self.pattern.shape}")
        for name, arr in (("mask", self.mask), ("pattern", self.pattern)):
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise DatasetError(f"trigger {name} has entries outside [0, 1]")
        if self.kind == "patch" and not _is_rectangle(self.mask):
            raise DatasetError("patch trigger mask must be binary with rectangular support")

    def support(self, threshold: float = 0.5) -> np.ndarray:
        return self.mask > threshold


def _is_rectangle(mask: np.ndarray) -> bool:
    if not np.all((mask == 0) | (mask == 1)):
        return False
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return True
    box = mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
    return bool(np.all(box == 1))


@dataclass
class PoisonConfig:
    poison_rate: float
    target_label: int
    trigger: TriggerSpec | None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise DatasetError(f"poison_rate must lie in [0, 1], got {self.poison_rate}")
        if self.poison_rate > 0 and self.trigger is None:
            raise DatasetError("poison_rate > 0 requires a trigger")


# ---- procedural images ---------------------------------------------------

def _class_palette(k: int, rng: np.random.Generator) -> np.ndarray:
    hues = (np.arange(k) / k + rng.uniform(0, 1.0 / k)) % 1.0
    import colorsys

    return np.array([colorsys.hsv_to_rgb(h, 0.85, 0.95) for h in hues], dtype=np.float32)


def _shape_mask(kind: int, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    kind = kind % 8
    if kind == 0:  # filled square
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 1:  # disc
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 2:  # horizontal bar
        return (np.abs(dy) <= r / 3) & (np.abs(dx) <= r * 1.3)
    if kind == 3:  # vertical bar
        return (np.abs(dx) <= r / 3) & (np.abs(dy) <= r * 1.3)
    if kind == 4:  # plus
        return ((np.abs(dy) <= r / 3) | (np.abs(dx) <= r / 3)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 5:  # ring
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r * 0.55)
    if kind == 6:  # diagonal
        return (np.abs(dy - dx) <= r / 3) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)  # triangle


def make_synthetic_dataset(num_classes: int = 5, n: int = 2000, channels: int = 3, height: int = 16,
                           width: int = 16, seed: int = 0) -> DatasetBundle:
    """Class-conditional procedural images split into train / val / detection_clean.

    Every class has its own shape and colour; position, size and brightness are
    jittered and Gaussian pixel noise (sigma 0.1) is added.
    """
    if num_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {num_classes}")
    if n < 20 * num_classes:
        raise DatasetError(f"n={n} too small to stratify {num_classes} classes (need >= {20 * num_classes})")
    rng = np.random.default_rng(seed)
    palette = _class_palette(num_classes, rng)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, channels, height, width), dtype=np.float32)
    base_r = min(height, width) / 4.0
    for i, y in enumerate(labels):
        cy = height / 2 - 0.5 + rng.uniform(-2, 2)
        cx = width / 2 - 0.5 + rng.uniform(-2, 2)
        r = base_r * rng.uniform(0.8, 1.2)
        shape = _shape_mask(int(y), height, width, cy, cx, r)
        bg = rng.uniform(0.1, 0.3)
        colour = palette[y][:channels] if channels <= 3 else np.resize(palette[y], channels)
        colour = np.clip(colour * rng.uniform(0.85, 1.0), 0, 1)
        img = np.full((channels, height, width), bg, dtype=np.float32)
        img[:, shape] = colour[:, None]
        img += rng.normal(0.0, NOISE_SIGMA, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)

    order = _stratified_order(labels, num_classes, rng)
    n_det = int(round(n * DET_FRACTION / (1 + DET_FRACTION)))
    n_val = int(round((n - n_det) * VAL_FRACTION))
    det, val, train = order[:n_det], order[n_det:n_det + n_val], order[n_det + n_val:]
    splits = [Split(images[np.sort(idx)], labels[np.sort(idx)]) for idx in (train, val, det)]
    return DatasetBundle(*splits, num_classes=num_classes, seed=seed)


def _stratified_order(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Interleave per-class shuffled indices so every prefix is balanced within one sample."""
    per_class = []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        per_class.append(list(idx))
    order = []
    depth = max(len(p) for p in per_class)
    for j in range(depth):
        for c in rng.permutation(k):
            if j < len(per_class[c]):
                order.append(per_class[c][j])
    return np.array(order, dtype=np.int64)


# ---- triggers --------------------------------------------------------------

def make_trigger(kind: str, image_shape: tuple[int, int, int], seed: int = 0, size: tuple[int, int] = (4, 4),
                 position: tuple[int, int] | None = None, strength: float = BLEND_STRENGTH) -> TriggerSpec:
    """Patch: binary mask over a rectangle (bottom-right corner by default) with a
    random binary pattern. Blended: constant mask ``strength`` with a full-image
    uniform-noise pattern."""
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    if kind == "patch":
        ph, pw = size
        top, left = position if position is not None else (h - ph, w - pw)
        if ph < 1 or pw < 1 or top < 0 or left < 0 or top + ph > h or left + pw > w:
            raise DatasetError(f"patch {size} at {(top, left)} does not fit a {h}x{w} image")
        mask = np.zeros((h, w), dtype=np.float32)
        mask[top:top + ph, left:left + pw] = 1.0
        pattern = np.zeros((c, h, w), dtype=np.float32)
        pattern[:, top:top + ph, left:left + pw] = rng.integers(0, 2, size=(c, ph, pw))
        return TriggerSpec(mask, pattern, "patch")
    if kind == "blended":
        if not 0 < strength <= 1:
            raise DatasetError(f"blend strength must be in (0, 1], got {strength}")
        mask = np.full((h, w), strength, dtype=np.float32)
        pattern = rng.uniform(0.0, 1.0, size=(c, h, w)).astype(np.float32)
        return TriggerSpec(mask, pattern, "blended")
    raise DatasetError(f"unknown trigger kind {kind!r}; expected 'patch' or 'blended'")


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """x' = m*p + (1-m)*x, clamped to [0, 1]. ``x`` is (c, h, w) or (n, c, h, w)."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-3:] != trigger.pattern.shape:
        raise DatasetError(f"image shape {x.shape[-3:]} does not match trigger {trigger.pattern.shape}")
    m = trigger.mask[None]
    out = m * trigger.pattern + (1.0 - m) * x
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def poison_dataset(bundle: DatasetBundle, cfg: PoisonConfig) -> DatasetBundle:
    """Stamp the trigger on exactly round(rate * |train|) training samples and relabel them."""
    if not 0 <= cfg.target_label < bundle.num_classes:
        raise DatasetError(f"target_label {cfg.target_label} outside [0, {bundle.num_classes})")
    train = bundle.train.copy()
    count = int(round(cfg.poison_rate * len(train)))
    if count == 0:
        return replace(bundle, train=train)
    rng = np.random.default_rng(cfg.seed)
    others = np.flatnonzero(train.labels != cfg.target_label)
    if len(others) >= count:
        chosen = rng.choice(others, size=count, replace=False)
    else:
        same = np.flatnonzero(train.labels == cfg.target_label)
        chosen = np.concatenate([others, rng.choice(same, size=count - len(others), replace=False)])
    chosen = np.sort(chosen)
    train.images[chosen] = apply_trigger(train.images[chosen], cfg.trigger)
    train.labels[chosen] = cfg.target_label
    train.poisoned[chosen] = True
    meta = {"poison_rate": cfg.poison_rate, "target_label": cfg.target_label, "kind": cfg.trigger.kind,
            "seed": cfg.seed, "count": count}
    return replace(bundle, train=train, poison=meta)


def noise_patch_copies(split: Split, seed: int, size_range: tuple[int, int] = (3, 6)) -> Split:
    """Copy of ``split`` where each image carries a random binary square patch at a
    random position; labels are kept. Used to desensitise a model to small patches."""
    rng = np.random.default_rng(seed)
    images = split.images.copy()
    _, c, h, w = images.shape
    lo, hi = size_range
    for i in range(len(images)):
        s = int(rng.integers(lo, hi + 1))
        top, left = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        images[i, :, top:top + s, left:left + s] = rng.integers(0, 2, size=(c, s, s))
    return Split(images, split.labels.copy(), split.poisoned.copy())


def triggered_probe_set(split: Split, trigger: TriggerSpec, target: int | None, fraction: float = 0.5,
                        seed: int = 0) -> np.ndarray:
    """Images of ``split`` with the trigger stamped on a seeded ``fraction`` of the
    samples whose label differs from ``target``; the rest stay clean."""
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    images = split.images.copy()
    candidates = np.flatnonzero(split.labels != target) if target is not None else np.arange(len(split))
    count = int(round(fraction * len(candidates)))
    chosen = np.sort(np.random.default_rng(seed).choice(candidates, size=count, replace=False))
    images[chosen] = apply_trigger(images[chosen], trigger)
    return images


# ---- LDDS container ----------------------------------------------------------

LDDS_MAGIC = b"LDDS"
LDDS_VERSION = 1
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


def save_dataset(bundle: DatasetBundle, path) -> None:
    """Write all splits to one LDDS file.

    The per-sample provenance byte carries the poisoned flag in bit 0 and the
    split index (train=0, val=1, detection_clean=2) in bits 1-2.
    """
    splits = [bundle.split(s) for s in SPLITS]
    n = sum(len(s) for s in splits)
    c, h, w = bundle.image_shape
    with open(path, "wb") as fh:
        fh.write(LDDS_MAGIC)
        fh.write(struct.pack("<H", LDDS_VERSION))
        fh.write(struct.pack("<5I", bundle.num_classes, n, c, h, w))
        for s in splits:
            for img, label in zip(s.images, s.labels):
                fh.write(struct.pack("<I", int(label)))
                fh.write(img.astype("<f4").tobytes())
        for name, s in zip(SPLITS, splits):
            codes = (s.poisoned.astype(np.uint8) | (_SPLIT_CODE[name] << 1)).astype(np.uint8)
            fh.write(codes.tobytes())


def load_dataset(path) -> DatasetBundle:
    raw = Path(path).read_bytes()
    if raw[:4] != LDDS_MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}, expected {LDDS_MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != LDDS_VERSION:
        raise DatasetError(f"{path}: unsupported LDDS version {version}")
    k, n, c, h, w = struct.unpack_from("<5I", raw, 6)
    rec = np.dtype([("label", "<u4"), ("pixels", "<f4", (c, h, w))])
    offset = 26
    expected = offset + n * rec.itemsize + n
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype=rec, count=n, offset=offset)
    prov = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset + n * rec.itemsize)
    split_of = prov >> 1
    parts = []
    for name in SPLITS:
        sel = split_of == _SPLIT_CODE[name]
        parts.append(Split(body["pixels"][sel].astype(np.float32), body["label"][sel].astype(np.int64),
                           (prov[sel] & 1).astype(bool)))
    return DatasetBundle(*parts, num_classes=k)
