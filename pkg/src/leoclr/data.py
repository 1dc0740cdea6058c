"""Dataset ingestion: folder corpora, CIFAR-style binaries, synthetic shapes.

Manifests are immutable, canonically ordered (sorted by sample_id) and every
operation is a pure function of its arguments, so seeded subsampling and
epoch shuffling are reproducible no matter how the source directory happens
to be listed.
"""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

MIN_IMAGE_SIZE = 32

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes (CHW planes)


class DatasetError(Exception):
    """Base class for dataset ingestion failures."""


class EmptyDatasetError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


class LabelUnderflowError(DatasetError):
    """A balanced label-fraction subset would leave some class empty."""


@dataclass(frozen=True)
class ImageSample:
    """A decoded image: H x W x 3 uint8 pixels plus optional class label."""

    pixels: np.ndarray
    label: Optional[int]
    sample_id: str

    def validate(self) -> "ImageSample":
        h, w = self.pixels.shape[:2]
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise FormatError(f"{self.sample_id}: expected 3 channels, got shape {self.pixels.shape}")
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise FormatError(f"{self.sample_id}: image {h}x{w} below minimum {MIN_IMAGE_SIZE}")
        if self.pixels.dtype != np.uint8:
            raise FormatError(f"{self.sample_id}: expected uint8 pixels, got {self.pixels.dtype}")
        return self


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    locator: str
    label: Optional[int]


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered, immutable listing of one dataset split."""

    entries: tuple[ManifestEntry, ...]
    num_classes: int
    split_tag: str

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        if any(e.label is None for e in self.entries):
            raise DatasetError("manifest has unlabeled entries")
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for e in self.entries:
            counts[e.label] += 1
        return counts


@dataclass(frozen=True)
class LabelFractionSpec:
    """Seeded selection of a labeled subset, balanced per class by default."""

    fraction: float
    per_class_balanced: bool = True
    seed: int = 0


def _canonical(entries: Iterable[ManifestEntry]) -> tuple[ManifestEntry, ...]:
    return tuple(sorted(entries, key=lambda e: e.sample_id))


def _infer_num_classes(entries: Iterable[ManifestEntry]) -> int:
    labels = {e.label for e in entries if e.label is not None}
    if not labels:
        return 0
    return max(labels) + 1


def load_manifest(root: str | Path, format: str) -> DatasetManifest:
    """Build the canonical manifest for a corpus root.

    ``format`` is one of ``folder`` (root/<class_name>/<file>.{png,jpg}),
    ``cifar-binary`` (directory of 3073-byte record files) or ``synthetic``
    (a JSON descriptor file with keys n, image_size, num_classes, seed).
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"dataset root does not exist: {root}")
    if format == "folder":
        return _load_folder_manifest(root)
    if format == "cifar-binary":
        return _load_cifar_manifest(root)
    if format == "synthetic":
        return _load_synthetic_manifest(root)
    raise FormatError(f"unknown dataset format: {format!r}")


def _load_folder_manifest(root: Path) -> DatasetManifest:
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    entries = []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            with Image.open(path) as im:
                if im.mode != "RGB":
                    raise FormatError(f"{path}: mode {im.mode} is not 3-channel RGB")
                w, h = im.size
            if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
                raise FormatError(f"{path}: image {h}x{w} below minimum {MIN_IMAGE_SIZE}")
            sample_id = f"{class_dir.name}/{path.name}"
            entries.append(ManifestEntry(sample_id, str(path), label))
    if not entries:
        raise EmptyDatasetError(f"no images under {root}")
    entries = _canonical(entries)
    return DatasetManifest(entries, _infer_num_classes(entries), "train")


def _cifar_record_files(root: Path) -> list[Path]:
    files = [p for p in root.iterdir() if p.is_file()]
    train = sorted(p for p in files if re.match(r"data_batch", p.name) or p.suffix == ".bin")
    return train


def _load_cifar_manifest(root: Path) -> DatasetManifest:
    if root.is_file():
        files = [root]
    else:
        files = _cifar_record_files(root)
    entries = []
    for path in files:
        size = path.stat().st_size
        if size == 0 or size % CIFAR_RECORD_BYTES != 0:
            raise FormatError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD_BYTES}")
        n_records = size // CIFAR_RECORD_BYTES
        with open(path, "rb") as fh:
            raw = fh.read()
        for idx in range(n_records):
            label = raw[idx * CIFAR_RECORD_BYTES]
            sample_id = f"{path.name}-{idx:05d}"
            entries.append(ManifestEntry(sample_id, f"{path}#{idx}", int(label)))
    if not entries:
        raise EmptyDatasetError(f"no CIFAR records under {root}")
    entries = _canonical(entries)
    return DatasetManifest(entries, _infer_num_classes(entries), "train")


def _load_synthetic_manifest(root: Path) -> DatasetManifest:
    if not root.is_file():
        raise FormatError(f"synthetic format expects a JSON descriptor file, got {root}")
    try:
        desc = json.loads(root.read_text())
        n = int(desc["n"])
        image_size = int(desc["image_size"])
        num_classes = int(desc["num_classes"])
        seed = int(desc["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad synthetic descriptor {root}: {exc}") from exc
    return make_synthetic_corpus(n, image_size, num_classes, seed,
                                 split_tag=str(desc.get("split_tag", "train")))


def subsample_labels(manifest: DatasetManifest, spec: LabelFractionSpec) -> DatasetManifest:
    """Select a label-fraction subset; pure function of (manifest, spec).

    Balanced mode keeps ceil(fraction * count) samples per class and raises
    :class:`LabelUnderflowError` naming any class that would end up empty.
    """
    if not 0.0 < spec.fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {spec.fraction}")
    if spec.fraction == 1.0:
        return manifest
    labels = manifest.labels()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, len(manifest)]))
    keep_idx: list[int] = []
    if spec.per_class_balanced:
        for cls in range(manifest.num_classes):
            cls_idx = np.flatnonzero(labels == cls)
            if cls_idx.size == 0:
                raise LabelUnderflowError(f"class {cls} has no samples to subsample")
            take = int(np.ceil(spec.fraction * cls_idx.size))
            keep_idx.extend(rng.permutation(cls_idx)[:take].tolist())
    else:
        take = int(np.ceil(spec.fraction * len(manifest)))
        keep_idx = rng.permutation(len(manifest))[:take].tolist()
    keep = _canonical(manifest.entries[i] for i in keep_idx)
    return DatasetManifest(keep, manifest.num_classes, manifest.split_tag)


def split_manifest(manifest: DatasetManifest, val_fraction: float,
                   seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic train/val split (val gets ceil(val_fraction * n) entries)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(manifest), 17]))
    perm = rng.permutation(len(manifest))
    n_val = int(np.ceil(val_fraction * len(manifest)))
    val_entries = _canonical(manifest.entries[i] for i in perm[:n_val])
    train_entries = _canonical(manifest.entries[i] for i in perm[n_val:])
    train = DatasetManifest(train_entries, manifest.num_classes, "train")
    val = DatasetManifest(val_entries, manifest.num_classes, "val")
    return train, val


# ---------------------------------------------------------------------------
# Synthetic shape corpus
# ---------------------------------------------------------------------------
#
# Class identity is geometry only.  Color, position, scale, background and
# clutter are per-instance nuisances, so instance discrimination cannot be
# solved by color statistics alone and random crops frequently miss the
# class-defining shape -- the regime where anchoring crops to the original
# image should matter.

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross", "diamond", "bars", "saltire")


def make_synthetic_corpus(n: int, image_size: int, num_classes: int, seed: int,
                          split_tag: str = "train") -> DatasetManifest:
    """Manifest for a procedurally generated shape corpus.

    Pixels are regenerated on demand from (seed, index); the manifest never
    touches disk.  Labels are assigned round-robin so classes are exactly
    balanced whenever num_classes divides n.
    """
    if num_classes < 1 or num_classes > len(SHAPE_NAMES):
        raise FormatError(f"num_classes must be in [1, {len(SHAPE_NAMES)}], got {num_classes}")
    if n < num_classes:
        raise FormatError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    if image_size < MIN_IMAGE_SIZE:
        raise FormatError(f"image_size must be >= {MIN_IMAGE_SIZE}, got {image_size}")
    width = len(str(n - 1))
    entries = []
    for idx in range(n):
        sample_id = f"synth-{seed}-{idx:0{width}d}"
        locator = f"synthetic://{seed}/{image_size}/{num_classes}/{idx}"
        entries.append(ManifestEntry(sample_id, locator, idx % num_classes))
    entries = _canonical(entries)
    return DatasetManifest(entries, num_classes, split_tag)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _shape_mask(name: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if name == "disk":
        return dy * dy + dx * dx <= r * r
    if name == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if name == "triangle":
        # upward-pointing: apex at cy - r, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if name == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if name == "bars":
        bar = r / 4.0
        return ((np.abs(dy - 0.55 * r) <= bar) | (np.abs(dy + 0.55 * r) <= bar)) & (np.abs(dx) <= r)
    if name == "saltire":
        arm = r / 3.0
        box = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return box & ((np.abs(dx - dy) <= arm) | (np.abs(dx + dy) <= arm))
    raise ValueError(f"unknown shape {name!r}")


def render_synthetic(seed: int, image_size: int, num_classes: int, index: int) -> np.ndarray:
    """Render one corpus image; deterministic in all four arguments."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    label = index % num_classes
    size = image_size

    # background: soft two-color gradient plus noise, class-independent
    c0 = rng.uniform(30, 130, size=3)
    c1 = rng.uniform(30, 130, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    img = c0[None, None, :] * (1 - ramp[..., None]) + c1[None, None, :] * ramp[..., None]
    img += rng.normal(0, 6.0, size=img.shape)

    # clutter: small dots and one thin line, class-independent
    for _ in range(int(rng.integers(2, 5))):
        dcy, dcx = rng.uniform(2, size - 2, size=2)
        dr = rng.uniform(1.0, 2.2)
        color = rng.uniform(0, 255, size=3)
        mask = _shape_mask("disk", size, dcy, dcx, dr)
        img[mask] = color
    y0, x0, y1, x1 = rng.uniform(0, size, size=4)
    tt = np.linspace(0, 1, 2 * size)
    ly = np.clip((y0 + (y1 - y0) * tt).astype(int), 0, size - 1)
    lx = np.clip((x0 + (x1 - x0) * tt).astype(int), 0, size - 1)
    img[ly, lx] = rng.uniform(0, 255, size=3)

    # class shape: geometry tied to label, color/pose per-instance
    r = rng.uniform(0.14, 0.25) * size
    cy = rng.uniform(r + 1, size - r - 1)
    cx = rng.uniform(r + 1, size - r - 1)
    color = 255.0 * _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))
    mask = _shape_mask(SHAPE_NAMES[label], size, cy, cx, r)
    img[mask] = color

    return np.clip(img, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Pixel loading
# ---------------------------------------------------------------------------

_SYNTH_RE = re.compile(r"^synthetic://(\d+)/(\d+)/(\d+)/(\d+)$")


# Rendering dominates synthetic epochs; cache by argument tuple and hand out
# copies so callers can never corrupt the cache.
_render_cached = functools.lru_cache(maxsize=8192)(render_synthetic)


def load_image(entry: ManifestEntry) -> ImageSample:
    """Decode one manifest entry to pixels; dispatches on the locator form."""
    m = _SYNTH_RE.match(entry.locator)
    if m:
        seed, image_size, num_classes, idx = (int(g) for g in m.groups())
        pixels = _render_cached(seed, image_size, num_classes, idx).copy()
        return ImageSample(pixels, entry.label, entry.sample_id).validate()
    if "#" in entry.locator:
        path, _, idx = entry.locator.rpartition("#")
        return _load_cifar_record(Path(path), int(idx), entry).validate()
    path = Path(entry.locator)
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise FormatError(f"{path}: mode {im.mode} is not 3-channel RGB")
            pixels = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    return ImageSample(pixels, entry.label, entry.sample_id).validate()


def _load_cifar_record(path: Path, idx: int, entry: ManifestEntry) -> ImageSample:
    try:
        with open(path, "rb") as fh:
            fh.seek(idx * CIFAR_RECORD_BYTES)
            raw = fh.read(CIFAR_RECORD_BYTES)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(raw) != CIFAR_RECORD_BYTES:
        raise FormatError(f"{path}#{idx}: truncated record")
    planes = np.frombuffer(raw[1:], dtype=np.uint8).reshape(3, 32, 32)
    pixels = np.ascontiguousarray(planes.transpose(1, 2, 0))
    return ImageSample(pixels, entry.label, entry.sample_id)


# ---------------------------------------------------------------------------
# Manifest serialization (JSON lines: sample_id, path, label)
# ---------------------------------------------------------------------------

def write_manifest_jsonl(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps({"sample_id": e.sample_id, "path": e.locator,
                                 "label": e.label}) + "\n")


def read_manifest_jsonl(path: str | Path, split_tag: str = "train") -> DatasetManifest:
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["sample_id"], rec["path"], rec["label"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    if not entries:
        raise EmptyDatasetError(f"empty manifest file {path}")
    entries = _canonical(entries)
    return DatasetManifest(entries, _infer_num_classes(entries), split_tag)
