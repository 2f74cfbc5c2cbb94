"""Image ingestion, preprocessing, geometric augmentation and patient-level splits."""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_CLASSES = ("Aorta", "Flows", "Other", "VSign", "XSign")
SPLITS = ("train", "val", "test")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
RAW_MAGIC = b"USIM"
MAX_PIXELS = 1 << 28


class IngestionError(ValueError):
    """An image or manifest could not be read."""


# ------------------------------------------------------------------ images


@dataclass
class ImageRecord:
    """8-bit image stored as ``pixels[row, col, channel]``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or min(px.shape[:2]) < 1:
            raise ValueError(f"image must be HxWx1 or HxWx3 with positive size, got {px.shape}")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _netpbm_header(raw: bytes, path) -> tuple[list[int], int]:
    """Parse the four header tokens of a binary PGM/PPM; returns (tokens, payload start)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise IngestionError(f"{path}: truncated header")
        tokens.append(raw[start:i])
    if i >= len(raw):
        raise IngestionError(f"{path}: truncated header")
    try:
        values = [int(t) for t in tokens[1:]]
    except ValueError:
        raise IngestionError(f"{path}: malformed header") from None
    return values, i + 1  # exactly one whitespace byte separates header and raster


def decode_image(raw: bytes, path="<bytes>") -> ImageRecord:
    magic = raw[:2]
    if magic in (b"P5", b"P6"):
        (width, height, maxval), start = _netpbm_header(raw, path)
        channels = 1 if magic == b"P5" else 3
        if not 0 < maxval < 256:
            raise IngestionError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    elif raw[:4] == RAW_MAGIC:
        if len(raw) < 16:
            raise IngestionError(f"{path}: truncated header")
        width, height, channels = struct.unpack("<III", raw[4:16])
        start = 16
        if channels not in (1, 3):
            raise IngestionError(f"{path}: unsupported channel count {channels}")
    else:
        raise IngestionError(f"{path}: unknown image format (magic {raw[:4]!r})")
    if width < 1 or height < 1 or width * height * channels > MAX_PIXELS:
        raise IngestionError(f"{path}: bad dimensions {width}x{height}x{channels}")
    count = width * height * channels
    if len(raw) - start < count:
        raise IngestionError(f"{path}: truncated payload ({len(raw) - start} of {count} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=start)
    return ImageRecord(pixels.reshape(height, width, channels).copy())


def load_image(path) -> ImageRecord:
    """Read a binary PGM (P5), binary PPM (P6) or raw ``USIM`` file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from None
    return decode_image(raw, path)


def encode_image(img: ImageRecord, fmt: str = "pnm") -> bytes:
    if fmt == "raw":
        return RAW_MAGIC + struct.pack("<III", img.width, img.height, img.channels) + img.pixels.tobytes()
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


def save_image(path, img: ImageRecord) -> None:
    path = Path(path)
    fmt = "raw" if path.suffix.lower() in (".usim", ".raw") else "pnm"
    path.write_bytes(encode_image(img, fmt))


# ------------------------------------------------------------ preprocessing


@dataclass
class PreprocessConfig:
    crop_top: int = 16
    crop_bottom: int = 0
    crop_left: int = 0
    crop_right: int = 0
    target_size: int = 224
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d


def _axis_weights(in_size: int, out_size: int, start: float = 0.0, span: Optional[float] = None):
    """Source indices and weights along one axis, pixel-centre aligned.

    Output pixel ``i`` samples source coordinate ``start + (i + 0.5) * span / out_size - 0.5``.
    """
    span = float(in_size if span is None else span)
    coords = start + (np.arange(out_size) + 0.5) * (span / out_size) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    return lo, frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[H, W, C]`` with edge clamping (no antialiasing)."""
    h, w = arr.shape[:2]
    y0, fy = _axis_weights(h, out_h)
    x0, fx = _axis_weights(w, out_w)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    a = arr.astype(np.float64)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = a[y0c][:, x0c] * (1 - fx) + a[y0c][:, x1c] * fx
    bot = a[y1c][:, x0c] * (1 - fx) + a[y1c][:, x1c] * fx
    return top * (1 - fy) + bot * fy


def preprocess(img: ImageRecord, cfg: PreprocessConfig) -> np.ndarray:
    """Crop borders, resize, expand to RGB, scale to [0, 1] and normalise.

    Returns a float32 array ``[3, target_size, target_size]``.
    """
    h, w = img.height, img.width
    top, bottom, left, right = cfg.crop_top, cfg.crop_bottom, cfg.crop_left, cfg.crop_right
    if min(top, bottom, left, right) < 0 or top + bottom >= h or left + right >= w:
        raise ValueError(f"border crop ({top},{bottom},{left},{right}) does not fit a {w}x{h} image")
    px = img.pixels[top : h - bottom, left : w - right]
    out = resize_bilinear(px, cfg.target_size, cfg.target_size)
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    out = out / 255.0
    out = (out - np.asarray(cfg.mean)) / np.asarray(cfg.std)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


# ------------------------------------------------------------- augmentation


@dataclass
class AugmentParams:
    """One draw of the geometric augmentation.

    ``scale`` is the crop window area relative to the image; values above 1
    zoom out and the part of the window outside the image is zero-filled.
    ``offset_y``/``offset_x`` are the window's top-left corner in pixels.
    """

    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    scale: float = 1.0
    offset_y: float = 0.0
    offset_x: float = 0.0

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()


def sample_augment(rng: np.random.Generator, size: int) -> AugmentParams:
    angle = float(rng.uniform(0.0, 90.0))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.5, 2.0))
    side = math.sqrt(scale) * size
    lo, hi = min(0.0, size - side), max(0.0, size - side)
    return AugmentParams(angle, hflip, vflip, scale, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))


def _sample_zero_fill(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sampling of ``[C, H, W]`` at float coordinates; outside pixels read as 0."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros((c,) + ys.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            weight = np.where(ok, wy * wx, 0.0)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += vals * weight
    return out


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate ``[C, H, W]`` counter-clockwise about the image centre, zero fill."""
    if angle_deg == 0.0:
        return img.copy()
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source pixel
    dy, dx = yy - cy, xx - cx
    src_x = cx + math.cos(t) * dx - math.sin(t) * dy
    src_y = cy + math.sin(t) * dx + math.cos(t) * dy
    return _sample_zero_fill(img, src_y, src_x)


def resized_crop(img: np.ndarray, scale: float, offset_y: float, offset_x: float) -> np.ndarray:
    """Resample a square window of area ``scale * H * W`` back to ``H x W``."""
    _, h, w = img.shape
    side_y, side_x = math.sqrt(scale) * h, math.sqrt(scale) * w
    y0, fy = _axis_weights(h, h, offset_y, side_y)
    x0, fx = _axis_weights(w, w, offset_x, side_x)
    ys = (y0 + fy)[:, None] * np.ones((1, w))
    xs = np.ones((h, 1)) * (x0 + fx)[None, :]
    return _sample_zero_fill(img, ys, xs)


def apply_augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotation, then flips, then resized crop. No intensity changes."""
    out = rotate(np.asarray(img, dtype=np.float64), params.angle)
    if params.hflip:
        out = out[:, :, ::-1]
    if params.vflip:
        out = out[:, ::-1, :]
    if not (params.scale == 1.0 and params.offset_y == 0.0 and params.offset_x == 0.0):
        out = resized_crop(out, params.scale, params.offset_y, params.offset_x)
    return np.ascontiguousarray(out, dtype=np.asarray(img).dtype)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random geometric augmentation of a training image ``[C, H, W]``."""
    return apply_augment(img, sample_augment(rng, img.shape[-1]))


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-image generator, independent of processing order."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestRecord:
    path: str
    label: str
    patient_id: str
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    classes: tuple = DEFAULT_CLASSES
    root: Path = field(default_factory=Path)

    def validate(self) -> None:
        bad = sorted({r.label for r in self.records} - set(self.classes))
        if bad:
            raise IngestionError(f"labels outside the class set {list(self.classes)}: {bad}")
        bad_splits = sorted({r.split for r in self.records} - set(SPLITS) - {"unassigned"})
        if bad_splits:
            raise IngestionError(f"unknown split names: {bad_splits}")
        owners: dict[str, set[str]] = defaultdict(set)
        for r in self.records:
            owners[r.patient_id].add(r.split)
        leaking = sorted(p for p, s in owners.items() if len(s) > 1)
        if leaking:
            raise IngestionError(f"patients assigned to more than one split: {leaking[:5]}")

    def label_index(self, label: str) -> int:
        return self.classes.index(label)

    def subset(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def patients(self, split: Optional[str] = None) -> set[str]:
        return {r.patient_id for r in self.records if split is None or r.split == split}


def read_manifest(path, classes: Sequence[str] = DEFAULT_CLASSES) -> DatasetManifest:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"path", "label", "patient_id", "split"} - set(reader.fieldnames or ())
            if missing:
                raise IngestionError(f"{path}: manifest missing columns {sorted(missing)}")
            records = [
                ManifestRecord(row["path"], row["label"], row["patient_id"], row["split"] or "unassigned")
                for row in reader
            ]
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from None
    manifest = DatasetManifest(records, tuple(classes), path.parent)
    manifest.validate()
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "patient_id", "split"])
        for r in manifest.records:
            writer.writerow([r.path, r.label, r.patient_id, r.split])


def split_objective(counts: np.ndarray, class_totals: np.ndarray, fractions: np.ndarray) -> float:
    """Sum over (split, class) of |share of the class in the split - target share|."""
    share = counts / np.maximum(class_totals, 1)[None, :]
    return float(np.abs(share - fractions[:, None]).sum())


def split_patients(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.5, 0.25, 0.25),
    seed: int = 0,
) -> DatasetManifest:
    """Assign whole patients to train/val/test, greedily balancing every class.

    Patients are visited largest first (seeded shuffle breaks size ties); each
    goes to the split whose choice gives the lowest :func:`split_objective`,
    with a seeded random order deciding exact ties.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (len(SPLITS),) or abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions.tolist()}")
    if any(not r.patient_id for r in manifest.records):
        raise ValueError("every record needs a patient_id")
    by_patient: dict[str, Counter] = defaultdict(Counter)
    for r in manifest.records:
        by_patient[r.patient_id][manifest.label_index(r.label)] += 1
    if len(by_patient) < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} patients to split, got {len(by_patient)}")

    rng = np.random.default_rng(seed)
    patients = sorted(by_patient)
    patients = [patients[i] for i in rng.permutation(len(patients))]
    patients.sort(key=lambda p: -sum(by_patient[p].values()))

    n_classes = len(manifest.classes)
    class_totals = np.zeros(n_classes)
    for counter in by_patient.values():
        for c, n in counter.items():
            class_totals[c] += n
    counts = np.zeros((len(SPLITS), n_classes))
    assignment: dict[str, str] = {}
    for pid in patients:
        vec = np.zeros(n_classes)
        for c, n in by_patient[pid].items():
            vec[c] = n
        best, best_score = None, math.inf
        for k in rng.permutation(len(SPLITS)):
            counts[k] += vec
            score = split_objective(counts, class_totals, fractions)
            counts[k] -= vec
            if score < best_score - 1e-12:
                best, best_score = k, score
        counts[best] += vec
        assignment[pid] = SPLITS[best]
    records = [dataclasses.replace(r, split=assignment[r.patient_id]) for r in manifest.records]
    return DatasetManifest(records, manifest.classes, manifest.root)


def load_split(
    manifest: DatasetManifest, split: Optional[str], cfg: PreprocessConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Preprocessed images ``[n, 3, S, S]`` and integer labels for one split (all if None)."""
    records = manifest.records if split is None else manifest.subset(split)
    images = [preprocess(load_image(manifest.resolve(r)), cfg) for r in records]
    labels = np.array([manifest.label_index(r.label) for r in records], dtype=np.int64)
    if not images:
        return np.zeros((0, 3, cfg.target_size, cfg.target_size), np.float32), labels
    return np.stack(images), labels
