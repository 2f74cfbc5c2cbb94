"""Synthetic stand-ins for ultrasound data, used by tests and the demo pipeline."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data_pipeline import DEFAULT_CLASSES, IMAGENET_MEAN, IMAGENET_STD, DatasetManifest, ImageRecord, ManifestRecord, save_image, write_manifest


def sector_mask(size: int, top: float = 0.0, half_angle: float = 40.0) -> np.ndarray:
    """Boolean fan-shaped field of view with its apex at the top centre."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    angle = np.degrees(np.arctan2(xx - size / 2.0, yy - top))
    radius = np.hypot(yy - top, xx - size / 2.0)
    return (np.abs(angle) < half_angle) & (radius < size * 0.95)


def structured_images(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Normalised ultrasound-like frames ``[n, 3, size, size]``.

    Every frame shares the sector geometry and depth attenuation; gain and a
    smooth low-frequency texture vary per frame.  The result looks like the
    output of ``preprocess`` on a grayscale scan.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    fan = sector_mask(size)
    attenuation = np.exp(-1.2 * yy)
    mean = np.asarray(IMAGENET_MEAN)[:, None, None]
    std = np.asarray(IMAGENET_STD)[:, None, None]
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        texture = np.zeros((size, size))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            texture += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
        gray = rng.uniform(0.5, 1.0) * attenuation * (0.65 + 0.12 * texture) * fan
        out[i] = ((np.clip(gray, 0, 1)[None] - mean) / std).astype(np.float32)
    return out


def _class_image(label: int, size: int, rng: np.random.Generator, band: int) -> np.ndarray:
    """8-bit grayscale frame: speckled sector, class-dependent bright structure, metadata band."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    img = rng.gamma(2.0, 12.0, size=(size, size)) * sector_mask(size, top=band)
    cy = rng.uniform(0.45, 0.6) * size
    cx = rng.uniform(0.4, 0.6) * size
    r = rng.uniform(0.12, 0.16) * size
    level = 60.0 + 45.0 * label
    dist = np.hypot(yy - cy, xx - cx)
    if label % 2 == 0:
        structure = dist < r
    else:
        structure = np.abs(dist - r) < r * 0.35
    img = np.where(structure, level + rng.normal(0, 6, size=(size, size)), img)
    img[:band] = 0
    img[2 : band - 2, 4 : size // 2] = rng.integers(150, 255, size=(band - 4, size // 2 - 4))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_corpus(
    out_dir,
    patients_per_class: int = 6,
    images_per_patient: int = 2,
    size: int = 240,
    seed: int = 0,
    band: int = 16,
) -> Path:
    """Write a 5-class labelled corpus of PGM frames plus ``manifest.csv``; returns the manifest path.

    Each patient contributes frames of one view class; the top ``band`` rows
    carry fake burned-in metadata, matching the default border crop.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for label, name in enumerate(DEFAULT_CLASSES):
        for p in range(patients_per_class):
            pid = f"P{label}{p:03d}"
            for k in range(images_per_patient):
                rel = f"images/{pid}_{k}.pgm"
                save_image(out_dir / rel, ImageRecord(_class_image(label, size, rng, band)))
                records.append(ManifestRecord(rel, name, pid))
    path = out_dir / "manifest.csv"
    write_manifest(path, DatasetManifest(records, DEFAULT_CLASSES, out_dir))
    return path


def labelled_frames(labels, size: int = 240, seed: int = 0, band: int = 16) -> list[ImageRecord]:
    """One synthetic frame per entry of ``labels``."""
    rng = np.random.default_rng(seed)
    return [ImageRecord(_class_image(int(k), size, rng, band)) for k in labels]
