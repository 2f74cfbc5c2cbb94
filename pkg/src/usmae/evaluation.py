"""Scoring a trained classifier on a manifest split."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .data_pipeline import DatasetManifest, PreprocessConfig, load_split
from .metrics import MetricsReport, PredictionSet, build_report
from .trainer import predict_logits, softmax_np
from .vit_mae import VitMae


def predictions(model: VitMae, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> PredictionSet:
    """Softmax scores of the classifier for un-augmented images."""
    return PredictionSet(labels, softmax_np(predict_logits(model, images, batch_size)))


def evaluate_arrays(
    model: VitMae,
    images: np.ndarray,
    labels: np.ndarray,
    classes: Sequence[str],
    average: str = "weighted",
) -> MetricsReport:
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    if len(classes) != model.config.num_classes:
        raise ValueError(f"{len(classes)} class names for a {model.config.num_classes}-class head")
    return build_report(predictions(model, images, labels), classes, average)


def evaluate(
    model: VitMae,
    manifest: DatasetManifest,
    preprocess_cfg: PreprocessConfig,
    split: Optional[str] = "test",
    average: str = "weighted",
) -> MetricsReport:
    """Load, preprocess (never augment) and score one split of a manifest."""
    if not (manifest.subset(split) if split else manifest.records):
        raise ValueError(f"split {split!r} has no images")
    images, labels = load_split(manifest, split, preprocess_cfg)
    return evaluate_arrays(model, images, labels, manifest.classes, average)
