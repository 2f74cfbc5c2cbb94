"""Masked-autoencoder pretraining and fine-tuning of a Vision Transformer for ultrasound views."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data_pipeline import (
    DatasetManifest,
    ImageRecord,
    PreprocessConfig,
    augment,
    load_image,
    preprocess,
    read_manifest,
    split_patients,
    write_manifest,
)
from .evaluation import evaluate
from .metrics import MetricsReport, PredictionSet, confusion_matrix, pr_curve_ovr, roc_curve_ovr, weighted_metrics
from .tensor import Tensor, float64_mode, no_grad
from .trainer import AdamW, GridSearchSpace, TrainPlan, adamw_step, finetune, grid_search, lr_at, pretrain
from .vit_mae import (
    MaskPlan,
    ModelConfig,
    VitMae,
    classify,
    decode_reconstruct,
    encode,
    init_parameters,
    mae_loss,
    patchify,
    sample_mask,
    unpatchify,
)

__version__ = "0.1.0"
