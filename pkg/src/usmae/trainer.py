"""AdamW, the warm-up + cosine schedule, and the pretraining / fine-tuning loops."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data_pipeline import augment, augment_rng
from .metrics import weighted_metrics
from .tensor import Tensor
from .vit_mae import VitMae, classify_batch, init_head, patchify, reconstruction_step, sample_mask

logger = logging.getLogger(__name__)

EXEMPT_MARKERS = ("cls_token", "mask_token", "pos_embed")


class NumericalError(RuntimeError):
    """Training hit a non-finite loss or gradient.

    ``state`` holds the last parameters known to be finite.
    """

    def __init__(self, message: str, state: Optional[dict[str, np.ndarray]] = None):
        super().__init__(message)
        self.state = state


def is_decay_exempt(name: str) -> bool:
    """Biases, normalisation affines, tokens and positional tables get no weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "bias" or any(m in name for m in EXEMPT_MARKERS):
        return True
    return any(part.startswith("norm") for part in name.split("."))


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exempt: set = field(default_factory=set)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Missing gradients count as zero.  Raises :class:`NumericalError` naming
    the first parameter with a non-finite gradient before touching anything.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        decay = 0.0 if name in state.exempt else state.weight_decay
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = p.data * (1.0 - lr * decay) - lr * update


class AdamW:
    """Owns the parameter directory being optimised and its moment buffers."""

    def __init__(self, named_params, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = OptimizerState(
            weight_decay=weight_decay,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            exempt={n for n in self.params if is_decay_exempt(n)},
        )

    @property
    def parameter_names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1, min_lr: float = 0.0) -> float:
    """Linear warm-up from 0 to ``base_lr``, then half-cosine down to ``min_lr``.

    The warm-up spans ``round(warmup_fraction * total_steps)`` steps, so the
    apex lands exactly on that step; the final step returns ``min_lr``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * step / warmup
    span = total_steps - 1 - warmup
    if span <= 0:
        return base_lr
    progress = (step - warmup) / span
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------------- plans


@dataclass
class TrainPlan:
    epochs: int = 120
    batch_size: int = 64
    base_lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    seed: int = 0
    mode: str = "finetune"
    min_lr: float = 0.0
    augment: bool = True

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("invalid TrainPlan: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if not 0.0 <= self.warmup_fraction < 1.0:
            out.append(f"warmup_fraction must lie in [0, 1) (got {self.warmup_fraction})")
        if self.base_lr < 0 or self.weight_decay < 0:
            out.append("base_lr and weight_decay must be non-negative")
        if self.mode not in ("pretrain", "finetune"):
            out.append(f"mode must be 'pretrain' or 'finetune' (got {self.mode!r})")
        return out

    def steps_per_epoch(self, n: int) -> int:
        return max(1, math.ceil(n / self.batch_size))


def _batches(perm: np.ndarray, batch_size: int):
    # the final short batch is kept
    for start in range(0, len(perm), batch_size):
        yield perm[start : start + batch_size]


# ------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    model: VitMae
    epoch_losses: list[float]


def pretrain(
    model: VitMae,
    images: np.ndarray,
    plan: TrainPlan,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> PretrainResult:
    """Masked-reconstruction training of encoder and decoder, in place.

    Every image receives a fresh mask each time it is visited. The logged
    value per epoch is the mean reconstruction loss over all images.
    """
    if plan.mode != "pretrain":
        raise ValueError("pretrain needs a plan with mode='pretrain'")
    if len(images) == 0:
        raise ValueError("pretraining corpus is empty")
    cfg = model.config
    patches = patchify(np.asarray(images, dtype=np.float32), cfg.patch_size)
    rng = np.random.default_rng(plan.seed)
    opt = AdamW(model.named_parameters(("encoder.", "decoder.")), plan.weight_decay)
    total = plan.epochs * plan.steps_per_epoch(len(patches))
    step = 0
    losses: list[float] = []
    for epoch in range(plan.epochs):
        perm = rng.permutation(len(patches))
        running = 0.0
        for idx in _batches(perm, plan.batch_size):
            plans = [sample_mask(cfg.num_patches, cfg.mask_ratio, rng) for _ in idx]
            loss = reconstruction_step(model, patches[idx], plans)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite reconstruction loss at epoch {epoch}", model.state())
            opt.zero_grad()
            loss.backward()
            try:
                opt.step(lr_at(step, total, plan.base_lr, plan.warmup_fraction, plan.min_lr))
            except NumericalError as exc:
                exc.state = model.state()
                raise
            step += 1
            running += value * len(idx)
        losses.append(running / len(patches))
        logger.info("pretrain epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    opt.zero_grad()
    return PretrainResult(model, losses)


# -------------------------------------------------------------- fine-tuning


def predict_logits(model: VitMae, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Deterministic, gradient-free logits ``[n, num_classes]``."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = patchify(np.asarray(images[start : start + batch_size], dtype=np.float32), model.config.patch_size)
            out.append(classify_batch(model, chunk).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate_split(model: VitMae, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> dict[str, float]:
    logits = predict_logits(model, images, batch_size)
    probs = softmax_np(logits)
    labels = np.asarray(labels)
    nll = -np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300)).mean()
    acc, prec, rec, f1 = weighted_metrics(labels, probs.argmax(axis=1), model.config.num_classes)
    return {"loss": float(nll), "accuracy": acc, "precision": prec, "recall": rec, "f1": f1}


@dataclass
class FinetuneResult:
    model: VitMae
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_accuracy: float
    log: list[tuple[int, str, str, float]]
    optimizer_parameters: list[str]

    def best_model(self) -> VitMae:
        model = self.model.copy()
        model.load_state(self.best_state)
        return model


def prepare_finetune(pretrained: VitMae, plan: TrainPlan) -> tuple[VitMae, AdamW]:
    """Drop the decoder, attach a fresh head and build the optimizer over everything left."""
    model = pretrained.without_decoder().copy()
    init_head(model, np.random.default_rng([plan.seed, 1]))
    return model, AdamW(model.named_parameters(), plan.weight_decay)


def finetune(
    pretrained: VitMae,
    train: tuple[np.ndarray, np.ndarray],
    val: Optional[tuple[np.ndarray, np.ndarray]],
    plan: TrainPlan,
) -> FinetuneResult:
    """End-to-end supervised training with cross-entropy.

    Training images are augmented (when ``plan.augment``); validation images
    never are.  The parameters with the best validation accuracy (earliest
    epoch on ties) are kept next to the final ones.
    """
    if plan.mode != "finetune":
        raise ValueError("finetune needs a plan with mode='finetune'")
    images, labels = np.asarray(train[0], dtype=np.float32), np.asarray(train[1], dtype=np.int64)
    if len(images) == 0:
        raise ValueError("training split is empty")
    k = pretrained.config.num_classes
    for split_labels in [labels] + ([np.asarray(val[1])] if val is not None else []):
        if split_labels.size and (split_labels.min() < 0 or split_labels.max() >= k):
            raise ValueError(f"labels exceed the {k}-class head")
    model, opt = prepare_finetune(pretrained, plan)
    cfg = model.config
    rng = np.random.default_rng(plan.seed)
    total = plan.epochs * plan.steps_per_epoch(len(images))
    step = 0
    log: list[tuple[int, str, str, float]] = []
    best_state, best_epoch, best_acc = model.state(), -1, -math.inf
    for epoch in range(plan.epochs):
        perm = rng.permutation(len(images))
        # per-sample records, reduced in index order so the log ignores batch order
        sample_loss = np.zeros(len(images))
        sample_hit = np.zeros(len(images), dtype=bool)
        for idx in _batches(perm, plan.batch_size):
            batch = images[idx]
            if plan.augment:
                batch = np.stack([augment(images[i], augment_rng(plan.seed, epoch, int(i))) for i in idx])
            logits = classify_batch(model, patchify(batch, cfg.patch_size))
            loss = T.cross_entropy_logits(logits, labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite classification loss at epoch {epoch}", model.state())
            opt.zero_grad()
            loss.backward()
            try:
                opt.step(lr_at(step, total, plan.base_lr, plan.warmup_fraction, plan.min_lr))
            except NumericalError as exc:
                exc.state = model.state()
                raise
            step += 1
            probs = softmax_np(logits.data)
            sample_loss[idx] = -np.log(np.maximum(probs[np.arange(len(idx)), labels[idx]], 1e-300))
            sample_hit[idx] = probs.argmax(axis=1) == labels[idx]
        train_loss = float(sample_loss.sum() / len(images))
        log.append((epoch, "train", "loss", train_loss))
        log.append((epoch, "train", "accuracy", float(sample_hit.mean())))
        if val is not None and len(val[0]):
            scores = evaluate_split(model, val[0], val[1], plan.batch_size)
            for name in ("loss", "accuracy", "f1"):
                log.append((epoch, "val", name, scores[name]))
            if scores["accuracy"] > best_acc:
                best_state, best_epoch, best_acc = model.state(), epoch, scores["accuracy"]
            logger.info("finetune epoch %d loss %.4f val acc %.4f", epoch, train_loss, scores["accuracy"])
        else:
            best_state, best_epoch = model.state(), epoch
    opt.zero_grad()
    return FinetuneResult(model, best_state, best_epoch, best_acc, log, opt.parameter_names)


# -------------------------------------------------------------- grid search


@dataclass
class GridSearchSpace:
    learning_rates: Sequence[float] = (3e-4, 5e-4, 1e-3)
    weight_decays: Sequence[float] = (0.01, 0.001, 0.0001)
    metric: str = "val_accuracy"

    def points(self) -> list[tuple[float, float]]:
        return list(itertools.product(self.learning_rates, self.weight_decays))


@dataclass
class GridRun:
    lr: float
    weight_decay: float
    status: str
    val_accuracy: float = float("nan")
    val_f1: float = float("nan")
    best_epoch: int = -1
    error: str = ""


@dataclass
class GridSearchResult:
    best: Optional[tuple[float, float]]
    runs: list[GridRun]
    best_result: Optional[FinetuneResult] = None


def select_best(runs: Sequence[GridRun]) -> Optional[GridRun]:
    """Highest validation accuracy; ties go to the lower lr, then the higher weight decay."""
    ok = [r for r in runs if r.status == "ok" and math.isfinite(r.val_accuracy)]
    if not ok:
        return None
    return min(ok, key=lambda r: (-r.val_accuracy, r.lr, -r.weight_decay))


def grid_search(
    space: GridSearchSpace,
    pretrained: VitMae,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    plan_template: TrainPlan,
) -> GridSearchResult:
    """Fine-tune once per (lr, weight decay) with identical seed and data."""
    points = space.points()
    if not points:
        raise ValueError("grid search space is empty")
    runs, results = [], {}
    for lr, wd in points:
        plan = replace(plan_template, base_lr=lr, weight_decay=wd, mode="finetune")
        try:
            res = finetune(pretrained, train, val, plan)
        except NumericalError as exc:
            logger.warning("grid point lr=%g wd=%g aborted: %s", lr, wd, exc)
            runs.append(GridRun(lr, wd, "failed", error=str(exc)))
            continue
        f1 = next((v for e, s, m, v in res.log if e == res.best_epoch and s == "val" and m == "f1"), float("nan"))
        runs.append(GridRun(lr, wd, "ok", res.best_val_accuracy, f1, res.best_epoch))
        results[(lr, wd)] = res
    best = select_best(runs)
    if best is None:
        return GridSearchResult(None, runs)
    key = (best.lr, best.weight_decay)
    return GridSearchResult(key, runs, results[key])
