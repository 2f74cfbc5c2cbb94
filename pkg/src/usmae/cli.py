"""Command-line entry point: split, pretrain, finetune, gridsearch, evaluate.

Settings come from an optional YAML file of flat ``key: value`` pairs and are
overridden by command-line flags.  Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical abort.  Failures print one JSON line on
stderr.  Outputs are staged in a hidden directory and moved into place only
when the command succeeds.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data_pipeline import (
    IngestionError,
    DatasetManifest,
    PreprocessConfig,
    load_split,
    read_manifest,
    split_patients,
    write_manifest,
)
from .evaluation import evaluate
from .metrics import write_report
from .trainer import GridSearchSpace, NumericalError, TrainPlan, finetune, grid_search, pretrain
from .vit_mae import PRESETS, ModelConfig, VitMae, init_parameters

logger = logging.getLogger("usmae")

COMMANDS = ("split", "pretrain", "finetune", "gridsearch", "evaluate")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))
PLAN_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "warmup_fraction", "min_lr", "augment")
PREP_KEYS = ("crop_top", "crop_bottom", "crop_left", "crop_right", "target_size")
OTHER_KEYS = (
    "manifest",
    "output_dir",
    "seed",
    "preset",
    "checkpoint",
    "split",
    "fractions",
    "learning_rates",
    "weight_decays",
)
ALL_KEYS = set(MODEL_KEYS) | set(PLAN_KEYS) | set(PREP_KEYS) | set(OTHER_KEYS)


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    command: str
    manifest: Optional[str] = None
    output_dir: Optional[str] = None
    seed: Optional[int] = None
    preset: str = "tiny"
    model: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    preprocess: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    split: str = "test"
    fractions: tuple = (0.5, 0.25, 0.25)
    learning_rates: tuple = (3e-4, 5e-4, 1e-3)
    weight_decays: tuple = (0.01, 0.001, 0.0001)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fractions"] = list(self.fractions)
        d["learning_rates"] = list(self.learning_rates)
        d["weight_decays"] = list(self.weight_decays)
        return d

    # ------------------------------------------------------------ builders
    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.preset, **self.model)

    def _plan_kwargs(self) -> dict:
        kw = dict(self.plan)
        if "lr" in kw:
            kw["base_lr"] = kw.pop("lr")
        return kw

    def train_plan(self, mode: str) -> TrainPlan:
        return TrainPlan(seed=self.seed, mode=mode, **self._plan_kwargs())

    def preprocess_config(self, image_size: int) -> PreprocessConfig:
        kw = {"target_size": image_size, **self.preprocess}
        return PreprocessConfig(**kw)

    def validate(self) -> None:
        """Collect every problem instead of stopping at the first."""
        problems = []
        if self.command not in COMMANDS:
            problems.append(f"command: must be one of {list(COMMANDS)}")
        if self.seed is None:
            problems.append("seed: required")
        elif not isinstance(self.seed, int) or self.seed < 0:
            problems.append("seed: must be a non-negative integer")
        if not self.output_dir:
            problems.append("output_dir: required")
        if not self.manifest:
            problems.append("manifest: required")
        elif not Path(self.manifest).is_file():
            problems.append(f"manifest: no such file {self.manifest}")
        if self.command == "evaluate" and not self.checkpoint:
            problems.append("checkpoint: required for evaluate")
        if self.checkpoint and not Path(self.checkpoint).is_file():
            problems.append(f"checkpoint: no such file {self.checkpoint}")
        if self.preset not in PRESETS:
            problems.append(f"preset: unknown {self.preset!r}, choose from {sorted(PRESETS)}")
        cfg = None
        try:
            if self.preset in PRESETS:
                cfg = self.model_config()
        except (TypeError, ValueError) as exc:
            problems.append(f"model: {exc}")
        try:
            # a missing seed is already reported; check the remaining plan fields anyway
            TrainPlan(seed=0, **self._plan_kwargs())
        except (TypeError, ValueError) as exc:
            problems.append(f"plan: {exc}")
        if cfg is not None:
            target = self.preprocess.get("target_size", cfg.image_size)
            if target != cfg.image_size:
                problems.append(f"target_size: {target} differs from model image_size {cfg.image_size}")
            try:
                self.preprocess_config(cfg.image_size)
            except TypeError as exc:
                problems.append(f"preprocess: {exc}")
        if self.split not in ("train", "val", "test"):
            problems.append(f"split: must be train, val or test (got {self.split!r})")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            problems.append("fractions: need three values summing to 1")
        if not self.learning_rates or not self.weight_decays:
            problems.append("learning_rates/weight_decays: grid must not be empty")
        if problems:
            raise ConfigError(problems)


def _number_list(text: str) -> tuple:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        sys.exit(_fail(EXIT_CONFIG, "config", [message]))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="usmae", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML file of key: value settings")
    parser.add_argument("--manifest")
    parser.add_argument("--out", dest="output_dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--checkpoint")
    parser.add_argument("--split", choices=("train", "val", "test"))
    parser.add_argument("--fractions", type=_number_list)
    parser.add_argument("--learning-rates", dest="learning_rates", type=_number_list)
    parser.add_argument("--weight-decays", dest="weight_decays", type=_number_list)
    for key in ("epochs", "batch_size"):
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    for key in ("lr", "weight_decay", "warmup_fraction", "min_lr"):
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    parser.add_argument("--augment", dest="augment", action="store_true", default=None)
    parser.add_argument("--no-augment", dest="augment", action="store_false")
    for key in PREP_KEYS:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    for key in ("image_size", "patch_size", "encoder_dim", "encoder_depth", "encoder_heads",
                "decoder_dim", "decoder_depth", "decoder_heads", "num_classes", "head_hidden"):
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    parser.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    parser.add_argument("--pooling", choices=("cls", "mean"))
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the YAML file (if any) with explicit flags; flags win."""
    settings: dict[str, Any] = {}
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"config: cannot read {args.config}: {exc}"]) from None
        if not isinstance(loaded, dict):
            raise ConfigError(["config: expected a mapping of key: value pairs"])
        unknown = sorted(set(loaded) - ALL_KEYS)
        if unknown:
            raise ConfigError([f"{k}: unknown setting" for k in unknown])
        settings.update(loaded)
    for key, value in vars(args).items():
        if key in ALL_KEYS and value is not None:
            settings[key] = value
    run = RunConfig(command=args.command)
    for key in OTHER_KEYS:
        if key in settings:
            value = settings[key]
            if key in ("fractions", "learning_rates", "weight_decays") and not isinstance(value, (list, tuple)):
                value = _number_list(value)
            setattr(run, key, tuple(value) if isinstance(value, list) else value)
    for key in ("manifest", "output_dir", "checkpoint"):
        value = getattr(run, key)
        if value is not None:
            setattr(run, key, str(value))
    run.model = {k: settings[k] for k in MODEL_KEYS if k in settings}
    run.plan = {k: settings[k] for k in PLAN_KEYS if k in settings}
    run.preprocess = {k: settings[k] for k in PREP_KEYS if k in settings}
    return run


# ------------------------------------------------------------------ staging


class Staging:
    """Collects outputs in a hidden directory, publishing them only on success."""

    def __init__(self, out_dir: Path, command: str):
        self.out_dir = out_dir
        self.dir = out_dir / f".staging-{command}"

    def __enter__(self) -> "Staging":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        shutil.rmtree(self.dir, ignore_errors=True)
        self.dir.mkdir()
        return self

    def path(self, name: str) -> Path:
        return self.dir / name

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            for item in sorted(self.dir.iterdir()):
                os.replace(item, self.out_dir / item.name)
        shutil.rmtree(self.dir, ignore_errors=True)


def _write_log(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in rows:
            writer.writerow([epoch, split, metric, repr(float(value))])


def _write_sidecar(path: Path, run: RunConfig, extra: Optional[dict] = None) -> None:
    payload = {"run": run.to_dict(), **(extra or {})}
    path.write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")


def _pretrain_images(manifest: DatasetManifest, pcfg: PreprocessConfig) -> np.ndarray:
    split = "train" if manifest.subset("train") else None
    images, _ = load_split(manifest, split, pcfg)
    return images


def _start_model(run: RunConfig) -> tuple[VitMae, ModelConfig]:
    if run.checkpoint:
        model, _ = load_checkpoint(run.checkpoint)
        return model, model.config
    cfg = run.model_config()
    return init_parameters(cfg, np.random.default_rng(run.seed)), cfg


def _labelled(manifest: DatasetManifest, split: str, pcfg: PreprocessConfig, required: bool = True):
    if not manifest.subset(split):
        if required:
            raise IngestionError(f"manifest has no {split!r} images; run the split command first")
        return None
    return load_split(manifest, split, pcfg)


# ----------------------------------------------------------------- commands


def cmd_split(run: RunConfig, stage: Staging) -> None:
    manifest = read_manifest(run.manifest)
    out = split_patients(manifest, run.fractions, run.seed)
    out_dir = stage.out_dir.resolve()
    for r in out.records:
        r.path = os.path.relpath(manifest.resolve(r).resolve(), out_dir)
    write_manifest(stage.path("manifest.csv"), out)
    _write_sidecar(stage.path("run_split.yaml"), run)


def cmd_pretrain(run: RunConfig, stage: Staging) -> None:
    manifest = read_manifest(run.manifest)
    model, cfg = _start_model(run)
    pcfg = run.preprocess_config(cfg.image_size)
    images = _pretrain_images(manifest, pcfg)
    plan = run.train_plan("pretrain")
    meta = {"run": run.to_dict(), "stage": "pretrain"}
    try:
        result = pretrain(model, images, plan)
    except NumericalError as exc:
        if exc.state is not None:
            model.load_state(exc.state)
            save_checkpoint(stage.out_dir / "pretrain_aborted.ckpt", model, {**meta, "aborted": str(exc)})
        raise
    save_checkpoint(stage.path("pretrain.ckpt"), result.model, meta)
    _write_log(stage.path("pretrain_log.csv"), [(e, "train", "mae_loss", v) for e, v in enumerate(result.epoch_losses)])
    _write_sidecar(stage.path("run_pretrain.yaml"), run)


def cmd_finetune(run: RunConfig, stage: Staging) -> None:
    manifest = read_manifest(run.manifest)
    model, cfg = _start_model(run)
    if cfg.num_classes != len(manifest.classes):
        raise IngestionError(f"model head has {cfg.num_classes} classes but the manifest declares {len(manifest.classes)}")
    pcfg = run.preprocess_config(cfg.image_size)
    train = _labelled(manifest, "train", pcfg)
    val = _labelled(manifest, "val", pcfg, required=False)
    result = finetune(model, train, val, run.train_plan("finetune"))
    meta = {"run": run.to_dict(), "stage": "finetune"}
    save_checkpoint(stage.path("finetune_best.ckpt"), result.best_model(), {**meta, "epoch": result.best_epoch})
    save_checkpoint(stage.path("finetune_final.ckpt"), result.model, {**meta, "epoch": run.train_plan("finetune").epochs - 1})
    _write_log(stage.path("finetune_log.csv"), result.log)
    _write_sidecar(stage.path("run_finetune.yaml"), run, {"best_epoch": result.best_epoch})


def cmd_gridsearch(run: RunConfig, stage: Staging) -> None:
    manifest = read_manifest(run.manifest)
    model, cfg = _start_model(run)
    if cfg.num_classes != len(manifest.classes):
        raise IngestionError(f"model head has {cfg.num_classes} classes but the manifest declares {len(manifest.classes)}")
    pcfg = run.preprocess_config(cfg.image_size)
    train = _labelled(manifest, "train", pcfg)
    val = _labelled(manifest, "val", pcfg)
    space = GridSearchSpace(run.learning_rates, run.weight_decays)
    result = grid_search(space, model, train, val, run.train_plan("finetune"))
    with stage.path("gridsearch.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lr", "weight_decay", "status", "val_accuracy", "val_f1", "best_epoch", "error"])
        for r in result.runs:
            writer.writerow([repr(r.lr), repr(r.weight_decay), r.status, repr(r.val_accuracy), repr(r.val_f1), r.best_epoch, r.error])
    if result.best is None:
        raise NumericalError("every grid point aborted")
    best = {"lr": result.best[0], "weight_decay": result.best[1], "selection_metric": space.metric}
    stage.path("best_config.yaml").write_text(yaml.safe_dump(best, sort_keys=True), encoding="utf-8")
    meta = {"run": run.to_dict(), "stage": "gridsearch", "best": best}
    save_checkpoint(stage.path("gridsearch_best.ckpt"), result.best_result.best_model(), meta)
    _write_sidecar(stage.path("run_gridsearch.yaml"), run, {"best": best})


def cmd_evaluate(run: RunConfig, stage: Staging) -> None:
    manifest = read_manifest(run.manifest)
    model, _ = load_checkpoint(run.checkpoint)
    pcfg = run.preprocess_config(model.config.image_size)
    if not manifest.subset(run.split):
        raise IngestionError(f"split {run.split!r} has no images")
    report = evaluate(model, manifest, pcfg, run.split)
    write_report(report, stage.dir)
    _write_sidecar(stage.path("run_evaluate.yaml"), run)


HANDLERS = {
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "gridsearch": cmd_gridsearch,
    "evaluate": cmd_evaluate,
}


def _fail(code: int, kind: str, problems: list[str]) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "problems": problems}), file=sys.stderr)
    return code


def run_command(run: RunConfig) -> int:
    """Validate and execute; returns the process exit status."""
    try:
        run.validate()
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc.problems)
    try:
        with Staging(Path(run.output_dir), run.command) as stage:
            HANDLERS[run.command](run, stage)
    except (IngestionError, CheckpointError) as exc:
        return _fail(EXIT_DATA, "data", [str(exc)])
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numerical", [str(exc)])
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", [str(exc)])
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s %(message)s")
    try:
        run = resolve_config(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc.problems)
    return run_command(run)


if __name__ == "__main__":
    sys.exit(main())
