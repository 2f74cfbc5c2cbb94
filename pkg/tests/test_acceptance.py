"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as they happen (visible with ``-s``) and collected in
the "acceptance criteria" section of the pytest terminal summary.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import yaml

from usmae import tensor as T
from usmae.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from usmae.cli import main as cli_main
from usmae.data_pipeline import (
    DEFAULT_CLASSES,
    SPLITS,
    DatasetManifest,
    ManifestRecord,
    PreprocessConfig,
    preprocess,
    read_manifest,
    split_patients,
)
from usmae.evaluation import evaluate_arrays
from usmae.metrics import PredictionSet, confusion_matrix, roc_curve_ovr, weighted_metrics
from usmae.synthetic import labelled_frames, make_corpus, structured_images
from usmae.tensor import Tensor
from usmae.trainer import AdamW, OptimizerState, TrainPlan, adamw_step, finetune, lr_at, predict_logits, prepare_finetune, pretrain
from usmae.vit_mae import ModelConfig, init_parameters, mae_loss, sample_mask

from conftest import ACCEPTANCE, micro_mae_gradient_error, numeric_grad, rel_error
from test_tensor import OPS, _case

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number: int, title: str):
    """Record and print one PASS/FAIL line; ``note`` can be appended to by the body."""
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        line = f"FAIL criterion {number}: {title} ({type(exc).__name__}: {exc})"
        ACCEPTANCE.append(line)
        print("\n" + line)
        raise
    detail = "; ".join(notes + [f"{time.perf_counter() - start:.1f}s"])
    line = f"PASS criterion {number}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print("\n" + line)


# ------------------------------------------------------------------------ 1


def test_criterion_1_gradient_correctness():
    with criterion(1, "analytic gradients match central differences") as notes, T.float64_mode():
        worst = 0.0
        for op in OPS:
            for seed in range(20):
                rng = np.random.default_rng(seed)
                inputs, fn = _case(op, rng)
                out = fn(*inputs)
                weights = rng.standard_normal(out.shape)
                T.sum(T.mul(out, Tensor(weights))).backward()

                def objective():
                    return float((fn(*[Tensor(t.data) for t in inputs]).data * weights).sum())

                for t in inputs:
                    err = rel_error(t.grad, numeric_grad(objective, t.data, step=1e-3))
                    assert err < 1e-3, f"{op} seed {seed}: {err:.2e}"
                    worst = max(worst, err)
        e2e = max(micro_mae_gradient_error(seed) for seed in range(20))
        assert e2e < 1e-2, f"end-to-end error {e2e:.2e}"
        notes.append(f"{len(OPS)} ops x 20 seeds worst {worst:.1e}; micro MAE x 20 seeds worst {e2e:.1e}")


# ------------------------------------------------------------------------ 2


def test_criterion_2_masked_loss_locality():
    with criterion(2, "loss ignores visible targets; 49 of 196 masked"):
        rng = np.random.default_rng(0)
        for seed in range(100):
            plan = sample_mask(196, 0.25, np.random.default_rng(seed))
            assert (len(plan.masked_indices), len(plan.visible_indices)) == (49, 147)
            pred = rng.standard_normal((196, 768)).astype(np.float32)
            target = rng.standard_normal((196, 768)).astype(np.float32)
            base = mae_loss(Tensor(pred), target, plan).data
            target[plan.visible_indices] += rng.standard_normal((147, 768)).astype(np.float32) * 100
            assert mae_loss(Tensor(pred), target, plan).data.tobytes() == base.tobytes()


# ------------------------------------------------------------------------ 3


def test_criterion_3_pretraining_convergence():
    with criterion(3, "pretraining loss halves in 200 epochs and is reproducible") as notes:
        cfg = ModelConfig.preset("tiny")
        images = structured_images(32, 224, np.random.default_rng(0))
        plan = TrainPlan(epochs=200, batch_size=8, base_lr=1e-3, weight_decay=0.05, warmup_fraction=0.05, mode="pretrain")
        result = pretrain(init_parameters(cfg, np.random.default_rng(0)), images, plan)
        ratio = result.epoch_losses[-1] / result.epoch_losses[0]
        notes.append(f"final/first loss {ratio:.3f}")
        assert ratio < 0.5
        # reproducibility on a shorter run with the same seeds
        short = TrainPlan(epochs=5, batch_size=8, base_lr=1e-3, weight_decay=0.05, warmup_fraction=0.05, mode="pretrain")
        runs = [pretrain(init_parameters(cfg, np.random.default_rng(0)), images, short) for _ in range(2)]
        assert np.array(runs[0].epoch_losses).tobytes() == np.array(runs[1].epoch_losses).tobytes()
        assert encode_checkpoint(runs[0].model) == encode_checkpoint(runs[1].model)


# ------------------------------------------------------------------------ 4


def _toy_set():
    labels = np.arange(10) % 5
    images = np.stack([preprocess(img, PreprocessConfig()) for img in labelled_frames(labels, seed=1)])
    return images, labels


def test_criterion_4_finetuning_capacity():
    with criterion(4, "10-image toy set overfits; zero lr freezes every metric") as notes:
        images, labels = _toy_set()
        base = init_parameters(ModelConfig.preset("tiny"), np.random.default_rng(0))
        plan = TrainPlan(epochs=300, batch_size=2, base_lr=1e-3, weight_decay=0.01, augment=False)
        result = finetune(base, (images, labels), None, plan)
        acc = [v for _, s, m, v in result.log if s == "train" and m == "accuracy"]
        first = next(e for e, v in enumerate(acc) if v == 1.0)
        notes.append(f"train accuracy 1.0 first at epoch {first}")
        report = evaluate_arrays(result.model, images, labels, DEFAULT_CLASSES)
        assert report.accuracy == 1.0
        assert (report.confusion == np.diag(np.bincount(labels, minlength=5))).all()
        assert (predict_logits(result.model, images).argmax(axis=1) == labels).all()

        frozen = finetune(base, (images, labels), (images, labels), TrainPlan(epochs=4, batch_size=2, base_lr=0.0, augment=False))
        series = {}
        for _, split, metric, value in frozen.log:
            series.setdefault((split, metric), []).append(value)
        for key, values in series.items():
            assert len(set(values)) == 1, key


# ------------------------------------------------------------------------ 5


def test_criterion_5_decoder_discarded():
    with criterion(5, "optimizer holds no decoder parameters after fine-tune setup") as notes:
        pretrained = init_parameters(ModelConfig.preset("tiny"), np.random.default_rng(0))
        assert any(n.startswith("decoder.") for n in pretrained.params)
        model, opt = prepare_finetune(pretrained, TrainPlan())
        names = opt.parameter_names
        assert sum(n.startswith("decoder.") for n in names) == 0
        assert set(names) == set(model.params)
        notes.append(f"{len(names)} parameters, 0 decoder")


# ------------------------------------------------------------------------ 6


def _reference_adamw(theta, grads, lrs, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    path = []
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * ((m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps) + wd * theta)
        path.append(theta)
    return path


def test_criterion_6_adamw_oracle():
    with criterion(6, "AdamW matches a scalar recurrence; zero-grad decay is exact") as notes:
        with T.float64_mode():
            rng = np.random.default_rng(0)
            worst = 0.0
            for _ in range(50):
                theta0, wd, target = rng.normal(), rng.choice([0.0, 0.01, 0.1]), rng.normal()
                lrs = rng.uniform(1e-3, 0.2, 3).tolist()
                p = Tensor(np.array([theta0]), requires_grad=True)
                state = OptimizerState(weight_decay=wd)
                grads, ours = [], []
                for lr in lrs:
                    g = 2.0 * (p.data[0] - target)
                    grads.append(g)
                    p.grad = np.array([g])
                    adamw_step({"w": p}, state, lr)
                    ours.append(p.data[0])
                ref = _reference_adamw(theta0, grads, lrs, wd)
                worst = max(worst, max(abs(a - b) for a, b in zip(ours, ref)))
            assert worst < 1e-7
            notes.append(f"worst deviation {worst:.1e}")
        # float32 parameters, as used in training
        model = init_parameters(ModelConfig.preset("tiny"), np.random.default_rng(1))
        opt = AdamW(model.named_parameters(), weight_decay=0.05)
        before = model.state()
        for p in opt.params.values():
            p.grad = np.zeros_like(p.data)
        opt.step(3e-4)
        factor = np.float32(1 - 3e-4 * 0.05)
        for name, p in opt.params.items():
            expect = before[name] if name in opt.state.exempt else before[name] * factor
            assert p.data.tobytes() == expect.tobytes(), name
        notes.append(f"{len(opt.state.exempt)} exempt tensors unchanged")


# ------------------------------------------------------------------------ 7


def test_criterion_7_schedule():
    with criterion(7, "warm-up apex, cosine midpoint and final value"):
        total, base, wf = 1000, 5e-4, 0.1
        assert lr_at(100, total, base, wf) == base
        # cosine spans steps 100..999; with total 1001 it spans 100..1000 and step 550 is its midpoint
        assert abs(lr_at(550, 1001, base, wf) - base / 2) < 1e-9
        assert lr_at(549, total, base, wf) > base / 2 > lr_at(550, total, base, wf)
        assert lr_at(total - 1, total, base, wf) < 1e-8


# ------------------------------------------------------------------------ 8


def _rank_auc(labels, scores):
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_criterion_8_metric_oracles():
    with criterion(8, "weighted recall == accuracy; AUC and confusion oracles") as notes:
        rng = np.random.default_rng(0)
        worst_auc = 0.0
        for i in range(1000):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 5, n)
            scores = rng.dirichlet(np.ones(5), size=n)
            if i % 3 == 0:
                scores = np.round(scores, 1)  # ties
                scores /= scores.sum(axis=1, keepdims=True)
            ps = PredictionSet(labels, scores)
            acc, _, rec, _ = weighted_metrics(ps)
            assert rec == acc
            cm = confusion_matrix(ps)
            recount = np.zeros((5, 5), int)
            for a, b in zip(labels, ps.predicted):
                recount[a, b] += 1
            assert (cm == recount).all()
            c = int(labels[0])
            if 0 < (labels == c).sum() < n:
                err = abs(roc_curve_ovr(ps, c).area - _rank_auc(labels == c, scores[:, c]))
                worst_auc = max(worst_auc, err)
        assert worst_auc < 1e-9
        notes.append(f"worst AUC deviation {worst_auc:.1e}")


# ------------------------------------------------------------------------ 9


def _random_cohort(rng):
    mix = rng.dirichlet(np.full(5, 2.0))
    records = []
    for i in range(int(rng.integers(50, 150))):
        label = DEFAULT_CLASSES[rng.choice(5, p=mix)]
        records += [ManifestRecord(f"p{i}_{k}.pgm", label, f"p{i}") for k in range(int(rng.integers(1, 6)))]
    return DatasetManifest(records)


def test_criterion_9_split_integrity():
    with criterion(9, "patient-exclusive splits near 50/25/25") as notes:
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            out = split_patients(_random_cohort(rng), seed=seed)
            owners = {}
            for r in out.records:
                owners.setdefault(r.patient_id, set()).add(r.split)
            assert all(len(s) == 1 for s in owners.values())
            n = len(out.records)
            for split, target in zip(SPLITS, (0.5, 0.25, 0.25)):
                frac = sum(r.split == split for r in out.records) / n
                worst = max(worst, abs(frac - target))
        assert worst <= 0.05
        notes.append(f"worst fraction deviation {100 * worst:.1f} pp")


# ----------------------------------------------------------------------- 10


def test_criterion_10_serialization(tmp_path):
    with criterion(10, "checkpoint round trip is byte-exact; logits bit-identical"):
        model = init_parameters(ModelConfig.preset("tiny"), np.random.default_rng(0))
        first = save_checkpoint(tmp_path / "a.ckpt", model, {"seed": 0}).read_bytes()
        loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
        assert save_checkpoint(tmp_path / "b.ckpt", loaded, meta).read_bytes() == first
        images = structured_images(3, 224, np.random.default_rng(1))
        assert predict_logits(loaded, images).tobytes() == predict_logits(model, images).tobytes()
        again, _ = decode_checkpoint(first)
        assert predict_logits(again, images).tobytes() == predict_logits(model, images).tobytes()


# ----------------------------------------------------------------------- 11

PIPELINE_ARTIFACTS = {
    "split": ["manifest.csv", "run_split.yaml"],
    "pretrain": ["pretrain.ckpt", "pretrain_log.csv", "run_pretrain.yaml"],
    "finetune": ["finetune_best.ckpt", "finetune_final.ckpt", "finetune_log.csv", "run_finetune.yaml"],
    "gridsearch": ["gridsearch.csv", "best_config.yaml", "gridsearch_best.ckpt", "run_gridsearch.yaml"],
    "evaluate": ["metrics.csv", "confusion.csv", "run_evaluate.yaml"]
    + [f"{kind}_{c}.csv" for kind in ("roc", "pr") for c in DEFAULT_CLASSES],
}


def test_criterion_11_end_to_end_cli(tmp_path):
    with criterion(11, "split -> pretrain -> finetune -> gridsearch -> evaluate via the CLI") as notes:
        corpus = make_corpus(tmp_path / "corpus", patients_per_class=4, images_per_patient=2, seed=0)
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump({"seed": 0, "preset": "tiny", "batch_size": 4, "lr": 1e-3, "weight_decay": 0.01}))
        out = tmp_path / "run"
        base = ["--config", str(cfg), "--out", str(out)]
        split_manifest = str(out / "manifest.csv")
        steps = [
            ("split", ["--manifest", str(corpus)]),
            ("pretrain", ["--manifest", split_manifest, "--epochs", "20", "--batch-size", "8"]),
            ("finetune", ["--manifest", split_manifest, "--checkpoint", str(out / "pretrain.ckpt"), "--epochs", "40"]),
            ("gridsearch", ["--manifest", split_manifest, "--checkpoint", str(out / "pretrain.ckpt"), "--epochs", "20",
                            "--learning-rates", "1e-3,5e-4", "--weight-decays", "0.01"]),
            ("evaluate", ["--manifest", split_manifest, "--checkpoint", str(out / "finetune_best.ckpt"),
                          "--out", str(out / "eval")]),
        ]
        for command, extra in steps:
            assert cli_main([command] + base + extra) == 0, command
        for command, names in PIPELINE_ARTIFACTS.items():
            folder = out / "eval" if command == "evaluate" else out
            missing = [n for n in names if not (folder / n).is_file()]
            assert not missing, f"{command}: missing {missing}"
        assert len((out / "gridsearch.csv").read_text().splitlines()) == 3

        manifest = read_manifest(split_manifest)
        test_labels = [r.label for r in manifest.subset("test")]
        prior = max(test_labels.count(c) for c in set(test_labels)) / len(test_labels)
        metrics = dict(line.split(",", 1) for line in (out / "eval" / "metrics.csv").read_text().splitlines()[1:])
        accuracy = float(metrics["accuracy"])
        notes.append(f"test accuracy {accuracy:.2f} vs majority prior {prior:.2f} on {len(test_labels)} images")
        assert accuracy > prior
