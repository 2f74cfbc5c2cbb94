"""Run split, pretrain, finetune, gridsearch and evaluate on a synthetic corpus.

Every stage goes through the command-line entry point, so this doubles as a
smoke test of the installed tool.  Prints the test metrics at the end.
"""

import argparse
import sys
from pathlib import Path

import yaml

from usmae.cli import main as usmae
from usmae.synthetic import make_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("workdir", type=Path)
    parser.add_argument("--preset", default="tiny")
    parser.add_argument("--pretrain-epochs", type=int, default=20)
    parser.add_argument("--finetune-epochs", type=int, default=40)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    work = args.workdir
    corpus = make_corpus(work / "corpus", patients_per_class=4, images_per_patient=2, seed=args.seed)
    config = work / "run.yaml"
    config.write_text(yaml.safe_dump({"seed": args.seed, "preset": args.preset, "batch_size": 4, "lr": 1e-3,
                                      "weight_decay": 0.01}))
    out = work / "run"
    common = ["--config", str(config), "--out", str(out)]
    manifest = str(out / "manifest.csv")
    stages = [
        ["split", "--manifest", str(corpus)],
        ["pretrain", "--manifest", manifest, "--epochs", str(args.pretrain_epochs), "--batch-size", "8"],
        ["finetune", "--manifest", manifest, "--checkpoint", str(out / "pretrain.ckpt"),
         "--epochs", str(args.finetune_epochs)],
        ["gridsearch", "--manifest", manifest, "--checkpoint", str(out / "pretrain.ckpt"),
         "--epochs", str(max(1, args.finetune_epochs // 2)), "--learning-rates", "1e-3,5e-4", "--weight-decays", "0.01"],
        ["evaluate", "--manifest", manifest, "--checkpoint", str(out / "finetune_best.ckpt")],
    ]
    for stage in stages:
        argv = stage + common
        if stage[0] == "evaluate":
            argv = stage + ["--config", str(config), "--out", str(out / "eval")]
        print("usmae", " ".join(stage[:1]), flush=True)
        code = usmae(argv)
        if code:
            return code
    print((out / "eval" / "metrics.csv").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
