"""Pretrain the tiny preset on structured synthetic images and print the loss curve."""

import argparse

import numpy as np

from usmae.synthetic import structured_images
from usmae.trainer import TrainPlan, pretrain
from usmae.vit_mae import ModelConfig, init_parameters


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--images", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    images = structured_images(args.images, 224, np.random.default_rng(args.seed))
    model = init_parameters(ModelConfig.preset("tiny"), np.random.default_rng(args.seed))
    plan = TrainPlan(epochs=args.epochs, batch_size=8, base_lr=1e-3, weight_decay=0.05, warmup_fraction=0.05,
                     seed=args.seed, mode="pretrain")
    losses = pretrain(model, images, plan).epoch_losses
    for epoch, loss in enumerate(losses):
        print(f"{epoch},{loss:.6f}")
    print(f"final/first = {losses[-1] / losses[0]:.3f}")


if __name__ == "__main__":
    main()
