"""Write a small labelled ultrasound-like corpus and its manifest."""

import argparse

from usmae.synthetic import make_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="directory to create")
    parser.add_argument("--patients-per-class", type=int, default=6)
    parser.add_argument("--images-per-patient", type=int, default=2)
    parser.add_argument("--size", type=int, default=240)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    path = make_corpus(args.out, args.patients_per_class, args.images_per_patient, args.size, args.seed)
    print(path)


if __name__ == "__main__":
    main()
