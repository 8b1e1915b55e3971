"""Write a CelebA-shaped synthetic source set and prepare x4/x8 train and test manifests.

    python3 scripts/make_synthetic_dataset.py --out data/synthetic --train 64 --test 16
"""
import argparse
from pathlib import Path

from swinifs.cli import main as cli
from swinifs.synthetic import write_synthetic_source


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--train", type=int, default=64)
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    images, landmarks = write_synthetic_source(out / "source", args.train + args.test, seed=args.seed)
    with open(out / "source" / "partition.txt", "w") as fh:
        for i in range(args.train + args.test):
            fh.write(f"{i + 1:06d}.png {0 if i < args.train else 2}\n")
    for split in ("train", "test"):
        cli(["prepare-data", "--images", str(images), "--landmarks", str(landmarks), "--out", str(out / split),
             "--scale", "4", "8", "--split-file", str(out / "source" / "partition.txt"), "--split", split])


if __name__ == "__main__":
    main()
