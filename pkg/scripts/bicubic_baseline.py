"""Bicubic PSNR/SSIM (Y) on a prepared manifest, the reference row of the results table.

    python3 scripts/bicubic_baseline.py data/celeba/test/manifest_x4.txt
"""
import argparse
import statistics

from swinifs.metrics import psnr, ssim_y
from swinifs.train import PairedDataset, bicubic_upsample


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("manifest")
    args = ap.parse_args()

    ds = PairedDataset.from_manifest(args.manifest)
    p, s = [], []
    for sample in ds.samples:
        up = bicubic_upsample(sample, ds.scale)
        p.append(psnr(up, sample.hr))
        s.append(ssim_y(up, sample.hr.double()))
    print(f"{ds.scale}x bicubic on {len(ds)} images: PSNR {statistics.fmean(p):.2f} dB  SSIM {statistics.fmean(s):.4f}")


if __name__ == "__main__":
    main()
