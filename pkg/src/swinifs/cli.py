"""Command line entry point: ``swinifs <prepare-data|train|eval|infer|benchmark>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ExperimentConfig
from .data import LandmarkSet, iter_prepared, load_image, load_landmark_annotations, save_image, write_manifest
from .heatmaps import HeatmapConfig, build_model_input, render_heatmaps
from .metrics import build_metric_net

log = logging.getLogger("swinifs")


def _heatmap_from_checkpoint(state) -> HeatmapConfig:
    return ExperimentConfig.from_flat(state["config"]).heatmap


SPLITS = {"train": 0, "val": 1, "test": 2}


def read_split(path, partition: int) -> set[str]:
    """Image names assigned to ``partition`` in a CelebA-style ``name partition`` list."""
    keep = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if len(toks) == 2 and toks[1].isdigit() and int(toks[1]) == partition:
                keep.add(toks[0])
    return keep


def cmd_prepare(args) -> int:
    annotations = load_landmark_annotations(args.landmarks)
    if args.split_file:
        keep = read_split(args.split_file, SPLITS[args.split])
        annotations = [a for a in annotations if a[0] in keep]
    if args.limit:
        annotations = annotations[: args.limit]
    out = Path(args.out)
    for scale in args.scale:
        entries = list(iter_prepared(args.images, annotations, out, scale, args.margin))
        manifest = out / f"manifest_x{scale}.txt"
        write_manifest(entries, manifest)
        print(f"wrote {len(entries)} samples to {manifest}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.out_dir:
        cfg.train.out_dir = args.out_dir
    if not cfg.data.train_manifest:
        print("config has no data.train_manifest", file=sys.stderr)
        return 2
    written = train(cfg.data.train_manifest, cfg, resume=args.resume, test_manifest=cfg.data.test_manifest or None)
    for path in written:
        print(path)
    return 0


def cmd_eval(args) -> int:
    from .train import PairedDataset, evaluate, load_model, read_checkpoint

    state = read_checkpoint(args.checkpoint)
    model = load_model(args.checkpoint)
    dataset = PairedDataset.from_manifest(args.manifest, _heatmap_from_checkpoint(state))
    report = evaluate(model, dataset, build_metric_net(args.lpips_net), Path(args.checkpoint).stem)
    txt, csv_path = report.write(args.out_report)
    print(report.table())
    print(f"wrote {txt} and {csv_path}")
    return 0


def parse_landmarks(value: str) -> LandmarkSet:
    """Inline ``x1,y1,...,x5,y5`` or a file whose first record holds 10 numbers (optionally after an id)."""
    path = Path(value)
    if path.exists():
        toks = path.read_text().replace(",", " ").split()
        nums = [t for t in toks if _is_float(t)]
        return LandmarkSet.from_flat(nums[-10:] if len(nums) >= 10 else nums)
    return LandmarkSet.from_flat(value.replace(",", " ").split())


def _is_float(tok):
    try:
        float(tok)
    except ValueError:
        return False
    return True


def cmd_infer(args) -> int:
    from .train import load_model, read_checkpoint

    state = read_checkpoint(args.checkpoint)
    model = load_model(args.checkpoint)
    hm = _heatmap_from_checkpoint(state)
    lr = load_image(args.image)
    lms = parse_landmarks(args.landmarks)
    maps = render_heatmaps(lms, lr.shape[-2], lr.shape[-1], hm.sigma, hm.truncation_radius_sigmas)
    x = build_model_input(lr, maps, model.config.scale)
    with torch.no_grad():
        sr = model(x).clamp(0, 1)
    save_image(sr, args.out)
    print(f"wrote {args.out} ({sr.shape[-1]}x{sr.shape[-2]})")
    return 0


def cmd_benchmark(args) -> int:
    from .train import PairedDataset, benchmark, read_checkpoint

    state = read_checkpoint(args.checkpoints[0])
    dataset = PairedDataset.from_manifest(args.manifest, _heatmap_from_checkpoint(state))
    rows = benchmark(args.checkpoints, dataset, args.out, build_metric_net(args.lpips_net), repeats=args.repeats)
    for r in rows:
        print(f"{r.model_name:<24} {r.psnr:8.3f} dB {r.seconds * 1e3:10.3f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swinifs", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="crop faces, synthesize LR inputs, write manifests")
    s.add_argument("--images", required=True, help="directory of source images")
    s.add_argument("--landmarks", required=True, help="CelebA-style landmark list")
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, nargs="+", choices=(4, 8), default=[4])
    s.add_argument("--margin", type=float, default=0.5, help="box expansion per side, fraction of box size")
    s.add_argument("--split-file", help="optional partition list (name 0|1|2)")
    s.add_argument("--split", choices=tuple(SPLITS), default="test")
    s.add_argument("--limit", type=int, default=0, help="only the first N annotations")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a prepared manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-report", required=True, help="report path stem; .txt and .csv are written")
    s.add_argument("--lpips-net", default="alexnet", choices=("alexnet", "random_test"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="super-resolve one LR face")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True, help="LR input image")
    s.add_argument("--landmarks", required=True, help="LR-frame landmarks: file or 'x1,y1,...,x5,y5'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("benchmark", help="PSNR vs. inference time table and plot")
    s.add_argument("--checkpoints", nargs="+", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--lpips-net", default="alexnet", choices=("alexnet", "random_test"))
    s.add_argument("--repeats", type=int, default=20)
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
