"""Deterministic training, checkpointing, evaluation and benchmarking."""
from __future__ import annotations

import copy
import csv
import logging
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ExperimentConfig, TrainConfig, resolve_seed
from .data import (
    DegradationSpec,
    ImageRecord,
    LandmarkSet,
    ManifestEntry,
    bicubic_resample,
    degrade,
    load_image,
    read_manifest,
    sample_seed,
)
from .heatmaps import HeatmapConfig, build_model_input, render_heatmaps
from .losses import FeatureExtractor, build_extractor, total_loss
from .metrics import (
    METRIC_CONVENTIONS,
    EvalReport,
    ImageScores,
    PerceptualDistance,
    build_metric_net,
    perceptual_distance,
    psnr,
    ssim_y,
    timed_inference,
)
from .model import ModelConfig, SwinIFS

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "swinifs-checkpoint-v1"
SAMPLER_STREAM = 1 << 30
LOG_COLUMNS = ("iter", "l1", "perc", "total", "lr", "wall_time")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_checkpoint: Path | None):
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        super().__init__(f"non-finite loss at iteration {iteration}; last good checkpoint: {last_checkpoint}")


class ConfigMismatch(ValueError):
    pass


DTYPES = {"float32": torch.float32, "float64": torch.float64}


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch from one root seed and force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Learning rate used for (1-based) ``iteration``: decayed once per milestone already completed."""
    passed = sum(1 for m in cfg.milestones if iteration > m)
    return cfg.lr * cfg.lr_decay ** passed


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> SwinIFS:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SwinIFS(cfg)
    return model.to(dtype)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class Sample:
    image_id: str
    hr: torch.Tensor
    lr: torch.Tensor
    landmarks_lr: LandmarkSet


class PairedDataset:
    """In-memory HR/LR pairs with heatmaps rendered once per sample.

    With a ``degradation`` spec and ``records`` the LR side is synthesized
    on the fly, using a per-sample seed derived from ``root_seed``.
    """

    def __init__(self, samples: Sequence[Sample], heatmap: HeatmapConfig | None = None, scale: int = 4):
        if not samples:
            raise ValueError("dataset is empty")
        self.samples = list(samples)
        self.heatmap = heatmap or HeatmapConfig()
        self.scale = scale
        self._inputs: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.samples)

    @classmethod
    def from_manifest(cls, path, heatmap: HeatmapConfig | None = None) -> "PairedDataset":
        entries = read_manifest(path)
        if not entries:
            raise ValueError(f"manifest {path} is empty")
        return cls.from_entries(entries, heatmap)

    @classmethod
    def from_entries(cls, entries: Sequence[ManifestEntry], heatmap=None) -> "PairedDataset":
        scales = {e.scale for e in entries}
        if len(scales) != 1:
            raise ValueError(f"manifest mixes scales {sorted(scales)}")
        samples = [Sample(e.image_id, load_image(e.hr_path), load_image(e.lr_path), e.landmarks_lr) for e in entries]
        return cls(samples, heatmap, scales.pop())

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], spec: DegradationSpec, root_seed: int = 0,
                     heatmap=None) -> "PairedDataset":
        samples = []
        for i, rec in enumerate(records):
            lr, lms = degrade(rec, spec, sample_seed(root_seed, i))
            samples.append(Sample(rec.image_id, rec.hr_image, lr, lms))
        return cls(samples, heatmap, spec.scale)

    def model_input(self, index: int) -> torch.Tensor:
        if index not in self._inputs:
            s = self.samples[index]
            h, w = s.lr.shape[-2:]
            maps = render_heatmaps(s.landmarks_lr, h, w, self.heatmap.sigma, self.heatmap.truncation_radius_sigmas)
            self._inputs[index] = build_model_input(s.lr, maps, self.scale).tensor
        return self._inputs[index]

    def batch(self, indices, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.stack([self.model_input(i) for i in indices]).to(dtype)
        y = torch.stack([self.samples[i].hr for i in indices]).to(dtype)
        return x, y


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class Trainer:
    """Owns the model, the optimizer, and every piece of state a resume needs."""

    def __init__(self, config: ExperimentConfig, dataset: PairedDataset,
                 extractor: FeatureExtractor | None = None, out_dir=None):
        self.config = config
        self.dataset = dataset
        if dataset.scale != config.model.scale:
            raise ValueError(f"dataset is x{dataset.scale} but model is x{config.model.scale}")
        tc = config.train
        self.seed = resolve_seed(tc.seed)
        self.dtype = DTYPES[tc.dtype]
        seed_everything(self.seed)

        self.model = build_model(config.model, self.seed, self.dtype)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=tc.lr, betas=tc.betas)
        self.weights = config.loss.weights
        if extractor is None and self.weights.lambda_perc > 0:
            extractor = build_extractor(config.loss.extractor, config.loss.extractor_layers)
        self.extractor = extractor.to(self.dtype) if extractor is not None else None

        self.sampler = torch.Generator().manual_seed(sample_seed(self.seed, SAMPLER_STREAM))
        self.order = torch.empty(0, dtype=torch.long)
        self.cursor = 0
        self.iteration = 0
        self.history: list[dict] = []
        self.last_checkpoint: Path | None = None

        out = out_dir if out_dir is not None else tc.out_dir
        self.out_dir = Path(out) if out else None
        self._log_fh = None
        self._t0 = time.perf_counter()

    # batches ------------------------------------------------------------

    def next_indices(self) -> list[int]:
        """Epoch-wise permutation sampling; the order depends only on the root seed."""
        picked = []
        while len(picked) < self.config.train.batch_size:
            if self.cursor >= len(self.order):
                self.order = torch.randperm(len(self.dataset), generator=self.sampler)
                self.cursor = 0
            picked.append(int(self.order[self.cursor]))
            self.cursor += 1
        return picked

    # loop ---------------------------------------------------------------

    def step(self) -> dict:
        it = self.iteration + 1
        lr = lr_at(it, self.config.train)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self.model.train()
        x, y = self.dataset.batch(self.next_indices(), self.dtype)
        pred = self.model(x)
        loss, terms = total_loss(pred, y, self.extractor, self.weights)
        if not math.isfinite(terms["total"]):
            raise TrainingDiverged(it, self.last_checkpoint)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        self.iteration = it
        row = {"iter": it, "l1": terms["l1"], "perc": terms["perc"], "total": terms["total"], "lr": lr,
               "wall_time": time.perf_counter() - self._t0}
        self.history.append(row)
        self._append_log(row)
        return row

    def run(self, num_iters: int | None = None, eval_dataset: PairedDataset | None = None,
            callback: Callable[[dict], None] | None = None) -> list[Path]:
        """Train until ``max_iters`` (or ``num_iters`` more steps); returns checkpoints written."""
        tc = self.config.train
        stop = tc.max_iters if num_iters is None else self.iteration + num_iters
        written = []
        while self.iteration < stop:
            row = self.step()
            if callback is not None:
                callback(row)
            if self.out_dir and tc.checkpoint_every and self.iteration % tc.checkpoint_every == 0:
                written.append(self.save_checkpoint())
            if eval_dataset is not None and tc.eval_every and self.iteration % tc.eval_every == 0:
                report = evaluate(self.model, eval_dataset, self._metric_net())
                agg = report.aggregates
                log.info("iter %d eval psnr %.3f ssim %.4f", self.iteration, agg["psnr"], agg["ssim"])
        if self.out_dir and (not written or written[-1] != self.checkpoint_path()):
            written.append(self.save_checkpoint())
        self.close()
        return written

    def _metric_net(self):
        if not hasattr(self, "_mnet"):
            self._mnet = build_metric_net(self.config.metrics.lpips_net)
        return self._mnet

    def _append_log(self, row: dict) -> None:
        if self.out_dir is None:
            return
        if self._log_fh is None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "train_log.csv"
            fresh = not path.exists() or self.iteration <= 1
            self._log_fh = open(path, "w" if fresh else "a", newline="", encoding="utf-8")
            if fresh:
                csv.writer(self._log_fh).writerow(LOG_COLUMNS)
        csv.writer(self._log_fh).writerow([row[c] for c in LOG_COLUMNS])
        self._log_fh.flush()

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # checkpoints --------------------------------------------------------

    def checkpoint_path(self) -> Path:
        return self.out_dir / f"ckpt_{self.iteration:07d}.pt"

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "iteration": self.iteration,
            "seed": self.seed,
            "config": self.config.to_flat(),
            "model_config": self.config.model.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": {
                "torch": torch.get_rng_state(),
                "numpy": np.random.get_state(),
                "python": random.getstate(),
                "sampler": self.sampler.get_state(),
                "order": self.order.clone(),
                "cursor": self.cursor,
            },
        }

    def save_checkpoint(self, path=None) -> Path:
        path = Path(path) if path is not None else self.checkpoint_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        self.last_checkpoint = path
        return path

    def load_state(self, state: dict) -> None:
        check_model_config(state, self.config.model)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.iteration = int(state["iteration"])
        rng = state["rng"]
        torch.set_rng_state(rng["torch"])
        np.random.set_state(rng["numpy"])
        random.setstate(rng["python"])
        self.sampler.set_state(rng["sampler"])
        self.order = rng["order"].clone()
        self.cursor = int(rng["cursor"])

    @classmethod
    def resume(cls, path, dataset: PairedDataset, extractor=None, out_dir=None,
               config: ExperimentConfig | None = None) -> "Trainer":
        """Continue from ``path``; a supplied ``config`` may change the schedule but not the model."""
        state = read_checkpoint(path)
        cfg = copy.deepcopy(config) if config is not None else ExperimentConfig.from_flat(state["config"])
        cfg.train.seed = int(state["seed"])
        trainer = cls(cfg, dataset, extractor, out_dir)
        trainer.load_state(state)
        trainer.last_checkpoint = Path(path)
        return trainer


def read_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return state


def check_model_config(state: dict, expected: ModelConfig) -> None:
    stored = state["model_config"]
    if stored != expected.to_dict():
        diff = {k: (stored.get(k), v) for k, v in expected.to_dict().items() if stored.get(k) != v}
        raise ConfigMismatch(f"checkpoint model config differs (stored, expected): {diff}")


def load_model(path, expected: ModelConfig | None = None, dtype=torch.float32) -> SwinIFS:
    """Rebuild the network from a checkpoint; refuses a mismatching ``expected`` config."""
    state = read_checkpoint(path)
    cfg = ModelConfig(**state["model_config"])
    if expected is not None:
        check_model_config(state, expected)
    model = SwinIFS(cfg).to(dtype)
    model.load_state_dict(state["model"])
    return model.eval()


def train(train_manifest, config: ExperimentConfig, resume=None, test_manifest=None,
          extractor=None) -> list[Path]:
    """Train from a prepared manifest (or resume a checkpoint); returns written checkpoints."""
    dataset = PairedDataset.from_manifest(train_manifest, config.heatmap)
    if config.data.on_the_fly:
        records = [ImageRecord(s.image_id, s.hr, s.landmarks_lr.map(dataset.scale, dataset.scale))
                   for s in dataset.samples]
        spec = DegradationSpec(scale=dataset.scale, noise_sigma=config.data.noise_sigma)
        dataset = PairedDataset.from_records(records, spec, resolve_seed(config.train.seed), config.heatmap)
    eval_ds = PairedDataset.from_manifest(test_manifest, config.heatmap) if test_manifest else None
    if resume:
        trainer = Trainer.resume(resume, dataset, extractor, config.train.out_dir, config)
    else:
        trainer = Trainer(config, dataset, extractor)
        if trainer.out_dir:
            trainer.out_dir.mkdir(parents=True, exist_ok=True)
            config.save(trainer.out_dir / "config.yaml")
    return trainer.run(eval_dataset=eval_ds)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def bicubic_upsample(sample: Sample, scale: int) -> torch.Tensor:
    h, w = sample.lr.shape[-2:]
    return bicubic_resample(sample.lr.double(), scale * h, scale * w)


def evaluate(model: SwinIFS, dataset: PairedDataset, metric_net: PerceptualDistance | None = None,
             model_name: str = "SwinIFS") -> EvalReport:
    """Per-image PSNR/SSIM/perceptual distance for the model and the bicubic baseline."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("evaluation needs at least one test sample")
    metric_net = metric_net or build_metric_net("random_test")
    dtype = next(model.parameters()).dtype
    model.eval()
    rows = []
    with torch.no_grad():
        for i, s in enumerate(dataset.samples):
            x = dataset.model_input(i).unsqueeze(0).to(dtype)
            t0 = time.perf_counter()
            sr = model(x)[0]
            seconds = time.perf_counter() - t0
            sr = sr.double().clamp(0, 1)
            hr = s.hr.double()
            bic = bicubic_upsample(s, dataset.scale)
            rows.append(ImageScores(
                s.image_id,
                psnr(sr, hr), ssim_y(sr, hr), perceptual_distance(sr, hr, metric_net), seconds,
                psnr(bic, hr), ssim_y(bic, hr), perceptual_distance(bic, hr, metric_net),
            ))
    fingerprint = dict(METRIC_CONVENTIONS)
    fingerprint.update(perceptual_net=metric_net.identifier, model=str(model.config.to_dict()),
                       scale=dataset.scale, images=len(rows))
    return EvalReport(rows, dataset.scale, model_name, fingerprint)


@dataclass
class BenchmarkRow:
    model_name: str
    psnr: float
    seconds: float


def benchmark(checkpoints: Sequence, dataset: PairedDataset, out_dir, metric_net=None,
              repeats: int = 20) -> list[BenchmarkRow]:
    """PSNR vs. per-image inference time for each checkpoint plus the bicubic reference.

    Writes ``benchmark.csv`` and ``benchmark.png`` into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_net = metric_net or build_metric_net("random_test")
    rows = []
    probe = dataset.samples[0]

    bic_psnr = float(np.mean([psnr(bicubic_upsample(s, dataset.scale), s.hr) for s in dataset.samples]))
    _, bic_sec = timed_inference(lambda t: bicubic_resample(t, dataset.scale * t.shape[-2], dataset.scale * t.shape[-1]),
                                 probe.lr, repeats=repeats)
    rows.append(BenchmarkRow("Bicubic", bic_psnr, bic_sec))

    for ckpt in checkpoints:
        if isinstance(ckpt, SwinIFS):
            model, name = ckpt, "SwinIFS"
        else:
            model, name = load_model(ckpt), Path(ckpt).stem
        if model.config.scale != dataset.scale:
            raise ValueError(f"{name} is x{model.config.scale}, test set is x{dataset.scale}")
        report = evaluate(model, dataset, metric_net, name)
        x = dataset.model_input(0).unsqueeze(0).to(next(model.parameters()).dtype)
        _, sec = timed_inference(model, x, repeats=repeats)
        rows.append(BenchmarkRow(name, report.aggregates["psnr"], sec))

    with open(out_dir / "benchmark.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("model_name", "psnr", "seconds"))
        for r in rows:
            writer.writerow((r.model_name, f"{r.psnr:.6f}", f"{r.seconds:.6f}"))
    plot_benchmark(rows, out_dir / "benchmark.png", dataset.scale)
    return rows


def plot_benchmark(rows: Sequence[BenchmarkRow], path, scale: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for r in rows:
        ax.scatter(r.seconds, r.psnr, marker="s" if r.model_name == "Bicubic" else "o")
        ax.annotate(r.model_name, (r.seconds, r.psnr), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel("inference time per image (s)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"{scale}x face SR: PSNR vs. time")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

