"""Training loop, checkpoints, batched prediction and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data import DatasetManifest, Sample, augment, load_dataset
from .errors import CheckpointVersionError, ConfigError, DatasetError, NumericFailure
from .losses import total_loss
from .metrics import EvalReport, evaluate_sample
from .model import DiffAttn
from .saliency import multiscale_targets
from .schedule import make_schedule, plan_steps

log = logging.getLogger(__name__)

CKPT_FORMAT = "diffattn-checkpoint"
CKPT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


DEVICE_ENV = "DIFFATTN_DEVICE"


def resolve_device(name: str | None = None) -> torch.device:
    """Compute device from ``name`` or the DIFFATTN_DEVICE variable (default cpu)."""
    name = name or os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"bad device {name!r}: {exc}") from None
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"device {name!r} requested but CUDA is not available")
    if dev.type == "mps" and not torch.backends.mps.is_available():
        raise ConfigError(f"device {name!r} requested but MPS is not available")
    return dev


def determinism_flags(device=None) -> dict:
    return {
        "torch_version": torch.__version__,
        "deterministic_algorithms": torch.are_deterministic_algorithms_enabled(),
        "cudnn_deterministic": bool(torch.backends.cudnn.deterministic),
        "num_threads": torch.get_num_threads(),
        "device": str(device or "cpu"),
    }


def build_model(cfg: ExperimentConfig, device=None) -> DiffAttn:
    """Construct the network; parameters depend only on ``cfg.run.seed``."""
    torch.manual_seed(cfg.run.seed)
    model = DiffAttn(cfg.model)
    return model.to(dtype=DTYPES[cfg.run.dtype], device=device or "cpu")


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(cfg: ExperimentConfig, model):
    o = cfg.optim
    params = trainable_parameters(model)
    if o.kind == "adamw":
        return torch.optim.AdamW(params, lr=o.lr, weight_decay=o.weight_decay)
    if o.kind == "adam":
        return torch.optim.Adam(params, lr=o.lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=o.lr, weight_decay=o.weight_decay)


def make_lr_scheduler(cfg: ExperimentConfig, optimizer):
    o = cfg.optim
    if o.lr_schedule == "constant":
        factor = lambda step: 1.0  # noqa: E731
    else:
        total = max(1, o.max_steps)
        factor = lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))  # noqa: E731
    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def collate(samples: list[Sample], dtype=torch.float32):
    """Stack images, full-resolution GT and the four per-scale GT maps."""
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    per_scale = [multiscale_targets(s.gt) for s in samples]
    gt_scales = [
        torch.from_numpy(np.stack([ps[k].grid for ps in per_scale])[:, None]).to(dtype) for k in range(4)
    ]
    return images, gt_scales[0], gt_scales


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model, optimizer, step: int, cfg: ExperimentConfig, rng_state: dict | None = None,
                    lr_scheduler=None):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericFailure(f"refusing to checkpoint non-finite parameter {name} at step {step}")
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "step": step,
        "config": cfg.to_ini(),
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "lr_scheduler": None if lr_scheduler is None else lr_scheduler.state_dict(),
        "rng": rng_state,
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise CheckpointVersionError(f"{path} is not a DiffAttn checkpoint")
    if payload.get("version") != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {payload.get('version')} != {CKPT_VERSION}")
    return payload


def load_model(path, cfg: ExperimentConfig | None = None, device=None):
    """Rebuild a model from a checkpoint; ``cfg`` defaults to the stored snapshot."""
    payload = read_checkpoint(path)
    stored = ExperimentConfig.from_ini(payload["config"])
    cfg = cfg or stored
    model = build_model(cfg, device)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as exc:
        raise CheckpointVersionError(f"checkpoint {path} incompatible with config: {exc}") from None
    model.eval()
    return model, cfg, payload


# --- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    losses: list[float]
    last_checkpoint: Path | None
    stopped_early: bool = False


class Trainer:
    def __init__(self, cfg: ExperimentConfig, samples: list[Sample] | None = None,
                 val_samples: list[Sample] | None = None, device=None):
        self.cfg = cfg
        self.dtype = DTYPES[cfg.run.dtype]
        self.device = torch.device(device or "cpu")
        if samples is None:
            samples = load_dataset(self._manifest(cfg.data.split))
            if cfg.data.val_split and val_samples is None:
                val_samples = load_dataset(self._manifest(cfg.data.val_split))
        if not samples:
            raise DatasetError("training split is empty")
        self.samples = samples
        self.val_samples = val_samples or []
        self.sched = make_schedule(cfg.diffusion.T_i, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
        self.plan = plan_steps(cfg.diffusion.T_i, cfg.diffusion.T_e)
        self.weights = cfg.loss.weights()
        self.model = build_model(cfg, self.device)
        self.optimizer = make_optimizer(cfg, self.model)
        self.lr_scheduler = make_lr_scheduler(cfg, self.optimizer)
        self.step = 0
        self.np_rng = np.random.default_rng(cfg.run.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.run.seed)
        self.order: list[int] = []
        self.out_dir = Path(cfg.run.out_dir)
        self.last_checkpoint: Path | None = None

    def _manifest(self, split):
        d = self.cfg.data
        return DatasetManifest(d.root, split, d.sigma or None, (d.height, d.width))

    # rng state travels with checkpoints so resumed runs replay exactly
    def rng_state(self) -> dict:
        return {"numpy": self.np_rng.bit_generator.state, "torch": self.torch_gen.get_state(),
                "order": list(self.order)}

    def set_rng_state(self, state: dict):
        self.np_rng.bit_generator.state = state["numpy"]
        self.torch_gen.set_state(state["torch"])
        self.order = list(state["order"])

    def resume(self, path):
        payload = read_checkpoint(path)
        self.model.load_state_dict(payload["model"])
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("lr_scheduler") is not None:
            self.lr_scheduler.load_state_dict(payload["lr_scheduler"])
        if payload["rng"] is not None:
            self.set_rng_state(payload["rng"])
        self.step = payload["step"]
        self.last_checkpoint = Path(path)

    def next_batch(self) -> list[Sample]:
        bs = min(self.cfg.optim.batch_size, len(self.samples))
        if len(self.order) < bs:
            self.order.extend(self.np_rng.permutation(len(self.samples)).tolist())
        idx, self.order = self.order[:bs], self.order[bs:]
        d = self.cfg.data
        return [augment(self.samples[i], self.np_rng, d.flip_prob, d.jitter) for i in idx]

    def compute_loss(self, batch: list[Sample]):
        images, gt_full, gt_scales = collate(batch, self.dtype)
        images, gt_full = images.to(self.device), gt_full.to(self.device)
        gt_scales = [g.to(self.device) for g in gt_scales]
        out = self.model.forward_train(images, gt_scales, self.sched, self.torch_gen, self.plan)
        terms = self.model.loss_terms(out, gt_full)
        return total_loss(terms, self.weights), terms

    def train_step(self) -> float:
        self.model.train()
        loss, _ = self.compute_loss(self.next_batch())
        if not torch.isfinite(loss):
            raise NumericFailure(
                f"non-finite loss at step {self.step}; last checkpoint: {self.last_checkpoint}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.lr_scheduler.step()
        self.step += 1
        return float(loss.detach())

    def checkpoint(self, name: str | None = None) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / (name or f"ckpt_{self.step:07d}.pt")
        self.last_checkpoint = save_checkpoint(path, self.model, self.optimizer, self.step, self.cfg,
                                               self.rng_state(), self.lr_scheduler)
        return self.last_checkpoint

    def fit(self, steps: int | None = None, log_path=None, write_checkpoints: bool = True) -> TrainResult:
        o = self.cfg.optim
        target = self.step + (steps if steps is not None else o.max_steps - self.step)
        losses = []
        best, bad, stopped = math.inf, 0, False
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh)
            if fh.tell() == 0:
                writer.writerow(["step", "loss"])
        try:
            while self.step < target:
                loss = self.train_step()
                losses.append(loss)
                if writer is not None:
                    writer.writerow([self.step, f"{loss:.8g}"])
                if o.log_every and self.step % o.log_every == 0:
                    log.info("step %d loss %.5f", self.step, loss)
                if write_checkpoints and o.checkpoint_every and self.step % o.checkpoint_every == 0:
                    self.checkpoint()
                if o.val_every and self.val_samples and self.step % o.val_every == 0:
                    kld = evaluate(self.model, self.val_samples, self.sched, self.plan,
                                   self.cfg.run.seed).aggregate()["kld"]
                    log.info("step %d val KLD %.4f", self.step, kld)
                    if kld < best - 1e-6:
                        best, bad = kld, 0
                        if write_checkpoints:
                            self.checkpoint("best.pt")
                    else:
                        bad += 1
                        if bad >= o.patience:
                            stopped = True
                            break
        finally:
            if fh is not None:
                fh.close()
        if write_checkpoints:
            self.checkpoint("last.pt")
        return TrainResult(self.step, losses, self.last_checkpoint, stopped)


# --- inference -----------------------------------------------------------------

def predict(model: DiffAttn, images, sched, plan, seed: int = 0, batch_size: int = 8, callback=None):
    """Input-resolution saliency maps (N, H, W) as float64 numpy."""
    model.eval()
    first = next(model.parameters())
    dtype, device = first.dtype, first.device
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    outs = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size].to(device=device, dtype=dtype)
        outs.append(model.sample(chunk, sched, plan, seed, callback)[0][:, 0].double().cpu().numpy())
    return np.concatenate(outs)


def evaluate(model: DiffAttn, samples: list[Sample], sched, plan, seed: int = 0) -> EvalReport:
    preds = predict(model, np.stack([s.image for s in samples]), sched, plan, seed)
    report = EvalReport()
    for s, p in zip(samples, preds):
        report.add(s.id, evaluate_sample(p, s.gt, s.fixation_map))
    return report
