"""Baseline and feature-aligned diffusion training."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import rng
from .alignment import AlignmentHead, LossBreakdown, combined_loss, noise_loss
from .checkpoint import Checkpoint, CheckpointError
from .data import ImageDataset
from .expert import Expert
from .fileio import atomic_write_text
from .schedule import NoiseSchedule, add_noise, build_linear_schedule
from .unet import UNet, UNetConfig

log = logging.getLogger(__name__)

MODES = ("baseline", "aligned")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-4
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mode: str = "baseline"
    align_target: str = "noisy"
    w1: float = 1.0
    w2: float = 1.0
    master_seed: int = 0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.align_target not in ("noisy", "clean"):
            raise TrainingError(f"align_target must be noisy|clean, got {self.align_target!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("batch_size and epochs must be >= 1")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# Reference fine-tuning regime: 64 px images, batch 4, 1000 timesteps, lr 1e-4, 20 epochs,
# starting from a pretrained model. Kept for reference runs.
REFERENCE_PROFILE = dict(epochs=20, batch_size=4, learning_rate=1e-4, T=1000)


@dataclass
class StepDraws:
    t: torch.Tensor
    eps: torch.Tensor


class Streams:
    """The per-run random streams used by the training loop."""

    def __init__(self, master_seed: int):
        self.timestep = rng.generator(master_seed, "timestep")
        self.noise = rng.generator(master_seed, "noise")
        self.shuffle = rng.generator(master_seed, "shuffle")

    def draw(self, x0: torch.Tensor, T: int) -> StepDraws:
        t = torch.randint(0, T, (x0.shape[0],), generator=self.timestep)
        eps = torch.randn(x0.shape, generator=self.noise, dtype=x0.dtype)
        return StepDraws(t, eps)


def compute_losses(unet: UNet, x0: torch.Tensor, class_id: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor, schedule: NoiseSchedule,
                   head: Optional[AlignmentHead] = None, expert: Optional[Expert] = None,
                   w1: float = 1.0) -> LossBreakdown:
    """Loss terms for fixed (t, eps). ``head is None`` means baseline."""
    x_t = add_noise(x0, eps, t, schedule).x_t
    out = unet(x_t, t, class_id)
    l_noise = noise_loss(eps, out.eps_pred)
    if head is None:
        l_align = torch.zeros((), dtype=l_noise.dtype)
        return LossBreakdown(l_noise, l_align, w1 * l_noise)
    if expert is None:
        raise TrainingError("aligned mode needs an expert")
    target_input = x_t if head.target_mode == "noisy" else x0
    with torch.no_grad():
        expert_pooled = expert(target_input.to(next(expert.parameters()).dtype)).pooled
    l_align = head(expert_pooled.to(out.bottleneck.dtype), out.bottleneck)
    return LossBreakdown(l_noise, l_align, combined_loss(l_noise, l_align, head.w1, head.w2))


def training_step(unet: UNet, x0: torch.Tensor, class_id: torch.Tensor, schedule: NoiseSchedule,
                  streams: Streams, head: Optional[AlignmentHead] = None,
                  expert: Optional[Expert] = None, w1: float = 1.0) -> Tuple[LossBreakdown, StepDraws]:
    """Draw (t, eps), compute the losses and backpropagate into U-Net and W_p."""
    draws = streams.draw(x0, schedule.T)
    losses = compute_losses(unet, x0, class_id, draws.t, draws.eps, schedule, head, expert, w1)
    losses.l_total.backward()
    return losses, draws


@dataclass
class TrainingArtifacts:
    checkpoint: Checkpoint
    losses: List[Dict[str, float]] = field(default_factory=list)
    timesteps: List[int] = field(default_factory=list)

    def losses_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "epoch", "l_noise", "l_align", "l_total"])
        for row in self.losses:
            writer.writerow([row["step"], row["epoch"], repr(row["l_noise"]),
                             "" if row["l_align"] is None else repr(row["l_align"]),
                             repr(row["l_total"])])
        return buf.getvalue()

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        ckpt_path = out_dir / "diffusion.ckpt"
        loss_path = out_dir / "losses.csv"
        self.checkpoint.save(ckpt_path)
        atomic_write_text(loss_path, self.losses_csv())
        return ckpt_path, loss_path

    def epoch_means(self, key: str) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for row in self.losses:
            by_epoch.setdefault(row["epoch"], []).append(row[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def schedule_meta(s: NoiseSchedule, T: int, beta_start: float, beta_end: float) -> dict:
    return {"T": T, "beta_start": beta_start, "beta_end": beta_end,
            "beta": s.beta.tolist(), "alpha_bar": s.alpha_bar.tolist()}


def schedule_from_meta(meta: dict) -> NoiseSchedule:
    beta = np.asarray(meta["beta"], dtype=np.float64)
    alpha_bar = np.asarray(meta["alpha_bar"], dtype=np.float64)
    if beta.shape != (meta["T"],) or alpha_bar.shape != (meta["T"],):
        raise CheckpointError("schedule arrays do not match T")
    return NoiseSchedule(beta=beta, alpha=1.0 - beta, alpha_bar=alpha_bar,
                         timesteps=np.arange(meta["T"], dtype=np.int64))


def build_unet(config: UNetConfig, master_seed: int) -> UNet:
    unet = UNet(config)
    unet.reset_parameters(rng.generator(master_seed, "init"))
    return unet


def train_diffusion(dataset: ImageDataset, config: TrainConfig,
                    unet_config: Optional[UNetConfig] = None,
                    expert: Optional[Expert] = None,
                    progress: bool = False) -> TrainingArtifacts:
    unet_config = unet_config or UNetConfig(num_classes=dataset.num_classes,
                                            image_size=dataset.image_size)
    if unet_config.num_classes != dataset.num_classes:
        raise TrainingError(
            f"dataset has {dataset.num_classes} classes, U-Net config {unet_config.num_classes}")
    if unet_config.image_size != dataset.image_size:
        raise TrainingError(
            f"dataset images are {dataset.image_size} px, U-Net config {unet_config.image_size}")
    if config.mode == "aligned":
        if expert is None:
            raise TrainingError("aligned mode requires an expert checkpoint")
        if expert.config.num_classes != dataset.num_classes:
            raise TrainingError("expert and dataset class counts differ")

    torch.use_deterministic_algorithms(True)
    schedule = build_linear_schedule(config.T, config.beta_start, config.beta_end)
    unet = build_unet(unet_config, config.master_seed)
    params = list(unet.parameters())
    head = None
    if config.mode == "aligned":
        head = AlignmentHead(expert.config.feature_dim, unet_config.feature_dim,
                             config.w1, config.w2, config.align_target)
        head.reset_parameters(rng.generator(config.master_seed, "align_init"))
        params += list(head.parameters())
        expert.eval()
        for p in expert.parameters():
            p.requires_grad_(False)
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas,
                           eps=config.adam_eps, weight_decay=config.weight_decay,
                           foreach=False)

    train = dataset.subset("train")
    x_all = torch.from_numpy(np.ascontiguousarray(train.images, dtype=np.float32))
    y_all = torch.from_numpy(train.labels)
    streams = Streams(config.master_seed)
    losses: List[Dict[str, float]] = []
    timesteps: List[int] = []
    step = 0
    unet.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(train), generator=streams.shuffle)
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad(set_to_none=True)
            lb, draws = training_step(unet, x_all[idx], y_all[idx], schedule, streams,
                                      head, expert, config.w1)
            values = [float(v.detach()) for v in lb]
            if not all(math.isfinite(v) for v in values):
                raise TrainingError(f"non-finite loss at step {step}: {values}")
            opt.step()
            losses.append({"step": step, "epoch": epoch, "l_noise": values[0],
                           "l_align": values[1] if head is not None else None,
                           "l_total": values[2]})
            timesteps.extend(draws.t.tolist())
            step += 1
        if progress:
            last = [r for r in losses if r["epoch"] == epoch]
            log.info("epoch %d  l_noise %.4f  l_total %.4f", epoch,
                     np.mean([r["l_noise"] for r in last]), np.mean([r["l_total"] for r in last]))
    unet.eval()

    ckpt = Checkpoint(kind="diffusion")
    ckpt.add_module(unet, "unet.")
    if head is not None:
        ckpt.add_module(head, "align.")
    t_bytes = np.asarray(timesteps, dtype="<i8").tobytes()
    ckpt.meta = {
        "unet_config": unet_config.to_dict(),
        "train_config": config.to_dict(),
        "schedule": schedule_meta(schedule, config.T, config.beta_start, config.beta_end),
        "class_names": list(dataset.class_names),
        "steps": step,
        "timestep_sha256": hashlib.sha256(t_bytes).hexdigest(),
    }
    return TrainingArtifacts(ckpt, losses, timesteps)


def load_diffusion(ckpt: Checkpoint) -> Tuple[UNet, NoiseSchedule]:
    """Rebuild the U-Net and schedule. The projection head is never loaded."""
    if ckpt.kind != "diffusion":
        raise CheckpointError(f"expected a diffusion checkpoint, got {ckpt.kind!r}")
    try:
        config = UNetConfig(**ckpt.meta["unet_config"])
        schedule = schedule_from_meta(ckpt.meta["schedule"])
        unet = UNet(config)
        unet.load_state_dict(ckpt.module_state("unet."))
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt diffusion checkpoint: {exc}") from exc
    unet.eval()
    return unet, schedule
