"""Frozen expert classifier: pooled features for alignment, argmax for judging."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng
from .checkpoint import Checkpoint, CheckpointError
from .data import ImageDataset


class ExpertError(ValueError):
    pass


@dataclass
class ExpertConfig:
    in_channels: int = 1
    conv_channels: Tuple[int, ...] = (16, 32, 64)
    num_classes: int = 8
    image_size: int = 32

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.num_classes < 2:
            raise ExpertError("expert needs num_classes >= 2")

    @property
    def feature_dim(self) -> int:
        """E_e, the pooled feature width."""
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class ExpertTrainConfig:
    # Reference regime for large pretrained ImageNet experts: lr 1e-4, batch 64, 15 epochs,
    # weight decay 0.7 at 224 px; these are the desk-scale defaults.
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    weight_decay: float = 0.0


class ExpertOutput(NamedTuple):
    logits: torch.Tensor
    pooled: torch.Tensor


class Expert(nn.Module):
    """Stride-2 conv stack, global average pool, linear head."""

    def __init__(self, config: Optional[ExpertConfig] = None):
        super().__init__()
        self.config = config = config or ExpertConfig()
        layers = []
        prev = config.in_channels
        for ch in config.conv_channels:
            layers.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            prev = ch
        self.convs = nn.ModuleList(layers)
        self.head = nn.Linear(prev, config.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Last conv activation map, (B, E_e, H', W')."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ExpertError(
                f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
        return h

    def forward(self, x: torch.Tensor) -> ExpertOutput:
        pooled = self.features(x).mean(dim=(2, 3))
        return ExpertOutput(self.head(pooled), pooled)


def expert_forward(expert: Expert, images: torch.Tensor) -> ExpertOutput:
    return expert(images)


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties resolved to the lowest class index."""
    logits = torch.as_tensor(logits)
    is_max = logits == logits.max(dim=-1, keepdim=True).values
    idx = torch.arange(logits.shape[-1]).expand_as(logits)
    return torch.where(is_max, idx, logits.shape[-1]).min(dim=-1).values


@torch.no_grad()
def classify(expert: Expert, images, batch_size: int = 256) -> np.ndarray:
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if images.ndim == 3:
        images = images[None]
    out = [argmax_lowest(expert(images[i:i + batch_size]).logits)
           for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).numpy().astype(np.int64)


def build_expert(config: ExpertConfig, seed: int) -> Expert:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.stream_seed(seed, "expert_init"))
        return Expert(config)


@dataclass
class ExpertMetrics:
    train_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> float:
        return self.val_accuracy[-1] if self.val_accuracy else float("nan")


def train_expert(dataset: ImageDataset, config: ExpertConfig,
                 train_cfg: Optional[ExpertTrainConfig] = None,
                 seed: int = 0) -> Tuple[Expert, ExpertMetrics]:
    train_cfg = train_cfg or ExpertTrainConfig()
    train = dataset.subset("train")
    val = dataset.subset("val")
    if dataset.num_classes < 2:
        raise ExpertError("need at least 2 classes")
    if dataset.num_classes != config.num_classes:
        raise ExpertError(
            f"dataset has {dataset.num_classes} classes, expert config {config.num_classes}")
    counts = train.class_counts()
    if (counts == 0).any():
        missing = [dataset.class_names[i] for i in np.flatnonzero(counts == 0)]
        raise ExpertError(f"degenerate dataset: no training samples for {missing}")
    train_ids = set(train.files or [])
    if train_ids and train_ids & set(val.files or []):
        raise ExpertError("train and val splits overlap")

    model = build_expert(config, seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                           weight_decay=train_cfg.weight_decay)
    shuffle = rng.generator(seed, "expert_shuffle")
    x_all = torch.from_numpy(train.images)
    y_all = torch.from_numpy(train.labels)
    metrics = ExpertMetrics()
    for _ in range(train_cfg.epochs):
        model.train()
        order = torch.randperm(len(train), generator=shuffle)
        total, seen = 0.0, 0
        for i in range(0, len(order), train_cfg.batch_size):
            idx = order[i:i + train_cfg.batch_size]
            logits = model(x_all[idx]).logits
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        metrics.train_loss.append(total / seen)
        model.eval()
        pred = classify(model, val.images)
        metrics.val_accuracy.append(float((pred == val.labels).mean()) if len(val) else float("nan"))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, metrics


def expert_checkpoint(expert: Expert, class_names: Sequence[str],
                      train_cfg: Optional[ExpertTrainConfig] = None,
                      metrics: Optional[ExpertMetrics] = None) -> Checkpoint:
    ckpt = Checkpoint(kind="expert")
    ckpt.add_module(expert)
    ckpt.meta = {
        "expert_config": expert.config.to_dict(),
        "class_names": list(class_names),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "metrics": asdict(metrics) if metrics else None,
    }
    return ckpt


def load_expert(ckpt: Checkpoint) -> Expert:
    if ckpt.kind != "expert":
        raise CheckpointError(f"expected an expert checkpoint, got {ckpt.kind!r}")
    try:
        expert = Expert(ExpertConfig(**ckpt.meta["expert_config"]))
        expert.load_state_dict(ckpt.module_state())
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt expert checkpoint: {exc}") from exc
    expert.eval()
    for p in expert.parameters():
        p.requires_grad_(False)
    return expert
