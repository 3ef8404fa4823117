"""Class-conditioned ancestral sampling with per-image noise streams."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import rng
from .checkpoint import Checkpoint
from .data import from_uint8, read_png, to_uint8, write_png
from .fileio import write_json
from .schedule import NoiseSchedule, ddpm_step
from .trainer import load_diffusion
from .unet import UNet


class SamplingError(RuntimeError):
    pass


@dataclass
class GenerationRequest:
    class_id: int
    count: int = 10
    seed: int = 0
    num_steps: Optional[int] = None
    start_index: int = 0

    @property
    def indices(self) -> List[int]:
        return list(range(self.start_index, self.start_index + self.count))


class _ImageNoise:
    """Independent generators keyed by (seed, class_id, index)."""

    def __init__(self, seed: int, class_ids: Sequence[int], indices: Sequence[int],
                 shape: Tuple[int, ...]):
        self.shape = shape
        self.gens = [rng.generator(seed, "sampler", c, i) for c, i in zip(class_ids, indices)]

    def draw(self) -> torch.Tensor:
        return torch.stack([torch.randn(self.shape, generator=g) for g in self.gens])


def initial_noise(seed: int, class_ids: Sequence[int], indices: Sequence[int],
                  shape: Tuple[int, ...]) -> torch.Tensor:
    """x_T for each image; depends only on (seed, class_id, index) and shape."""
    return _ImageNoise(seed, class_ids, indices, shape).draw()


@torch.no_grad()
def sample(unet: UNet, schedule: NoiseSchedule, class_ids: Sequence[int], seed: int,
           indices: Sequence[int], num_steps: Optional[int] = None,
           batch_size: int = 128) -> torch.Tensor:
    """Run the reverse chain for a batch of (class_id, index) pairs.

    Returns images clamped to [-1, 1]. Non-finite values before clamping
    raise instead of being silently clipped.
    """
    cfg = unet.config
    class_ids = [int(c) for c in class_ids]
    indices = [int(i) for i in indices]
    if len(class_ids) != len(indices):
        raise SamplingError("class_ids and indices differ in length")
    bad = [c for c in class_ids if not 0 <= c < cfg.num_classes]
    if bad:
        raise SamplingError(f"class id out of range [0, {cfg.num_classes}): {bad}")
    steps = schedule.respace(num_steps or schedule.T)
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)

    outputs = []
    for lo in range(0, len(class_ids), batch_size):
        cids = class_ids[lo:lo + batch_size]
        noise = _ImageNoise(seed, cids, indices[lo:lo + batch_size], shape)
        x = noise.draw()
        labels = torch.tensor(cids, dtype=torch.int64)
        for i in reversed(range(steps.T)):
            t = torch.full((len(cids),), int(steps.timesteps[i]), dtype=torch.int64)
            eps_pred = unet(x, t, labels).eps_pred
            z = noise.draw() if i > 0 else None
            x = ddpm_step(x, eps_pred, i, steps, z)
        if not torch.isfinite(x).all():
            raise SamplingError("sampler produced non-finite values")
        outputs.append(x.clamp(-1.0, 1.0))
    return torch.cat(outputs) if outputs else torch.empty((0,) + shape)


def generate(checkpoint: Checkpoint, request: GenerationRequest) -> torch.Tensor:
    unet, schedule = load_diffusion(checkpoint)
    if request.count < 1:
        raise SamplingError("count must be >= 1")
    steps = request.num_steps or schedule.T
    if not 1 <= steps <= schedule.T:
        raise SamplingError(f"num_steps must be in [1, {schedule.T}], got {steps}")
    return sample(unet, schedule, [request.class_id] * request.count, request.seed,
                  request.indices, steps)


def image_filename(class_name: str, seed: int, index: int) -> str:
    return f"{class_name}_{seed}_{index}.png"


def write_generations(out_dir: Path, images: torch.Tensor, class_ids: Sequence[int],
                      seed: int, indices: Sequence[int], class_names: Sequence[str],
                      extra: Optional[dict] = None) -> Path:
    """Write PNGs and ``manifest.json``; merges with an existing manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    entries: Dict[str, dict] = {}
    if manifest_path.exists():
        for e in json.loads(manifest_path.read_text())["files"]:
            entries[e["file"]] = e
    for img, c, i in zip(images.numpy(), class_ids, indices):
        name = image_filename(class_names[c], seed, i)
        write_png(out_dir / name, img)
        entries[name] = {"file": name, "class_id": int(c), "class_name": class_names[c],
                         "seed": int(seed), "index": int(i)}
    manifest = {"class_names": list(class_names),
                "files": [entries[k] for k in sorted(entries)]}
    if extra:
        manifest.update(extra)
    write_json(manifest_path, manifest)
    return manifest_path


def read_generations(out_dir: Path) -> Tuple[np.ndarray, np.ndarray, List[dict], List[str]]:
    """Load images listed in ``manifest.json`` as (N, 1, H, W) in [-1, 1]."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    files = manifest["files"]
    images = np.stack([read_png(out_dir / e["file"]) for e in files])[:, None]
    labels = np.asarray([e["class_id"] for e in files], dtype=np.int64)
    return images, labels, files, manifest["class_names"]


def quantize(images: torch.Tensor) -> np.ndarray:
    """Round-trip through 8-bit so in-memory evaluation matches the PNG files."""
    return from_uint8(to_uint8(images.numpy()))
