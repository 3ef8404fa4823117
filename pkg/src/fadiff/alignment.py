"""Projection head, cosine alignment loss and the weighted training objective."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn

COSINE_EPS = 1e-8
TARGET_MODES = ("noisy", "clean")


class AlignmentError(ValueError):
    pass


class LossBreakdown(NamedTuple):
    l_noise: torch.Tensor
    l_align: torch.Tensor
    l_total: torch.Tensor


def pool_bottleneck(bottleneck: torch.Tensor) -> torch.Tensor:
    """Global spatial mean: (B, E, H, W) -> (B, E)."""
    if bottleneck.ndim != 4 or bottleneck.shape[-1] < 1 or bottleneck.shape[-2] < 1:
        raise AlignmentError(f"expected (B, E, H, W) with H, W > 0, got {tuple(bottleneck.shape)}")
    return bottleneck.mean(dim=(2, 3))


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """a.b / (max(|a|, eps) * max(|b|, eps)) along the last dim."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise AlignmentError(f"dim mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = torch.linalg.vector_norm(a, dim=-1).clamp_min(eps)
    nb = torch.linalg.vector_norm(b, dim=-1).clamp_min(eps)
    return (a * b).sum(dim=-1) / (na * nb)


def alignment_loss(expert_pooled: torch.Tensor, bottleneck_pooled: torch.Tensor,
                   w_p: torch.Tensor) -> torch.Tensor:
    """-mean_b cos(expert_pooled[b] @ W_p, bottleneck_pooled[b]).

    ``w_p`` is (E_e, E_d). The expert side is detached: gradients reach only
    the projection and the diffusion features.
    """
    if expert_pooled.ndim != 2 or bottleneck_pooled.ndim != 2:
        raise AlignmentError("pooled features must be (B, E)")
    if expert_pooled.shape[0] != bottleneck_pooled.shape[0]:
        raise AlignmentError(
            f"batch mismatch: {expert_pooled.shape[0]} vs {bottleneck_pooled.shape[0]}")
    if w_p.shape != (expert_pooled.shape[1], bottleneck_pooled.shape[1]):
        raise AlignmentError(
            f"W_p is {tuple(w_p.shape)}, features need "
            f"({expert_pooled.shape[1]}, {bottleneck_pooled.shape[1]})")
    projected = expert_pooled.detach() @ w_p
    return -cosine_similarity(projected, bottleneck_pooled).mean()


def noise_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element of the batch."""
    if eps.shape != eps_pred.shape:
        raise AlignmentError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return (eps - eps_pred).pow(2).mean()


def combined_loss(l_noise, l_align, w1: float, w2: float):
    return w1 * l_noise + w2 * l_align


class AlignmentHead(nn.Module):
    """Trainable projection W_p (E_e x E_d) and the loss weights."""

    def __init__(self, expert_dim: int, feature_dim: int, w1: float = 1.0, w2: float = 1.0,
                 target_mode: str = "noisy"):
        super().__init__()
        for name, w in (("w1", w1), ("w2", w2)):
            if not math.isfinite(w) or w < 0:
                raise AlignmentError(f"{name} must be finite and >= 0, got {w}")
        if target_mode not in TARGET_MODES:
            raise AlignmentError(f"target_mode must be one of {TARGET_MODES}, got {target_mode!r}")
        self.w1 = float(w1)
        self.w2 = float(w2)
        self.target_mode = target_mode
        self.w_p = nn.Parameter(torch.empty(expert_dim, feature_dim))

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        self.w_p.normal_(0.0, 1.0 / math.sqrt(self.w_p.shape[0]), generator=generator)

    def forward(self, expert_pooled: torch.Tensor, bottleneck: torch.Tensor) -> torch.Tensor:
        return alignment_loss(expert_pooled, pool_bottleneck(bottleneck), self.w_p)
