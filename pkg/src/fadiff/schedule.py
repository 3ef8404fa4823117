"""Variance schedule, forward noising and the ancestral reverse step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta, alpha = 1 - beta and cumulative alpha_bar (float64).

    ``timesteps`` maps each schedule index to the timestep the denoiser is
    conditioned on. It is the identity for a freshly built schedule and a
    strided subset for a respaced one.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    @classmethod
    def from_alpha_bar(cls, alpha_bar: Sequence[float],
                       timesteps: Optional[Sequence[int]] = None) -> "NoiseSchedule":
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.ndim != 1 or alpha_bar.size == 0:
            raise ScheduleError("alpha_bar must be a non-empty 1-d array")
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        alpha = alpha_bar / prev
        beta = 1.0 - alpha
        if timesteps is None:
            timesteps = np.arange(alpha_bar.size)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                   timesteps=np.asarray(timesteps, dtype=np.int64))

    def respace(self, num_steps: int) -> "NoiseSchedule":
        """Subsample ``num_steps`` timesteps with a uniform stride.

        The retained indices always include 0 and T - 1. Betas of the
        respaced schedule are recomputed from the retained alpha_bar values,
        so the reverse chain stays a valid ancestral chain.
        """
        if not 1 <= num_steps <= self.T:
            raise ScheduleError(f"num_steps must be in [1, {self.T}], got {num_steps}")
        if num_steps == self.T:
            return self
        if num_steps == 1:
            keep = np.array([self.T - 1])
        else:
            keep = np.unique(np.round(np.linspace(0, self.T - 1, num_steps)).astype(np.int64))
        return NoiseSchedule.from_alpha_bar(self.alpha_bar[keep], self.timesteps[keep])


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be an integer >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         timesteps=np.arange(int(T), dtype=np.int64))


@dataclass
class NoisySample:
    x_t: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor


def _check_t(t: torch.Tensor, T: int) -> None:
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= T):
        raise ScheduleError(f"timestep out of range [0, {T}): {t.tolist()}")


def _broadcast(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample coefficients and reshape them to broadcast over ``like``."""
    coeff = torch.as_tensor(values, dtype=torch.float64)[t.to(torch.int64)]
    coeff = coeff.to(like.dtype)
    if coeff.ndim == 0:
        return coeff
    return coeff.reshape(coeff.shape + (1,) * (like.ndim - coeff.ndim))


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> NoisySample:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` is a scalar or a per-sample (B,) tensor indexing the leading dim.
    """
    if x0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.int64)
    _check_t(t, s.T)
    signal = _broadcast(np.sqrt(s.alpha_bar), t, x0)
    noise = _broadcast(np.sqrt(1.0 - s.alpha_bar), t, x0)
    return NoisySample(x_t=signal * x0 + noise * eps, eps=eps, t=t)


def ddpm_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, s: NoiseSchedule,
              z: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral update x_t -> x_{t-1} with sigma_t^2 = beta_t.

    ``t`` is an index into ``s`` (shared by the whole batch). At t == 0 the
    posterior mean is returned and ``z`` is ignored.
    """
    t = int(t)
    if not 0 <= t < s.T:
        raise ScheduleError(f"timestep out of range [0, {s.T}): {t}")
    if x_t.shape != eps_pred.shape:
        raise ScheduleError(
            f"shape mismatch: x_t {tuple(x_t.shape)} vs eps_pred {tuple(eps_pred.shape)}")
    beta = float(s.beta[t])
    coef = float(beta / np.sqrt(1.0 - s.alpha_bar[t]))
    mean = (x_t - coef * eps_pred) / float(np.sqrt(s.alpha[t]))
    if t == 0:
        return mean
    if z is None:
        raise ScheduleError(f"noise z is required at t={t} > 0")
    if z.shape != x_t.shape:
        raise ScheduleError(f"shape mismatch: z {tuple(z.shape)} vs x_t {tuple(x_t.shape)}")
    return mean + float(np.sqrt(beta)) * z
