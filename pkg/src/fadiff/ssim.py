"""Structural similarity on [0, 1] images with valid-window aggregation.

The compiled ``_ssim_core`` extension is used when it was built; otherwise
(or with ``FADIFF_PURE_PYTHON=1``) a vectorised NumPy path computes the same
quantities. Both evaluate pairs in lexicographic (i < j) order.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    if os.environ.get("FADIFF_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from . import _ssim_core
    BACKEND = "cython"
except ImportError:
    _ssim_core = None
    BACKEND = "numpy"


class SSIMError(ValueError):
    pass


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def kernel_1d(self) -> np.ndarray:
        x = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2.0
        g = np.exp(-(x ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()

    def kernel_2d(self) -> np.ndarray:
        g = self.kernel_1d()
        return np.outer(g, g)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_PARAMS = SSIMParams()


def _as_2d(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise SSIMError(f"expected a single-channel 2-d image, got shape {a.shape}")
    return a


def _check(a: np.ndarray, b: np.ndarray, params: SSIMParams) -> None:
    if a.shape != b.shape:
        raise SSIMError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < params.window:
        raise SSIMError(f"image {a.shape} smaller than the {params.window}x{params.window} window")


def _filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode filter over the last two axes."""
    k = g.shape[0]
    h = sliding_window_view(x, k, axis=-1) @ g
    return np.moveaxis(sliding_window_view(np.moveaxis(h, -2, -1), k, axis=-1) @ g, -1, -2)


def _ssim_from_stats(mu_a, mu_b, e_aa, e_bb, e_ab, c1, c2) -> np.ndarray:
    va = e_aa - mu_a * mu_a
    vb = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return (num / den).mean(axis=(-2, -1))


def ssim_numpy(a, b, params: SSIMParams = DEFAULT_PARAMS) -> float:
    a, b = _as_2d(a), _as_2d(b)
    _check(a, b, params)
    g = params.kernel_1d()
    return float(_ssim_from_stats(_filter(a, g), _filter(b, g), _filter(a * a, g),
                                  _filter(b * b, g), _filter(a * b, g), params.c1, params.c2))


def pairwise_ssim_numpy(stack, params: SSIMParams = DEFAULT_PARAMS) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 4 and stack.shape[1] == 1:
        stack = stack[:, 0]
    n = stack.shape[0]
    if n < 2:
        return np.empty(0)
    _check(stack[0], stack[0], params)
    g = params.kernel_1d()
    mu = _filter(stack, g)
    e2 = _filter(stack * stack, g)
    i, j = np.triu_indices(n, k=1)
    out = np.empty(i.size)
    chunk = 512
    for lo in range(0, i.size, chunk):
        ii, jj = i[lo:lo + chunk], j[lo:lo + chunk]
        e_ab = _filter(stack[ii] * stack[jj], g)
        out[lo:lo + chunk] = _ssim_from_stats(mu[ii], mu[jj], e2[ii], e2[jj], e_ab,
                                              params.c1, params.c2)
    return out


def ssim(a, b, params: SSIMParams = DEFAULT_PARAMS, backend: Optional[str] = None) -> float:
    """Mean SSIM over all valid window positions. Inputs are [0, 1] images."""
    backend = backend or BACKEND
    if backend == "cython":
        if _ssim_core is None:
            raise SSIMError("compiled SSIM core is not available")
        a, b = _as_2d(a), _as_2d(b)
        _check(a, b, params)
        return float(_ssim_core.ssim_pair(a, b, params.kernel_1d(), params.c1, params.c2))
    return ssim_numpy(a, b, params)


def pairwise_ssim(stack, params: SSIMParams = DEFAULT_PARAMS,
                  backend: Optional[str] = None) -> np.ndarray:
    """SSIM of every unordered pair (i < j) of an (n, H, W) or (n, 1, H, W) stack."""
    backend = backend or BACKEND
    if backend == "cython":
        if _ssim_core is None:
            raise SSIMError("compiled SSIM core is not available")
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim == 4 and stack.shape[1] == 1:
            stack = stack[:, 0]
        if stack.shape[0] < 2:
            return np.empty(0)
        _check(stack[0], stack[0], params)
        return _ssim_core.pairwise_ssim(stack, params.kernel_1d(), params.c1, params.c2)
    return pairwise_ssim_numpy(stack, params)


def to_unit_range(images) -> np.ndarray:
    """Diffusion space [-1, 1] -> [0, 1]."""
    return (np.asarray(images, dtype=np.float64) + 1.0) / 2.0
