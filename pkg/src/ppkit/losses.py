"""Training objectives.

Network tensors live in [-1, 1]; SSIM-type terms map them to [0, 1] first
and use a dynamic range of 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import autodiff as ad
from .core.autodiff import Tensor
from .core.layers import avg_pool2, gaussian_window, separable_filter

LOG_EPS = 1e-12
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.025
    beta: float = 5e-3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    scale_weights: tuple = MS_SSIM_WEIGHTS

    def __post_init__(self):
        if self.window_size % 2 == 0:
            raise ValueError("SSIM window size must be odd")


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr if arr.dtype.kind == "f" else arr.astype(np.float64))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(output, target) -> Tensor:
    """Mean absolute difference."""
    output, target = _t(output), _t(target)
    _same_shape(output, target, "l1_loss")
    return ad.mean(ad.absolute(output - target))


def _ssim_maps(a: Tensor, b: Tensor, params: SsimParams, taps: np.ndarray):
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_a = separable_filter(a, taps)
    mu_b = separable_filter(b, taps)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    s_aa = separable_filter(a * a, taps) - mu_aa
    s_bb = separable_filter(b * b, taps) - mu_bb
    s_ab = separable_filter(a * b, taps) - mu_ab
    luminance = (2.0 * mu_ab + c1) / (mu_aa + mu_bb + c1)
    contrast_structure = (2.0 * s_ab + c2) / (s_aa + s_bb + c2)
    return luminance, contrast_structure


def _check_window(a: Tensor, params: SsimParams) -> None:
    if a.ndim != 4:
        raise ValueError(f"SSIM expects (n, c, h, w) images, got {a.shape}")
    if min(a.shape[2:]) < params.window_size:
        raise ValueError(f"image {a.shape[2]}x{a.shape[3]} is smaller than the "
                         f"{params.window_size}x{params.window_size} SSIM window")


def ssim(a, b, params: SsimParams = SsimParams()) -> Tensor:
    """Mean local SSIM over a Gaussian window, averaged over all channels."""
    a, b = _t(a), _t(b)
    _same_shape(a, b, "ssim")
    _check_window(a, params)
    taps = gaussian_window(params.window_size, params.sigma)
    lum, cs = _ssim_maps(a, b, params, taps)
    return ad.mean(lum * cs)


def ms_ssim_scales(height: int, width: int, params: SsimParams = SsimParams()) -> int:
    """Number of dyadic scales whose coarsest image still fits the window."""
    smallest = min(height, width)
    if smallest < params.window_size:
        raise ValueError(f"image {height}x{width} is smaller than the SSIM window")
    return min(len(params.scale_weights), int(math.floor(math.log2(smallest / params.window_size))) + 1)


def ms_ssim(a, b, params: SsimParams = SsimParams(), scales: int | None = None) -> Tensor:
    """Multi-scale SSIM.

    Contrast-structure terms at every scale, luminance only at the coarsest.
    When fewer scales fit than there are weights, the leading weights are
    used and renormalised to sum to one.
    """
    a, b = _t(a), _t(b)
    _same_shape(a, b, "ms_ssim")
    _check_window(a, params)
    fit = ms_ssim_scales(a.shape[2], a.shape[3], params)
    scales = fit if scales is None else scales
    if not 1 <= scales <= fit:
        raise ValueError(f"{scales} scales requested but only {fit} fit a {a.shape[2]}x{a.shape[3]} image")
    weights = np.asarray(params.scale_weights[:scales], dtype=np.float64)
    weights = weights / weights.sum()
    taps = gaussian_window(params.window_size, params.sigma)
    value = None
    for j in range(scales):
        lum, cs = _ssim_maps(a, b, params, taps)
        last = j == scales - 1
        term = ad.mean(lum * cs if last else cs, axis=(2, 3))
        # Fractional powers of non-positive values are undefined.
        term = ad.power(ad.clamp_min(term, LOG_EPS), float(weights[j]))
        value = term if value is None else value * term
        if not last:
            a, b = avg_pool2(a), avg_pool2(b)
    return ad.mean(value)


def _to_unit(x: Tensor) -> Tensor:
    return (x + 1.0) * 0.5


def ssim_loss(output, target, params: SsimParams = SsimParams()) -> Tensor:
    """``1 - SSIM`` of network tensors in [-1, 1]."""
    return 1.0 - ssim(_to_unit(_t(output)), _to_unit(_t(target)), params)


def ms_ssim_loss(output, target, params: SsimParams = SsimParams()) -> Tensor:
    return 1.0 - ms_ssim(_to_unit(_t(output)), _to_unit(_t(target)), params)


def _check_scores(real: Tensor, fake: Tensor) -> None:
    if real.size == 0 or fake.size == 0:
        raise ValueError("relativistic losses need non-empty real and fake score batches")


def ragan_generator_loss(scores_real, scores_fake) -> Tensor:
    """Relativistic-average generator loss on raw discriminator scores.

    ``-mean_r ln(1 - sig(s_r - mean(s_f))) - mean_f ln(sig(s_f - mean(s_r)))``,
    log arguments floored at 1e-12.
    """
    real, fake = _t(scores_real), _t(scores_fake)
    _check_scores(real, fake)
    d_real = real - ad.mean(fake)
    d_fake = fake - ad.mean(real)
    t_real = ad.mean(ad.log(ad.clamp_min(1.0 - ad.sigmoid(d_real), LOG_EPS)))
    t_fake = ad.mean(ad.log(ad.clamp_min(ad.sigmoid(d_fake), LOG_EPS)))
    return -t_real - t_fake


def ragan_discriminator_loss(scores_real, scores_fake) -> Tensor:
    """Discriminator counterpart: real should out-score the average fake."""
    real, fake = _t(scores_real), _t(scores_fake)
    _check_scores(real, fake)
    d_real = real - ad.mean(fake)
    d_fake = fake - ad.mean(real)
    t_real = ad.mean(ad.log(ad.clamp_min(ad.sigmoid(d_real), LOG_EPS)))
    t_fake = ad.mean(ad.log(ad.clamp_min(1.0 - ad.sigmoid(d_fake), LOG_EPS)))
    return -t_real - t_fake


def combined_generator_terms(output, target, scores_real, scores_fake,
                             weights: LossWeights = LossWeights(),
                             params: SsimParams = SsimParams()) -> dict[str, Tensor]:
    terms = {
        "ssim": ssim_loss(output, target, params),
        "l1": l1_loss(output, target),
        "adv": ragan_generator_loss(scores_real, scores_fake),
    }
    terms["total"] = terms["ssim"] + weights.alpha * terms["l1"] + weights.beta * terms["adv"]
    return terms


def combined_generator_loss(output, target, scores_real, scores_fake,
                            weights: LossWeights = LossWeights(),
                            params: SsimParams = SsimParams()) -> Tensor:
    """``ssim_loss + alpha * l1_loss + beta * ragan_generator_loss``."""
    return combined_generator_terms(output, target, scores_real, scores_fake, weights, params)["total"]
