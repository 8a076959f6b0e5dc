# wmcloak/core/losses.py
import math
from dataclasses import dataclass
from typing import Optional

import torch

from wmcloak.core.errors import ShapeError
from wmcloak.core.latent import LatentEncoder, encode

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0   # GAN loss weight
    beta: float = 10.0   # perturbation loss weight

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class PerturbationBudget:
    c: float = 10 / 255  # hinge bound on the weighted RMS, pixel-range units
    w: float = 4.0       # extra weight inside the watermark region

    def __post_init__(self):
        if not 0.0 < self.c <= 1.0:
            raise ValueError(f"c must be in (0, 1], got {self.c}")
        if not math.isfinite(self.w) or self.w < 0:
            raise ValueError(f"w must be finite and >= 0, got {self.w}")


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def gan_value_function(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """mean log D(x) + mean log(1 − D(x′))"""
    return torch.log(_clamp(d_real)).mean() + torch.log1p(-_clamp(d_fake)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Negated GAN value function, minimised by D"""
    return -gan_value_function(d_real, d_fake)


def generator_gan_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss −mean log D(x′)"""
    return -torch.log(_clamp(d_fake)).mean()


def _mask_batch(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m.unsqueeze(1)
    if m.dim() != 4 or m.shape[1] != 1 or m.shape[-2:] != like.shape[-2:] \
            or m.shape[0] not in (1, like.shape[0]):
        raise ShapeError(f"Watermark {tuple(m.shape)} does not match perturbation {tuple(like.shape)}")
    return m.to(dtype=like.dtype, device=like.device)


def weighted_rms(pert: torch.Tensor, m: torch.Tensor, w: float) -> torch.Tensor:
    """Per-sample RMS of pert ⊙ (1 + w·m), mask broadcast across channels"""
    if pert.dim() == 3:
        pert = pert.unsqueeze(0)
    weighted = pert * (1 + w * _mask_batch(m, pert))
    flat = weighted.flatten(1)
    return torch.linalg.vector_norm(flat, dim=1) / math.sqrt(flat.shape[1])


def perturbation_loss(pert: torch.Tensor, m: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Batch mean of max(0, weighted RMS − c)"""
    return torch.relu(weighted_rms(pert, m, budget.w) - budget.c).mean()


def latent_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 norm over all latent elements"""
    return torch.linalg.vector_norm((a - b).flatten(1), dim=1)


def adversarial_loss(enc: LatentEncoder, x_adv: torch.Tensor, m: Optional[torch.Tensor] = None,
                     target_latent: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Batch mean of ‖ε(x′) − ε(m)‖₂ (unsquared); pass target_latent to reuse a cached ε(m)"""
    if target_latent is None:
        if m is None:
            raise ValueError("adversarial_loss needs either m or target_latent")
        target_latent = encode(enc, m)
    latent = encode(enc, x_adv)
    return latent_distance(latent, target_latent.to(latent.dtype)).mean()


def total_generator_objective(l_adv, l_gan_g, l_pert, weights: LossWeights):
    """l_adv + α·l_gan + β·l_pert"""
    return l_adv + weights.alpha * l_gan_g + weights.beta * l_pert
