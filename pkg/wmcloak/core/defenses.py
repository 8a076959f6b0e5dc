# wmcloak/core/defenses.py
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from PIL import Image as PILImage

from wmcloak.core.imagedata import Image, quantize

logger = logging.getLogger(__name__)

DEFENSE_KINDS = ("jpeg", "rs", "tvm")
TVM_STEP = 0.1
TVM_MAX_BACKTRACKS = 20


@dataclass
class DefenseConfig:
    kind: str = "jpeg"
    jpeg_quality: int = 75
    rs_sigma: float = 0.05
    tvm_lambda: float = 0.01
    tvm_iters: int = 30

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"Unknown defense kind '{self.kind}', expected one of {DEFENSE_KINDS}")
        if not 1 <= int(self.jpeg_quality) <= 100:
            raise ValueError(f"jpeg_quality must be in 1..100, got {self.jpeg_quality}")
        if self.rs_sigma < 0:
            raise ValueError(f"rs_sigma must be >= 0, got {self.rs_sigma}")
        if self.tvm_lambda < 0:
            raise ValueError(f"tvm_lambda must be >= 0, got {self.tvm_lambda}")
        if self.tvm_iters < 0:
            raise ValueError(f"tvm_iters must be >= 0, got {self.tvm_iters}")


@dataclass
class TVMResult:
    image: Image
    history: List[float] = field(default_factory=list)  # objective before each iteration, then final


def jpeg_roundtrip(x: Image, quality: int) -> Image:
    buffer = io.BytesIO()
    PILImage.fromarray(quantize(x.pixels)).save(buffer, format="JPEG", quality=int(quality))
    buffer.seek(0)
    with PILImage.open(buffer) as decoded:
        pixels = np.asarray(decoded.convert("RGB"), dtype=np.float32) / 255.0
    return Image(pixels=pixels, source_path=x.source_path)


def random_smoothing(x: Image, sigma: float, seed: int) -> Image:
    """One-shot Gaussian noise purification"""
    if sigma == 0:
        return Image(pixels=x.pixels.copy(), source_path=x.source_path)
    rng = np.random.default_rng(seed)
    noisy = x.pixels.astype(np.float64) + rng.normal(0.0, sigma, size=x.pixels.shape)
    return Image(pixels=np.clip(noisy, 0.0, 1.0), source_path=x.source_path)


def total_variation(x) -> float:
    """Anisotropic TV: sum of absolute forward differences along H and W"""
    z = torch.as_tensor(x.pixels if isinstance(x, Image) else x, dtype=torch.float64)
    return float(_tv(z))


def _tv(z: torch.Tensor) -> torch.Tensor:
    # z is H×W×C
    return (z[1:, :, :] - z[:-1, :, :]).abs().sum() + (z[:, 1:, :] - z[:, :-1, :]).abs().sum()


def _tvm_objective(z: torch.Tensor, x: torch.Tensor, lam: float) -> torch.Tensor:
    return ((z - x) ** 2).sum() + lam * _tv(z)


def tvm_denoise(x: Image, lam: float = 0.01, iters: int = 30, step: float = TVM_STEP) -> TVMResult:
    """
    Minimise ‖z−x‖² + λ·TV(z) over z in [0,1] by projected subgradient descent.

    Each iteration starts from `step` and halves it until the projected
    update does not increase the objective; if no step qualifies z is kept.
    """
    target = torch.as_tensor(x.pixels, dtype=torch.float64)
    z = target.clone()
    history = []
    for _ in range(iters):
        z.requires_grad_(True)
        objective = _tvm_objective(z, target, lam)
        grad, = torch.autograd.grad(objective, z)
        z = z.detach()
        current = float(objective)
        history.append(current)

        trial_step = step
        with torch.no_grad():
            for _ in range(TVM_MAX_BACKTRACKS):
                candidate = torch.clamp(z - trial_step * grad, 0.0, 1.0)
                if float(_tvm_objective(candidate, target, lam)) <= current:
                    z = candidate
                    break
                trial_step /= 2
    with torch.no_grad():
        history.append(float(_tvm_objective(z, target, lam)))
    return TVMResult(image=Image(pixels=z.numpy(), source_path=x.source_path), history=history)


def apply_defense(x: Image, cfg: DefenseConfig, seed: int = 0) -> Image:
    """Purify an image; deterministic given (x, cfg, seed)"""
    if cfg.kind == "jpeg":
        out = jpeg_roundtrip(x, cfg.jpeg_quality)
    elif cfg.kind == "rs":
        out = random_smoothing(x, cfg.rs_sigma, seed)
    else:
        out = tvm_denoise(x, cfg.tvm_lambda, cfg.tvm_iters).image
    logger.debug(f"Applied {cfg.kind} defense to {x.source_path or 'image'}")
    return out


def defense_grid() -> List[Tuple[str, Optional[DefenseConfig]]]:
    """The default no-defense/JPEG/RS/TVM rows of a robustness study"""
    return [("none", None)] + [(kind, DefenseConfig(kind=kind)) for kind in DEFENSE_KINDS]
