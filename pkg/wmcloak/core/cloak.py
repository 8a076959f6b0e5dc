# wmcloak/core/cloak.py
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
import torch

from wmcloak.core.errors import WatermarkLookupError
from wmcloak.core.imagedata import (IMAGE_EXTENSIONS, Image, image_to_tensor, read_image,
                                    tensor_to_image, watermark_to_tensor, write_image)
from wmcloak.core.imitate import ExternalImitationBackend, ToyAutoencoder
from wmcloak.core.latent import LatentEncoder
from wmcloak.core.metrics import identical_count, mean_psnr, psnr, psnr_to_json
from wmcloak.core.trainer import Checkpoint

logger = logging.getLogger(__name__)


@dataclass
class PerturbationStats:
    rms: float
    max_abs: float
    watermark_rms: float


@dataclass
class CloakResult:
    adversarial: Image
    perturbation_stats: PerturbationStats
    watermark_id: str


@dataclass
class EvaluationCounters:
    """
    Network evaluations observed while cloaking.

    gradients counts generator passes that recorded an autograd graph.
    """
    generator: int = 0
    discriminator: int = 0
    encoder: int = 0
    backend: int = 0
    gradients: int = 0


def perturbation_stats(original: Image, adversarial: Image, mask: np.ndarray) -> PerturbationStats:
    delta = adversarial.pixels.astype(np.float64) - original.pixels.astype(np.float64)
    region = mask.astype(bool)
    return PerturbationStats(
        rms=float(np.sqrt(np.mean(delta ** 2))),
        max_abs=float(np.abs(delta).max()),
        watermark_rms=float(np.sqrt(np.mean(delta[region] ** 2))) if region.any() else 0.0)


class Cloaker:
    """Single-pass generator inference x′ = clamp(x + G(x|m))"""

    def __init__(self, checkpoint: Checkpoint, encoder: Optional[LatentEncoder] = None,
                 backend: Optional[Union[ToyAutoencoder, ExternalImitationBackend]] = None):
        """encoder and backend, when given, are hooked into the counters as well"""
        self.checkpoint = checkpoint
        self.generator = checkpoint.generator.eval()
        self.counters = EvaluationCounters()
        self.logger = logging.getLogger(__name__)
        self._removers: List[Callable[[], None]] = [
            self.generator.register_forward_hook(self._on_generator).remove,
            checkpoint.discriminator.register_forward_hook(lambda *_: self._count("discriminator")).remove,
        ]
        if encoder is not None:
            self._removers.append(encoder.register_forward_hook(lambda *_: self._count("encoder")).remove)
        if isinstance(backend, ToyAutoencoder):
            self._removers.append(backend.decoder.register_forward_hook(lambda *_: self._count("backend")).remove)
        elif backend is not None:
            self._removers.append(backend.register_call_hook(lambda: self._count("backend")))

    def _count(self, name: str):
        setattr(self.counters, name, getattr(self.counters, name) + 1)

    def _on_generator(self, module, inputs, output):
        self._count("generator")
        if output.requires_grad:
            self._count("gradients")

    def close(self):
        for remove in self._removers:
            remove()
        self._removers = []

    def cloak_image(self, x: Image, watermark_id: str, linf_bound: Optional[float] = None) -> CloakResult:
        cp = self.checkpoint
        if watermark_id not in cp.watermarks:
            raise WatermarkLookupError(f"Unknown watermark id '{watermark_id}' (known: {cp.watermark_ids})")
        if x.size != cp.image_size:
            x = _resize(x, cp.image_size)
        wm = cp.watermarks[watermark_id]

        with torch.no_grad():
            xt = image_to_tensor(x)
            pert = self.generator(xt, watermark_to_tensor(wm))
            if linf_bound is not None:
                pert = pert.clamp(-linf_bound, linf_bound)
            adv = torch.clamp(xt + pert, 0.0, 1.0)
        adversarial = tensor_to_image(adv, source_path=x.source_path)
        stats = perturbation_stats(x, adversarial, wm.mask)
        return CloakResult(adversarial=adversarial, perturbation_stats=stats, watermark_id=watermark_id)

    def cloak_batch(self, input_dir: Union[str, Path], watermark_id: str, output_dir: Union[str, Path],
                    linf_bound: Optional[float] = None) -> "CloakBatchSummary":
        input_dir, output_dir = Path(input_dir), Path(output_dir)
        if watermark_id not in self.checkpoint.watermarks:
            raise WatermarkLookupError(f"Unknown watermark id '{watermark_id}'")
        files = sorted(p for p in input_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS) if input_dir.is_dir() else []

        summary = CloakBatchSummary(watermark_id=watermark_id)
        before = asdict(self.counters)
        for path in files:
            try:
                x = read_image(path, self.checkpoint.image_size)
                result = self.cloak_image(x, watermark_id, linf_bound)
                out_path = output_dir / f"{path.stem}.png"
                write_image(result.adversarial, out_path)
                summary.images.append({
                    "name": path.name, "output": str(out_path),
                    "psnr": psnr(x, result.adversarial), **asdict(result.perturbation_stats)})
            except Exception as e:
                self.logger.error(f"Cloaking {path} failed: {e}")
                summary.failures.append({"name": path.name, "error": str(e)})
        summary.mean_psnr = mean_psnr([r["psnr"] for r in summary.images]) if summary.images else None
        summary.counters = {k: v - before[k] for k, v in asdict(self.counters).items()}
        self.logger.info(f"Cloaked {len(summary.images)} images, {len(summary.failures)} failures")
        return summary


@dataclass
class CloakBatchSummary:
    watermark_id: str
    images: List[Dict[str, Any]] = field(default_factory=list)
    failures: List[Dict[str, str]] = field(default_factory=list)
    mean_psnr: Optional[float] = None
    counters: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "watermark_id": self.watermark_id,
            "images": [{**r, "psnr": psnr_to_json(r["psnr"])} for r in self.images],
            "failures": self.failures,
            "mean_psnr": psnr_to_json(self.mean_psnr),
            "identical_pairs": identical_count([r["psnr"] for r in self.images]),
            "counters": dict(self.counters),
        }


def _resize(x: Image, size) -> Image:
    t = torch.nn.functional.interpolate(image_to_tensor(x), size=tuple(size), mode="bilinear",
                                        align_corners=False, antialias=True)
    return tensor_to_image(t.clamp(0.0, 1.0), source_path=x.source_path)


def cloak_image(cp: Checkpoint, x: Image, watermark_id: str, linf_bound: Optional[float] = None) -> CloakResult:
    cloaker = Cloaker(cp)
    try:
        return cloaker.cloak_image(x, watermark_id, linf_bound)
    finally:
        cloaker.close()


def cloak_batch(cp: Checkpoint, input_dir: Union[str, Path], watermark_id: str,
                output_dir: Union[str, Path], linf_bound: Optional[float] = None) -> CloakBatchSummary:
    cloaker = Cloaker(cp)
    try:
        return cloaker.cloak_batch(input_dir, watermark_id, output_dir, linf_bound)
    finally:
        cloaker.close()
