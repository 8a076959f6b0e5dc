# wmcloak/core/latent.py
import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, Optional, Union

import torch
import torch.nn as nn

from wmcloak.core.errors import ShapeError
from wmcloak.core.imagedata import Image, Watermark, image_to_tensor, watermark_to_tensor
from wmcloak.utils.seeding import parameter_checksum, torch_generator

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "WMCLOAK_CACHE"
TOY_CHANNELS = (16, 32, 64)
TOY_HIDDEN_GAIN = 2.0


class LatentEncoder(nn.Module):
    """Frozen image → latent map ε; inputs are B×3×H×W in [0,1]"""

    downsample_factor: int = 8
    latent_channels: int = 4
    frozen: bool = True

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # frozen encoders never leave eval mode
        return super().train(False)

    @property
    def fingerprint(self) -> str:
        return parameter_checksum(self)


def _orthogonal_rows(out_features: int, in_features: int, gen: torch.Generator) -> torch.Tensor:
    """out×in matrix with orthonormal rows (or columns when out > in)"""
    a = torch.randn(max(out_features, in_features), min(out_features, in_features), generator=gen)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    return q.T if out_features <= in_features else q


class ToyLatentEncoder(LatentEncoder):
    """
    Desk-scale stand-in for a VAE encoder.

    Three stride-2 4×4 convolutions with SiLU, then a 1×1 projection to four
    channels: factor 8, four channels, like the latent-diffusion VAE.
    Weights are orthogonal and the projection is rescaled so white-noise
    inputs give unit output variance.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = int(seed)
        layers = []
        in_ch = 3
        for out_ch in TOY_CHANNELS:
            layers += [nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1, padding_mode='replicate'),
                       nn.SiLU()]
            in_ch = out_ch
        layers.append(nn.Conv2d(in_ch, self.latent_channels, kernel_size=1))
        self.model = nn.Sequential(*layers)
        self._init_weights()
        self.freeze()

    def _init_weights(self):
        gen = torch_generator(self.seed)
        convs = [m for m in self.model if isinstance(m, nn.Conv2d)]
        with torch.no_grad():
            for i, conv in enumerate(convs):
                out_ch, in_ch, kh, kw = conv.weight.shape
                weight = _orthogonal_rows(out_ch, in_ch * kh * kw, gen).reshape(out_ch, in_ch, kh, kw)
                gain = 1.0 if i == len(convs) - 1 else TOY_HIDDEN_GAIN
                conv.weight.copy_(weight * gain)
                conv.bias.zero_()
            noise = torch.rand(8, 3, 64, 64, generator=gen)
            std = self.model(noise * 2 - 1).std()
            convs[-1].weight.div_(std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x * 2 - 1)


class DiffusersVAEEncoder(LatentEncoder):
    """
    Adapter for a pretrained latent-diffusion VAE (diffusers AutoencoderKL layout).

    Uses the posterior mean, scaled by the VAE scaling factor, so encoding
    stays deterministic.
    """

    def __init__(self, weights_dir: Union[str, Path], torch_dtype: torch.dtype = torch.float32):
        super().__init__()
        from diffusers import AutoencoderKL

        self.vae = AutoencoderKL.from_pretrained(str(weights_dir), torch_dtype=torch_dtype)
        self.scaling_factor = float(getattr(self.vae.config, "scaling_factor", 0.18215))
        self.downsample_factor = 2 ** (len(self.vae.config.block_out_channels) - 1)
        self.latent_channels = int(self.vae.config.latent_channels)
        self.freeze()
        logger.info(f"Loaded VAE encoder from {weights_dir} (factor {self.downsample_factor}, "
                    f"{self.latent_channels} channels)")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x * 2 - 1).to(self.vae.dtype)
        return self.vae.encode(x).latent_dist.mean.float() * self.scaling_factor


def toy_encoder(seed: int = 0) -> ToyLatentEncoder:
    """Frozen toy encoder, deterministic in seed"""
    return ToyLatentEncoder(seed)


def load_encoder(source: str = "toy", seed: int = 0) -> LatentEncoder:
    """'toy' or a directory of pretrained VAE weights"""
    if source == "toy":
        return toy_encoder(seed)
    return DiffusersVAEEncoder(source)


def watermark_as_image(m: torch.Tensor) -> torch.Tensor:
    """B×1×H×W mask replicated to three channels"""
    return m.expand(-1, 3, -1, -1) if m.shape[1] == 1 else m


def encode(enc: LatentEncoder, img: Union[Image, Watermark, torch.Tensor]) -> torch.Tensor:
    """Latent code B×C×(H/f)×(W/f), differentiable w.r.t. the input"""
    if isinstance(img, Image):
        img = image_to_tensor(img)
    elif isinstance(img, Watermark):
        img = watermark_to_tensor(img)
    if img.dim() == 3:
        img = img.unsqueeze(0)
    if img.dim() != 4 or img.shape[1] not in (1, 3):
        raise ShapeError(f"Expected B×3×H×W (or B×1×H×W watermark) input, got {tuple(img.shape)}")
    img = watermark_as_image(img)
    factor = enc.downsample_factor
    if img.shape[-2] % factor or img.shape[-1] % factor:
        raise ShapeError(f"Spatial dims {tuple(img.shape[-2:])} not divisible by encoder factor {factor}")
    param = next(enc.parameters(), None)
    if param is not None:
        img = img.to(device=param.device, dtype=param.dtype)
    return enc(img)


class LatentCache:
    """ε(m) per watermark, computed once; persisted when WMCLOAK_CACHE is set"""

    def __init__(self, encoder: LatentEncoder, cache_dir: Optional[Union[str, Path]] = None):
        self.encoder = encoder
        self.logger = logging.getLogger(__name__)
        cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV_VAR)
        self.cache_dir = Path(cache_dir) / "latents" if cache_dir else None
        self._fingerprint = encoder.fingerprint
        self._memory: Dict[str, torch.Tensor] = {}

    def _key(self, watermark_id: str, mask: torch.Tensor) -> str:
        mask_digest = hashlib.sha256(mask.detach().cpu().numpy().tobytes()).hexdigest()
        return f"{self._fingerprint[:16]}_{watermark_id}_{mask_digest[:16]}"

    def get(self, watermark_id: str, mask: torch.Tensor) -> torch.Tensor:
        """Latent of one 1×1×H×W (or H×W) mask, shape 1×C×h×w"""
        if mask.dim() == 2:
            mask = mask[None, None]
        key = self._key(watermark_id, mask)
        if key in self._memory:
            return self._memory[key]

        path = self.cache_dir / f"{key}.pt" if self.cache_dir else None
        if path is not None and path.exists():
            latent = torch.load(path, map_location="cpu")
        else:
            with torch.no_grad():
                latent = encode(self.encoder, mask).detach().cpu()
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(latent, path)
                self.logger.debug(f"Cached ε(m) for {watermark_id} at {path}")
        self._memory[key] = latent
        return latent
