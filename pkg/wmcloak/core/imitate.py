# wmcloak/core/imitate.py
import logging
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from wmcloak.core.errors import BackendError, ImageIOError
from wmcloak.core.imagedata import Image, Watermark, image_to_tensor, read_image, tensor_to_image, write_image
from wmcloak.core.latent import CACHE_ENV_VAR, LatentEncoder, encode, toy_encoder
from wmcloak.core.metrics import ncc_watermark, psnr
from wmcloak.core.synthetic import natural_like_images
from wmcloak.utils.seeding import derive_seed, torch_generator

logger = logging.getLogger(__name__)

TOY_AUTOENCODER_VERSION = "toy-ae-v1"
DECODER_FIT_IMAGES = 64
DECODER_FIT_SIZE = (64, 64)
DECODER_RIDGE = 1e-3
DECODER_KERNEL = 3


@dataclass
class ImitationConfig:
    strength: float = 0.3
    seed: int = 0
    prompt: Optional[str] = None  # forwarded to external backends only

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must be in [0, 1], got {self.strength}")


class ToyLatentDecoder(nn.Module):
    """Linear 3×3 conv to 3·f² channels followed by a pixel shuffle back to image space"""

    def __init__(self, latent_channels: int = 4, factor: int = 8):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv2d(latent_channels, 3 * factor * factor, DECODER_KERNEL,
                              padding=DECODER_KERNEL // 2, padding_mode='replicate')
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.shuffle(self.conv(z))


def _latent_patches(z: torch.Tensor) -> torch.Tensor:
    """B×C×h×w latent → (B·h·w)×(C·k²) neighbourhood rows, replicate-padded like the decoder"""
    pad = DECODER_KERNEL // 2
    padded = F.pad(z, (pad, pad, pad, pad), mode='replicate')
    cols = F.unfold(padded, DECODER_KERNEL)  # B×(C·k²)×(h·w)
    return cols.transpose(1, 2).reshape(-1, cols.shape[1])


def fit_toy_decoder(encoder: LatentEncoder, images: Sequence[Image], ridge: float = DECODER_RIDGE) -> ToyLatentDecoder:
    """Closed-form ridge regression of pixel blocks on latent neighbourhoods"""
    factor = encoder.downsample_factor
    decoder = ToyLatentDecoder(encoder.latent_channels, factor)
    x = torch.cat([image_to_tensor(img) for img in images]).double()
    with torch.no_grad():
        z = encode(encoder, x.float()).double()
    features = _latent_patches(z)
    features = torch.cat([features, torch.ones(features.shape[0], 1, dtype=features.dtype)], dim=1)
    targets = F.pixel_unshuffle(x, factor)  # B×(3·f²)×h×w
    targets = targets.permute(0, 2, 3, 1).reshape(-1, targets.shape[1])

    gram = features.T @ features + ridge * torch.eye(features.shape[1], dtype=features.dtype)
    solution = torch.linalg.solve(gram, features.T @ targets)  # (C·k²+1)×(3·f²)
    with torch.no_grad():
        decoder.conv.weight.copy_(solution[:-1].T.reshape(decoder.conv.weight.shape).float())
        decoder.conv.bias.copy_(solution[-1].float())
    residual = float(((features @ solution - targets) ** 2).mean())
    logger.info(f"Fitted toy decoder on {len(images)} images (residual MSE {residual:.5f})")
    return decoder


class ToyAutoencoder(nn.Module):
    """Toy latent encoder paired with its fitted linear decoder; both frozen"""

    version = TOY_AUTOENCODER_VERSION

    def __init__(self, encoder: LatentEncoder, decoder: ToyLatentDecoder):
        super().__init__()
        self.encoder = encoder.freeze()
        self.decoder = decoder.eval()
        for p in self.decoder.parameters():
            p.requires_grad_(False)

    @classmethod
    def build(cls, encoder_seed: int = 0, cache_dir: Optional[Union[str, Path]] = None) -> "ToyAutoencoder":
        """Toy encoder for encoder_seed plus its decoder, fitted once and cached under WMCLOAK_CACHE"""
        encoder = toy_encoder(encoder_seed)
        cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV_VAR)
        path = Path(cache_dir) / "decoders" / f"{TOY_AUTOENCODER_VERSION}-seed{encoder_seed}.pt" if cache_dir else None

        decoder = ToyLatentDecoder(encoder.latent_channels, encoder.downsample_factor)
        if path is not None and path.exists():
            decoder.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            logger.debug(f"Loaded cached toy decoder from {path}")
        else:
            images = natural_like_images(DECODER_FIT_IMAGES, DECODER_FIT_SIZE,
                                         derive_seed(encoder_seed, TOY_AUTOENCODER_VERSION))
            decoder = fit_toy_decoder(encoder, images)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(decoder.state_dict(), path)
        return cls(encoder, decoder)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return encode(self.encoder, x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


def simulate_imitation(enc_dec: ToyAutoencoder, x: Image, cfg: ImitationConfig) -> Image:
    """Strength-interpolated latent noising followed by decoding"""
    with torch.no_grad():
        latent = enc_dec.encode(image_to_tensor(x))
        noise = torch.randn(latent.shape, generator=torch_generator(cfg.seed), dtype=latent.dtype)
        noised = (1.0 - cfg.strength) * latent + cfg.strength * noise * latent.std()
        out = enc_dec.decode(noised).clamp(0.0, 1.0)
    return tensor_to_image(out, source_path=x.source_path)


class ExternalImitationBackend:
    """
    Out-of-process imitation adapter.

    Invoked as `<cmd> <in.png> <out.png> --strength F --seed N [--prompt S]`;
    exit status 0 and an existing output file mean success. Calls on one
    instance are serialized.
    """

    def __init__(self, adapter_cmd: Union[str, Sequence[str]], timeout: Optional[float] = None):
        self.command = shlex.split(adapter_cmd) if isinstance(adapter_cmd, str) else list(adapter_cmd)
        if not self.command:
            raise ValueError("Empty adapter command")
        self.timeout = timeout
        self.calls = 0
        self._call_hooks: List[Callable[[], None]] = []
        self._lock = threading.Lock()
        self.logger = logging.getLogger(__name__)

    def register_call_hook(self, hook: Callable[[], None]) -> Callable[[], None]:
        """hook() runs after every adapter invocation; returns a remover"""
        self._call_hooks.append(hook)

        def remove():
            if hook in self._call_hooks:
                self._call_hooks.remove(hook)
        return remove

    def argv(self, in_path: Union[str, Path], out_path: Union[str, Path], cfg: ImitationConfig) -> List[str]:
        args = self.command + [str(in_path), str(out_path), "--strength", repr(float(cfg.strength)),
                               "--seed", str(int(cfg.seed))]
        if cfg.prompt is not None:
            args += ["--prompt", cfg.prompt]
        return args

    def run(self, x_path: Union[str, Path], cfg: ImitationConfig, out_path: Optional[Union[str, Path]] = None) -> Image:
        with self._lock:
            with tempfile.TemporaryDirectory(prefix="wmcloak-backend-") as tmp:
                target = Path(out_path) if out_path is not None else Path(tmp) / "out.png"
                args = self.argv(x_path, target, cfg)
                self.logger.debug(f"Running imitation backend: {args}")
                try:
                    proc = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout)
                except (OSError, subprocess.TimeoutExpired) as e:
                    raise BackendError(f"Imitation backend {self.command[0]} could not run: {e}") from e
                self.calls += 1
                for hook in list(self._call_hooks):
                    hook()
                if proc.returncode != 0:
                    raise BackendError(f"Imitation backend exited with status {proc.returncode}",
                                       returncode=proc.returncode, stderr=proc.stderr)
                if not target.exists():
                    raise BackendError(f"Imitation backend produced no output at {target}",
                                       returncode=proc.returncode, stderr=proc.stderr)
                try:
                    return read_image(target)
                except ImageIOError as e:
                    raise BackendError(f"Imitation backend output unreadable: {e}",
                                       returncode=proc.returncode, stderr=proc.stderr) from e


def run_external_backend(adapter_cmd: Union[str, Sequence[str]], x_path: Union[str, Path],
                         cfg: ImitationConfig) -> Image:
    return ExternalImitationBackend(adapter_cmd).run(x_path, cfg)


def imitate(x: Image, cfg: ImitationConfig, enc_dec: Optional[ToyAutoencoder] = None,
            backend: Optional[ExternalImitationBackend] = None) -> Image:
    """Route to the external backend when one is given, otherwise the toy simulator"""
    if backend is None:
        return simulate_imitation(enc_dec if enc_dec is not None else ToyAutoencoder.build(), x, cfg)
    with tempfile.TemporaryDirectory(prefix="wmcloak-imitate-") as tmp:
        in_path = Path(tmp) / "in.png"
        write_image(x, in_path)
        return backend.run(in_path, cfg)


def watermark_visibility(enc_dec: ToyAutoencoder, originals: Sequence[Image], cloaked: Sequence[Image],
                         watermark: Union[Watermark, np.ndarray], cfg: ImitationConfig) -> float:
    """Mean NCC between the watermark and imitation(cloaked) − imitation(original)"""
    scores = [ncc_watermark(simulate_imitation(enc_dec, x, cfg), simulate_imitation(enc_dec, xa, cfg), watermark)
              for x, xa in zip(originals, cloaked)]
    return float(np.mean(scores)) if scores else 0.0


def strength_sweep(enc_dec: ToyAutoencoder, originals: Sequence[Image], cloaked: Sequence[Image],
                   watermark: Union[Watermark, np.ndarray], strengths: Sequence[float],
                   seed: int = 0) -> pd.DataFrame:
    """NCC and reconstruction PSNR of imitations per strength"""
    rows = []
    for strength in strengths:
        cfg = ImitationConfig(strength=float(strength), seed=seed)
        rows.append({
            "strength": float(strength),
            "ncc": watermark_visibility(enc_dec, originals, cloaked, watermark, cfg),
            "psnr": float(np.mean([psnr(x, simulate_imitation(enc_dec, x, cfg)) for x in originals])),
        })
        logger.info(f"strength {strength:.2f}: ncc={rows[-1]['ncc']:.3f} psnr={rows[-1]['psnr']:.2f}")
    return pd.DataFrame(rows)
