# wmcloak/core/networks.py
import logging
from typing import List, Optional, Tuple, Type, Union

import torch
import torch.nn as nn

from wmcloak.core.errors import ShapeError
from wmcloak.core.imagedata import Image, Watermark, image_to_tensor, watermark_to_tensor
from wmcloak.utils.seeding import parameter_checksum, torch_generator

logger = logging.getLogger(__name__)

DOWNSAMPLING = 32  # five stride-2 layers in the discriminator
ENCODER_CHANNELS = (64, 128, 256)
RESIDUAL_BLOCKS = 4
DECODER_CHANNELS = (128, 64)
DISCRIMINATOR_CHANNELS = (64, 128, 256, 512, 1024)
LEAKY_SLOPE = 0.2
UPSAMPLING_MODES = ("transpose", "resize")
INIT_STD = 0.02

__all__ = [
    "Generator", "Discriminator", "ResnetBlock", "GeneratorParams", "DiscriminatorParams",
    "init_networks", "generator_forward", "discriminator_forward", "parameter_checksum",
]


def _padding(padding_type: str) -> Tuple[List[nn.Module], int]:
    """Explicit padding layer (if any) and the conv padding to pair with it"""
    if padding_type == 'reflect':
        return [nn.ReflectionPad2d(1)], 0
    if padding_type == 'replicate':
        return [nn.ReplicationPad2d(1)], 0
    if padding_type == 'circular':
        return [nn.CircularPad2d(1)], 0
    if padding_type == 'zero':
        return [], 1
    raise NotImplementedError(f"padding [{padding_type}] is not implemented")


class ResnetBlock(nn.Module):
    """Two 3×3 convolutions, norm + ReLU after the first, identity skip"""

    def __init__(self, dim: int, padding_type: str, norm_layer: Type[nn.Module]):
        super().__init__()
        layers: List[nn.Module] = []
        pad, p = _padding(padding_type)
        layers += pad + [nn.Conv2d(dim, dim, kernel_size=3, padding=p), norm_layer(dim), nn.ReLU(True)]
        pad, p = _padding(padding_type)
        layers += pad + [nn.Conv2d(dim, dim, kernel_size=3, padding=p), norm_layer(dim)]
        self.conv_block = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.conv_block(x)


class Generator(nn.Module):
    """
    Conditional perturbation generator G(x|m).

    d64-d128-d256 encoder, four R256 blocks, u128-u64 decoder and a 3×3
    Convolution-Tanh head. u128 and u64 are fractionally-strided 3×3
    convolutions (upsampling='transpose') or nearest-neighbour resize plus a
    3×3 convolution (upsampling='resize'). The head carries the last ×2 so
    the output matches the input resolution.
    """

    def __init__(self, image_channels: int = 3, watermark_channels: int = 1,
                 padding_type: str = 'reflect', norm_layer: Type[nn.Module] = nn.InstanceNorm2d,
                 upsampling: str = 'transpose'):
        super().__init__()
        if upsampling not in UPSAMPLING_MODES:
            raise NotImplementedError(f"upsampling [{upsampling}] is not implemented")
        self.padding_type = padding_type
        self.upsampling = upsampling
        layers: List[nn.Module] = []
        in_ch = image_channels + watermark_channels
        for out_ch in ENCODER_CHANNELS:
            pad, p = _padding(padding_type)
            layers += pad + [nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=p),
                             norm_layer(out_ch), nn.ReLU(True)]
            in_ch = out_ch
        for _ in range(RESIDUAL_BLOCKS):
            layers.append(ResnetBlock(in_ch, padding_type, norm_layer))
        for out_ch in DECODER_CHANNELS:
            if upsampling == 'transpose':
                layers.append(nn.ConvTranspose2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, output_padding=1))
            else:
                pad, p = _padding(padding_type)
                layers += [nn.Upsample(scale_factor=2, mode='nearest')] + pad + [
                    nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=p)]
            layers += [norm_layer(out_ch), nn.ReLU(True)]
            in_ch = out_ch
        pad, p = _padding(padding_type)
        layers += [nn.Upsample(scale_factor=2, mode='nearest')] + pad + [
            nn.Conv2d(in_ch, image_channels, kernel_size=3, padding=p), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        """x in [0,1] (B×3×H×W), m in {0,1} (B×1×H×W) → perturbation in (-1,1)"""
        return self.model(torch.cat([x * 2 - 1, m * 2 - 1], dim=1))


class Discriminator(nn.Module):
    """C64-C128-C256-C512-C1024 then a convolution collapsing H/32×W/32 to one logit"""

    def __init__(self, image_size: Tuple[int, int], image_channels: int = 3):
        super().__init__()
        self.image_size = (int(image_size[0]), int(image_size[1]))
        height, width = self.image_size
        layers: List[nn.Module] = []
        in_ch = image_channels
        for i, out_ch in enumerate(DISCRIMINATOR_CHANNELS):
            height, width = height // 2, width // 2
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1))
            # no norm on the first layer; instance norm is undefined on a 1×1 map
            if i > 0 and height * width > 1:
                layers.append(nn.InstanceNorm2d(out_ch))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE, True))
            in_ch = out_ch
        layers.append(nn.Conv2d(in_ch, 1, kernel_size=(height, width)))
        self.model = nn.Sequential(*layers)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x * 2 - 1).flatten(1)[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x in [0,1] (B×3×H×W) → probability per image (B,)"""
        return torch.sigmoid(self.logits(x))


GeneratorParams = Generator
DiscriminatorParams = Discriminator


def _check_image_size(image_size: Tuple[int, int]) -> Tuple[int, int]:
    height, width = int(image_size[0]), int(image_size[1])
    if height <= 0 or width <= 0 or height % DOWNSAMPLING or width % DOWNSAMPLING:
        raise ShapeError(f"Image size must be positive and divisible by {DOWNSAMPLING}, got {height}×{width}")
    return height, width


def init_weights(module: nn.Module, gen: torch.Generator):
    """N(0, 0.02) convolution weights, zero biases"""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                layer.weight.normal_(0.0, INIT_STD, generator=gen)
                if layer.bias is not None:
                    layer.bias.zero_()


def init_networks(seed: int, image_size: Tuple[int, int] = (512, 512),
                  padding_type: str = 'reflect') -> Tuple[Generator, Discriminator]:
    """Deterministic G and D for a given seed and image size"""
    image_size = _check_image_size(image_size)
    gen = torch_generator(seed)
    generator = Generator(padding_type=padding_type)
    discriminator = Discriminator(image_size)
    init_weights(generator, gen)
    init_weights(discriminator, gen)
    logger.debug(f"Initialised networks for {image_size} with seed {seed}")
    return generator, discriminator


def _as_image_batch(x: Union[Image, torch.Tensor]) -> torch.Tensor:
    if isinstance(x, Image):
        x = image_to_tensor(x)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"Expected B×3×H×W images, got {tuple(x.shape)}")
    return x


def _as_mask_batch(m: Union[Watermark, torch.Tensor], batch: int) -> torch.Tensor:
    if isinstance(m, Watermark):
        m = watermark_to_tensor(m)
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m.unsqueeze(1)
    if m.dim() != 4 or m.shape[1] != 1:
        raise ShapeError(f"Expected B×1×H×W watermark masks, got {tuple(m.shape)}")
    if m.shape[0] == 1 and batch > 1:
        m = m.expand(batch, -1, -1, -1)
    return m


def generator_forward(params: Generator, x: Union[Image, torch.Tensor],
                      m: Union[Watermark, torch.Tensor]) -> torch.Tensor:
    """Perturbation field G(x|m) with values in (-1,1), shape B×3×H×W"""
    x = _as_image_batch(x)
    m = _as_mask_batch(m, x.shape[0]).to(dtype=x.dtype, device=x.device)
    if m.shape[0] != x.shape[0] or m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"Image {tuple(x.shape)} and watermark {tuple(m.shape)} do not share H×W")
    if x.shape[-2] % 8 or x.shape[-1] % 8:
        raise ShapeError(f"Generator input must be divisible by 8, got {tuple(x.shape[-2:])}")
    return params(x, m)


def discriminator_forward(params: Discriminator, x: Union[Image, torch.Tensor]) -> torch.Tensor:
    """Probability that each image is original, shape (B,)"""
    x = _as_image_batch(x)
    if tuple(x.shape[-2:]) != params.image_size:
        raise ShapeError(f"Discriminator built for {params.image_size}, got {tuple(x.shape[-2:])}")
    return params(x)
