# tests/conftest.py
from pathlib import Path

import numpy as np
import pytest
import torch

from wmcloak.core.imagedata import Image, build_dataset, load_mapping, render_watermark
from wmcloak.core.imitate import ToyAutoencoder
from wmcloak.core.latent import toy_encoder
from wmcloak.core.networks import init_networks
from wmcloak.core.synthetic import natural_like_images, write_toy_dataset
from wmcloak.core.trainer import Checkpoint, TrainConfig, train

SIZE = (64, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def encoder():
    return toy_encoder(0)


@pytest.fixture(scope="session")
def natural_images():
    return natural_like_images(6, SIZE, seed=1)


@pytest.fixture
def natural_image(natural_images) -> Image:
    return natural_images[0]


@pytest.fixture(scope="session")
def watermark():
    return render_watermark("VAN_GOGH", SIZE)


@pytest.fixture(scope="session")
def toy_dataset_root(tmp_path_factory) -> Path:
    """Two classes × 6 images at 64×64"""
    root = tmp_path_factory.mktemp("toy_dataset")
    write_toy_dataset(root, ["van_gogh", "claude_monet"], per_class=6, size=SIZE, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_index(toy_dataset_root):
    return build_dataset(toy_dataset_root, load_mapping(toy_dataset_root / "mapping.json"),
                         split_per_class=4, image_size=SIZE)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(batch_size=4, epochs=2, image_size=SIZE, seed=0)


@pytest.fixture(scope="session")
def trained_checkpoint(tiny_config, toy_index, encoder) -> Checkpoint:
    return train(tiny_config, toy_index, encoder)


@pytest.fixture
def fresh_checkpoint(toy_index) -> Checkpoint:
    """Untrained networks wrapped as a checkpoint"""
    config = TrainConfig(image_size=SIZE, epochs=1)
    generator, discriminator = init_networks(0, SIZE)
    return Checkpoint(generator=generator.eval(), discriminator=discriminator.eval(), epoch=0,
                      config=config, config_digest=config.digest(), watermark_ids=toy_index.watermark_ids,
                      watermarks=dict(toy_index.watermarks))


@pytest.fixture(scope="session")
def toy_autoencoder(tmp_path_factory):
    return ToyAutoencoder.build(0, cache_dir=tmp_path_factory.mktemp("cache"))


def zero_generator_head(generator: torch.nn.Module):
    """Make G output an all-zero perturbation"""
    head = [m for m in generator.modules() if isinstance(m, torch.nn.Conv2d)][-1]
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
