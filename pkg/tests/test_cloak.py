# tests/test_cloak.py
import json
import sys

import numpy as np
import pytest
import torch

from tests.conftest import zero_generator_head
from wmcloak.core.cloak import Cloaker, cloak_batch, cloak_image
from wmcloak.core.errors import WatermarkLookupError
from wmcloak.core.imagedata import Image, image_to_tensor, read_image, watermark_to_tensor, write_image
from wmcloak.core.imitate import ExternalImitationBackend, ImitationConfig, imitate, simulate_imitation
from wmcloak.core.latent import encode
from wmcloak.core.metrics import mean_psnr


def test_zero_generator_is_identity(fresh_checkpoint, natural_image):
    zero_generator_head(fresh_checkpoint.generator)
    wid = fresh_checkpoint.watermark_ids[0]
    result = cloak_image(fresh_checkpoint, natural_image, wid)
    assert np.array_equal(result.adversarial.pixels, natural_image.pixels)
    assert result.perturbation_stats.max_abs == 0.0
    assert result.watermark_id == wid


def test_cloak_uses_generator_once_and_no_discriminator(trained_checkpoint, natural_image):
    cloaker = Cloaker(trained_checkpoint)
    try:
        cloaker.cloak_image(natural_image, trained_checkpoint.watermark_ids[0])
        assert cloaker.counters.generator == 1
        assert cloaker.counters.discriminator == 0
        assert cloaker.counters.gradients == 0
    finally:
        cloaker.close()


def test_counters_observe_encoder_and_toy_backend(fresh_checkpoint, natural_image, toy_autoencoder):
    cloaker = Cloaker(fresh_checkpoint, encoder=toy_autoencoder.encoder, backend=toy_autoencoder)
    try:
        with torch.enable_grad():
            cloaker.cloak_image(natural_image, fresh_checkpoint.watermark_ids[0])
        assert (cloaker.counters.generator, cloaker.counters.encoder, cloaker.counters.backend) == (1, 0, 0)
        assert cloaker.counters.gradients == 0

        encode(toy_autoencoder.encoder, natural_image)
        assert cloaker.counters.encoder == 1
        simulate_imitation(toy_autoencoder, natural_image, ImitationConfig(strength=0.2))
        assert cloaker.counters.encoder == 2
        assert cloaker.counters.backend == 1
    finally:
        cloaker.close()
    encode(toy_autoencoder.encoder, natural_image)
    assert cloaker.counters.encoder == 2


def test_counters_record_gradient_passes(fresh_checkpoint, natural_image):
    wm = fresh_checkpoint.watermarks[fresh_checkpoint.watermark_ids[0]]
    cloaker = Cloaker(fresh_checkpoint)
    try:
        with torch.enable_grad():
            out = cloaker.generator(image_to_tensor(natural_image), watermark_to_tensor(wm))
            out.sum().backward()
        assert cloaker.counters.generator == 1
        assert cloaker.counters.gradients == 1
    finally:
        cloaker.close()


def test_counters_observe_external_backend(trained_checkpoint, natural_image):
    backend = ExternalImitationBackend([sys.executable, "-c",
                                        "import shutil, sys; shutil.copyfile(sys.argv[1], sys.argv[2])"])
    cloaker = Cloaker(trained_checkpoint, backend=backend)
    try:
        adv = cloaker.cloak_image(natural_image, trained_checkpoint.watermark_ids[0]).adversarial
        assert cloaker.counters.backend == 0
        imitate(adv, ImitationConfig(strength=0.2), backend=backend)
        assert cloaker.counters.backend == 1
    finally:
        cloaker.close()
    imitate(natural_image, ImitationConfig(strength=0.2), backend=backend)
    assert cloaker.counters.backend == 1 and backend.calls == 2


def test_cloak_output_in_range(trained_checkpoint, natural_images):
    for img in natural_images:
        adv = cloak_image(trained_checkpoint, img, trained_checkpoint.watermark_ids[1]).adversarial
        assert adv.pixels.min() >= 0.0 and adv.pixels.max() <= 1.0
        assert adv.size == img.size


@pytest.mark.parametrize("bound", [2 / 255, 10 / 255])
def test_linf_bound_holds(trained_checkpoint, natural_image, bound):
    result = cloak_image(trained_checkpoint, natural_image, trained_checkpoint.watermark_ids[0], linf_bound=bound)
    assert np.abs(result.adversarial.pixels.astype(np.float64) - natural_image.pixels).max() <= bound + 1e-6


def test_unknown_watermark(trained_checkpoint, natural_image):
    with pytest.raises(WatermarkLookupError, match="nobody"):
        cloak_image(trained_checkpoint, natural_image, "nobody")
    with pytest.raises(KeyError):
        cloak_image(trained_checkpoint, natural_image, "nobody")


def test_cloak_is_deterministic(trained_checkpoint, natural_image):
    wid = trained_checkpoint.watermark_ids[0]
    a = cloak_image(trained_checkpoint, natural_image, wid).adversarial
    b = cloak_image(trained_checkpoint, natural_image, wid).adversarial
    assert np.array_equal(a.pixels, b.pixels)


def test_cloak_resizes_input(trained_checkpoint, rng):
    img = Image(rng.random((96, 80, 3)).astype(np.float32))
    adv = cloak_image(trained_checkpoint, img, trained_checkpoint.watermark_ids[0]).adversarial
    assert adv.size == trained_checkpoint.image_size


def test_cloak_batch_empty_directory(tmp_path, trained_checkpoint):
    (tmp_path / "in").mkdir()
    summary = cloak_batch(trained_checkpoint, tmp_path / "in", trained_checkpoint.watermark_ids[0], tmp_path / "out")
    assert summary.images == [] and summary.failures == []
    assert summary.mean_psnr is None
    assert summary.to_dict()["mean_psnr"] is None


def test_cloak_batch_continues_past_corrupt_file(tmp_path, trained_checkpoint, natural_images):
    src = tmp_path / "in"
    src.mkdir()
    for i, img in enumerate(natural_images[:5]):
        write_image(img, src / f"{i:03d}.png")
    (src / "999.png").write_bytes(b"corrupt")

    summary = cloak_batch(trained_checkpoint, src, trained_checkpoint.watermark_ids[0], tmp_path / "out")
    assert len(summary.images) == 5
    assert [f["name"] for f in summary.failures] == ["999.png"]
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == [f"{i:03d}.png" for i in range(5)]

    psnrs = [r["psnr"] for r in summary.images]
    assert summary.mean_psnr == pytest.approx(mean_psnr(psnrs))
    for r in summary.images:
        assert read_image(r["output"]).size == trained_checkpoint.image_size
        assert r["max_abs"] >= 0 and r["rms"] <= r["max_abs"] + 1e-9
    json.dumps(summary.to_dict())


def test_cloak_batch_unknown_watermark(tmp_path, trained_checkpoint):
    with pytest.raises(WatermarkLookupError):
        cloak_batch(trained_checkpoint, tmp_path, "nobody", tmp_path / "out")


def test_cloak_batch_identity_reports_identical(tmp_path, fresh_checkpoint, natural_images):
    zero_generator_head(fresh_checkpoint.generator)
    src = tmp_path / "in"
    src.mkdir()
    write_image(natural_images[0], src / "a.png")
    summary = cloak_batch(fresh_checkpoint, src, fresh_checkpoint.watermark_ids[0], tmp_path / "out")
    assert summary.to_dict()["mean_psnr"] == "identical"
    assert summary.to_dict()["identical_pairs"] == 1
