# tests/test_trainer.py
import json

import pytest
import torch

from wmcloak.core.errors import CheckpointShapeError, IntegrityError, TrainingError
from wmcloak.core.imagedata import WatermarkPairDataset, build_dataset
from wmcloak.core.latent import encode
from wmcloak.core.losses import LossWeights, adversarial_loss
from wmcloak.core.networks import generator_forward
from wmcloak.core.synthetic import write_toy_dataset
from wmcloak.core.trainer import (GENERATOR_BLOB, MANIFEST_NAME, TrainConfig, WatermarkGANTrainer,
                                  load_checkpoint, save_checkpoint, train, train_step)
from wmcloak.utils.seeding import parameter_checksum

SIZE = (64, 64)


def _batch(toy_index, n=4):
    dataset = WatermarkPairDataset(toy_index, "train", SIZE)
    items = [dataset[i] for i in range(n)]
    x = torch.stack([i[0] for i in items])
    m = torch.stack([i[1] for i in items])
    labels = torch.tensor([i[2] for i in items])
    return dataset, (x, m, labels)


def _state(config, encoder, dataset):
    return WatermarkGANTrainer(config, encoder).init_state(dataset.watermark_ids, dataset.masks)


def test_train_step_updates_both_networks(tiny_config, toy_index, encoder):
    dataset, batch = _batch(toy_index)
    state = _state(tiny_config, encoder, dataset)
    g_before = parameter_checksum(state.generator)
    d_before = parameter_checksum(state.discriminator)
    enc_before = parameter_checksum(encoder)

    state = train_step(state, batch)

    assert parameter_checksum(state.generator) != g_before
    assert parameter_checksum(state.discriminator) != d_before
    assert parameter_checksum(encoder) == enc_before
    assert state.step == 1 and len(state.step_history) == 1
    record = state.step_history[0]
    assert record.total == pytest.approx(record.l_adv + 1.0 * record.l_gan + 10.0 * record.l_pert)
    assert record.l_disc > 0


def test_zero_weights_reduce_to_adversarial_objective(toy_index, encoder):
    config = TrainConfig(batch_size=4, epochs=1, image_size=SIZE, weights=LossWeights(0.0, 0.0))
    dataset, (x, m, labels) = _batch(toy_index)

    state = _state(config, encoder, dataset)
    reference = _state(config, encoder, dataset)
    reference.opt_g.zero_grad()
    pert = reference.generator(x, m)
    adversarial_loss(encoder, torch.clamp(x + pert, 0, 1), target_latent=reference.target_latents[labels]).backward()
    reference.opt_g.step()

    state = train_step(state, (x, m, labels))
    assert state.step_history[0].total == pytest.approx(state.step_history[0].l_adv)
    for p, q in zip(state.generator.parameters(), reference.generator.parameters()):
        assert torch.allclose(p, q, atol=1e-6)


def test_train_step_count_and_history(tmp_path, encoder, monkeypatch):
    write_toy_dataset(tmp_path / "data", ["van_gogh"], per_class=10, size=SIZE)
    index = build_dataset(tmp_path / "data", {}, split_per_class=10, image_size=SIZE)
    calls = []
    original = WatermarkGANTrainer.train_step

    def counting(self, state, x, m, labels):
        calls.append(x.shape[0])
        return original(self, state, x, m, labels)

    monkeypatch.setattr(WatermarkGANTrainer, "train_step", counting)
    cp = train(TrainConfig(batch_size=8, epochs=2, image_size=SIZE), index, encoder)
    assert calls == [8, 2, 8, 2]
    assert len(cp.loss_history) == 2
    assert [r.epoch for r in cp.loss_history] == [1, 2]
    assert cp.epoch == 2


def test_training_is_deterministic(tiny_config, toy_index, encoder, trained_checkpoint):
    again = train(tiny_config, toy_index, encoder)
    assert parameter_checksum(again.generator) == parameter_checksum(trained_checkpoint.generator)
    assert [r.total for r in again.loss_history] == [r.total for r in trained_checkpoint.loss_history]


def test_training_writes_jsonl_log(tmp_path, tiny_config, toy_index, encoder):
    log_path = tmp_path / "train_log.jsonl"
    train(tiny_config, toy_index, encoder, log_path=log_path)
    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [line["epoch"] for line in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "l_adv", "l_gan", "l_pert", "total", "l_disc"}


def test_training_rejects_empty_train_split(tmp_path, tiny_config, encoder):
    write_toy_dataset(tmp_path, ["a"], per_class=2, size=SIZE)
    index = build_dataset(tmp_path, {}, split_per_class=0, image_size=SIZE)
    with pytest.raises(ValueError):
        train(tiny_config, index, encoder)


def test_checkpoint_roundtrip_is_bit_identical(tmp_path, trained_checkpoint, natural_image, watermark):
    save_checkpoint(trained_checkpoint, tmp_path / "cp")
    loaded = load_checkpoint(tmp_path / "cp")
    assert parameter_checksum(loaded.generator) == parameter_checksum(trained_checkpoint.generator)
    assert parameter_checksum(loaded.discriminator) == parameter_checksum(trained_checkpoint.discriminator)
    assert loaded.watermark_ids == trained_checkpoint.watermark_ids
    assert loaded.config_digest == trained_checkpoint.config_digest
    assert len(loaded.loss_history) == 2
    trained_checkpoint.generator.eval()
    with torch.no_grad():
        a = generator_forward(trained_checkpoint.generator, natural_image, watermark)
        b = generator_forward(loaded.generator, natural_image, watermark)
    assert torch.equal(a, b)


def test_checkpoint_tampered_manifest(tmp_path, trained_checkpoint):
    save_checkpoint(trained_checkpoint, tmp_path / "cp")
    manifest_path = tmp_path / "cp" / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text())
    manifest["config"]["learning_rate"] = 0.5
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "cp")


def test_checkpoint_tampered_blob(tmp_path, trained_checkpoint):
    save_checkpoint(trained_checkpoint, tmp_path / "cp")
    blob = tmp_path / "cp" / GENERATOR_BLOB
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "cp")


def test_checkpoint_other_resolution(tmp_path, trained_checkpoint):
    save_checkpoint(trained_checkpoint, tmp_path / "cp")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "cp", image_size=(128, 128))
    assert load_checkpoint(tmp_path / "cp", image_size=SIZE).image_size == SIZE


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nowhere")


def test_non_finite_loss_raises(monkeypatch, tiny_config, toy_index, encoder):
    dataset, batch = _batch(toy_index)
    state = _state(tiny_config, encoder, dataset)
    monkeypatch.setattr("wmcloak.core.trainer.adversarial_loss",
                        lambda *args, **kwargs: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingError) as info:
        train_step(state, batch)
    assert info.value.loss_name == "adversarial"


def test_target_latents_cached_per_watermark(tiny_config, toy_index, encoder):
    dataset = WatermarkPairDataset(toy_index, "train", SIZE)
    state = _state(tiny_config, encoder, dataset)
    assert state.target_latents.shape == (2, 4, 8, 8)
    for i, wid in enumerate(dataset.watermark_ids):
        assert torch.allclose(state.target_latents[i], encode(encoder, toy_index.watermarks[wid])[0], atol=1e-6)


def test_one_generator_serves_all_watermarks(trained_checkpoint, natural_image):
    ids = trained_checkpoint.watermark_ids
    assert len(ids) == 2
    with torch.no_grad():
        outputs = [generator_forward(trained_checkpoint.generator.eval(), natural_image,
                                     trained_checkpoint.watermarks[w]) for w in ids]
    assert not torch.equal(outputs[0], outputs[1])


def test_config_roundtrip():
    config = TrainConfig(batch_size=2, epochs=3, image_size=(32, 64), weights=LossWeights(0.5, 2.0))
    again = TrainConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again == config
    assert again.digest() == config.digest()


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"epochs": 0}, {"learning_rate": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(image_size=SIZE, **kwargs)
