# wmcloak/core/trainer.py
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from wmcloak.core.errors import CheckpointShapeError, IntegrityError, ShapeError, TrainingError
from wmcloak.core.imagedata import DatasetIndex, RenderParams, Watermark, WatermarkPairDataset
from wmcloak.core.latent import LatentCache, LatentEncoder
from wmcloak.core.losses import (LossWeights, PerturbationBudget, adversarial_loss, discriminator_loss,
                                 generator_gan_loss, perturbation_loss, total_generator_objective)
from wmcloak.core.networks import DOWNSAMPLING, Discriminator, Generator, init_networks
from wmcloak.utils.seeding import canonical_json, config_digest, derive_seed, torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
MANIFEST_NAME = "manifest.json"
GENERATOR_BLOB = "generator.pt"
DISCRIMINATOR_BLOB = "discriminator.pt"
WATERMARK_BLOB = "watermarks.npz"


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.001
    epochs: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    seed: int = 0
    image_size: Tuple[int, int] = (512, 512)
    adam_betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.adam_betas = (float(self.adam_betas[0]), float(self.adam_betas[1]))
        if self.batch_size <= 0 or self.epochs <= 0 or not self.learning_rate > 0:
            raise ValueError("batch_size, epochs and learning_rate must be positive")
        if self.image_size[0] % DOWNSAMPLING or self.image_size[1] % DOWNSAMPLING:
            raise ShapeError(f"image_size must be divisible by {DOWNSAMPLING}, got {self.image_size}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["image_size"] = list(self.image_size)
        data["adam_betas"] = list(self.adam_betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        data["weights"] = LossWeights(**data.get("weights", {}))
        data["budget"] = PerturbationBudget(**data.get("budget", {}))
        return cls(**data)

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class StepRecord:
    l_adv: float
    l_gan: float
    l_pert: float
    total: float
    l_disc: float


@dataclass
class EpochRecord:
    epoch: int
    l_adv: float
    l_gan: float
    l_pert: float
    total: float
    l_disc: float


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: TrainConfig
    encoder: LatentEncoder
    target_latents: torch.Tensor  # one ε(m) per watermark index
    epoch: int = 0
    step: int = 0
    step_history: List[StepRecord] = field(default_factory=list)


@dataclass
class Checkpoint:
    generator: Generator
    discriminator: Discriminator
    epoch: int
    config: TrainConfig
    config_digest: str
    watermark_ids: List[str]
    watermarks: Dict[str, Watermark]
    loss_history: List[EpochRecord] = field(default_factory=list)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.config.image_size


def set_requires_grad(module: torch.nn.Module, requires_grad: bool):
    for p in module.parameters():
        p.requires_grad_(requires_grad)


def _finite(name: str, value: torch.Tensor) -> float:
    scalar = float(value.detach())
    if not math.isfinite(scalar):
        raise TrainingError(name, scalar)
    return scalar


class WatermarkGANTrainer:
    """
    Minimax training of G and D against a frozen latent encoder.

    Each batch runs one discriminator update (adversarial examples detached
    from G) followed by one generator update on l_adv + α·l_gan + β·l_pert.
    """

    def __init__(self, config: TrainConfig, encoder: LatentEncoder,
                 log_path: Optional[Union[str, Path]] = None, progress: bool = False):
        self.config = config
        self.encoder = encoder.freeze()
        self.log_path = Path(log_path) if log_path else None
        self.progress = progress
        self.logger = logging.getLogger(__name__)

    def init_state(self, watermark_ids: List[str], masks: torch.Tensor) -> TrainState:
        """Fresh networks, optimizers and cached ε(m) targets (masks: K×1×H×W)"""
        cfg = self.config
        generator, discriminator = init_networks(derive_seed(cfg.seed, "init"), cfg.image_size)
        opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
        cache = LatentCache(self.encoder)
        targets = torch.cat([cache.get(wid, masks[i:i + 1]) for i, wid in enumerate(watermark_ids)])
        return TrainState(generator=generator, discriminator=discriminator, opt_g=opt_g, opt_d=opt_d,
                          config=cfg, encoder=self.encoder, target_latents=targets)

    def train_step(self, state: TrainState, x: torch.Tensor, m: torch.Tensor,
                   labels: torch.Tensor) -> TrainState:
        cfg = state.config
        if tuple(x.shape[-2:]) != cfg.image_size or tuple(m.shape[-2:]) != cfg.image_size:
            raise ShapeError(f"Batch {tuple(x.shape)} / {tuple(m.shape)} does not match image_size {cfg.image_size}")
        G, D = state.generator, state.discriminator
        G.train()
        D.train()

        pert = G(x, m)
        x_adv = torch.clamp(x + pert, 0.0, 1.0)

        # discriminator: maximise the value function on (x, x′)
        set_requires_grad(D, True)
        state.opt_d.zero_grad(set_to_none=True)
        l_disc = discriminator_loss(D(x), D(x_adv.detach()))
        l_disc_value = _finite("discriminator", l_disc)
        l_disc.backward()
        state.opt_d.step()

        # generator
        set_requires_grad(D, False)
        state.opt_g.zero_grad(set_to_none=True)
        l_gan = generator_gan_loss(D(x_adv))
        l_pert = perturbation_loss(pert, m, cfg.budget)
        l_adv = adversarial_loss(state.encoder, x_adv, target_latent=state.target_latents[labels])
        total = total_generator_objective(l_adv, l_gan, l_pert, cfg.weights)

        values = {name: _finite(name, value) for name, value in
                  (("adversarial", l_adv), ("gan", l_gan), ("perturbation", l_pert), ("total", total))}
        total.backward()
        state.opt_g.step()
        set_requires_grad(D, True)

        state.step += 1
        state.step_history.append(StepRecord(
            l_adv=values["adversarial"], l_gan=values["gan"], l_pert=values["perturbation"],
            total=values["adversarial"] + cfg.weights.alpha * values["gan"] + cfg.weights.beta * values["perturbation"],
            l_disc=l_disc_value))
        return state

    def _check_data(self, data: DatasetIndex):
        if not data.train_entries:
            raise ValueError("Dataset has no training entries")
        for wid, wm in data.watermarks.items():
            if wm.size != self.config.image_size:
                raise ShapeError(f"Watermark {wid} rendered at {wm.size}, expected {self.config.image_size}")

    def _log_epoch(self, record: EpochRecord):
        self.logger.info(f"Epoch {record.epoch}: adv={record.l_adv:.4f} gan={record.l_gan:.4f} "
                         f"pert={record.l_pert:.4f} total={record.total:.4f} disc={record.l_disc:.4f}")
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, 'a') as file:
                file.write(json.dumps(asdict(record)) + "\n")

    def train(self, data: DatasetIndex) -> Checkpoint:
        """Full training run; deterministic given config.seed"""
        cfg = self.config
        self._check_data(data)
        torch.manual_seed(derive_seed(cfg.seed, "torch"))

        dataset = WatermarkPairDataset(data, "train", cfg.image_size)
        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True,
                            generator=torch_generator(derive_seed(cfg.seed, "shuffle")))
        state = self.init_state(dataset.watermark_ids, dataset.masks)
        history: List[EpochRecord] = []
        self.logger.info(f"Training on {len(dataset)} images, {len(loader)} batches/epoch, "
                         f"{cfg.epochs} epochs, watermarks {dataset.watermark_ids}")

        for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=not self.progress):
            start = len(state.step_history)
            for x, m, labels in loader:
                self.train_step(state, x, m, labels)
            steps = state.step_history[start:]
            record = EpochRecord(epoch=epoch, **{
                key: float(np.mean([getattr(s, key) for s in steps]))
                for key in ("l_adv", "l_gan", "l_pert", "total", "l_disc")})
            state.epoch = epoch
            history.append(record)
            self._log_epoch(record)

        return Checkpoint(generator=state.generator, discriminator=state.discriminator, epoch=state.epoch,
                          config=cfg, config_digest=cfg.digest(), watermark_ids=dataset.watermark_ids,
                          watermarks={w: data.watermarks[w] for w in dataset.watermark_ids},
                          loss_history=history)


def train_step(state: TrainState, batch) -> TrainState:
    """One D-then-G update on a batch of (x, m, watermark index)"""
    x, m, labels = batch
    trainer = WatermarkGANTrainer(state.config, state.encoder)
    return trainer.train_step(state, x, m, labels)


def train(config: TrainConfig, data: DatasetIndex, enc: LatentEncoder,
          log_path: Optional[Union[str, Path]] = None, progress: bool = False) -> Checkpoint:
    return WatermarkGANTrainer(config, enc, log_path=log_path, progress=progress).train(data)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest_integrity(manifest: Dict[str, Any]) -> str:
    body = {k: v for k, v in manifest.items() if k != "integrity"}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def save_checkpoint(cp: Checkpoint, path: Union[str, Path]):
    """Directory with manifest.json plus one weights blob per network"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(cp.generator.state_dict(), path / GENERATOR_BLOB)
    torch.save(cp.discriminator.state_dict(), path / DISCRIMINATOR_BLOB)
    np.savez(path / WATERMARK_BLOB, **{wid: cp.watermarks[wid].mask for wid in cp.watermark_ids})

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": cp.epoch,
        "image_size": list(cp.image_size),
        "config": cp.config.to_dict(),
        "config_digest": cp.config_digest,
        "watermark_ids": list(cp.watermark_ids),
        "watermarks": {wid: {"text": cp.watermarks[wid].text,
                             "render_params": asdict(cp.watermarks[wid].render_params)}
                       for wid in cp.watermark_ids},
        "loss_history": [asdict(r) for r in cp.loss_history],
        "optimizer": {"name": "adam", "betas": list(cp.config.adam_betas),
                      "learning_rate": cp.config.learning_rate},
        "files": {name: _sha256_file(path / name)
                  for name in (GENERATOR_BLOB, DISCRIMINATOR_BLOB, WATERMARK_BLOB)},
    }
    manifest["integrity"] = _manifest_integrity(manifest)
    with open(path / MANIFEST_NAME, 'w') as file:
        json.dump(manifest, file, indent=4)
    logger.info(f"Checkpoint saved to {path} (epoch {cp.epoch})")


def load_checkpoint(path: Union[str, Path], image_size: Optional[Tuple[int, int]] = None) -> Checkpoint:
    """Load and verify a checkpoint; image_size guards against use at another resolution"""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(manifest_path, 'r') as file:
        manifest = json.load(file)

    if manifest.get("integrity") != _manifest_integrity(manifest):
        raise IntegrityError(f"Checkpoint manifest {manifest_path} has been modified")
    config = TrainConfig.from_dict(manifest["config"])
    if config.digest() != manifest["config_digest"]:
        raise IntegrityError(f"Config digest mismatch in {manifest_path}")
    for name, digest in manifest["files"].items():
        if _sha256_file(path / name) != digest:
            raise IntegrityError(f"Weights blob {name} does not match its digest")

    stored_size = tuple(manifest["image_size"])
    if image_size is not None and tuple(image_size) != stored_size:
        raise CheckpointShapeError(f"Checkpoint trained at {stored_size}, requested {tuple(image_size)}")

    generator = Generator()
    discriminator = Discriminator(stored_size)
    try:
        generator.load_state_dict(torch.load(path / GENERATOR_BLOB, map_location="cpu", weights_only=True))
        discriminator.load_state_dict(torch.load(path / DISCRIMINATOR_BLOB, map_location="cpu", weights_only=True))
    except RuntimeError as e:
        raise CheckpointShapeError(f"Checkpoint weights do not fit the architecture: {e}") from e
    generator.eval()
    discriminator.eval()

    masks = np.load(path / WATERMARK_BLOB)
    watermarks = {
        wid: Watermark(mask=masks[wid], text=meta["text"], render_params=RenderParams(**meta["render_params"]))
        for wid, meta in manifest["watermarks"].items()}
    history = [EpochRecord(**r) for r in manifest["loss_history"]]
    return Checkpoint(generator=generator, discriminator=discriminator, epoch=manifest["epoch"],
                      config=config, config_digest=manifest["config_digest"],
                      watermark_ids=list(manifest["watermark_ids"]), watermarks=watermarks,
                      loss_history=history)
