# wmcloak/core/config_manager.py
import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from wmcloak.core.defenses import DefenseConfig
from wmcloak.core.errors import ConfigError
from wmcloak.core.imagedata import RenderParams
from wmcloak.core.imitate import ImitationConfig
from wmcloak.core.losses import LossWeights, PerturbationBudget
from wmcloak.core.trainer import TrainConfig
from wmcloak.utils.seeding import derive_seed

RESOLVED_CONFIG_NAME = "resolved_config.json"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(StrictModel):
    root: Optional[str] = None
    mapping: Optional[str] = None
    split_per_class: int = Field(10, ge=0)
    width_fraction: float = Field(0.8, gt=0.0, le=1.0)
    placement: Literal["center", "top", "bottom", "tile"] = "center"


class TrainSection(StrictModel):
    batch_size: int = Field(8, gt=0)
    learning_rate: float = Field(0.001, gt=0.0)
    epochs: int = Field(200, gt=0)
    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(10.0, ge=0.0)
    c: float = Field(10 / 255, gt=0.0, le=1.0)
    w: float = Field(4.0, ge=0.0)
    image_size: List[int] = Field(default_factory=lambda: [512, 512], min_length=2, max_length=2)
    adam_betas: List[float] = Field(default_factory=lambda: [0.9, 0.999], min_length=2, max_length=2)
    encoder: str = "toy"          # "toy" or a directory of pretrained VAE weights
    encoder_seed: int = 0
    plot: bool = True

    @field_validator("image_size")
    @classmethod
    def _divisible(cls, value: List[int]) -> List[int]:
        if any(v <= 0 or v % 32 for v in value):
            raise ValueError("image_size entries must be positive multiples of 32")
        return value


class CloakSection(StrictModel):
    checkpoint: Optional[str] = None
    input_dir: Optional[str] = None
    watermark_id: Optional[str] = None
    linf_bound: Optional[float] = Field(None, gt=0.0, le=1.0)


class EvaluateSection(StrictModel):
    reference_dir: Optional[str] = None
    candidate_dir: Optional[str] = None
    watermark: Optional[str] = None  # mask PNG for NCC
    k: int = Field(3, ge=1)


class DefenseSection(StrictModel):
    kind: Literal["jpeg", "rs", "tvm"] = "jpeg"
    jpeg_quality: int = Field(75, ge=1, le=100)
    rs_sigma: float = Field(0.05, ge=0.0)
    tvm_lambda: float = Field(0.01, ge=0.0)
    tvm_iters: int = Field(30, ge=0)
    input_dir: Optional[str] = None


class ImitationSection(StrictModel):
    strength: float = Field(0.3, ge=0.0, le=1.0)
    prompt: Optional[str] = None
    backend: Optional[str] = None  # external adapter command; None uses the toy simulator
    input_dir: Optional[str] = None


class RenderSection(StrictModel):
    text: Optional[str] = None
    size: int = Field(512, gt=0)


class ExperimentSection(StrictModel):
    study: Literal["bounds", "samples", "defenses", "ablation", "strength"] = "bounds"
    classes: List[str] = Field(default_factory=lambda: ["van_gogh"], min_length=1)
    train_per_class: int = Field(10, gt=0)
    eval_per_class: int = Field(4, gt=0)


class RunConfig(StrictModel):
    seed: int = 0
    out: str = "runs/latest"
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    cloak: CloakSection = Field(default_factory=CloakSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    imitation: ImitationSection = Field(default_factory=ImitationSection)
    render: RenderSection = Field(default_factory=RenderSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.train.image_size[0]), int(self.train.image_size[1])

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(batch_size=t.batch_size, learning_rate=t.learning_rate, epochs=t.epochs,
                           weights=LossWeights(alpha=t.alpha, beta=t.beta),
                           budget=PerturbationBudget(c=t.c, w=t.w), seed=derive_seed(self.seed, "train"),
                           image_size=self.image_size, adam_betas=tuple(t.adam_betas))

    def render_params(self) -> RenderParams:
        return RenderParams(width_fraction=self.data.width_fraction, placement=self.data.placement)

    def defense_config(self) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(kind=d.kind, jpeg_quality=d.jpeg_quality, rs_sigma=d.rs_sigma,
                             tvm_lambda=d.tvm_lambda, tvm_iters=d.tvm_iters)

    def imitation_config(self) -> ImitationConfig:
        return ImitationConfig(strength=self.imitation.strength, seed=derive_seed(self.seed, "imitation"),
                               prompt=self.imitation.prompt)


# CLI flag → (section, key); None section means top level
FLAG_OVERRIDES: Dict[str, Tuple[Optional[str], str]] = {
    "seed": (None, "seed"),
    "out": (None, "out"),
    "log_level": (None, "log_level"),
    "alpha": ("train", "alpha"),
    "beta": ("train", "beta"),
    "c": ("train", "c"),
    "w": ("train", "w"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "learning_rate"),
    "image_size": ("train", "image_size"),
    "encoder": ("train", "encoder"),
    "data_root": ("data", "root"),
    "mapping": ("data", "mapping"),
    "split_per_class": ("data", "split_per_class"),
    "checkpoint": ("cloak", "checkpoint"),
    "watermark_id": ("cloak", "watermark_id"),
    "linf_bound": ("cloak", "linf_bound"),
    "reference_dir": ("evaluate", "reference_dir"),
    "candidate_dir": ("evaluate", "candidate_dir"),
    "watermark": ("evaluate", "watermark"),
    "k": ("evaluate", "k"),
    "kind": ("defense", "kind"),
    "jpeg_quality": ("defense", "jpeg_quality"),
    "rs_sigma": ("defense", "rs_sigma"),
    "tvm_lambda": ("defense", "tvm_lambda"),
    "tvm_iters": ("defense", "tvm_iters"),
    "strength": ("imitation", "strength"),
    "prompt": ("imitation", "prompt"),
    "backend": ("imitation", "backend"),
    "text": ("render", "text"),
    "size": ("render", "size"),
    "study": ("experiment", "study"),
}


class ConfigManager:
    """Layered run configuration: defaults < config file < CLI overrides"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path else None
        self.logger = logging.getLogger(__name__)
        self.default_settings = RunConfig().model_dump()
        self.load_configurations()

    def load_configurations(self):
        self.settings = copy.deepcopy(self.default_settings)
        if self.config_path is not None:
            _merge(self.settings, self.load_config_file(self.config_path))

    def load_config_file(self, file_path: Path) -> Dict[str, Any]:
        """Read a JSON (or YAML) config document"""
        if not file_path.exists():
            raise ConfigError(f"Config file not found: {file_path}", ["config"])
        try:
            with open(file_path, 'r') as file:
                if file_path.suffix.lower() in (".yaml", ".yml"):
                    data = yaml.safe_load(file) or {}
                else:
                    text = file.read()
                    data = json.loads(text) if text.strip() else {}
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot parse config {file_path}: {e}", ["config"]) from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {file_path} must be a mapping at the top level", ["config"])
        return data

    def update_setting(self, category: Optional[str], key: str, value: Any):
        """Override one setting; category None addresses top-level keys"""
        if category is None:
            self.settings[key] = value
            return
        section = self.settings.setdefault(category, {})
        if not isinstance(section, dict):
            raise ConfigError(f"Setting {category} is not a section", [category])
        section[key] = value

    def apply_overrides(self, overrides: Dict[str, Any]):
        """CLI flag values (None = not given) on top of the file values"""
        for flag, value in overrides.items():
            if value is None:
                continue
            if flag not in FLAG_OVERRIDES:
                raise ConfigError(f"Unknown override: {flag}", [flag])
            category, key = FLAG_OVERRIDES[flag]
            self.update_setting(category, key, value)

    def resolve(self) -> RunConfig:
        try:
            return RunConfig.model_validate(self.settings)
        except ValidationError as e:
            fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
            details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ConfigError(f"Invalid configuration: {details}", fields) from e

    def save_settings(self, config: RunConfig, out_dir: Union[str, Path]) -> Path:
        """Write the fully resolved config next to the run outputs"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_CONFIG_NAME
        with open(path, 'w') as file:
            json.dump(config.model_dump(), file, indent=4, sort_keys=True)
        self.logger.info(f"Resolved config: {json.dumps(config.model_dump(), sort_keys=True)}")
        return path


def _merge(base: Dict[str, Any], update: Dict[str, Any]):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validated RunConfig from an optional file plus CLI overrides"""
    manager = ConfigManager(path)
    manager.apply_overrides(overrides or {})
    return manager.resolve()
