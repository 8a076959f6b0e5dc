# wmcloak/core/experiments.py
import logging
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from wmcloak.core.cloak import Cloaker, EvaluationCounters
from wmcloak.core.defenses import DEFENSE_KINDS, DefenseConfig, apply_defense
from wmcloak.core.errors import WMCloakError
from wmcloak.core.imagedata import DatasetIndex, Image, build_dataset, load_mapping, read_image
from wmcloak.core.imitate import ImitationConfig, ToyAutoencoder, watermark_visibility
from wmcloak.core.losses import LossWeights, PerturbationBudget
from wmcloak.core.metrics import mean_psnr, psnr, ssim
from wmcloak.core.synthetic import write_toy_dataset
from wmcloak.core.trainer import Checkpoint, TrainConfig, train
from wmcloak.utils.plotting import plot_sweep
from wmcloak.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_BOUNDS = tuple(v / 255 for v in (2, 6, 10, 15, 20))
ABLATION_ROWS = (
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 10.0, 0.0),
    (0.0, 10.0, 4.0),
    (1.0, 10.0, 4.0),
)


@dataclass
class ExperimentSetup:
    """Desk-scale study setup: synthetic classes, toy encoder and toy imitation"""
    classes: Tuple[str, ...] = ("van_gogh",)
    train_per_class: int = 10
    eval_per_class: int = 4
    image_size: Tuple[int, int] = (64, 64)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(image_size=(64, 64)))
    strength: float = 0.3
    seed: int = 0
    encoder_seed: int = 0
    data_root: Optional[str] = None
    mapping: Optional[str] = None


@dataclass
class RunOutcome:
    checkpoint: Checkpoint
    originals: Dict[str, List[Image]]
    cloaked: Dict[str, List[Image]]
    counters: EvaluationCounters = field(default_factory=EvaluationCounters)


class ExperimentRunner:
    """Trains toy generators and scores them end to end through the imitation simulator"""

    def __init__(self, setup: ExperimentSetup, enc_dec: Optional[ToyAutoencoder] = None):
        self.setup = setup
        self.logger = logging.getLogger(__name__)
        self.enc_dec = enc_dec if enc_dec is not None else ToyAutoencoder.build(setup.encoder_seed)
        self._tmp = None
        self.index = self._load_index()

    def _load_index(self) -> DatasetIndex:
        s = self.setup
        if s.data_root:
            # user data is read only
            root = Path(s.data_root)
            mapping = Path(s.mapping) if s.mapping else root / "mapping.json"
            if not mapping.exists():
                raise WMCloakError(f"Dataset mapping not found: {mapping} (pass --mapping)")
        else:
            self._tmp = tempfile.TemporaryDirectory(prefix="wmcloak-exp-")
            root = Path(self._tmp.name)
            mapping = root / "mapping.json"
            write_toy_dataset(root, s.classes, s.train_per_class + s.eval_per_class, s.image_size,
                              derive_seed(s.seed, "data"))
        self.logger.info(f"Indexing experiment data under {root}")
        return build_dataset(root, load_mapping(mapping), s.train_per_class, s.image_size)

    def close(self):
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def subset(self, train_count: int) -> DatasetIndex:
        """First train_count training images per class; eval split unchanged"""
        entries = []
        for wid in self.index.watermark_ids:
            entries += [e for e in self.index.train_entries if e.watermark_id == wid][:train_count]
        return DatasetIndex(entries=entries + self.index.eval_entries, watermarks=self.index.watermarks)

    def run(self, config: TrainConfig, data: Optional[DatasetIndex] = None,
            linf_bound: Optional[float] = None) -> RunOutcome:
        data = data or self.index
        cp = train(config, data, self.enc_dec.encoder)
        originals: Dict[str, List[Image]] = {}
        cloaked: Dict[str, List[Image]] = {}
        cloaker = Cloaker(cp, encoder=self.enc_dec.encoder, backend=self.enc_dec)
        try:
            for entry in data.eval_entries:
                x = read_image(entry.image_path, config.image_size)
                originals.setdefault(entry.watermark_id, []).append(x)
                cloaked.setdefault(entry.watermark_id, []).append(
                    cloaker.cloak_image(x, entry.watermark_id, linf_bound).adversarial)
        finally:
            cloaker.close()
        self.logger.debug(f"Cloaking evaluations: {cloaker.counters}")
        return RunOutcome(checkpoint=cp, originals=originals, cloaked=cloaked, counters=cloaker.counters)

    def score(self, outcome: RunOutcome, strength: Optional[float] = None) -> Dict[str, float]:
        """Mean PSNR/SSIM of adversarial examples and mean end-to-end NCC"""
        cfg = ImitationConfig(strength=self.setup.strength if strength is None else strength,
                              seed=derive_seed(self.setup.seed, "imitation"))
        psnrs, ssims, nccs = [], [], []
        for wid, originals in outcome.originals.items():
            cloaked = outcome.cloaked[wid]
            psnrs += [psnr(x, xa) for x, xa in zip(originals, cloaked)]
            ssims += [ssim(x, xa) for x, xa in zip(originals, cloaked)]
            nccs.append(watermark_visibility(self.enc_dec, originals, cloaked,
                                             outcome.checkpoint.watermarks[wid], cfg))
        return {"psnr": mean_psnr(psnrs), "ssim": float(np.mean(ssims)), "ncc": float(np.mean(nccs))}


def _runner(setup: ExperimentSetup, runner: Optional[ExperimentRunner]) -> ExperimentRunner:
    return runner if runner is not None else ExperimentRunner(setup)


def bound_sweep(setup: ExperimentSetup, bounds: Sequence[float] = DEFAULT_BOUNDS,
                runner: Optional[ExperimentRunner] = None) -> pd.DataFrame:
    """Adversarial-example PSNR and imitation NCC per perturbation bound c"""
    runner = _runner(setup, runner)
    rows = []
    for c in bounds:
        config = replace(setup.train, budget=replace(setup.train.budget, c=float(c)))
        row = {"c": float(c), "bound_255": round(float(c) * 255, 3), **runner.score(runner.run(config))}
        logger.info(f"bound {row['bound_255']}/255: psnr={row['psnr']:.2f} ncc={row['ncc']:.3f}")
        rows.append(row)
    return pd.DataFrame(rows)


def sample_count_sweep(setup: ExperimentSetup, counts: Sequence[int] = (1, 10),
                       runner: Optional[ExperimentRunner] = None) -> pd.DataFrame:
    """Imitation NCC per number of training samples for each watermark"""
    runner = _runner(setup, runner)
    rows = []
    for n in counts:
        outcome = runner.run(setup.train, runner.subset(int(n)))
        rows.append({"samples": int(n), **runner.score(outcome)})
        logger.info(f"{n} samples: ncc={rows[-1]['ncc']:.3f}")
    return pd.DataFrame(rows)


def defense_study(setup: ExperimentSetup, runner: Optional[ExperimentRunner] = None,
                  outcome: Optional[RunOutcome] = None,
                  defenses: Optional[Dict[str, DefenseConfig]] = None) -> pd.DataFrame:
    """Imitation NCC for no-attack / attack inputs under each purification"""
    runner = _runner(setup, runner)
    outcome = outcome or runner.run(setup.train)
    defenses = defenses if defenses is not None else {kind: DefenseConfig(kind=kind) for kind in DEFENSE_KINDS}
    cfg = ImitationConfig(strength=setup.strength, seed=derive_seed(setup.seed, "imitation"))
    rows = []
    for name, defense in [("none", None)] + list(defenses.items()):
        def purify(images: List[Image]) -> List[Image]:
            if defense is None:
                return images
            return [apply_defense(x, defense, derive_seed(setup.seed, f"defense/{name}/{i}"))
                    for i, x in enumerate(images)]

        for condition in ("no attack", "attack"):
            nccs = []
            for wid, originals in outcome.originals.items():
                source = originals if condition == "no attack" else outcome.cloaked[wid]
                nccs.append(watermark_visibility(runner.enc_dec, originals, purify(source),
                                                 outcome.checkpoint.watermarks[wid], cfg))
            rows.append({"condition": condition, "defense": name, "ncc": float(np.mean(nccs))})
    return pd.DataFrame(rows)


def ablation_study(setup: ExperimentSetup, rows: Sequence[Tuple[float, float, float]] = ABLATION_ROWS,
                   runner: Optional[ExperimentRunner] = None) -> pd.DataFrame:
    """Quality and attack strength with the GAN loss, perturbation loss and region weight switched off"""
    runner = _runner(setup, runner)
    results = []
    for alpha, beta, w in rows:
        config = replace(setup.train, weights=LossWeights(alpha=alpha, beta=beta),
                         budget=PerturbationBudget(c=setup.train.budget.c, w=w))
        results.append({"alpha": alpha, "beta": beta, "w": w, **runner.score(runner.run(config))})
    return pd.DataFrame(results)


def strength_study(setup: ExperimentSetup, strengths: Sequence[float] = (0.1, 0.2, 0.3, 0.4),
                   runner: Optional[ExperimentRunner] = None,
                   outcome: Optional[RunOutcome] = None) -> pd.DataFrame:
    """Imitation NCC per strength for one trained generator"""
    runner = _runner(setup, runner)
    outcome = outcome or runner.run(setup.train)
    rows = [{"strength": float(s), **runner.score(outcome, strength=float(s))} for s in strengths]
    return pd.DataFrame(rows)


STUDIES = {
    "bounds": bound_sweep,
    "samples": sample_count_sweep,
    "defenses": defense_study,
    "ablation": ablation_study,
    "strength": strength_study,
}


def run_study(name: str, setup: ExperimentSetup, out_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Run one named study; writes <name>.csv (and a plot for sweeps) into out_dir"""
    if name not in STUDIES:
        raise ValueError(f"Unknown study '{name}', expected one of {sorted(STUDIES)}")
    runner = ExperimentRunner(setup)
    try:
        frame = STUDIES[name](setup, runner=runner)
    finally:
        runner.close()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / f"{name}.csv", index=False)
        sweep_axis = {"bounds": "bound_255", "samples": "samples", "strength": "strength"}.get(name)
        if sweep_axis:
            plot_sweep(frame, sweep_axis, [c for c in ("psnr", "ncc") if c in frame], out_dir / f"{name}.png", name)
    return frame
