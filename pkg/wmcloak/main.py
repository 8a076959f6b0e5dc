# wmcloak/main.py
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from wmcloak.core.cloak import cloak_batch
from wmcloak.core.config_manager import ConfigManager, RunConfig
from wmcloak.core.defenses import apply_defense
from wmcloak.core.errors import WMCloakError
from wmcloak.core.experiments import ExperimentSetup, run_study
from wmcloak.core.imagedata import (IMAGE_EXTENSIONS, build_dataset, load_mapping, load_watermark, read_image,
                                    render_watermark, save_watermark, write_image)
from wmcloak.core.imitate import ExternalImitationBackend, ToyAutoencoder, imitate
from wmcloak.core.latent import load_encoder
from wmcloak.core.metrics import evaluate_directories
from wmcloak.core.trainer import load_checkpoint, save_checkpoint, train
from wmcloak.utils.logger import setup_logging
from wmcloak.utils.plotting import plot_comparison, plot_loss_curves
from wmcloak.utils.seeding import derive_seed

VERBS = ("render-watermark", "train", "cloak", "evaluate", "defend", "simulate", "experiment")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--json", action="store_true", help="print a machine-readable result on stdout")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="wmcloak", description="Watermark-embedding adversarial cloaking toolkit")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("render-watermark", parents=[common], help="render a text watermark mask")
    p.add_argument("--text")
    p.add_argument("--size", type=int)

    p = verbs.add_parser("train", parents=[common], help="train a cloaking generator")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--mapping")
    p.add_argument("--split-per-class", dest="split_per_class", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--c", type=float, help="perturbation bound in [0,1] pixel units")
    p.add_argument("--w", type=float, help="watermark-region weight")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--encoder", help="'toy' or a directory of pretrained VAE weights")

    p = verbs.add_parser("cloak", parents=[common], help="cloak a directory of images")
    p.add_argument("--checkpoint")
    p.add_argument("--input", dest="cloak_input")
    p.add_argument("--watermark-id", dest="watermark_id")
    p.add_argument("--linf-bound", dest="linf_bound", type=float)

    p = verbs.add_parser("evaluate", parents=[common], help="compare two image directories")
    p.add_argument("--reference", dest="reference_dir")
    p.add_argument("--candidate", dest="candidate_dir")
    p.add_argument("--watermark", help="watermark mask PNG for NCC")
    p.add_argument("--k", type=int)

    p = verbs.add_parser("defend", parents=[common], help="apply a purification defense")
    p.add_argument("--input", dest="defense_input")
    p.add_argument("--kind", choices=["jpeg", "rs", "tvm"])
    p.add_argument("--jpeg-quality", dest="jpeg_quality", type=int)
    p.add_argument("--rs-sigma", dest="rs_sigma", type=float)
    p.add_argument("--tvm-lambda", dest="tvm_lambda", type=float)
    p.add_argument("--tvm-iters", dest="tvm_iters", type=int)

    p = verbs.add_parser("simulate", parents=[common], help="run an imitation backend")
    p.add_argument("--input", dest="imitation_input")
    p.add_argument("--strength", type=float)
    p.add_argument("--prompt")
    p.add_argument("--backend", help="external adapter command")

    p = verbs.add_parser("experiment", parents=[common], help="run a desk-scale study")
    p.add_argument("--study", choices=["bounds", "samples", "defenses", "ablation", "strength"])
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--mapping")
    p.add_argument("--epochs", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"verb", "config", "json", "cloak_input", "defense_input", "imitation_input"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    if overrides.get("image_size") is not None:
        overrides["image_size"] = [overrides["image_size"], overrides["image_size"]]
    return overrides


def _list_images(directory: Optional[str], what: str) -> List[Path]:
    if not directory:
        raise WMCloakError(f"No {what} input directory given")
    path = Path(directory)
    if not path.is_dir():
        raise WMCloakError(f"{what.capitalize()} input directory not found: {path}")
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


class WMCloakTool:
    """Verb dispatcher; each handler returns a JSON-serialisable result"""

    def __init__(self, argv: Optional[List[str]] = None):
        self.args = build_parser().parse_args(argv)
        self.logger = logging.getLogger(__name__)
        self.config: Optional[RunConfig] = None

    def setup(self) -> RunConfig:
        args = self.args
        manager = ConfigManager(args.config)
        manager.apply_overrides(_overrides(args))
        for flag, (section, key) in (("cloak_input", ("cloak", "input_dir")),
                                     ("defense_input", ("defense", "input_dir")),
                                     ("imitation_input", ("imitation", "input_dir"))):
            if getattr(args, flag, None):
                manager.update_setting(section, key, getattr(args, flag))
        config = manager.resolve()
        setup_logging(config.out, config.log_level)
        manager.save_settings(config, config.out)
        return config

    def run(self) -> int:
        args = self.args
        try:
            self.config = self.setup()
            handler = getattr(self, "verb_" + args.verb.replace("-", "_"))
            result = handler(self.config)
            self.logger.info(f"{args.verb} completed successfully")
            self.emit("ok", result)
            return 0
        except Exception as e:
            self.logger.error(f"{args.verb} failed: {e}")
            self.emit("error", {"error": str(e), "type": type(e).__name__})
            return 1

    def emit(self, status: str, result: Any):
        if self.args.json:
            print(json.dumps({"verb": self.args.verb, "status": status, "result": result},
                             sort_keys=True, default=str))

    def verb_render_watermark(self, config: RunConfig) -> Dict[str, Any]:
        if not config.render.text:
            raise WMCloakError("render-watermark needs --text")
        size = (config.render.size, config.render.size)
        wm = render_watermark(config.render.text, size, config.render_params())
        path = Path(config.out) / f"{config.render.text}.png"
        save_watermark(wm, path)
        self.logger.info(f"Watermark {config.render.text} written to {path}")
        return {"path": str(path), "text": wm.text, "size": list(size), "coverage": float(wm.mask.mean())}

    def verb_train(self, config: RunConfig) -> Dict[str, Any]:
        if not config.data.root:
            raise WMCloakError("train needs a dataset root (--data-root)")
        mapping_path = Path(config.data.mapping) if config.data.mapping else Path(config.data.root) / "mapping.json"
        mapping = load_mapping(mapping_path) if mapping_path.exists() else {}
        train_config = config.train_config()
        index = build_dataset(config.data.root, mapping, config.data.split_per_class,
                              train_config.image_size, config.render_params())
        encoder = load_encoder(config.train.encoder, config.train.encoder_seed)

        out = Path(config.out)
        cp = train(train_config, index, encoder, log_path=out / "train_log.jsonl", progress=not self.args.json)
        save_checkpoint(cp, out / "checkpoint")
        if config.train.plot:
            plot_loss_curves(cp.loss_history, out / "loss_curves.png")
        final = cp.loss_history[-1]
        return {"checkpoint": str(out / "checkpoint"), "epochs": cp.epoch, "watermark_ids": cp.watermark_ids,
                "config_digest": cp.config_digest,
                "final": {"l_adv": final.l_adv, "l_gan": final.l_gan, "l_pert": final.l_pert, "total": final.total}}

    def verb_cloak(self, config: RunConfig) -> Dict[str, Any]:
        if not config.cloak.checkpoint:
            raise WMCloakError("cloak needs a checkpoint (--checkpoint)")
        try:
            cp = load_checkpoint(config.cloak.checkpoint)
        except FileNotFoundError as e:
            raise WMCloakError(f"Cannot load checkpoint {config.cloak.checkpoint}: {e}") from e
        watermark_id = config.cloak.watermark_id
        if watermark_id is None:
            if len(cp.watermark_ids) != 1:
                raise WMCloakError(f"Checkpoint has several watermarks {cp.watermark_ids}; pass --watermark-id")
            watermark_id = cp.watermark_ids[0]
        if not config.cloak.input_dir:
            raise WMCloakError("cloak needs an input directory (--input)")
        out = Path(config.out)
        summary = cloak_batch(cp, config.cloak.input_dir, watermark_id, out / "cloaked", config.cloak.linf_bound)
        result = summary.to_dict()
        with open(out / "cloak_summary.json", 'w') as file:
            json.dump(result, file, indent=4, sort_keys=True)
        if summary.images:
            first = summary.images[0]
            original = read_image(Path(config.cloak.input_dir) / first["name"], cp.image_size)
            plot_comparison(original.pixels, read_image(first["output"]).pixels, out / "comparison.png")
        return result

    def verb_evaluate(self, config: RunConfig) -> Dict[str, Any]:
        ev = config.evaluate
        if not ev.reference_dir or not ev.candidate_dir:
            raise WMCloakError("evaluate needs --reference and --candidate directories")
        watermark = None
        if ev.watermark:
            reference_size = read_image(_list_images(ev.reference_dir, "reference")[0]).size
            watermark = load_watermark(ev.watermark, size=reference_size)
        report = evaluate_directories(ev.reference_dir, ev.candidate_dir, watermark, k=ev.k)
        report.to_json(Path(config.out) / "metrics.json")
        if not self.args.json:
            print(report.to_table())
        return report.to_dict()

    def verb_defend(self, config: RunConfig) -> Dict[str, Any]:
        cfg = config.defense_config()
        out_dir = Path(config.out) / "defended"
        written = []
        for path in _list_images(config.defense.input_dir, "defense"):
            defended = apply_defense(read_image(path), cfg, derive_seed(config.seed, f"defense/{path.name}"))
            write_image(defended, out_dir / f"{path.stem}.png")
            written.append(str(out_dir / f"{path.stem}.png"))
        self.logger.info(f"Applied {cfg.kind} to {len(written)} images")
        return {"kind": cfg.kind, "outputs": written}

    def verb_simulate(self, config: RunConfig) -> Dict[str, Any]:
        cfg = config.imitation_config()
        backend = ExternalImitationBackend(config.imitation.backend) if config.imitation.backend else None
        enc_dec = None if backend else ToyAutoencoder.build(config.train.encoder_seed)
        out_dir = Path(config.out) / "imitated"
        written = []
        for path in _list_images(config.imitation.input_dir, "imitation"):
            image = read_image(path)
            write_image(imitate(image, cfg, enc_dec=enc_dec, backend=backend), out_dir / f"{path.stem}.png")
            written.append(str(out_dir / f"{path.stem}.png"))
        return {"strength": cfg.strength, "backend": config.imitation.backend or "toy", "outputs": written}

    def verb_experiment(self, config: RunConfig) -> Dict[str, Any]:
        ex = config.experiment
        setup = ExperimentSetup(classes=tuple(ex.classes), train_per_class=ex.train_per_class,
                                eval_per_class=ex.eval_per_class, image_size=config.image_size,
                                train=config.train_config(), strength=config.imitation.strength,
                                seed=config.seed, encoder_seed=config.train.encoder_seed,
                                data_root=config.data.root, mapping=config.data.mapping)
        frame = run_study(ex.study, setup, config.out)
        if not self.args.json:
            print(frame.to_string(index=False))
        return {"study": ex.study, "rows": frame.to_dict(orient="records")}


def main(argv: Optional[List[str]] = None):
    """Main entry point"""
    tool = WMCloakTool(argv)
    sys.exit(tool.run())


if __name__ == "__main__":
    main()
