"""Command-line entry point: ``cyclefuse <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from jsonschema import ValidationError

from . import __version__
from .harness import ExperimentConfig, ExperimentError, ExperimentResult, desk_config, emit_plots, run_experiment

log = logging.getLogger("cyclefuse")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.experiment_id:
            cfg.experiment_id = f"{cfg.experiment_id}-s{args.seed}"
        if cfg.synthetic is not None:
            cfg.synthetic = replace(cfg.synthetic, seed=args.seed)
    return cfg


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    from .cohort import generate_synthetic_cohort, save_cohort

    cfg = _config(args)
    if cfg.synthetic is None:
        raise ExperimentError("config has no synthetic cohort section")
    cohort, truth = generate_synthetic_cohort(cfg.synthetic)
    out = Path(args.out or "cohort")
    save_cohort(cohort, out)
    _write_json(truth.to_dict(), out / "ground_truth.json")
    print(f"wrote {len(cohort)} records to {out}")
    return 0


def cmd_train_gan(args) -> int:
    from .cohort import read_cohort_dir
    from .cyclegan import save_checkpoint, train_gan
    from .harness import _write_gan_log

    cfg = _config(args)
    gan_cfg = replace(cfg.gan, seed=cfg.seed)
    cohort = read_cohort_dir(args.cohort)
    model, records = train_gan(cohort, gan_cfg, fold_tag=args.fold_tag)
    out = Path(args.out or "gan")
    save_checkpoint(model, out / "gan.ckpt", gan_cfg)
    _write_gan_log(records, out / "gan_log.csv")
    print(f"checkpoint: {out / 'gan.ckpt'}")
    return 0


def cmd_impute(args) -> int:
    from .cohort import read_cohort_dir, save_cohort
    from .cyclegan import load_checkpoint
    from .imputation import ImputationStrategy, apply_strategy

    cohort = read_cohort_dir(args.cohort)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    done = apply_strategy(ImputationStrategy(args.strategy, model), cohort)
    out = Path(args.out or "imputed")
    save_cohort(done, out)
    print(f"wrote {len(done)} complete records to {out}")
    return 0


def cmd_train_clf(args) -> int:
    from .classifier import save_classifier, train_classifier
    from .cohort import read_cohort_dir

    cfg = _config(args)
    clf_cfg = replace(cfg.classifier, seed=cfg.seed)
    model, lr, info = train_classifier(read_cohort_dir(args.cohort), clf_cfg)
    out = Path(args.out or "classifier")
    save_classifier(model, out / "classifier.ckpt", clf_cfg, lr)
    _write_json({"selected_lr": lr, "grid": info["grid"]}, out / "selection.json")
    print(f"checkpoint: {out / 'classifier.ckpt'} (lr {lr:g})")
    return 0


def cmd_evaluate(args) -> int:
    from .classifier import load_classifier, predict
    from .cohort import read_cohort_dir
    from .metrics import classification_metrics

    cohort = read_cohort_dir(args.cohort)
    pred, _ = predict(load_classifier(args.classifier), cohort)
    report = classification_metrics(cohort.labels, pred).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        _write_json(report, Path(args.out))
    print(text)
    return 0


def cmd_experiment(args) -> int:
    import os

    from .harness import OUT_ENV, experiment_dir

    cfg = _config(args)
    if args.out:
        os.environ[OUT_ENV] = args.out
    if args.folds:
        cfg.folds = tuple(args.folds)
    result = run_experiment(cfg)
    out = experiment_dir(cfg)
    for name, ms in result.classification.items():
        print(f"{name:10s} accuracy {ms['accuracy']['mean']:.4f} +- {ms['accuracy']['std']:.4f}")
    print(f"results: {out}")
    return 0


def cmd_plot(args) -> int:
    import numpy as np

    src = Path(args.result)
    path = src / "result.json" if src.is_dir() else src
    if not path.exists():
        raise FileNotFoundError(f"result file not found: {path}")
    result = ExperimentResult.from_json(path.read_text())
    maps_file = path.parent / "maps.npz"
    if maps_file.exists():
        with np.load(maps_file) as z:
            result.maps = {k: z[k] for k in z.files}
    files = emit_plots(result, Path(args.out) if args.out else path.parent / "plots")
    for f in files:
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cyclefuse", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment config (JSON); desk defaults when omitted")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("synth", help="generate and save a synthetic cohort")
    common(sp, "output directory (default ./cohort)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-gan", help="train the cycle GAN on a saved cohort")
    common(sp, "output directory (default ./gan)")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--fold-tag", default=None)
    sp.set_defaults(func=cmd_train_gan)

    sp = sub.add_parser("impute", help="complete a saved cohort with one strategy")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--strategy", default="generative", choices=["subsample", "zero_fill", "generative"])
    sp.add_argument("--checkpoint", help="GAN checkpoint (generative strategy)")
    sp.add_argument("--out", help="output directory (default ./imputed)")
    sp.set_defaults(func=cmd_impute)

    sp = sub.add_parser("train-clf", help="train the fusion classifier on a complete cohort")
    common(sp, "output directory (default ./classifier)")
    sp.add_argument("--cohort", required=True)
    sp.set_defaults(func=cmd_train_clf)

    sp = sub.add_parser("evaluate", help="score a classifier checkpoint on a complete cohort")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--out", help="write the metrics JSON here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="run the full cross-validated comparison")
    common(sp, "output root (overrides config and $CYCLEFUSE_OUT)")
    sp.add_argument("--folds", type=int, nargs="+", help="run only these fold indices")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("plot", help="redraw plots from an experiment directory")
    sp.add_argument("--result", required=True, help="experiment directory or result.json")
    sp.add_argument("--out", help="plot directory (default <result>/plots)")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, ExperimentError, ValidationError, json.JSONDecodeError) as exc:
        msg = exc.message if isinstance(exc, ValidationError) else str(exc)
        print(f"cyclefuse {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
