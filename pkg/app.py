"""Command-line entry point.

    python app.py train     --config run.cfg --data-dir d/ --out-dir o/ --seed 7
    python app.py eval      --model o/best.ckpt --data-dir d/ --split test
    python app.py predict   --model o/best.ckpt scan.png
    python app.py synth     --n 200 --out-dir d/ --seed 7
    python app.py gradcheck --seed 0

Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O
error, 4 numeric failure (divergence, failed gradient check).
"""

import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from config import derive_seed, get_log_level, get_setting
from data_processing import (
    generate_synthetic,
    load_dataset,
    load_image,
    rescale,
    split,
    write_dataset,
)
from errors import (
    ArgumentError,
    ConfigError,
    DataLoadError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingDiverged,
)
from metrics import evaluate, format_report
from network import build, load_checkpoint, save_checkpoint
from run_config import RunConfig, load_run_config, write_run_config
from tensor_core import make_rng
from training import train, write_curves_csv
from verification import format_gradcheck_report, run_gradient_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SPLIT_NAMES = ("train", "val", "test")


# --- Argument parsing ---
def _hw(text: str):
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return height, width


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI run configuration file")
    shared.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit)")
    shared.add_argument("--data-dir", help="Directory holding labels.csv and the PNG images")
    shared.add_argument("--out-dir", help="Directory for checkpoints, curves and reports")
    shared.add_argument("--model", help="DCN1 checkpoint to load")
    shared.add_argument("--threshold", type=float, help="Decision threshold on p(cancer)")
    shared.add_argument("--log-level", default=get_log_level(),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)

    parser = argparse.ArgumentParser(prog="dcnn", description="Lung cancer screening dCNN")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("train", parents=[shared], help="Train a network and write its artifacts")

    eval_parser = commands.add_parser("eval", parents=[shared], help="Evaluate a checkpoint")
    eval_parser.add_argument("--split", default="test", choices=SPLIT_NAMES + ("all",))
    eval_parser.add_argument("--report-out", help="Also write the JSON report here")

    predict_parser = commands.add_parser("predict", parents=[shared], help="Score images")
    predict_parser.add_argument("images", nargs="+", help="PNG image(s) to score")

    synth_parser = commands.add_parser("synth", parents=[shared], help="Write a synthetic dataset")
    synth_parser.add_argument("--n", type=int, default=200, help="Number of images (even)")
    synth_parser.add_argument("--size", type=_hw, help="Image size HxW (default: network input)")

    commands.add_parser("gradcheck", parents=[shared], help="Finite-difference gradient checks")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "data_dir": args.data_dir,
        "out_dir": args.out_dir,
        "threshold": args.threshold,
    }
    return load_run_config(args.config, overrides)


def _require_model(args) -> str:
    if not args.model:
        raise ConfigError("missing required setting: --model")
    return args.model


# --- Commands ---
def _training_split(model_path: str, dataset, name: str):
    """Rows of ``dataset`` that the run which wrote ``model_path`` put in split ``name``.

    Returns None when the checkpoint directory has no split.csv.
    """
    split_path = os.path.join(os.path.dirname(os.path.abspath(model_path)), "split.csv")
    if not os.path.exists(split_path):
        return None
    frame = pd.read_csv(split_path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ["id", "split"]:
        raise FormatError(f"{split_path}: header must be id,split", field="header")
    membership = dict(zip(frame["id"], frame["split"]))
    if set(membership) != set(dataset.ids):
        raise ConfigError(f"{split_path} lists {len(membership)} ids that do not match "
                          f"the {len(dataset)} images being evaluated")
    logger.info(f"📄 Using the training partition from {split_path}")
    return dataset.subset([k for k, sample_id in enumerate(dataset.ids) if membership[sample_id] == name])


def _seed_given(args) -> bool:
    return args.seed is not None or bool(args.config) or get_setting("DCNN_SEED") is not None


def cmd_train(args, cfg: RunConfig) -> int:
    cfg.require("data_dir", "out_dir")
    if cfg.network.in_channels != 1:
        raise ConfigError(f"images are grayscale; network.in_channels must be 1, got {cfg.network.in_channels}")
    dataset = load_dataset(cfg.data_dir, target_hw=cfg.network.input_hw, cache_dir=cfg.cache_dir)
    train_set, val_set, test_set = split(dataset, cfg.split)
    logger.info(f"📊 Split {len(dataset)} images into {len(train_set)} train, "
                f"{len(val_set)} validation, {len(test_set)} test")

    os.makedirs(cfg.out_dir, exist_ok=True)
    write_run_config(cfg, os.path.join(cfg.out_dir, "run.cfg"))
    membership = {}
    for name, subset in zip(SPLIT_NAMES, (train_set, val_set, test_set)):
        membership.update({sample_id: name for sample_id in subset.ids})
    pd.DataFrame({"id": dataset.ids, "split": [membership[i] for i in dataset.ids]}).to_csv(
        os.path.join(cfg.out_dir, "split.csv"), index=False, lineterminator="\n")

    net = build(cfg.network, make_rng(cfg.init_seed))
    try:
        best, log = train(net, train_set, val_set, cfg.training)
    except TrainingDiverged as e:
        if e.network is not None:
            save_checkpoint(e.network, os.path.join(cfg.out_dir, "best.ckpt"))
        if e.log is not None:
            write_curves_csv(e.log, os.path.join(cfg.out_dir, "curves.csv"))
        raise

    save_checkpoint(best, os.path.join(cfg.out_dir, "best.ckpt"))
    save_checkpoint(net, os.path.join(cfg.out_dir, "final.ckpt"))
    write_curves_csv(log, os.path.join(cfg.out_dir, "curves.csv"))

    report = evaluate(best, val_set, cfg.threshold, cfg.training.eval_batch_size)
    with open(os.path.join(cfg.out_dir, "val_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    logger.info(f"Validation report (best checkpoint):\n{format_report(report)}")
    logger.info(f"✅ Artifacts written to {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    cfg.require("data_dir")
    net = load_checkpoint(_require_model(args), expected_config=cfg.network if args.config else None)
    dataset = load_dataset(cfg.data_dir, target_hw=net.config.input_hw, cache_dir=cfg.cache_dir)
    if args.split == "all":
        subset = dataset
    else:
        recorded = _training_split(args.model, dataset, args.split)
        if not _seed_given(args):
            if recorded is None:
                raise ConfigError(f"no split.csv next to {args.model}; pass the --seed (or --config) "
                                  f"used for training to reproduce the {args.split} split")
            subset = recorded
        else:
            subset = dict(zip(SPLIT_NAMES, split(dataset, cfg.split)))[args.split]
            if recorded is not None and sorted(subset.ids) != sorted(recorded.ids):
                raise ConfigError(f"seed {cfg.seed} does not reproduce the {args.split} split "
                                  f"recorded in split.csv next to {args.model}")

    report = evaluate(net, subset, cfg.threshold, cfg.training.eval_batch_size)
    if args.report_out:
        with open(args.report_out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    print(report.to_json())
    print(format_report(report), file=sys.stderr)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    net = load_checkpoint(_require_model(args))
    images = [rescale(load_image(path), net.config.input_hw) for path in args.images]
    probs = net.predict_proba(np.stack(images))

    # Everything is computed before the first line is printed
    lines = ["image\tp_cancer\tp_free\tdecision"]
    for path, (p_free, p_cancer) in zip(args.images, probs.astype(np.float64)):
        decision = "cancer" if p_cancer >= cfg.threshold else "cancer-free"
        lines.append(f"{path}\t{p_cancer:.9f}\t{p_free:.9f}\t{decision}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    cfg.require("out_dir")
    size = args.size or cfg.network.input_hw
    dataset = generate_synthetic(args.n, size, seed=derive_seed(cfg.seed, "synth"))
    write_dataset(dataset, cfg.out_dir)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    report = run_gradient_checks(seed=cfg.seed)
    print(format_gradcheck_report(report))
    if not report.passed:
        names = ", ".join(check.name for check in report.failures())
        logger.error(f"❌ Gradient check failed for: {names}")
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def configure_logging(level: str):
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)
    logging.captureWarnings(True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level)
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ArgumentError, ShapeError) as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except (DataLoadError, FormatError, OSError) as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"❌ {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
