"""Command-line entry point: train / eval / predict / verify.

Exit codes: 0 success, 2 usage or configuration error, 3 training divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import (ABLATIONS, RunSpec, default_run_spec, load_config_file)
from .exceptions import (CheckpointError, ConfigError, DataError,
                         DivergenceError, RemoteNetError)

log = logging.getLogger("remotenet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file ([model] + [run] sections)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override run seed")
    p.add_argument("--variant", choices=ABLATIONS, help="ablation variant")
    p.add_argument("--tta", help="TTA spec, e.g. none | hflip,msc | hflip,rot90")
    p.add_argument("--workers", type=int, help="data workers (accepted; loading "
                                               "is synchronous)")
    p.add_argument("--toy", action="store_true", help="force the synthetic toy dataset")
    p.add_argument("--data-root", help="dataset root (default: $REMOTENET_DATA)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remotenet",
                                     description="Remote-sensing segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    _add_common(p_train)
    p_train.add_argument("--resume", help="checkpoint directory to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", help="dataset split to evaluate")

    p_pred = sub.add_parser("predict", help="write prediction rasters")
    _add_common(p_pred)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--input", required=True, help="directory of input images")
    p_pred.add_argument("--palette", help="palette file for color output")

    p_verify = sub.add_parser("verify", help="run verification suites")
    p_verify.add_argument("--suite", default="all",
                          help="comma list of suites or 'all' "
                               "(shapes,attention,metrics,params,grads)")
    p_verify.add_argument("--seed", type=int, default=0)
    return parser


def _resolve(args) -> tuple:
    """Config file + flag overrides (flags win) -> (ModelConfig, RunSpec)."""
    if not args.config:
        raise ConfigError("--config is required")
    cfg, run = load_config_file(args.config)
    if args.variant:
        cfg = replace(cfg, ablation=args.variant)
    updates = {}
    if args.out:
        updates["out"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.tta is not None:
        updates["tta"] = args.tta
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        updates["workers"] = args.workers
    if args.data_root:
        updates["data_root"] = args.data_root
    if args.toy:
        updates["dataset"] = "toy"
    if updates:
        run = replace(run, **updates)
    if not run.data_root:
        run = replace(run, data_root=os.environ.get("REMOTENET_DATA", ""))
    return cfg, run


def _load_split(cfg, run: RunSpec, split: str) -> list:
    from . import data

    if run.dataset == "toy":
        return data.toy_dataset(run.toy_samples, run.toy_size, cfg.num_classes,
                                run.seed)
    if not run.data_root:
        raise ConfigError("no dataset root: set data_root, --data-root, "
                          "or $REMOTENET_DATA")
    if run.dataset == "loveda":
        return list(data.load_loveda(run.data_root, split))
    if run.dataset == "potsdam":
        samples = data.load_potsdam(run.data_root, split)
        if split == "train":
            # cut the large tiles into trainable patches before random crops
            return list(data.tile_samples(samples, 1024, 512))
        return list(samples)
    raise ConfigError(f"unknown dataset {run.dataset!r}")


def cmd_train(args) -> int:
    from .training import train

    cfg, run = _resolve(args)
    train_samples = _load_split(cfg, run, "train")
    if run.dataset == "toy":
        val_samples = train_samples
    else:
        try:
            val_samples = _load_split(cfg, run, run.val_split)
        except DataError as exc:
            log.warning("no validation split: %s", exc)
            val_samples = None
    result = train(cfg, run, train_samples, val_samples, resume=args.resume)
    log.info("finished %d epochs (%d steps); checkpoints under %s",
             result.epochs_run, result.global_step, result.out_dir)
    return EXIT_OK


def _load_net(checkpoint_path, cfg_override=None):
    from .network import build_network
    from .training import load_checkpoint

    ckpt = load_checkpoint(checkpoint_path)
    cfg = ckpt.cfg
    if cfg_override is not None and cfg_override != cfg:
        raise ConfigError("checkpoint model config does not match --config; "
                          "drop --config or fix the mismatch")
    net = build_network(cfg, seed=0)
    ckpt.model.load_into(net)
    net.eval()
    return net, cfg, ckpt


def cmd_eval(args) -> int:
    from .evaluation import TtaSpec, evaluate, render_report

    cfg_override = None
    run = default_run_spec("toy")
    if args.config:
        cfg_override, run = load_config_file(args.config)
    net, cfg, ckpt = _load_net(args.checkpoint, cfg_override)
    if args.tta is not None:
        run = replace(run, tta=args.tta)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.data_root:
        run = replace(run, data_root=args.data_root)
    if args.toy:
        run = replace(run, dataset="toy")
    if not run.data_root:
        run = replace(run, data_root=os.environ.get("REMOTENET_DATA", ""))
    mean = float(ckpt.state.get("norm_mean", run.norm_mean))
    std = float(ckpt.state.get("norm_std", run.norm_std))
    split = args.split or run.val_split
    samples = _load_split(cfg, run, split)
    report, _ = evaluate(net, samples, cfg.num_classes,
                         tta=TtaSpec.parse(run.tta),
                         window=run.eval_window, stride=run.eval_stride,
                         mean=mean, std=std, exclude=run.metric_exclude)
    names = None
    if run.dataset in ("loveda", "potsdam"):
        from .data import default_loveda_palette, default_potsdam_palette

        palette = (default_loveda_palette() if run.dataset == "loveda"
                   else default_potsdam_palette())
        names = palette.class_names()
    print(render_report(report, names,
                        notes=[f"checkpoint: {args.checkpoint}",
                               f"dataset: {run.dataset} split: {split}",
                               f"tta: {run.tta}"]))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import Palette, load_image
    from .evaluation import TtaSpec, predict_labels, save_prediction

    net, cfg, ckpt = _load_net(args.checkpoint)
    mean = float(ckpt.state.get("norm_mean", 0.5))
    std = float(ckpt.state.get("norm_std", 0.5))
    tta = TtaSpec.parse(args.tta or "none")
    palette = Palette.from_file(args.palette) if args.palette else None
    out_dir = Path(args.out or "predictions")
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise ConfigError(f"input directory not found: {in_dir}")
    images = sorted(p for p in in_dir.iterdir()
                    if p.suffix.lower() in (".png", ".tif", ".tiff", ".jpg", ".jpeg"))
    if not images:
        log.warning("no images found under %s", in_dir)
        return EXIT_OK
    for path in images:
        image = load_image(path)
        label = predict_labels(net, image, tta, mean, std)
        written = save_prediction(out_dir, path.stem, label, palette)
        log.info("wrote %s", ", ".join(str(w) for w in written))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import SUITES, run_verification

    suites = SUITES if args.suite == "all" else tuple(
        s.strip() for s in args.suite.split(",") if s.strip())
    results = run_verification(suites, seed=args.seed)
    failed = False
    for result in results:
        print(f"== suite {result.name} ==")
        for line in result.lines:
            print(line)
        failed |= not result.passed
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    handlers = {"train": cmd_train, "eval": cmd_eval,
                "predict": cmd_predict, "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except (ConfigError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except RemoteNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
