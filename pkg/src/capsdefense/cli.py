"""Command-line surface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import attacks, detectors, evaluation, training
from . import datasets as D
from . import model as M
from .errors import CapsDefenseError, ConfigurationError, UsageError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsdefense", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True, out=True, checkpoint=False):
        if config:
            sp.add_argument("--config", help="experiment config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="seed override")
        if out:
            sp.add_argument("--out", help="output path or directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="model checkpoint")

    sp = sub.add_parser("train", help="train a capsule model")
    common(sp)
    sp = sub.add_parser("train-baseline", help="train the plain-CNN baseline")
    common(sp)

    sp = sub.add_parser("synth-data", help="write the synthetic dataset as IDX files")
    common(sp, config=False)
    sp.add_argument("--per-class", type=int, default=100)
    sp.add_argument("--test-per-class", type=int, default=30)
    sp.add_argument("--size", type=int, default=20)

    sp = sub.add_parser("attack", help="attack a trained model, write an attack dir")
    common(sp, checkpoint=True)
    sp.add_argument("--family", default=None, choices=attacks.ATTACK_FAMILIES)
    sp.add_argument("--count", type=int, default=None, help="evaluation-set size")

    sp = sub.add_parser("detect", help="run the detector ensemble on an attack dir")
    common(sp, out=False, checkpoint=True)
    sp.add_argument("--attack-dir", required=True)
    sp.add_argument("--theta", type=float, required=True)

    sp = sub.add_parser("sweep", help="threshold sweep over an attack dir")
    common(sp, checkpoint=True)
    sp.add_argument("--attack-dir", required=True)

    sp = sub.add_parser("eval", help="full experiment: train, attack, sweep, report")
    common(sp)

    sp = sub.add_parser("export-images", help="attack dir samples as PPM files")
    common(sp, config=False, seed=False, checkpoint=True)
    sp.add_argument("--attack-dir", required=True)
    sp.add_argument("--count", type=int, default=8)

    sp = sub.add_parser("sweep-alpha", help="one detector sweep per alpha value")
    common(sp)
    sp.add_argument("--param", default="alpha2", choices=("alpha1", "alpha2", "alpha3"))
    sp.add_argument("--values", default="0,0.5,1", help="comma-separated alpha values")
    return p


def _experiment_config(args, default_out) -> evaluation.ExperimentConfig:
    out = args.out or default_out
    if getattr(args, "config", None):
        cfg = evaluation.experiment_from_file(args.config, out_dir=out)
    else:
        cfg = evaluation.ExperimentConfig(out_dir=out)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train_seed = args.seed
        cfg.attack = replace(cfg.attack, seed=args.seed)
    return cfg


def _train_from_config(cfg: evaluation.ExperimentConfig, arch: str):
    train_set, test_set = evaluation._load_data(cfg)
    mc = evaluation.model_config_for(cfg, train_set)
    if arch == "cnn":
        mc = replace(mc, arch="cnn")
    sched = training.TrainSchedule(
        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        steps=cfg.steps, seed=cfg.train_seed, log_every=cfg.log_every,
    )
    model = training.train(train_set, mc, sched, log=print, arch=arch)
    acc = evaluation.accuracy(model, test_set)
    return model, acc


def _cmd_train(args, arch):
    if not args.out:
        raise UsageError("train needs --out CHECKPOINT_PATH")
    cfg = _experiment_config(args, default_out=args.out)
    model, acc = _train_from_config(cfg, arch)
    M.save_checkpoint(model, args.out)
    print(f"test accuracy {acc:.4f}; checkpoint written to {args.out}")
    return 0


def _cmd_synth_data(args):
    if not args.out:
        raise UsageError("synth-data needs --out DIR")
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else 7
    for split, per_class in (("train", args.per_class), ("test", args.test_per_class)):
        ds = D.synth_toy(seed, per_class, args.size, split=split)
        D.save_idx(
            ds,
            os.path.join(args.out, f"{split}-images.idx3"),
            os.path.join(args.out, f"{split}-labels.idx1"),
        )
        print(f"{split}: {len(ds.images)} images")
    return 0


def _cmd_attack(args):
    if not args.out:
        raise UsageError("attack needs --out DIR")
    cfg = _experiment_config(args, default_out=args.out)
    model = M.load_checkpoint(args.checkpoint)
    _, test_set = evaluation._load_data(cfg)
    count = args.count or cfg.sample_count
    x, y = evaluation.pick_eval_set(model, test_set, count, cfg.seed)
    atk_cfg = cfg.attack if args.family is None else replace(cfg.attack, family=args.family)
    targets = attacks.choose_targets(
        y, model.config.num_classes, atk_cfg.target_policy, atk_cfg.seed
    )
    batch = attacks.run_attack(x, y, targets, model, atk_cfg)
    verdicts = detectors.analyze(model, batch.adversarials)
    attacks.save_attack_batch(batch, cfg.out_dir, verdicts=verdicts, theta=0.0)
    print(
        f"{atk_cfg.family}: success {batch.success.mean():.4f} "
        f"over {len(batch)} inputs -> {cfg.out_dir}"
    )
    return 0


def _cmd_detect(args):
    model = M.load_checkpoint(args.checkpoint)
    batch = attacks.load_attack_batch(args.attack_dir, model.config.image_shape)
    verdicts = detectors.analyze(model, batch.adversarials)
    flags = verdicts.combined_flags(args.theta)
    gtd = verdicts.gtd_flags(args.theta)
    print(f"inputs = {len(batch)}")
    print(f"gtd_flagged = {int(gtd.sum())}")
    print(f"lbd_flagged = {int(verdicts.lbd_flags.sum())}")
    print(f"ccd_flagged = {int(verdicts.ccd_flags.sum())}")
    print(f"combined_flagged = {int(flags.sum())}")
    print(f"undetected_rate = {evaluation.undetected_rate(batch.success, flags):.6g}")
    return 0


def _cmd_sweep(args):
    cfg = _experiment_config(args, default_out=None)
    model = M.load_checkpoint(args.checkpoint)
    batch = attacks.load_attack_batch(args.attack_dir, model.config.image_shape)
    _, test_set = evaluation._load_data(cfg)
    n_clean = min(cfg.sample_count, len(test_set.images))
    curve = detectors.sweep(
        model, test_set.images[:n_clean], batch.adversarials, batch.success,
        ensemble=cfg.ensemble,
    )
    text = curve.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"sweep curve -> {args.out}")
        print(f"reference_theta = {detectors.reference_theta(curve, cfg.max_fpr):.6g}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_eval(args):
    cfg = _experiment_config(args, default_out="runs/experiment")
    report = evaluation.run_experiment(cfg, log=print)
    sys.stdout.write(report.to_text())
    print(f"artifacts -> {cfg.out_dir}")
    return 0


def _cmd_export_images(args):
    if not args.out:
        raise UsageError("export-images needs --out DIR")
    model = M.load_checkpoint(args.checkpoint)
    batch = attacks.load_attack_batch(args.attack_dir, model.config.image_shape)
    os.makedirs(args.out, exist_ok=True)
    count = min(args.count, len(batch))
    for i in range(count):
        img = np.clip(batch.adversarials[i], 0.0, 1.0)
        evaluation.export_ppm(img, os.path.join(args.out, f"adv_{i:03d}.ppm"))
    print(f"{count} images -> {args.out}")
    return 0


def _cmd_sweep_alpha(args):
    cfg = _experiment_config(args, default_out="runs/sweep_alpha")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values needs at least one alpha value")
    evaluation.sweep_alpha(cfg, args.param, values, log=print)
    print(f"{len(values)} curves -> {cfg.out_dir}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        if args.command == "train":
            return _cmd_train(args, arch="capsule")
        if args.command == "train-baseline":
            return _cmd_train(args, arch="cnn")
        if args.command == "synth-data":
            return _cmd_synth_data(args)
        if args.command == "attack":
            return _cmd_attack(args)
        if args.command == "detect":
            return _cmd_detect(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "export-images":
            return _cmd_export_images(args)
        if args.command == "sweep-alpha":
            return _cmd_sweep_alpha(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CapsDefenseError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
