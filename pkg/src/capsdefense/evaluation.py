"""Metrics, experiment orchestration, and image export.

run_experiment reproduces the paper-style protocol at configurable scale:
train (or load) a capsule model, attack it, sweep the detector thresholds,
and write a deterministic report plus raw artifacts (attack directories,
sweep CSVs, PPM images). Everything is seeded; rerunning a config produces
byte-identical outputs.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, configfile, detectors
from . import model as M
from . import training
from .datasets import Dataset, load_cifar10_binary, load_idx, synth_toy
from .errors import CapsDefenseError, TrainingError, UsageError


# -- metrics ------------------------------------------------------------------


def accuracy(model, dataset: Dataset) -> float:
    if len(dataset.images) == 0:
        raise UsageError("accuracy over an empty dataset is undefined")
    preds = model.classify(dataset.images).predictions
    return float((preds == dataset.labels).mean())


def success_rate(results) -> float:
    success = results.success if hasattr(results, "success") else np.asarray(results)
    return float(np.asarray(success, dtype=bool).mean())


def undetected_rate(success, detected) -> float:
    """Fraction of all attack attempts that hit the target AND evade the
    combined detector."""
    success = np.asarray(success, dtype=bool)
    detected = np.asarray(detected, dtype=bool)
    if success.shape != detected.shape:
        raise UsageError(
            f"success/detected flags misaligned: {success.shape} vs {detected.shape}"
        )
    return float((success & ~detected).mean())


def deflection_proxy(adv_images, targets, judge) -> float | None:
    """Fraction of (already filtered: successful and undetected) adversarials
    that an independently trained judge classifies as the attack target. A
    programmatic stand-in for human labeling; None when there is nothing to
    judge (undefined, deliberately not 0)."""
    adv_images = np.asarray(adv_images)
    if len(adv_images) == 0:
        return None
    preds = judge.classify(adv_images).predictions
    return float((preds == np.asarray(targets)).mean())


# -- experiment configuration --------------------------------------------------

CONFIG_SCHEMA = {
    "experiment": (
        "seed", "sample_count", "families", "ensemble", "max_fpr",
        "transfer", "proxy", "export_images",
    ),
    "data": (
        "kind", "per_class", "test_per_class", "size", "seed",
        "train_images", "train_labels", "test_images", "test_labels",
    ),
    "model": ("preset", "cycle_weight", "recon_weight"),
    "schedule": ("steps", "batch_size", "learning_rate", "seed", "log_every"),
    "attack": (
        "eps_inf", "step_size", "iterations", "alpha1", "alpha2", "alpha3",
        "stage_balance", "target_policy", "seed", "binary_search_steps",
        "cw_learning_rate", "cw_iterations", "cw_kappa", "ead_beta",
        "initial_const",
    ),
}


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/experiment"
    seed: int = 0
    sample_count: int = 256
    families: tuple = ("pgd", "ccpgd2")
    ensemble: tuple = detectors.ALL_DETECTORS
    max_fpr: float = 0.05
    transfer: bool = False
    proxy: bool = False
    export_images: int = 0
    # data
    data_kind: str = "synth"
    per_class: int = 100
    test_per_class: int = 30
    size: int = 20
    data_seed: int = 7
    data_paths: dict = field(default_factory=dict)
    # model / schedule
    model_preset: str = "toy"
    cycle_weight: float | None = None
    recon_weight: float | None = None
    steps: int = 800
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_seed: int = 0
    log_every: int = 0
    # attack settings shared by every family
    attack: attacks.AttackConfig = field(default_factory=attacks.AttackConfig)

    def __post_init__(self):
        for fam in self.families:
            if fam not in attacks.ATTACK_FAMILIES:
                raise UsageError(f"unknown attack family {fam!r}")
        if self.sample_count < 1:
            raise UsageError("sample_count must be >= 1")


def experiment_from_file(path: str, out_dir: str | None = None) -> ExperimentConfig:
    raw = configfile.read_config(path, CONFIG_SCHEMA)
    kw: dict = {}
    exp = configfile.coerce(raw.get("experiment", {}), {
        "seed": int, "sample_count": int,
        "families": configfile.as_list, "ensemble": configfile.as_list,
        "max_fpr": float, "transfer": configfile.as_bool,
        "proxy": configfile.as_bool, "export_images": int,
    })
    kw.update(exp)
    data = configfile.coerce(raw.get("data", {}), {
        "kind": str, "per_class": int, "test_per_class": int, "size": int,
        "seed": int, "train_images": str, "train_labels": str,
        "test_images": str, "test_labels": str,
    })
    if "kind" in data:
        kw["data_kind"] = data.pop("kind")
    if "seed" in data:
        kw["data_seed"] = data.pop("seed")
    kw["data_paths"] = {
        k: data.pop(k)
        for k in ("train_images", "train_labels", "test_images", "test_labels")
        if k in data
    }
    kw.update(data)
    model = configfile.coerce(raw.get("model", {}), {
        "preset": str, "cycle_weight": float, "recon_weight": float,
    })
    if "preset" in model:
        kw["model_preset"] = model.pop("preset")
    kw.update(model)
    sched = configfile.coerce(raw.get("schedule", {}), {
        "steps": int, "batch_size": int, "learning_rate": float,
        "seed": int, "log_every": int,
    })
    if "seed" in sched:
        kw["train_seed"] = sched.pop("seed")
    kw.update(sched)
    atk = configfile.coerce(raw.get("attack", {}), {
        "eps_inf": float, "step_size": float, "iterations": int,
        "alpha1": float, "alpha2": float, "alpha3": float,
        "stage_balance": float, "target_policy": str, "seed": int,
        "binary_search_steps": int, "cw_learning_rate": float,
        "cw_iterations": int, "cw_kappa": float, "ead_beta": float,
        "initial_const": float,
    })
    kw["attack"] = attacks.AttackConfig(**atk)
    if out_dir is not None:
        kw["out_dir"] = out_dir
    return ExperimentConfig(**kw)


# -- report ---------------------------------------------------------------------


@dataclass
class AttackRow:
    family: str
    success_rate: float
    undetected_rate: float
    mean_linf: float
    mean_l2: float
    transfer_success: float | None = None
    transfer_undetected: float | None = None
    proxy_rate: float | None = None


@dataclass
class Report:
    seed: int
    accuracy: float
    clean_count: int
    eval_count: int
    reference_theta: float
    ensemble: tuple
    rows: list
    proxy_enabled: bool = False

    def to_text(self) -> str:
        lines = [
            "capsdefense experiment report",
            f"seed = {self.seed}",
            f"clean_count = {self.clean_count}",
            f"eval_count = {self.eval_count}",
            f"ensemble = {','.join(self.ensemble)}",
            f"accuracy = {self.accuracy:.6g}",
            f"reference_theta = {self.reference_theta:.6g}",
        ]
        for row in self.rows:
            lines.append(f"[{row.family}]")
            lines.append(f"success_rate = {row.success_rate:.6g}")
            lines.append(f"undetected_rate = {row.undetected_rate:.6g}")
            lines.append(f"mean_linf = {row.mean_linf:.6g}")
            lines.append(f"mean_l2 = {row.mean_l2:.6g}")
            if row.transfer_success is not None:
                lines.append(f"transfer_success = {row.transfer_success:.6g}")
                lines.append(f"transfer_undetected = {row.transfer_undetected:.6g}")
            if row.proxy_rate is not None:
                lines.append(f"proxy_rate = {row.proxy_rate:.6g}")
            elif self.proxy_enabled:
                lines.append("proxy_rate = undefined")
        return "\n".join(lines) + "\n"


# -- orchestration ----------------------------------------------------------------


@contextmanager
def _stage(name: str):
    """Tag any failure with the experiment stage it happened in."""
    try:
        yield
    except CapsDefenseError as e:
        raise type(e)(f"[stage: {name}] {e}") from e
    except Exception as e:  # noqa: BLE001 - deliberate catch-all for tagging
        raise TrainingError(f"[stage: {name}] {e}") from e


def _load_data(cfg: ExperimentConfig):
    if cfg.data_kind == "synth":
        train = synth_toy(cfg.data_seed, cfg.per_class, cfg.size, split="train")
        test = synth_toy(cfg.data_seed, cfg.test_per_class, cfg.size, split="test")
    elif cfg.data_kind == "cifar10":
        train = load_cifar10_binary(cfg.data_paths["train_images"])
        test = load_cifar10_binary(cfg.data_paths["test_images"])
    elif cfg.data_kind == "idx":
        train = load_idx(cfg.data_paths["train_images"], cfg.data_paths["train_labels"])
        test = load_idx(cfg.data_paths["test_images"], cfg.data_paths["test_labels"])
    else:
        raise UsageError(f"unknown data kind {cfg.data_kind!r}")
    return train, test


def model_config_for(cfg: ExperimentConfig, dataset: Dataset) -> M.ModelConfig:
    presets = {"toy": M.toy_config, "svhn": M.svhn_config, "cifar10": M.cifar10_config}
    if cfg.model_preset not in presets:
        raise UsageError(f"unknown model preset {cfg.model_preset!r}")
    base = presets[cfg.model_preset]()
    c, h, w = dataset.images.shape[1:]
    overrides: dict = {}
    if (c, h, w) != base.image_shape:
        overrides.update(channels=c, height=h, width=w)
    if cfg.cycle_weight is not None:
        overrides["cycle_weight"] = cfg.cycle_weight
    if cfg.recon_weight is not None:
        overrides["recon_weight"] = cfg.recon_weight
    return replace(base, **overrides)


def _schedule(cfg: ExperimentConfig, seed: int) -> training.TrainSchedule:
    return training.TrainSchedule(
        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        steps=cfg.steps, seed=seed, log_every=cfg.log_every,
    )


def pick_eval_set(model, test: Dataset, count: int, seed: int):
    """First `count` correctly-classified test inputs under a seeded shuffle."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(test.images))
    images, labels = test.images[order], test.labels[order]
    preds = model.classify(images).predictions
    keep = preds == labels
    if not keep.any():
        raise UsageError("model classifies nothing correctly; cannot build attack set")
    return images[keep][:count], labels[keep][:count]


def run_experiment(cfg: ExperimentConfig, log=None) -> Report:
    say = log or (lambda _msg: None)
    os.makedirs(cfg.out_dir, exist_ok=True)
    stale = os.path.join(cfg.out_dir, "STALE")
    with open(stale, "w", encoding="utf-8") as f:
        f.write("experiment incomplete; artifacts may be partial\n")

    with _stage("data"):
        train_set, test_set = _load_data(cfg)
    with _stage("train"):
        mc = model_config_for(cfg, train_set)
        say(f"training target model ({cfg.steps} steps)")
        target = training.train(train_set, mc, _schedule(cfg, cfg.train_seed))
        target.set_trainable(False)
        substitute = judge = None
        if cfg.transfer:
            say("training substitute model")
            substitute = training.train(train_set, mc, _schedule(cfg, cfg.train_seed + 1))
            substitute.set_trainable(False)
        if cfg.proxy:
            say("training baseline judge")
            judge = training.train(
                train_set, replace(mc, arch="cnn"),
                _schedule(cfg, cfg.train_seed + 2), arch="cnn",
            )
            judge.set_trainable(False)

    with _stage("evaluate-clean"):
        acc = accuracy(target, test_set)
        x_eval, y_eval = pick_eval_set(target, test_set, cfg.sample_count, cfg.seed)
        n_clean = min(cfg.sample_count, len(test_set.images))
        clean_images = test_set.images[:n_clean]
        clean_batch = detectors.analyze(target, clean_images)

    rows = []
    reference = None
    for fam in cfg.families:
        atk_cfg = replace(cfg.attack, family=fam, seed=cfg.attack.seed)
        with _stage(f"attack-{fam}"):
            say(f"running {fam} over {len(x_eval)} inputs")
            targets_vec = attacks.choose_targets(
                y_eval, mc.num_classes, atk_cfg.target_policy, atk_cfg.seed
            )
            batch = attacks.run_attack(x_eval, y_eval, targets_vec, target, atk_cfg)
        with _stage(f"detect-{fam}"):
            adv_batch = detectors.analyze(target, batch.adversarials)
            curve = detectors.sweep(
                target, clean_images, batch.adversarials, batch.success,
                ensemble=cfg.ensemble, attack_name=fam,
                clean_batch=clean_batch, adv_batch=adv_batch,
            )
            if reference is None:
                reference = detectors.reference_theta(curve, cfg.max_fpr)
            detected = adv_batch.combined_flags(reference, cfg.ensemble)
            und = undetected_rate(batch.success, detected)
            row = AttackRow(
                family=fam,
                success_rate=success_rate(batch),
                undetected_rate=und,
                mean_linf=float(batch.linf.mean()),
                mean_l2=float(batch.l2.mean()),
            )
            if substitute is not None:
                sub_targets = attacks.choose_targets(
                    y_eval, mc.num_classes, atk_cfg.target_policy, atk_cfg.seed
                )
                sub_batch = attacks.run_attack(
                    x_eval, y_eval, sub_targets, substitute, atk_cfg
                )
                rep = attacks.transfer(sub_batch, target, reference)
                row.transfer_success = rep.success_rate
                row.transfer_undetected = rep.undetected_rate(cfg.ensemble)
            if judge is not None:
                keep = batch.success & ~detected
                row.proxy_rate = deflection_proxy(
                    batch.adversarials[keep], batch.targets[keep], judge
                )
            rows.append(row)
        with _stage(f"artifacts-{fam}"):
            attacks.save_attack_batch(
                batch, os.path.join(cfg.out_dir, f"attack_{fam}"),
                verdicts=adv_batch, theta=reference,
            )
            with open(
                os.path.join(cfg.out_dir, f"sweep_{fam}.csv"), "w", encoding="utf-8"
            ) as f:
                f.write(curve.to_csv())
            for i in range(min(cfg.export_images, len(batch))):
                export_ppm(batch.adversarials[i],
                           os.path.join(cfg.out_dir, f"{fam}_adv_{i:03d}.ppm"))
                export_ppm(batch.originals[i],
                           os.path.join(cfg.out_dir, f"{fam}_orig_{i:03d}.ppm"))

    with _stage("report"):
        report = Report(
            seed=cfg.seed, accuracy=acc, clean_count=len(clean_images),
            eval_count=len(x_eval), reference_theta=float(reference),
            ensemble=tuple(cfg.ensemble), rows=rows, proxy_enabled=cfg.proxy,
        )
        with open(os.path.join(cfg.out_dir, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report.to_text())
    os.remove(stale)
    return report


def sweep_alpha(cfg: ExperimentConfig, param: str, values, log=None) -> list:
    """One detector sweep per alpha value of the CC-PGD evasion loss.

    Writes sweep_<param>_<value>.csv per value and returns the curves.
    """
    if param not in ("alpha1", "alpha2", "alpha3"):
        raise UsageError(f"can only sweep alpha1/alpha2/alpha3, not {param!r}")
    say = log or (lambda _msg: None)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with _stage("data"):
        train_set, test_set = _load_data(cfg)
    with _stage("train"):
        mc = model_config_for(cfg, train_set)
        model = training.train(train_set, mc, _schedule(cfg, cfg.train_seed))
        model.set_trainable(False)
    with _stage("evaluate-clean"):
        x_eval, y_eval = pick_eval_set(model, test_set, cfg.sample_count, cfg.seed)
        n_clean = min(cfg.sample_count, len(test_set.images))
        clean_batch = detectors.analyze(model, test_set.images[:n_clean])
    curves = []
    for value in values:
        atk_cfg = replace(cfg.attack, family="ccpgd2", **{param: float(value)})
        with _stage(f"attack-{param}={value:g}"):
            say(f"ccpgd2 with {param}={value:g}")
            targets_vec = attacks.choose_targets(
                y_eval, mc.num_classes, atk_cfg.target_policy, atk_cfg.seed
            )
            batch = attacks.run_attack(x_eval, y_eval, targets_vec, model, atk_cfg)
            curve = detectors.sweep(
                model, test_set.images[:n_clean], batch.adversarials, batch.success,
                ensemble=cfg.ensemble, attack_name=f"ccpgd2:{param}={value:g}",
                clean_batch=clean_batch,
            )
            path = os.path.join(cfg.out_dir, f"sweep_{param}_{value:g}.csv")
            with open(path, "w", encoding="utf-8") as f:
                f.write(curve.to_csv())
            curves.append(curve)
    return curves


# -- image export -----------------------------------------------------------------


def export_ppm(image: np.ndarray, path: str) -> None:
    """Write a [0,1] CHW (or HW) image as binary P6 (RGB) or P5 (gray)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise UsageError(f"expected (1|3, H, W) image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise UsageError("pixels out of [0,1]; clip before export")
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if data.shape[0] == 1 else b"P6"
    h, w = data.shape[1:]
    payload = data[0] if data.shape[0] == 1 else data.transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(payload.tobytes())
