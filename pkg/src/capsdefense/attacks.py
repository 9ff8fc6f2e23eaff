"""Targeted attack suite: PGD, the detector-aware CC-PGD (two-stage and
one-stage), CW (l2), EAD (elastic net), and the black-box transfer harness.

All l-infinity families keep ||x' - x||_inf <= eps and x' in [0, 1] after
every iteration. Attacks are deterministic given (inputs, config, seed).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import detectors
from .autodiff import Tensor
from .errors import UsageError

ATTACK_FAMILIES = ("pgd", "ccpgd2", "ccpgd1", "cw", "ead")


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    eps_inf: float = 16 / 255
    step_size: float = 2.55 / 255
    iterations: int = 200
    alpha1: float = 1.0
    alpha2: float = 0.0
    alpha3: float = 20.0
    stage_balance: float = 0.5  # weight of the classification stage
    target_policy: str = "random"  # or "fixed:<k>", "next"
    seed: int = 0
    # cw / ead settings
    binary_search_steps: int = 9
    cw_learning_rate: float = 0.01
    cw_iterations: int = 1000
    cw_kappa: float = 0.0
    ead_beta: float = 1e-3
    initial_const: float = 1e-1
    random_start: bool = False
    restarts: int = 1  # pgd only: extra random-start runs, keeping per-sample successes

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise UsageError(f"unknown attack family {self.family!r}")
        if self.restarts < 1:
            raise UsageError("restarts must be >= 1")
        if not (0 < self.eps_inf <= 1):
            raise UsageError("eps_inf must be in (0, 1]")
        if self.step_size <= 0:
            raise UsageError("step size must be positive")
        if not (0 <= self.stage_balance <= 1):
            raise UsageError("stage_balance must be in [0, 1]")
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise UsageError("alpha weights must be >= 0")


@dataclass
class AttackBatch:
    """Results of one attack run over a batch of inputs."""

    originals: np.ndarray  # (B, C, H, W)
    adversarials: np.ndarray  # (B, C, H, W)
    labels: np.ndarray  # (B,) true labels
    targets: np.ndarray  # (B,)
    success: np.ndarray  # (B,) bool: model predicts the target
    family: str = ""
    trace: list = field(default_factory=list)  # per-iteration (ce, lr_loss, success_rate)

    def __len__(self):
        return len(self.targets)

    @property
    def linf(self):
        return np.abs(self.adversarials - self.originals).reshape(len(self), -1).max(axis=1)

    @property
    def l2(self):
        d = (self.adversarials - self.originals).reshape(len(self), -1)
        return np.sqrt((d * d).sum(axis=1))

    @property
    def l1(self):
        return np.abs(self.adversarials - self.originals).reshape(len(self), -1).sum(axis=1)


def choose_targets(labels: np.ndarray, num_classes: int, policy: str, seed: int) -> np.ndarray:
    labels = np.asarray(labels)
    if policy.startswith("fixed:"):
        k = int(policy.split(":", 1)[1])
        targets = np.full(labels.shape, k, dtype=np.int64)
        if np.any(targets == labels):
            raise UsageError("fixed target equals a true label; filter those inputs first")
        return targets
    if policy == "next":
        return (labels + 1) % num_classes
    if policy == "random":
        rng = np.random.default_rng(seed)
        draws = rng.integers(0, num_classes - 1, size=labels.shape)
        return np.where(draws >= labels, draws + 1, draws).astype(np.int64)
    raise UsageError(f"unknown target policy {policy!r}")


def _validate_targets(labels, targets):
    if np.any(np.asarray(labels) == np.asarray(targets)):
        raise UsageError("attack target must differ from the true label")


def _project(x_adv, x0, eps):
    return np.clip(np.clip(x_adv, x0 - eps, x0 + eps), 0.0, 1.0)


def _success(model, adv, targets):
    with ad.no_grad():
        preds = model.classify(adv).predictions
    return preds == np.asarray(targets)


def recon_attack_loss(x_adv: Tensor, model, alpha1: float, alpha2: float, alpha3: float) -> Tensor:
    """Detector-evasion loss, summed over the batch.

    winning reconstruction error (weight alpha1), minus the mean losing
    reconstruction error (alpha2), plus the cross-entropy between the winning
    reconstruction's class scores and the current prediction (alpha3).
    """
    n = model.config.num_classes
    out = model.forward(x_adv)
    preds = out.predictions
    win_recon = model.reconstruct(model.mask_for_reconstruction(out.poses, preds))
    loss = ad.l2_distance_rows(win_recon, x_adv).sum() * alpha1
    if alpha2 > 0:
        losing = None
        for j in range(n):
            mask = (preds != j).astype(np.float32)
            recon_j = model.reconstruct(model.mask_for_reconstruction(out.poses, j))
            term = (ad.l2_distance_rows(recon_j, x_adv) * Tensor(mask)).sum()
            losing = term if losing is None else losing + term
        loss = loss - losing * (alpha2 / (n - 1))
    if alpha3 > 0:
        out2 = model.forward(win_recon)
        loss = loss + ad.softmax_cross_entropy(out2.lengths, preds).sum() * alpha3
    return loss


def _ce_grad(model, adv_data, targets):
    x = Tensor(adv_data, requires_grad=True)
    loss = ad.softmax_cross_entropy(model.classify(x).lengths, targets).sum()
    loss.backward()
    return x.grad, float(loss.data)


def _recon_grad(model, adv_data, cfg):
    x = Tensor(adv_data, requires_grad=True)
    loss = recon_attack_loss(x, model, cfg.alpha1, cfg.alpha2, cfg.alpha3)
    loss.backward()
    return x.grad, float(loss.data)


def _init_delta(x0, cfg):
    if not cfg.random_start:
        return np.zeros_like(x0)
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(-cfg.eps_inf, cfg.eps_inf, size=x0.shape).astype(np.float32)


def pgd(x, labels, targets, model, cfg: AttackConfig, record_trace=False) -> AttackBatch:
    """Targeted signed-gradient descent on the cross-entropy toward the target.

    With cfg.restarts > 1, runs again from random starts (seed offset per
    restart) and keeps each sample's first successful adversarial.
    """
    if cfg.restarts > 1:
        best = pgd(x, labels, targets, model, replace(cfg, restarts=1), record_trace)
        for r in range(1, cfg.restarts):
            if best.success.all():
                break
            again = pgd(
                x, labels, targets, model,
                replace(cfg, restarts=1, random_start=True, seed=cfg.seed + r),
            )
            todo = ~best.success & again.success
            best.adversarials[todo] = again.adversarials[todo]
            best.success[todo] = True
        return best
    _validate_targets(labels, targets)
    x0 = np.asarray(x, dtype=np.float32)
    adv = _project(x0 + _init_delta(x0, cfg), x0, cfg.eps_inf)
    trace = []
    for _ in range(cfg.iterations):
        g, ce = _ce_grad(model, adv, targets)
        adv = _project(adv - cfg.step_size * np.sign(g), x0, cfg.eps_inf)
        if record_trace:
            trace.append((ce, 0.0, float(_success(model, adv, targets).mean())))
    return AttackBatch(
        originals=x0,
        adversarials=adv,
        labels=np.asarray(labels),
        targets=np.asarray(targets),
        success=_success(model, adv, targets),
        family="pgd",
        trace=trace,
    )


def ccpgd_two_stage(x, labels, targets, model, cfg: AttackConfig, record_trace=False) -> AttackBatch:
    """Per iteration: a classification step (step size balance*c) followed by
    a detector-evasion step on the reconstruction loss ((1-balance)*c)."""
    _validate_targets(labels, targets)
    x0 = np.asarray(x, dtype=np.float32)
    adv = _project(x0 + _init_delta(x0, cfg), x0, cfg.eps_inf)
    beta = cfg.stage_balance
    trace = []
    for _ in range(cfg.iterations):
        ce = lr = 0.0
        if beta > 0:
            g1, ce = _ce_grad(model, adv, targets)
            adv = _project(adv - beta * cfg.step_size * np.sign(g1), x0, cfg.eps_inf)
        if beta < 1:
            g2, lr = _recon_grad(model, adv, cfg)
            adv = _project(adv - (1 - beta) * cfg.step_size * np.sign(g2), x0, cfg.eps_inf)
        if record_trace:
            trace.append((ce, lr, float(_success(model, adv, targets).mean())))
    return AttackBatch(
        originals=x0,
        adversarials=adv,
        labels=np.asarray(labels),
        targets=np.asarray(targets),
        success=_success(model, adv, targets),
        family="ccpgd2",
        trace=trace,
    )


def ccpgd_one_stage(x, labels, targets, model, cfg: AttackConfig, record_trace=False) -> AttackBatch:
    """Single signed step per iteration on balance*CE + (1-balance)*recon loss."""
    _validate_targets(labels, targets)
    x0 = np.asarray(x, dtype=np.float32)
    adv = _project(x0 + _init_delta(x0, cfg), x0, cfg.eps_inf)
    beta = cfg.stage_balance
    trace = []
    for _ in range(cfg.iterations):
        xt = Tensor(adv, requires_grad=True)
        loss = ad.softmax_cross_entropy(model.classify(xt).lengths, targets).sum() * beta
        if beta < 1:
            loss = loss + recon_attack_loss(xt, model, cfg.alpha1, cfg.alpha2, cfg.alpha3) * (
                1 - beta
            )
        loss.backward()
        adv = _project(adv - cfg.step_size * np.sign(xt.grad), x0, cfg.eps_inf)
        if record_trace:
            trace.append((float(loss.data), 0.0, float(_success(model, adv, targets).mean())))
    return AttackBatch(
        originals=x0,
        adversarials=adv,
        labels=np.asarray(labels),
        targets=np.asarray(targets),
        success=_success(model, adv, targets),
        family="ccpgd1",
        trace=trace,
    )


def _target_hinge(lengths: Tensor, targets, kappa: float) -> Tensor:
    """max(max_{j != t} Z_j - Z_t, -kappa) per sample, on class scores."""
    B, n = lengths.shape
    t = np.asarray(targets)
    onehot = np.zeros((B, n), dtype=lengths.data.dtype)
    onehot[np.arange(B), t] = 1.0
    z_t = (lengths * Tensor(onehot)).sum(axis=1)
    masked = lengths + Tensor(onehot * -1e6)
    z_other = masked.max(axis=1)
    return (z_other - z_t + kappa).relu() - kappa


def cw(x, labels, targets, model, cfg: AttackConfig) -> AttackBatch:
    """l2 attack with a tanh change of variables, Adam inner loop and binary
    search over the loss trade-off constant; class-capsule lengths act as
    logits for the hinge term."""
    _validate_targets(labels, targets)
    x0 = np.asarray(x, dtype=np.float32)
    B = x0.shape[0]
    targets = np.asarray(targets)
    w0 = np.arctanh((2.0 * np.clip(x0, 1e-6, 1 - 1e-6) - 1.0) * 0.999999).astype(np.float32)

    const = np.full(B, cfg.initial_const, dtype=np.float64)
    lo = np.zeros(B)
    hi = np.full(B, 1e10)
    best_adv = x0.copy()
    best_l2 = np.full(B, np.inf)
    found = np.zeros(B, dtype=bool)

    for _ in range(cfg.binary_search_steps):
        w = Tensor(w0.copy(), requires_grad=True)
        opt = ad.Adam([w], lr=cfg.cw_learning_rate)
        step_found = np.zeros(B, dtype=bool)
        for _ in range(cfg.cw_iterations):
            x_adv = (w.tanh() + 1.0) * 0.5
            out = model.forward(x_adv)
            dist2 = ad.l2_distance_rows(x_adv, Tensor(x0)) ** 2
            hinge = _target_hinge(out.lengths, targets, cfg.cw_kappa)
            loss = (dist2 + hinge * Tensor(const.astype(np.float32))).sum()
            adv_now = x_adv.data.astype(np.float32)
            succ = out.predictions == targets
            l2_now = np.sqrt(((adv_now - x0).reshape(B, -1) ** 2).sum(axis=1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            better = succ & (l2_now < best_l2)
            best_adv[better] = adv_now[better]
            best_l2[better] = l2_now[better]
            step_found |= succ
        found |= step_found
        # successful at this constant: try a smaller one; otherwise go bigger
        hi = np.where(step_found, const, hi)
        lo = np.where(step_found, lo, const)
        const = np.where(hi < 1e10, (lo + hi) / 2.0, const * 10.0)
    return AttackBatch(
        originals=x0,
        adversarials=best_adv,
        labels=np.asarray(labels),
        targets=targets,
        success=_success(model, best_adv, targets),
        family="cw",
    )


def _shrink(z, beta):
    return np.sign(z) * np.maximum(np.abs(z) - beta, 0.0)


def ead(x, labels, targets, model, cfg: AttackConfig) -> AttackBatch:
    """Elastic-net attack: CW-style objective with an l1 term handled by an
    iterative-shrinkage (FISTA) update; returns the minimal-l1 success."""
    _validate_targets(labels, targets)
    x0 = np.asarray(x, dtype=np.float32)
    B = x0.shape[0]
    targets = np.asarray(targets)

    const = np.full(B, cfg.initial_const, dtype=np.float64)
    lo = np.zeros(B)
    hi = np.full(B, 1e10)
    best_adv = x0.copy()
    best_l1 = np.full(B, np.inf)

    for _ in range(cfg.binary_search_steps):
        x_k = x0.copy()
        y_k = x0.copy()
        step_found = np.zeros(B, dtype=bool)
        for it in range(cfg.cw_iterations):
            yt = Tensor(y_k, requires_grad=True)
            out = model.forward(yt)
            dist2 = ad.l2_distance_rows(yt, Tensor(x0)) ** 2
            hinge = _target_hinge(out.lengths, targets, cfg.cw_kappa)
            loss = (dist2 + hinge * Tensor(const.astype(np.float32))).sum()
            loss.backward()
            lr = cfg.cw_learning_rate
            z = y_k - lr * yt.grad
            x_next = np.clip(_shrink(z - x0, cfg.ead_beta) + x0, 0.0, 1.0).astype(np.float32)
            y_k = (x_next + (it / (it + 3.0)) * (x_next - x_k)).astype(np.float32)
            x_k = x_next
            succ = _success(model, x_k, targets)
            l1_now = np.abs(x_k - x0).reshape(B, -1).sum(axis=1)
            better = succ & (l1_now < best_l1)
            best_adv[better] = x_k[better]
            best_l1[better] = l1_now[better]
            step_found |= succ
        hi = np.where(step_found, const, hi)
        lo = np.where(step_found, lo, const)
        const = np.where(hi < 1e10, (lo + hi) / 2.0, const * 10.0)
    return AttackBatch(
        originals=x0,
        adversarials=best_adv,
        labels=np.asarray(labels),
        targets=targets,
        success=_success(model, best_adv, targets),
        family="ead",
    )


ATTACK_FUNCS = {
    "pgd": pgd,
    "ccpgd2": ccpgd_two_stage,
    "ccpgd1": ccpgd_one_stage,
    "cw": cw,
    "ead": ead,
}


def run_attack(x, labels, targets, model, cfg: AttackConfig, **kw) -> AttackBatch:
    return ATTACK_FUNCS[cfg.family](x, labels, targets, model, cfg, **kw)


@dataclass
class TransferReport:
    success: np.ndarray  # (B,) bool on the target model
    verdicts: detectors.DetectionBatch
    theta: float

    @property
    def success_rate(self):
        return float(self.success.mean())

    def undetected_rate(self, ensemble=detectors.ALL_DETECTORS):
        evaded = ~self.verdicts.combined_flags(self.theta, ensemble)
        return float((self.success & evaded).mean())


def transfer(batch: AttackBatch, target_model, theta: float) -> TransferReport:
    """Re-evaluate substitute-model attacks on an independently trained target."""
    if not hasattr(target_model, "config"):
        raise UsageError("target model required")
    if target_model.config.image_shape != batch.originals.shape[1:]:
        raise UsageError("substitute/target model configs disagree on input shape")
    success = _success(target_model, batch.adversarials, batch.targets)
    verdicts = detectors.analyze(target_model, batch.adversarials)
    return TransferReport(success=success, verdicts=verdicts, theta=theta)


# -- serialization ------------------------------------------------------------


def save_attack_batch(batch: AttackBatch, out_dir: str, verdicts=None, theta: float = 0.0):
    """attack_meta.csv plus one raw little-endian f32 file per sample."""
    os.makedirs(out_dir, exist_ok=True)
    if verdicts is None:
        gtd = lbd = ccd = comb = np.zeros(len(batch), dtype=bool)
    else:
        gtd = verdicts.gtd_flags(theta)
        lbd = verdicts.lbd_flags
        ccd = verdicts.ccd_flags
        comb = verdicts.combined_flags(theta)
    lines = ["index,true_label,target,success,linf,l2,l1,gtd,lbd,ccd,combined"]
    linf, l2, l1 = batch.linf, batch.l2, batch.l1
    for i in range(len(batch)):
        batch.adversarials[i].astype("<f4").tofile(os.path.join(out_dir, f"adv_{i:06d}.bin"))
        lines.append(
            f"{i},{batch.labels[i]},{batch.targets[i]},{int(batch.success[i])},"
            f"{linf[i]:.6g},{l2[i]:.6g},{l1[i]:.6g},"
            f"{int(gtd[i])},{int(lbd[i])},{int(ccd[i])},{int(comb[i])}"
        )
    with open(os.path.join(out_dir, "attack_meta.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_attack_batch(in_dir: str, image_shape, family: str = "") -> AttackBatch:
    """Inverse of save_attack_batch; originals are not persisted, so the
    distortion norms of the loaded batch are all zero."""
    from .datasets import load_raw_f32_images

    meta = os.path.join(in_dir, "attack_meta.csv")
    if not os.path.exists(meta):
        raise UsageError(f"{in_dir}: no attack_meta.csv")
    with open(meta, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise UsageError(f"{meta}: empty attack batch")
    paths = [os.path.join(in_dir, f"adv_{int(r['index']):06d}.bin") for r in rows]
    adv = load_raw_f32_images(paths, image_shape)
    return AttackBatch(
        originals=adv.copy(),
        adversarials=adv,
        labels=np.array([int(r["true_label"]) for r in rows]),
        targets=np.array([int(r["target"]) for r in rows]),
        success=np.array([bool(int(r["success"])) for r in rows]),
        family=family,
    )
