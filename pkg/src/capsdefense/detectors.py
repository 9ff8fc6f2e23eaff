"""Reconstruction-based adversarial-input detectors and the threshold sweep.

Three detectors, combined with OR:
  - global threshold (GTD): winning-capsule reconstruction error > theta
  - local best (LBD): the winning capsule's reconstruction error is not the
    smallest among all class capsules (argmin ties resolve to the lowest
    index; a tie that resolves away from the prediction still flags)
  - cycle consistency (CCD): the winning reconstruction is classified
    differently from the input
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError

DEFAULT_THETA_GRID = np.round(np.arange(0.0, 20.0 + 1e-9, 0.4), 6)
ALL_DETECTORS = ("gtd", "lbd", "ccd")


@dataclass
class DetectionVerdict:
    gtd_flag: bool
    lbd_flag: bool
    ccd_flag: bool
    combined: bool
    recon_errors: np.ndarray  # (n,) per-class reconstruction errors
    winning_error: float
    recon_prediction: int


@dataclass
class DetectionBatch:
    """Vectorized detector state for a batch; theta applies only to GTD."""

    predictions: np.ndarray  # (B,)
    recon_errors: np.ndarray  # (B, n)
    winning_errors: np.ndarray  # (B,)
    recon_predictions: np.ndarray  # (B,)
    lbd_flags: np.ndarray  # (B,) bool
    ccd_flags: np.ndarray  # (B,) bool

    def gtd_flags(self, theta: float) -> np.ndarray:
        if theta < 0:
            raise UsageError("theta must be >= 0")
        return self.winning_errors > theta

    def combined_flags(self, theta: float, ensemble=ALL_DETECTORS) -> np.ndarray:
        flags = np.zeros(len(self.predictions), dtype=bool)
        if "gtd" in ensemble:
            flags |= self.gtd_flags(theta)
        if "lbd" in ensemble:
            flags |= self.lbd_flags
        if "ccd" in ensemble:
            flags |= self.ccd_flags
        return flags


def _require_reconstruction(model):
    if not getattr(model, "has_reconstruction", False):
        raise UsageError("model has no reconstruction path; detectors need a capsule model")


def analyze(model, images: np.ndarray) -> DetectionBatch:
    """Compute everything the detectors need: one classifier pass on the
    input, one class-conditioned reconstruction per class capsule, and one
    classifier pass on the winning reconstruction."""
    _require_reconstruction(model)
    n = model.config.num_classes
    with ad.no_grad():
        x = ad.Tensor(np.asarray(images, dtype=np.float32))
        if x.data.ndim == 3:
            x = x.reshape((1,) + x.shape)
        out = model.classify(x)
        B = x.shape[0]
        errors = np.empty((B, n), dtype=np.float64)
        for j in range(n):
            recon_j = model.reconstruct(model.mask_for_reconstruction(out.poses, j))
            errors[:, j] = ad.l2_distance_rows(recon_j, x).data
        win_recon = model.reconstruct(model.mask_for_reconstruction(out.poses, out.predictions))
        recon_preds = model.classify(win_recon).predictions
    winning = errors[np.arange(B), out.predictions]
    lbd = np.argmin(errors, axis=1) != out.predictions
    ccd = recon_preds != out.predictions
    return DetectionBatch(
        predictions=out.predictions,
        recon_errors=errors,
        winning_errors=winning,
        recon_predictions=recon_preds,
        lbd_flags=lbd,
        ccd_flags=ccd,
    )


def gtd(x, model, theta: float) -> bool:
    if theta < 0:
        raise UsageError("theta must be >= 0")
    return bool(analyze(model, x).gtd_flags(theta)[0])


def lbd(x, model) -> bool:
    return bool(analyze(model, x).lbd_flags[0])


def ccd(x, model) -> bool:
    return bool(analyze(model, x).ccd_flags[0])


def detect_all(x, model, theta: float) -> DetectionVerdict:
    batch = analyze(model, x)
    g = bool(batch.gtd_flags(theta)[0])
    l = bool(batch.lbd_flags[0])
    c = bool(batch.ccd_flags[0])
    return DetectionVerdict(
        gtd_flag=g,
        lbd_flag=l,
        ccd_flag=c,
        combined=g or l or c,
        recon_errors=batch.recon_errors[0],
        winning_error=float(batch.winning_errors[0]),
        recon_prediction=int(batch.recon_predictions[0]),
    )


@dataclass
class SweepCurve:
    thetas: np.ndarray
    fpr: np.ndarray
    undetected_rate: np.ndarray
    attack_name: str = ""
    ensemble: tuple = ALL_DETECTORS

    def to_csv(self) -> str:
        lines = ["theta,fpr,undetected_rate"]
        for t, f, u in zip(self.thetas, self.fpr, self.undetected_rate):
            lines.append(f"{t:.6g},{f:.6g},{u:.6g}")
        return "\n".join(lines) + "\n"


def sweep(
    model,
    clean_images: np.ndarray,
    adv_images: np.ndarray,
    adv_success: np.ndarray,
    thetas=DEFAULT_THETA_GRID,
    ensemble=ALL_DETECTORS,
    attack_name: str = "",
    clean_batch: DetectionBatch | None = None,
    adv_batch: DetectionBatch | None = None,
) -> SweepCurve:
    """Clean false-positive rate and attack undetected rate per threshold.

    The undetected-rate denominator is all attack attempts; an attempt counts
    as undetected when it both hits its target and evades the ensemble.
    """
    if len(clean_images) == 0 or len(adv_images) == 0:
        raise UsageError("sweep needs non-empty clean and adversarial sets")
    clean_batch = clean_batch or analyze(model, clean_images)
    adv_batch = adv_batch or analyze(model, adv_images)
    success = np.asarray(adv_success, dtype=bool)
    if len(success) != len(adv_images):
        raise UsageError("success flags misaligned with adversarial set")
    thetas = np.asarray(thetas, dtype=np.float64)
    fpr = np.empty(len(thetas))
    und = np.empty(len(thetas))
    for i, t in enumerate(thetas):
        fpr[i] = clean_batch.combined_flags(t, ensemble).mean()
        evaded = ~adv_batch.combined_flags(t, ensemble)
        und[i] = (success & evaded).mean()
    return SweepCurve(thetas, fpr, und, attack_name=attack_name, ensemble=tuple(ensemble))


def reference_theta(curve: SweepCurve, max_fpr: float = 0.05) -> float:
    """Smallest grid theta whose clean FPR is at or below max_fpr."""
    ok = np.nonzero(curve.fpr <= max_fpr)[0]
    if len(ok) == 0:
        return float(curve.thetas[-1])
    return float(curve.thetas[ok[0]])
