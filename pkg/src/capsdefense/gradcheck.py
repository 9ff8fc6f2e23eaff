"""Finite-difference verification of analytic gradients.

All checks run on float64 copies of the inputs (a "shadow" evaluation); the
production code path stays float32. Central differences with h = 1e-3.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def grad_check(fn, inputs, h=1e-3, max_samples=32, seed=0, kink_distance=0.0):
    """Max relative error between analytic and finite-difference gradients.

    fn takes len(inputs) Tensors and returns a Tensor; non-scalar outputs are
    summed into a scalar loss. Coordinates whose value lies within
    kink_distance of 0 are skipped (subgradient ambiguity at kinks).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    loss = out if out.size == 1 else out.sum()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for idx, base in enumerate(arrays):
        flat = base.reshape(-1)
        n = flat.size
        coords = rng.permutation(n)[: min(max_samples, n)]
        for c in coords:
            if kink_distance and abs(flat[c]) < kink_distance:
                continue
            fplus = _eval(fn, arrays, idx, c, +h)
            fminus = _eval(fn, arrays, idx, c, -h)
            numeric = (fplus - fminus) / (2.0 * h)
            a = analytic[idx].reshape(-1)[c]
            denom = max(abs(a), abs(numeric), 1e-3)
            max_err = max(max_err, abs(a - numeric) / denom)
    return max_err


def _eval(fn, arrays, which, coord, delta):
    perturbed = []
    for i, a in enumerate(arrays):
        b = a.copy()
        if i == which:
            b.reshape(-1)[coord] += delta
        perturbed.append(Tensor(b))
    out = fn(*perturbed)
    return float(out.data.sum())
