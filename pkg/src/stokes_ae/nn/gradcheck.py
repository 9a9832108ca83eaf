"""Central finite-difference check of the analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..rng import Pcg32, derive_seed
from .model import AutoencoderModel, MaxPool1D, mae_loss, model_backward, model_forward


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple  # (param index, flat element index)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol and self.checked > 0


def _pattern(model: AutoencoderModel, x: np.ndarray):
    """Reconstruction plus the piecewise-linear branch taken by every ReLU, pool and |residual|."""
    recon, _, cache = model_forward(model, x)
    parts = [np.sign(recon - x).ravel()]
    for s, entry in zip(model.specs, cache):
        if isinstance(s, MaxPool1D):
            parts.append(entry.ravel().astype(np.float64))
        elif getattr(s, "kind", None) == "relu":
            parts.append((entry > 0).ravel().astype(np.float64))
    return recon, np.concatenate(parts)


def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(model: AutoencoderModel, x: np.ndarray, h: float = 1e-6, per_layer: int | None = 128,
              seed: int = 0) -> GradcheckResult:
    """Compare backprop against ``(L(p+h) - L(p-h)) / 2h`` on MAE_I + MAE_V.

    ``per_layer`` weight entries are sampled from each weight tensor (all when
    ``None``); every bias entry is checked. Entries whose ±h perturbation
    switches any ReLU mask, pooling argmax or residual sign lie on a kink where
    the loss is not differentiable; they are skipped and counted.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    model = model.copy()
    recon, _, cache = model_forward(model, x)
    _, g, _ = mae_loss(x, recon)
    grads = [a for pair in model_backward(model, cache, g) for a in pair]
    params = model.flat_params()
    _, base = _pattern(model, x)
    rng = Pcg32(derive_seed(seed, 0x6C), seq=7)
    worst, worst_at, checked, skipped = 0.0, (-1, -1), 0, 0
    for pi, (p, gp) in enumerate(zip(params, grads)):
        flat, gflat = p.reshape(-1), gp.reshape(-1)
        if pi % 2 == 0 and per_layer is not None and flat.size > per_layer:
            idx = rng.permutation(flat.size)[:per_layer]
        else:
            idx = np.arange(flat.size)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            lp, pp = _pattern(model, x)
            flat[k] = orig - h
            lm, pm = _pattern(model, x)
            flat[k] = orig
            if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
                skipped += 1
                continue
            # L(p+h) - L(p-h) summed element by element so unaffected outputs cancel exactly
            diff = math.fsum((np.abs(lp - x) - np.abs(lm - x)).ravel()) / (x.shape[0] * x.shape[2])
            num = diff / (2 * h)
            err = rel_error(float(gflat[k]), num)
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, int(k))
    return GradcheckResult(worst, checked, skipped, worst_at)


def gradcheck_seeds(seeds=(1, 2, 3, 4, 5), batch: int = 4, specs=None, latent_index=None,
                    h: float = 1e-6, per_layer: int | None = 128) -> dict[int, GradcheckResult]:
    """Fresh model and random ``(batch, 2, n)`` input per seed."""
    out = {}
    for s in seeds:
        model = AutoencoderModel.create(specs, latent_index, seed=s)
        rng = Pcg32(derive_seed(s, 0x1A), seq=3)
        x = np.array([rng.normal() for _ in range(batch * 2 * model.n_points)]).reshape(batch, 2, model.n_points)
        out[s] = gradcheck(model, x, h=h, per_layer=per_layer, seed=s)
    return out
