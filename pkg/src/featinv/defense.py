"""Noise-injection defence on the transmitted feature and its privacy/utility sweep.

``sigma`` is the raw noise standard deviation in feature units. There is no
(epsilon, delta) accounting here; calibrated DP budgets are out of scope.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, FeatInvError, InputError
from .metrics import MAX_PIXEL, psnr, ssim
from .splitnet import classify, extract_features

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("sigma", "accuracy", "accuracy_std", "attack_psnr", "attack_ssim", "status")


@dataclass(frozen=True)
class DefenseConfig:
    sigma: float = 0.0
    noise_kind: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if not (isinstance(self.sigma, (int, float)) and math.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigError(f"must be a finite number >= 0, got {self.sigma!r}", "defense.sigma")
        if self.noise_kind not in ("gaussian", "laplace"):
            raise ConfigError(f"must be 'gaussian' or 'laplace', got {self.noise_kind!r}", "defense.noise_kind")


def sample_noise(shape, cfg):
    """Zero-mean noise with standard deviation ``cfg.sigma``."""
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.noise_kind == "gaussian":
        return torch.randn(shape, generator=gen) * cfg.sigma
    # inverse CDF; Laplace scale b has std b*sqrt(2)
    u = torch.rand(shape, generator=gen, dtype=torch.float64).clamp(1e-12, 1 - 1e-12) - 0.5
    b = cfg.sigma / math.sqrt(2.0)
    return (-b * torch.sign(u) * torch.log1p(-2 * u.abs())).float()


def perturb_features(z, cfg):
    """``z + noise``. ``sigma == 0`` returns ``z`` itself, untouched."""
    if cfg.sigma == 0:
        return z
    return z + sample_noise(z.shape, cfg).to(z.dtype)


def task_accuracy(sm, z, labels):
    pred = classify(sm, z).argmax(dim=1)
    return float((pred == torch.as_tensor(labels)).double().mean())


def tradeoff_sweep(sm, images, labels, attack_fn, sigmas, noise_kind="gaussian", seeds=(0, 1, 2),
                   attack_count=None):
    """Task accuracy and attack quality at each noise level.

    Accuracy is ``F2(perturbed F1(x))`` averaged over ``seeds``. The attack
    ``attack_fn(z_noisy) -> images`` runs once per sigma on the first
    ``attack_count`` images with the first seed. An attack failure is
    recorded in the row's ``status`` and the sweep moves on.
    """
    if len(sigmas) == 0:
        raise InputError("sigma list is empty")
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    z = extract_features(sm, images)
    n_att = len(images) if attack_count is None else min(attack_count, len(images))
    rows = []
    for sigma in sorted(float(s) for s in sigmas):
        accs = [task_accuracy(sm, perturb_features(z, DefenseConfig(sigma, noise_kind, s)), labels) for s in seeds]
        row = {"sigma": sigma, "accuracy": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
               "accuracy_per_seed": accs, "attack_psnr": None, "attack_ssim": None, "status": "ok"}
        z_att = perturb_features(z[:n_att], DefenseConfig(sigma, noise_kind, seeds[0]))
        try:
            recon = torch.as_tensor(attack_fn(z_att)).detach().clamp(0, 1).double().numpy()
            orig = images[:n_att].double().numpy()
            row["attack_psnr"] = float(np.mean([psnr(a * MAX_PIXEL, b * MAX_PIXEL) for a, b in zip(orig, recon)]))
            row["attack_ssim"] = float(np.mean([ssim(a * MAX_PIXEL, b * MAX_PIXEL) for a, b in zip(orig, recon)]))
        except (FeatInvError, RuntimeError, ValueError) as exc:
            log.warning("attack failed at sigma=%s: %s", sigma, exc)
            row["status"] = f"attack_failed: {exc}"
        rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in SWEEP_COLUMNS])
