"""Image-quality metrics: PSNR, SSIM, Inception Score and report aggregation.

``psnr`` and ``ssim`` take images on the 0-255 scale, shaped (H, W) or
(C, H, W). ``evaluate`` takes [0, 1] images (the toolkit's working range)
and rescales internally.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError

PSNR_CAP = 100.0
MAX_PIXEL = 255.0
LUMA = np.array([0.299, 0.587, 0.114])


def _np(a):
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def psnr(original, recon, cap=PSNR_CAP):
    """``10 log10(255^2 / MSE)`` in dB, capped at ``cap`` (identical images hit the cap)."""
    a, b = _np(original), _np(recon)
    if a.shape != b.shape:
        raise InputError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * math.log10(MAX_PIXEL**2 / mse)))


def to_gray(img):
    img = _np(img)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise InputError(f"cannot convert image of shape {img.shape} to grayscale")


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(original, recon, win_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=MAX_PIXEL):
    """Mean SSIM over all fully-covered 11x11 Gaussian windows, clamped to [0, 1].

    Colour images are reduced to luma first. Covariances are population
    (not sample) estimates, as in Wang et al. 2004.
    """
    a, b = to_gray(original), to_gray(recon)
    if a.shape != b.shape:
        raise InputError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise InputError(f"image {a.shape} smaller than the {win_size}x{win_size} SSIM window")
    w = gaussian_window(win_size, sigma)

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (win_size, win_size)), w)

    ux, uy = filt(a), filt(b)
    vx = filt(a * a) - ux * ux
    vy = filt(b * b) - uy * uy
    vxy = filt(a * b) - ux * uy
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(np.clip(s.mean(), 0.0, 1.0))


def inception_score_from_probs(probs, atol=1e-6):
    """``exp(mean_x KL(p(y|x) || p(y)))`` for an (N, K) matrix of class posteriors."""
    p = _np(probs)
    if p.ndim != 2 or p.shape[0] < 2:
        raise InputError(f"inception score needs >= 2 rows of class probabilities, got shape {p.shape}")
    if (p < -atol).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise InputError("classifier output is not a probability simplex")
    p = np.clip(p, 0.0, None)
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def inception_score(images, classifier):
    """IS of ``images`` under ``classifier`` (a callable returning class probabilities)."""
    if len(images) < 2:
        raise InputError("inception score needs at least 2 images")
    return inception_score_from_probs(classifier(images))


class SoftmaxClassifier:
    """Wrap a logits model as an IS classifier over [0, 1] images."""

    def __init__(self, model, name):
        self.model = model
        self.name = name

    def __call__(self, images):
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        with torch.no_grad():
            return torch.softmax(self.model(x).double(), dim=1).numpy()


def toy_classifier():
    from .splitnet import build_model

    return SoftmaxClassifier(build_model("toy_cnn"), "toy_cnn")


@dataclass
class MetricsReport:
    per_image: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    classifier_name: str = "none"

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr", "ssim"])
            for row in self.per_image:
                writer.writerow([row["id"], repr(row["psnr"]), repr(row["ssim"])])


def evaluate(originals, recons, classifier=None, ids=None):
    """Per-image PSNR/SSIM plus aggregates for paired [0, 1] image batches.

    Reconstructions are clamped to [0, 1] before scoring. The Inception
    Score is computed over the reconstructions when a classifier is given
    and there are at least two images.
    """
    originals = _np(originals)
    recons = _np(recons)
    if len(originals) != len(recons):
        raise InputError(f"{len(originals)} originals vs {len(recons)} reconstructions")
    if ids is None:
        ids = [str(i) for i in range(len(originals))]
    elif len(ids) != len(originals):
        raise InputError("ids must pair one-to-one with images")
    recons = np.clip(recons, 0.0, 1.0)
    rows = []
    for i, a, b in zip(ids, originals, recons):
        rows.append({"id": str(i), "psnr": psnr(a * MAX_PIXEL, b * MAX_PIXEL), "ssim": ssim(a * MAX_PIXEL, b * MAX_PIXEL)})
    agg = {
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "inception_score": None,
        "count": len(rows),
    }
    name = "none"
    if classifier is not None and len(rows) >= 2:
        agg["inception_score"] = inception_score(recons.astype(np.float32), classifier)
        name = getattr(classifier, "name", type(classifier).__name__)
    return MetricsReport(per_image=rows, aggregate=agg, classifier_name=name)
