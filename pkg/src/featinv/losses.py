"""Loss terms for feature inversion and their weighted composition.

Reduction convention: every squared-l2 loss is the *mean* over elements, not
the sum. This keeps default weights meaningful across feature shapes, but it
means a weight tuned for a summed objective must be rescaled by the element
count to be equivalent.

Every function accepts ``per_sample=True`` to reduce over all axes but the
leading batch axis, returning a (B,) vector.
"""

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np
import torch

from .errors import ConfigError, InputError, NumericError

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_txt: float = 0.0
    lambda_c: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_txt", "lambda_c"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ConfigError(f"must be a finite number >= 0, got {val!r}", f"weights.{name}")
        if not 1.0 <= self.alpha <= 2.0:
            raise ConfigError(f"must lie in [1, 2], got {self.alpha!r}", "weights.alpha")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    """Component values and their weighted total. Fields may be tensors or floats."""

    total: object
    reconstruction: object
    tv: object
    negentropy: object
    temporal: object

    def as_floats(self):
        """Batch-mean of each component as Python floats (for traces)."""
        return {k: float(torch.as_tensor(v).detach().double().mean()) for k, v in ((f.name, getattr(self, f.name)) for f in fields(self))}


def _reduce(sq, per_sample):
    if per_sample:
        return sq.reshape(sq.shape[0], -1).mean(dim=1)
    return sq.mean()


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(z_hat, z_mid, per_sample=False):
    """Mean squared difference. Shapes must match exactly; nothing is broadcast."""
    _same_shape(z_hat, z_mid, "reconstruction_loss")
    return _reduce((z_hat - z_mid) ** 2, per_sample)


def tv_loss(x, per_sample=False):
    """Squared total variation with forward differences over existing neighbours.

    Accepts (H, W), (C, H, W) or, with ``per_sample``, (B, C, H, W). Channel
    contributions are summed and the result divided by H*W only.
    """
    if x.dim() < 2:
        raise InputError(f"tv_loss needs spatial dims, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    dv = (x[..., 1:, :] - x[..., :-1, :]) ** 2
    dh = (x[..., :, 1:] - x[..., :, :-1]) ** 2
    if per_sample:
        b = x.shape[0]
        return (dv.reshape(b, -1).sum(dim=1) + dh.reshape(b, -1).sum(dim=1)) / (h * w)
    return (dv.sum() + dh.sum()) / (h * w)


def logcosh(t):
    """``log(cosh(t))`` without overflow for large ``|t|``."""
    a = t.abs()
    return a + torch.log1p(torch.exp(-2.0 * a)) - LOG2


def negentropy_contrast(v, alpha):
    """``G(v) = (1/alpha^2) log cosh^2(alpha v)`` elementwise."""
    return (2.0 / alpha**2) * logcosh(alpha * v)


@lru_cache(maxsize=32)
def gaussian_contrast_mean(alpha, nodes=200):
    """``E[G(nu)]`` for standard normal ``nu`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    t = np.abs(alpha * x)
    g = (2.0 / alpha**2) * (t + np.log1p(np.exp(-2 * t)) - LOG2)
    return float((w * g).sum() / w.sum())


def negentropy_loss(v_n, alpha=1.0, mode="literal", per_sample=False):
    """Gaussianity penalty on the (normalised) latent.

    ``mode="literal"`` returns ``-mean[(1/alpha^2) log cosh^2(alpha v)]``.
    ``mode="squared_difference"`` returns ``(mean G(v) - E[G(nu)])^2`` with
    ``nu ~ N(0, 1)``, the classic one-unit negentropy approximation.

    Note the literal form has no Gaussian reference term: minimising it
    pushes mass to large ``|v|`` rather than towards a Gaussian.
    """
    if not 1.0 <= alpha <= 2.0:
        raise ConfigError(f"alpha must lie in [1, 2], got {alpha!r}", "weights.alpha")
    g = negentropy_contrast(v_n, alpha)
    if mode == "literal":
        return -_reduce(g, per_sample)
    if mode == "squared_difference":
        return (_reduce(g, per_sample) - gaussian_contrast_mean(float(alpha))) ** 2
    raise ConfigError(f"unknown negentropy mode {mode!r}", "weights.negentropy_mode")


def temporal_loss(v_k, v_bar, per_sample=False):
    """Mean squared distance of a frame latent from the group-mean latent."""
    _same_shape(v_k, v_bar, "temporal_loss")
    return _reduce((v_k - v_bar) ** 2, per_sample)


def compose(weights, reconstruction, tv=0.0, negentropy=0.0, temporal=0.0):
    """Weighted total ``rec + ls*tv + ltxt*neg + lc*temporal``; gradients flow through ``total``.

    Raises :class:`NumericError` naming the first non-finite component.
    """
    parts = {"reconstruction": reconstruction, "tv": tv, "negentropy": negentropy, "temporal": temporal}
    for name, val in parts.items():
        if not bool(torch.isfinite(torch.as_tensor(val)).all()):
            raise NumericError(f"non-finite {name} loss", where=name)
    total = (
        reconstruction
        + weights.lambda_s * tv
        + weights.lambda_txt * negentropy
        + weights.lambda_c * temporal
    )
    return LossBreakdown(total=total, **parts)
