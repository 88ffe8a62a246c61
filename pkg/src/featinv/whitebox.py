"""White-box inversion: optimise the prior's latent so F1(D(v_n)) matches z_mid.

All three engines share one loop (:func:`_optimize`). Batches of targets are
optimised jointly but independently: the objective is a sum of per-target
losses and Adam is elementwise, so each latent only sees its own gradient.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import torch

from . import __version__
from .errors import CapabilityError, ConfigError, DegenerateLatentError, InputError, NumericError
from .io import sha256_tensor
from .losses import LossWeights, compose, negentropy_loss, reconstruction_loss, temporal_loss, tv_loss
from .priors import is_zero_embedding, normalize_latent

TEXT_WEIGHTS = LossWeights(lambda_s=1.0, lambda_txt=10.0)
MULTIFRAME_WEIGHTS = LossWeights(lambda_s=1.0, lambda_c=5.0)


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 1500
    learning_rate: float = 0.1
    betas: tuple = (0.9, 0.999)
    # (fraction of iterations, lr multiplier) milestones
    lr_schedule: tuple = ((1 / 3, 0.5), (2 / 3, 0.5))
    init_std: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    sampling_steps: int = 20
    negentropy_mode: str = "literal"

    def __post_init__(self):
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError(f"must be an integer >= 1, got {self.iterations!r}", "attack.iterations")
        if not self.learning_rate > 0:
            raise ConfigError(f"must be > 0, got {self.learning_rate!r}", "attack.learning_rate")
        if not self.init_std > 0:
            raise ConfigError(f"must be > 0, got {self.init_std!r}", "attack.init_std")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"must be two numbers in [0, 1), got {self.betas!r}", "attack.betas")
        for frac, factor in self.lr_schedule:
            if not (0 < frac < 1 and factor > 0):
                raise ConfigError(f"bad milestone ({frac!r}, {factor!r})", "attack.lr_schedule")
        if self.negentropy_mode not in ("literal", "squared_difference"):
            raise ConfigError(f"unknown mode {self.negentropy_mode!r}", "attack.negentropy_mode")

    def lr_at(self, i):
        """Learning rate for 0-based iteration ``i``."""
        lr = self.learning_rate
        for frac, factor in self.lr_schedule:
            if i >= int(round(frac * self.iterations)):
                lr *= factor
        return lr

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lr_schedule"] = [list(m) for m in self.lr_schedule]
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AttackResult:
    images: torch.Tensor
    loss_trace: list
    manifest: dict
    latents: torch.Tensor = None
    metrics: object = None


@dataclass
class FrameGroup:
    """K intercepted features of consecutive frames, stacked on the first axis."""

    frames: torch.Tensor

    def __post_init__(self):
        if isinstance(self.frames, (list, tuple)):
            shapes = {tuple(f.shape) for f in self.frames}
            if len(shapes) != 1:
                raise InputError(f"frame features have inconsistent shapes: {sorted(shapes)}")
            self.frames = torch.stack(list(self.frames))
        if self.frames.dim() < 2 or self.frames.shape[0] < 1:
            raise InputError("a frame group needs at least one frame")

    @property
    def k(self):
        return self.frames.shape[0]


def init_latents(n, latent_shape, std, seed):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, *latent_shape, generator=gen) * std


def _batched_features(sm, z_mid):
    z = torch.as_tensor(z_mid, dtype=torch.float32)
    single = tuple(z.shape) == sm.feature_shape
    zb = z.unsqueeze(0) if single else z
    if tuple(zb.shape[1:]) != sm.feature_shape:
        raise InputError(f"feature shape {tuple(zb.shape[1:])} does not match split output {sm.feature_shape}")
    return zb, single


def _prep(prior, v):
    return normalize_latent(v, batched=True) if prior.normalized_input else v


def _optimize(sm, z, prior, cfg, weights, e=None, group=None):
    """Shared loop. ``z`` is (N, *feature). With ``group=(G, K)`` latents are
    grouped for the temporal term and N == G*K.

    Returns ``(v, per_iteration_traces, status)``; traces are lists of
    per-frame breakdown dicts (one entry when ungrouped).
    """
    n = z.shape[0]
    v = init_latents(n, prior.latent_shape, cfg.init_std, cfg.seed).requires_grad_(True)
    opt = torch.optim.Adam([v], lr=cfg.learning_rate, betas=tuple(cfg.betas))
    traces = [[] for _ in range(group[1] if group else 1)]
    status = {"status": "ok"}
    last_good = v.detach().clone()
    for i in range(cfg.iterations):
        for pg in opt.param_groups:
            pg["lr"] = cfg.lr_at(i)
        try:
            v_n = _prep(prior, v)
        except DegenerateLatentError as exc:
            status = {"status": "aborted", "error": str(exc), "iteration": i}
            with torch.no_grad():
                v.copy_(last_good)
            break
        x = prior.decode(v_n, e)
        rec = reconstruction_loss(sm.f1(x), z, per_sample=True)
        tv = tv_loss(x, per_sample=True)
        neg = negentropy_loss(v_n, weights.alpha, mode=cfg.negentropy_mode, per_sample=True)
        if group:
            g, k = group
            vg = v.view(g, k, -1)
            v_bar = vg.mean(dim=1, keepdim=True).expand_as(vg)
            temp = temporal_loss(vg.reshape(n, -1), v_bar.reshape(n, -1), per_sample=True)
        else:
            temp = torch.zeros_like(rec)
        try:
            parts = compose(weights, rec, tv, neg, temp)
        except NumericError as exc:
            raise NumericError(f"{exc} at iteration {i}", where=i) from exc
        if group:
            g, k = group
            for j in range(k):
                sel = slice(j, None, k)
                traces[j].append(
                    {name: float(getattr(parts, name)[sel].detach().double().mean()) for name in
                     ("total", "reconstruction", "tv", "negentropy", "temporal")}
                )
        else:
            traces[0].append(parts.as_floats())
        last_good = v.detach().clone()
        opt.zero_grad()
        parts.total.sum().backward()
        opt.step()
    return v.detach(), traces, status


def _finish(prior, v, e):
    with torch.no_grad():
        try:
            v_n = _prep(prior, v)
        except DegenerateLatentError:
            v_n = v
        return prior.decode(v_n, e)


def _manifest(variant, sm, prior, cfg, weights, status, images, traces, text=None, extra=None):
    m = {
        "variant": variant,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "effective_weights": weights.to_dict(),
        "seed": cfg.seed,
        "prior": prior.describe(),
        "split": sm.descriptor(),
        "toolkit_version": __version__,
        "torch_version": torch.__version__,
        "output_sha256": sha256_tensor(images),
        "trace_sha256": hashlib.sha256(json.dumps(traces).encode()).hexdigest(),
    }
    m.update(status)
    if text is not None:
        m["text"] = text
    if extra:
        m.update(extra)
    return m


def invert(sm, z_mid, prior, cfg):
    """Plain white-box inversion: ``L_re + lambda_s * TV``.

    ``z_mid`` may be one feature tensor or a batch of them; the result's
    ``images`` mirrors that.
    """
    weights = replace(cfg.weights, lambda_txt=0.0, lambda_c=0.0)
    return _single(sm, z_mid, prior, cfg, weights, None, "whitebox")


def invert_with_text(sm, z_mid, prior, e, cfg, text=None):
    """White-box inversion with a text-conditioned prior and the negentropy term."""
    if not is_zero_embedding(e) and not prior.supports_text:
        raise CapabilityError(f"prior {prior.name!r} cannot be conditioned on text")
    weights = replace(cfg.weights, lambda_c=0.0)
    return _single(sm, z_mid, prior, cfg, weights, e, "whitebox-text", text=text)


def _single(sm, z_mid, prior, cfg, weights, e, variant, text=None):
    z, single = _batched_features(sm, z_mid)
    v, traces, status = _optimize(sm, z, prior, cfg, weights, e=e)
    images = _finish(prior, v, e)
    trace = traces[0]
    manifest = _manifest(variant, sm, prior, cfg, weights, status, images, trace, text=text)
    if single:
        images, v = images[0], v[0]
    return AttackResult(images=images, loss_trace=trace, manifest=manifest, latents=v)


def invert_multiframe(sm, group, prior, cfg):
    """Joint inversion of K correlated frames with the temporal smoothing term.

    ``group`` is a :class:`FrameGroup`, a (K, *feature) tensor, or a
    (G, K, *feature) tensor holding G independent groups. Returns K results
    (one per frame position) sharing one manifest; with G groups each
    result's ``images`` has a leading G axis.
    """
    frames = group.frames if isinstance(group, FrameGroup) else torch.as_tensor(group, dtype=torch.float32)
    if tuple(frames.shape[1:]) == sm.feature_shape:
        frames, batched = frames.unsqueeze(0), False
    elif frames.dim() >= 2 and tuple(frames.shape[2:]) == sm.feature_shape:
        batched = True
    else:
        raise InputError(f"frame features {tuple(frames.shape)} do not match split output {sm.feature_shape}")
    g, k = frames.shape[:2]
    if k < 1:
        raise InputError("K must be >= 1")
    weights = replace(cfg.weights, lambda_txt=0.0)
    z = frames.reshape(g * k, *sm.feature_shape)
    v, traces, status = _optimize(sm, z, prior, cfg, weights, group=(g, k))
    images = _finish(prior, v, None).view(g, k, *prior.output_shape)
    latents = v.view(g, k, *prior.latent_shape)
    manifest = _manifest("multiframe", sm, prior, cfg, weights, status, images, traces, extra={"frames": k, "groups": g})
    results = []
    for j in range(k):
        imgs, lats = images[:, j], latents[:, j]
        if not batched:
            imgs, lats = imgs[0], lats[0]
        results.append(AttackResult(images=imgs, loss_trace=traces[j], manifest=manifest, latents=lats))
    return results
