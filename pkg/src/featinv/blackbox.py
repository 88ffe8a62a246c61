"""Black-box attack: learn an inversion network from (query, feature) pairs.

The inverter is ``D(F_u(y))``: a trainable U-Net ``F_u`` that maps an
intercepted feature to the prior's latent, followed by the frozen prior
``D``. For K-frame groups a 1x1 pointwise convolution mixes the K stacked
feature maps before K weight-shared U-Net branches.

Architecture rule: the feature map is bilinearly resized to
``latent_hw * 2**d`` (the smallest such size not below the feature size),
passed through an entry block, ``d + unet_depth`` stride-2 conv blocks
(doubling channels), ``unet_depth`` stride-2 deconv blocks with skip
concatenation, and a 1x1 projection to the latent channels. A parallel
linear path (resize + 1x1 conv) is summed in, so the network can represent
linear maps exactly from initialisation.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import __version__
from .errors import CapabilityError, ConstructionError, ConfigError, InputError, NumericError
from .io import (
    load_archive,
    load_blob,
    load_png,
    load_state_arrays,
    save_archive,
    save_blob,
    save_png,
    sha256_tensor,
    state_dict_arrays,
    write_json,
)
from .losses import LossWeights, negentropy_loss, tv_loss
from .priors import build_prior, is_zero_embedding, normalize_latent
from .splitnet import extract_features, seeded

TEXT_TRAIN_WEIGHTS = LossWeights(lambda_s=1.0, lambda_txt=3.0)
DEFAULT_TRAIN_SIZE = 4096
DEFAULT_TEST_SIZE = 1024
DATASET_VERSION = 1


# ---------------------------------------------------------------- queries


@dataclass
class QueryDataset:
    """Attacker queries ``x`` with intercepted features ``y``.

    Plain datasets hold (N, C, H, W) images and (N, *feature) features;
    grouped (multi-frame) datasets add a K axis after N.
    """

    x: torch.Tensor
    y: torch.Tensor
    texts: list = None
    split: str = "train"
    group_size: int = 1

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise InputError(f"{len(self.x)} queries vs {len(self.y)} features")
        if self.texts is not None and len(self.texts) != len(self.x):
            raise InputError("texts must pair one-to-one with queries")
        if self.split not in ("train", "test"):
            raise InputError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.x)

    @property
    def feature_shape(self):
        return tuple(self.y.shape[2:] if self.group_size > 1 else self.y.shape[1:])

    def subset(self, idx, split=None):
        idx = list(idx)
        texts = [self.texts[i] for i in idx] if self.texts is not None else None
        return QueryDataset(self.x[idx], self.y[idx], texts, split or self.split, self.group_size)

    def checksum(self):
        return hashlib.sha256((sha256_tensor(self.x) + sha256_tensor(self.y)).encode()).hexdigest()


def collect_queries(sm, inputs, texts=None, split="train"):
    """Send each query through ``F1`` and record the response.

    ``inputs`` is (N, C, H, W) or, for frame groups, (N, K, C, H, W). Only
    ``extract_features`` is used: the attacker never reads F1's internals.
    """
    x = torch.as_tensor(np.asarray(inputs), dtype=torch.float32)
    if x.dim() == len(sm.input_shape) + 2:
        n, k = x.shape[:2]
        y = extract_features(sm, x.reshape(n * k, *x.shape[2:]))
        y = y.reshape(n, k, *y.shape[1:])
        return QueryDataset(x, y, texts, split, group_size=k)
    if x.dim() != len(sm.input_shape) + 1:
        raise InputError(f"queries must be a batch of images shaped {sm.input_shape}, got {tuple(x.shape)}")
    return QueryDataset(x, extract_features(sm, x), texts, split)


def check_disjoint(train, test):
    """Raise if any query image appears in both splits."""
    def keys(ds):
        return {hashlib.sha256(img.numpy().tobytes()).hexdigest() for img in ds.x}
    shared = keys(train) & keys(test)
    if shared:
        raise InputError(f"{len(shared)} queries appear in both train and test splits")


def save_dataset(ds, directory):
    """Image directory + feature blob + ``index.json``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    files = []
    flat = ds.x.reshape(-1, *ds.x.shape[-3:])
    for i, img in enumerate(flat):
        name = f"images/{i:06d}.png"
        save_png(directory / name, img)
        files.append(name)
    save_blob(directory / "features.bin", ds.y, meta={"split": ds.split})
    write_json(
        directory / "index.json",
        {
            "format": "featinv-queries",
            "version": DATASET_VERSION,
            "split": ds.split,
            "count": len(ds),
            "group_size": ds.group_size,
            "feature_shape": list(ds.feature_shape),
            "image_shape": list(ds.x.shape[-3:]),
            "images": files,
            "features": "features.bin",
            "texts": ds.texts,
        },
    )


def load_dataset(directory):
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    if index.get("format") != "featinv-queries":
        raise InputError(f"{directory}: not a featinv query dataset")
    x = torch.from_numpy(np.stack([load_png(directory / f) for f in index["images"]]))
    y, _ = load_blob(directory / index["features"])
    k = index.get("group_size", 1)
    if k > 1:
        x = x.reshape(index["count"], k, *x.shape[1:])
    return QueryDataset(x, torch.from_numpy(y.copy()), index.get("texts"), index["split"], k)


# ---------------------------------------------------------------- network spec


@dataclass
class InverterNetSpec:
    input_feature_shape: tuple
    latent_shape: tuple
    width: int = 16
    frame_count: int = 1
    fuse: bool = True
    unet_depth: int = 1
    normalize_output: bool = True
    resize_to: tuple = None
    down_levels: int = 0
    block_plan: list = field(default_factory=list)
    parameter_count: int = 0

    def to_dict(self):
        d = asdict(self)
        for key in ("input_feature_shape", "latent_shape", "resize_to"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("input_feature_shape", "latent_shape", "resize_to"):
            d[key] = tuple(d[key])
        return cls(**d)

    @property
    def fused(self):
        return self.frame_count > 1 and self.fuse


def _grid_shape(shape):
    """Feature shape as (C, H, W); token features (T, D) become (D, sqrt T, sqrt T)."""
    if len(shape) == 3:
        return tuple(shape)
    if len(shape) == 2:
        t, d = shape
        s = int(round(math.sqrt(t)))
        if s * s != t:
            raise ConstructionError(f"token features {shape}: token count {t} is not a square grid (stage: reshape)")
        return (d, s, s)
    raise ConstructionError(f"unsupported feature shape {shape} (stage: reshape)")


def _plan(spec):
    c, h, w = _grid_shape(spec.input_feature_shape)
    lc, lh, lw = spec.latent_shape
    if lh != lw or h != w:
        raise ConstructionError("only square feature maps and latents are supported (stage: resize)")
    d = max(0, math.ceil(math.log2(h / lh))) if h > lh else 0
    size = lh * 2**d
    levels = d + spec.unet_depth
    if size % 2**levels:
        raise ConstructionError(
            f"resized size {size} cannot be halved {levels} times (stage: downsample); lower unet_depth"
        )
    wd = spec.width
    plan = [{"kind": "conv", "cin": c, "cout": wd, "stride": 1, "size": size}]
    level_ch = [wd * 2**i for i in range(levels + 1)]
    for i in range(levels):
        plan.append({"kind": "conv", "cin": level_ch[i], "cout": level_ch[i + 1], "stride": 2,
                     "size": size // 2 ** (i + 1)})
    ch = level_ch[levels]
    for i in range(spec.unet_depth):
        out = level_ch[levels - 1 - i]
        plan.append({"kind": "deconv", "cin": ch, "cout": out, "stride": 2, "skip": out,
                     "size": size // 2 ** (levels - 1 - i)})
        ch = 2 * out
    plan.append({"kind": "project", "cin": ch, "cout": lc, "stride": 1, "size": lh})
    return (size, size), d, plan


class _Block(nn.Sequential):
    def __init__(self, cin, cout, stride, transpose=False):
        conv = (
            nn.ConvTranspose2d(cin, cout, 4, stride, 1, bias=False)
            if transpose
            else nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        )
        super().__init__(conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class UNetBranch(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.resize_to = tuple(spec.resize_to)
        self.latent_hw = tuple(spec.latent_shape[1:])
        self.token_input = len(spec.input_feature_shape) == 2
        self.grid = _grid_shape(spec.input_feature_shape)
        plan = spec.block_plan
        self.entry = _Block(plan[0]["cin"], plan[0]["cout"], 1)
        self.down = nn.ModuleList(_Block(p["cin"], p["cout"], 2) for p in plan if p["kind"] == "conv" and p["stride"] == 2)
        self.up = nn.ModuleList(_Block(p["cin"], p["cout"], 2, transpose=True) for p in plan if p["kind"] == "deconv")
        self.head = nn.Conv2d(plan[-1]["cin"], plan[-1]["cout"], 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.linear = nn.Conv2d(self.grid[0], spec.latent_shape[0], 1)

    def to_grid(self, y):
        if self.token_input:
            b, t, d = y.shape
            s = self.grid[1]
            y = y.transpose(1, 2).reshape(b, d, s, s)
        return y

    def forward(self, y):
        y = self.to_grid(y)
        h = F.interpolate(y, size=self.resize_to, mode="bilinear", align_corners=False) if y.shape[-2:] != self.resize_to else y
        h = self.entry(h)
        skips = []
        for blk in self.down:
            skips.append(h)
            h = blk(h)
        for blk in self.up:
            h = blk(h)
            h = torch.cat([h, skips.pop()], dim=1)
        main = self.head(h)
        lin_in = F.interpolate(y, size=self.latent_hw, mode="bilinear", align_corners=False) if y.shape[-2:] != self.latent_hw else y
        return main + self.linear(lin_in)


class InverterNet(nn.Module):
    """``F_u``: optional pointwise fusion over K frames, then a shared U-Net branch."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.unet = UNetBranch(spec)
        self.fusion = None
        if spec.fused:
            c = _grid_shape(spec.input_feature_shape)[0]
            k = spec.frame_count
            self.fusion = nn.Conv2d(k * c, k * c, 1)
            # start as the identity so fusion can only help
            with torch.no_grad():
                self.fusion.weight.copy_(torch.eye(k * c).view(k * c, k * c, 1, 1))
                self.fusion.bias.zero_()

    @property
    def branches(self):
        return [self.unet] * self.spec.frame_count

    def forward(self, y):
        """(B, *feature) -> (B, *latent); with K frames (B, K, *feature) -> (B, K, *latent)."""
        k = self.spec.frame_count
        grouped = y.dim() == len(self.spec.input_feature_shape) + 2
        if not grouped:
            out = self.unet(y)
        else:
            b = y.shape[0]
            if y.shape[1] != k:
                raise InputError(f"expected groups of {k} frames, got {y.shape[1]}")
            flat = y.reshape(b * k, *y.shape[2:])
            if self.fusion is not None:
                grid = self.unet.to_grid(flat)
                c, h, w = grid.shape[1:]
                mixed = self.fusion(grid.reshape(b, k * c, h, w)).reshape(b * k, c, h, w)
                out = self._branch_from_grid(mixed)
            else:
                out = self.unet(flat)
            out = out.reshape(b, k, *out.shape[1:])
        if self.spec.normalize_output:
            shape = out.shape
            out = normalize_latent(out.reshape(-1, *self.spec.latent_shape), batched=True).reshape(shape)
        return out

    def _branch_from_grid(self, grid):
        token = self.unet.token_input
        self.unet.token_input = False
        try:
            return self.unet(grid)
        finally:
            self.unet.token_input = token


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def _realize(spec):
    resize, d, plan = _plan(spec)
    spec = replace(spec, resize_to=resize, down_levels=d, block_plan=plan)
    with seeded(0):
        net = InverterNet(spec)
    return replace(spec, parameter_count=count_parameters(net))


def build_inverter(feature_shape, latent_shape, k=1, param_budget=None, fuse=True, unet_depth=1,
                   normalize_output=True, width=16, tolerance=0.05):
    """Construct an :class:`InverterNetSpec`.

    With ``param_budget`` the channel width is chosen by binary search so the
    realised parameter count lands within ``tolerance`` of the budget.
    """
    if k < 1:
        raise ConstructionError(f"frame count must be >= 1, got {k} (stage: fusion)")
    base = InverterNetSpec(
        input_feature_shape=tuple(feature_shape),
        latent_shape=tuple(latent_shape),
        width=width,
        frame_count=k,
        fuse=fuse,
        unet_depth=unet_depth,
        normalize_output=normalize_output,
    )
    if param_budget is None:
        return _realize(base)
    lo, hi = 1, 1024
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        spec = _realize(replace(base, width=mid))
        if best is None or abs(spec.parameter_count - param_budget) < abs(best.parameter_count - param_budget):
            best = spec
        if spec.parameter_count < param_budget:
            lo = mid + 1
        else:
            hi = mid - 1
    if abs(best.parameter_count - param_budget) > tolerance * param_budget:
        raise ConstructionError(
            f"closest width {best.width} gives {best.parameter_count} parameters, "
            f"outside {tolerance:.0%} of budget {param_budget} (stage: width search)"
        )
    return best


def baseline_specs(feature_shape, image_shape, latent_shape, param_budget, decoder_params=0):
    """Equal-budget DO / DB / DMB inverters.

    DO maps straight to pixels; DB fine-tunes the prior decoder jointly, so
    the decoder's parameters are charged against its budget; DMB keeps the
    prior frozen.
    """
    return {
        "DO": build_inverter(feature_shape, image_shape, param_budget=param_budget, normalize_output=False),
        "DB": build_inverter(feature_shape, latent_shape, param_budget=param_budget - decoder_params),
        "DMB": build_inverter(feature_shape, latent_shape, param_budget=param_budget),
    }


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 96
    batch_size: int = 128
    learning_rate: float = 0.1
    betas: tuple = (0.9, 0.999)
    lr_schedule: tuple = ((1 / 3, 0.5), (2 / 3, 0.5))
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    val_fraction: float = 0.1
    negentropy_mode: str = "literal"

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"must be an integer >= 1, got {self.epochs!r}", "train.epochs")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"must be an integer >= 1, got {self.batch_size!r}", "train.batch_size")
        if not self.learning_rate > 0:
            raise ConfigError(f"must be > 0, got {self.learning_rate!r}", "train.learning_rate")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"must be in [0, 1), got {self.val_fraction!r}", "train.val_fraction")

    def lr_at(self, epoch):
        lr = self.learning_rate
        for frac, factor in self.lr_schedule:
            if epoch >= int(round(frac * self.epochs)):
                lr *= factor
        return lr

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lr_schedule"] = [list(m) for m in self.lr_schedule]
        return d


@dataclass
class TrainedInverter:
    spec: InverterNetSpec
    net: InverterNet
    prior: object
    manifest: dict

    @property
    def prior_name(self):
        return self.prior.name

    def save(self, path):
        meta = {"spec": self.spec.to_dict(), "prior": self.prior.describe(), "manifest": self.manifest}
        save_archive(path, "inverter", state_dict_arrays(self.net), meta)

    @classmethod
    def load(cls, path, prior=None):
        meta, arrays = load_archive(path, kind="inverter")
        spec = InverterNetSpec.from_dict(meta["spec"])
        net = InverterNet(spec)
        load_state_arrays(net, arrays)
        net.eval()
        if prior is None:
            p = meta["prior"]
            prior = build_prior(p["name"], image_shape=tuple(p["output_shape"]), sampling_steps=p["sampling_steps"])
        return cls(spec, net, prior, meta["manifest"])


def _embed_all(texts, encoder, n):
    if texts is None:
        raise InputError(f"text training needs captions; missing for indices {list(range(n))[:20]}")
    # "" is the no-prompt sentinel (zero embedding), not a missing entry
    missing = [i for i, t in enumerate(texts) if t is None]
    if missing:
        raise InputError(f"missing text entries at indices {missing[:20]}")
    cache = {}
    for t in texts:
        if t not in cache:
            cache[t] = encoder(t)
    return torch.stack([cache[t] for t in texts])


def _batch_loss(net, prior, cfg, y, x, e, use_text):
    """Per-group loss: sum over frames of (mean squared error + lambda_s TV), plus negentropy."""
    w = cfg.weights
    latent = net(y)
    grouped = latent.dim() == len(prior.latent_shape) + 2
    k = latent.shape[1] if grouped else 1
    flat_latent = latent.reshape(-1, *prior.latent_shape)
    flat_e = None
    if e is not None:
        flat_e = e.repeat_interleave(k, dim=0) if grouped else e
    img = prior.decode(flat_latent, flat_e)
    target = x.reshape(-1, *x.shape[-3:])
    rec = ((img - target) ** 2).reshape(img.shape[0], -1).mean(dim=1)
    tv = tv_loss(img, per_sample=True)
    per = rec + w.lambda_s * tv
    if use_text and w.lambda_txt:
        per = per + w.lambda_txt * negentropy_loss(flat_latent, w.alpha, mode=cfg.negentropy_mode, per_sample=True)
    return per.reshape(-1, k).sum(dim=1).mean()


def _fit(ds, spec, prior, cfg, variant, e=None, use_text=False):
    if len(ds) == 0:
        raise InputError("query dataset is empty")
    if tuple(ds.feature_shape) != tuple(spec.input_feature_shape):
        raise InputError(f"dataset features {ds.feature_shape} do not match spec input {spec.input_feature_shape}")
    if tuple(spec.latent_shape) != tuple(prior.latent_shape):
        raise InputError(f"spec latent {spec.latent_shape} does not match prior latent {prior.latent_shape}")
    if spec.normalize_output != prior.normalized_input:
        raise InputError(f"spec normalize_output={spec.normalize_output} but prior {prior.name!r} expects "
                         f"normalized_input={prior.normalized_input}")
    n = len(ds)
    n_val = int(math.floor(cfg.val_fraction * n)) if n > 1 else 0
    n_tr = n - n_val
    with seeded(cfg.seed):
        net = InverterNet(spec)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas))
    gen = torch.Generator().manual_seed(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        for pg in opt.param_groups:
            pg["lr"] = cfg.lr_at(epoch)
        net.train()
        perm = torch.randperm(n_tr, generator=gen)
        total, seen = 0.0, 0
        for i in range(0, n_tr, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if len(idx) < 2 and n_tr >= 2:
                continue  # BatchNorm needs > 1 sample per batch in training mode
            loss = _batch_loss(net, prior, cfg, ds.y[idx], ds.x[idx], e[idx] if e is not None else None, use_text)
            if not torch.isfinite(loss):
                raise NumericError(f"training diverged (non-finite loss) at epoch {epoch}", where=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": total / max(seen, 1), "lr": cfg.lr_at(epoch)}
        if n_val:
            net.eval()
            with torch.no_grad():
                val = _batch_loss(net, prior, cfg, ds.y[n_tr:], ds.x[n_tr:],
                                  e[n_tr:] if e is not None else None, use_text).item()
            if not math.isfinite(val):
                raise NumericError(f"validation loss diverged at epoch {epoch}", where=epoch)
            row["val_loss"] = val
        trace.append(row)
    net.eval()
    manifest = {
        "variant": variant,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "train_size": n_tr,
        "val_size": n_val,
        "dataset_sha256": ds.checksum(),
        "loss_trace": trace,
        "final_train_loss": trace[-1]["train_loss"],
        "first_train_loss": trace[0]["train_loss"],
        "parameter_count": count_parameters(net),
        "prior": prior.name,
        "toolkit_version": __version__,
    }
    return TrainedInverter(spec, net, prior, manifest)


def train_inverter(ds, spec, prior, cfg):
    """Fit ``F_u`` so that ``D(F_u(y_q))`` reproduces ``x_q`` (plus TV smoothing)."""
    if ds.group_size != 1:
        raise InputError("grouped dataset given to train_inverter; use train_inverter_multiframe")
    return _fit(ds, spec, prior, replace(cfg, weights=replace(cfg.weights, lambda_txt=0.0)), "blackbox")


def train_inverter_with_text(ds, spec, prior, cfg, encoder):
    """As :func:`train_inverter`, decoding with caption embeddings and adding the negentropy term."""
    if not prior.supports_text:
        raise CapabilityError(f"prior {prior.name!r} cannot be conditioned on text")
    e = _embed_all(ds.texts, encoder, len(ds))
    if all(is_zero_embedding(row) for row in e):
        e = None
    return _fit(ds, spec, prior, cfg, "blackbox-text", e=e, use_text=True)


def train_inverter_multiframe(ds, spec, prior, cfg):
    """Train on groups of exactly ``spec.frame_count`` consecutive frames."""
    k = spec.frame_count
    if ds.x.dim() != 5 or ds.y.dim() < 3:
        raise InputError("multi-frame training needs a grouped dataset (N, K, ...)")
    if ds.group_size != k or ds.x.shape[1] != k or ds.y.shape[1] != k:
        raise InputError(f"ragged groups: expected {k} frames per group, dataset has {ds.group_size}")
    return _fit(ds, spec, prior, replace(cfg, weights=replace(cfg.weights, lambda_txt=0.0)), "blackbox-multiframe")


def run_inverter(inv, y, e=None):
    """``D(F_u(y))`` for one feature, a batch, or a batch of frame groups."""
    y = torch.as_tensor(y, dtype=torch.float32)
    fs = tuple(inv.spec.input_feature_shape)
    if tuple(y.shape) == fs:
        y, single = y.unsqueeze(0), True
    else:
        single = False
    grouped = y.dim() == len(fs) + 2
    expect = y.shape[2:] if grouped else y.shape[1:]
    if tuple(expect) != fs:
        raise InputError(f"feature shape {tuple(expect)} does not match inverter input {fs}")
    if not is_zero_embedding(e) and not inv.prior.supports_text:
        raise CapabilityError(f"prior {inv.prior.name!r} cannot be conditioned on text")
    inv.net.eval()
    with torch.no_grad():
        latent = inv.net(y)
        flat = latent.reshape(-1, *inv.prior.latent_shape)
        if e is not None and e.dim() == 2 and grouped:
            e = e.repeat_interleave(latent.shape[1], dim=0)
        img = inv.prior.decode(flat, e)
    img = img.reshape(*latent.shape[: 2 if grouped else 1], *img.shape[1:])
    return img[0] if single else img
