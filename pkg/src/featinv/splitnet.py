"""Target models, layer-wise splitting and feature taps.

A :class:`TargetModel` is an ordered list of blocks plus the input
normalisation constants. :func:`split` cuts it into the user-side half ``f1``
(normalisation + blocks ``[0, split_index)``) and the cloud-side half ``f2``.
Normalisation is treated as public knowledge, so it lives in ``f1``.
"""

import contextlib
import os
from importlib import resources

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .io import load_archive, load_state_arrays

DETERMINISTIC_ENV = "FEATINV_DETERMINISTIC"


def set_deterministic(enabled=True):
    """Force deterministic kernels and single-threaded reductions."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def deterministic_from_env():
    if os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0"):
        set_deterministic(True)
        return True
    return False


@contextlib.contextmanager
def seeded(seed):
    """Run a block with the global torch RNG seeded, restoring it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        c = len(mean)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(c, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(c, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ConvStem(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class PoolHead(nn.Module):
    def __init__(self, cin, n_classes):
        super().__init__()
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))


class PatchEmbed(nn.Module):
    def __init__(self, cin, dim, patch, n_tokens):
        super().__init__()
        self.proj = nn.Conv2d(cin, dim, patch, patch)
        self.pos = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2) + self.pos


class AttentionBlock(nn.Module):
    """Pre-norm transformer block. Written out explicitly so every path is plain autograd."""

    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / (d // self.heads) ** 0.5, dim=-1)
        x = x + self.out((att @ v).transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.norm2(x))


class TokenHead(nn.Module):
    def __init__(self, dim, n_classes):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, n_classes)

    def forward(self, x):
        return self.fc(self.norm(x).mean(dim=1))


class TargetModel(nn.Module):
    """A classifier expressed as normalisation followed by an ordered block list."""

    def __init__(self, name, layers, input_shape, mean, std):
        super().__init__()
        if len(layers) == 0:
            raise ConfigError("target model needs at least one layer", "model.layers")
        self.name = name
        self.input_shape = tuple(input_shape)
        self.preprocess = Normalize(mean, std)
        self.layers = nn.ModuleList(layers)

    @property
    def n_layers(self):
        return len(self.layers)

    def forward(self, x):
        x = self.preprocess(x)
        for layer in self.layers:
            x = layer(x)
        return x


class SplitModel:
    """Frozen two-party partition of a :class:`TargetModel`.

    ``f1`` maps raw images to the intercepted feature ``z_mid``; ``f2`` maps
    features to the task output. Both halves are in eval mode with gradients
    disabled on their parameters, but ``f1`` stays differentiable with
    respect to its input.
    """

    def __init__(self, base, split_index):
        n = base.n_layers
        if not isinstance(split_index, int) or not 1 <= split_index < n:
            raise ConfigError(
                f"split_index must be in [1, {n - 1}] for model {base.name!r} ({n} layers), got {split_index!r}",
                "model.split_index",
            )
        base.eval()
        for p in base.parameters():
            p.requires_grad_(False)
        self.base = base
        self.split_index = split_index
        self.f1 = nn.Sequential(base.preprocess, *base.layers[:split_index]).eval()
        self.f2 = nn.Sequential(*base.layers[split_index:]).eval()
        with torch.no_grad():
            probe = torch.zeros(1, *base.input_shape)
            self.feature_shape = tuple(self.f1(probe).shape[1:])
            self.output_shape = tuple(self.f2(self.f1(probe)).shape[1:])

    @property
    def input_shape(self):
        return self.base.input_shape

    def descriptor(self):
        return {
            "model": self.base.name,
            "split_index": self.split_index,
            "n_layers": self.base.n_layers,
            "feature_shape": list(self.feature_shape),
        }

    def __repr__(self):
        return f"SplitModel({self.base.name!r}, split_index={self.split_index}, feature_shape={self.feature_shape})"


def split(model, split_index):
    return SplitModel(model, split_index)


def _check_images(sm, x):
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float32)
    single = x.dim() == len(sm.input_shape)
    xb = x.unsqueeze(0) if single else x
    if tuple(xb.shape[1:]) != sm.input_shape:
        raise InputError(f"image shape {tuple(xb.shape[1:])} does not match model input {sm.input_shape}")
    return xb, single


def extract_features(sm, x):
    """``F1(x)`` for one image (C, H, W) or a batch (B, C, H, W)."""
    xb, single = _check_images(sm, x)
    with torch.no_grad():
        z = sm.f1(xb.float())
    return z[0] if single else z


def classify(sm, z):
    """Task logits ``F2(z)`` for a batch of features."""
    with torch.no_grad():
        return sm.f2(z)


# ---------------------------------------------------------------- model zoo

CIFAR_MEAN = (0.5, 0.5, 0.5)
CIFAR_STD = (0.25, 0.25, 0.25)


def toy_cnn(n_classes=4, width=16):
    """Stem + three stride-2 residual blocks + head: 5 layers, 32x32 input."""
    w = width
    layers = [
        ConvStem(3, w),
        ResBlock(w, 2 * w, 2),
        ResBlock(2 * w, 4 * w, 2),
        ResBlock(4 * w, 4 * w, 2),
        PoolHead(4 * w, n_classes),
    ]
    return TargetModel("toy_cnn", layers, (3, 32, 32), CIFAR_MEAN, CIFAR_STD)


def identity_cnn(n_classes=4, width=16):
    """The toy CNN behind an identity layer, so split_index=1 exposes the normalised input."""
    base = toy_cnn(n_classes, width)
    return TargetModel("identity_cnn", [nn.Identity(), *base.layers], base.input_shape, CIFAR_MEAN, CIFAR_STD)


def toy_vit(n_classes=4, dim=32, depth=4, heads=4, patch=8):
    n_tokens = (32 // patch) ** 2
    layers = [PatchEmbed(3, dim, patch, n_tokens)]
    layers += [AttentionBlock(dim, heads) for _ in range(depth)]
    layers.append(TokenHead(dim, n_classes))
    return TargetModel("toy_vit", layers, (3, 32, 32), CIFAR_MEAN, CIFAR_STD)


def meanpool_probe():
    """1x4x4 input, 2x2 mean pool then a linear readout. No normalisation."""
    layers = [nn.AvgPool2d(2), nn.Sequential(nn.Flatten(), nn.Linear(4, 2))]
    return TargetModel("meanpool_probe", layers, (1, 4, 4), (0.0,), (1.0,))


MODELS = {
    "toy_cnn": toy_cnn,
    "identity_cnn": identity_cnn,
    "toy_vit": toy_vit,
    "meanpool_probe": meanpool_probe,
}

# packaged weights; identity_cnn reuses the toy CNN weights shifted by one layer
_BUNDLED = {"toy_cnn": "toy_cnn_v1.zip", "identity_cnn": "toy_cnn_v1.zip"}


def bundled_asset(filename):
    return resources.files("featinv") / "assets" / filename


def _load_weights(model, path):
    meta, arrays = load_archive(path, kind="target_model")
    if model.name == "identity_cnn" and meta.get("model") == "toy_cnn":
        arrays = {_shift_layer_key(k): v for k, v in arrays.items()}
    load_state_arrays(model, arrays)
    return meta


def _shift_layer_key(key):
    if key.startswith("layers."):
        head, idx, rest = key.split(".", 2)
        return f"layers.{int(idx) + 1}.{rest}"
    return key


def build_model(name, weights_path=None, seed=0, pretrained=True):
    """Instantiate a zoo model.

    Weights come from ``weights_path`` when given, else from the packaged
    asset for that model (if ``pretrained``), else a seeded random init.
    No network access ever happens here.
    """
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(MODELS)}", "model.name")
    with seeded(seed):
        model = MODELS[name]()
    if weights_path is not None:
        _load_weights(model, weights_path)
    elif pretrained and name in _BUNDLED:
        asset = bundled_asset(_BUNDLED[name])
        if asset.is_file():
            with resources.as_file(asset) as p:
                _load_weights(model, p)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
