"""Differentiable generative priors ``D(v_n, e)`` and the text encoder ``E(t)``.

Three priors ship:

* :class:`IdentityPrior` reshapes the latent into the image. It consumes the
  raw latent (no normalisation), which turns latent optimisation into plain
  pixel optimisation.
* :class:`ToyDecoderPrior` is a small conditional convolutional decoder,
  trained as the decoder half of an autoencoder on the procedural corpus.
* :class:`LDMAdapter` wraps an external denoiser + VAE decoder pair and runs
  a deterministic DDIM-style reverse loop of ``sampling_steps`` steps.

Latent initialisation is the engines' job, not the priors'.
"""

import hashlib
from importlib import resources

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import CapabilityError, ConfigError, DegenerateLatentError, InputError
from .io import load_archive, load_state_arrays, save_archive, state_dict_arrays

TEXT_DIM = 32


def normalize_latent(v, batched=False, eps=1e-12):
    """Shift to zero mean and scale to unit population std.

    With ``batched=True`` each leading-axis slice is normalised on its own.
    Differentiable. Raises :class:`DegenerateLatentError` when the std is
    ``<= eps`` (a constant latent carries no direction to normalise).
    """
    if batched:
        flat = v.reshape(v.shape[0], -1)
        mean = flat.mean(dim=1, keepdim=True)
        std = flat.std(dim=1, unbiased=False, keepdim=True)
        if not torch.isfinite(std).all() or (std <= eps).any():
            raise DegenerateLatentError("latent has (near-)zero standard deviation")
        return ((flat - mean) / std).reshape(v.shape)
    mean = v.mean()
    std = v.std(unbiased=False)
    if not torch.isfinite(std) or std <= eps:
        raise DegenerateLatentError("latent has (near-)zero standard deviation")
    return (v - mean) / std


# ---------------------------------------------------------------- text


def canonicalize(text):
    return text.strip().lower()


class HashTextEncoder:
    """Deterministic bag-of-words encoder.

    Each whitespace token maps to a fixed pseudo-random Gaussian vector
    seeded by its SHA-256; the prompt embedding is the unit-normalised sum.
    The empty prompt maps to the all-zero "no prompt" sentinel.
    """

    name = "hash_bow"

    def __init__(self, dim=TEXT_DIM):
        self.dim = dim

    def _token(self, tok):
        seed = int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim)

    def __call__(self, text):
        text = canonicalize(text)
        if not text:
            return torch.zeros(self.dim)
        vec = sum(self._token(tok) for tok in text.split())
        vec = vec / np.linalg.norm(vec)
        return torch.as_tensor(vec, dtype=torch.float32)


def embed_text(encoder, text):
    if encoder is None:
        raise CapabilityError("no text encoder available; text-prior attacks cannot run")
    if not isinstance(text, str):
        raise InputError(f"prompt must be a string, got {type(text).__name__}")
    return encoder(text)


def is_zero_embedding(e):
    return e is None or not bool(torch.any(e != 0))


# ---------------------------------------------------------------- priors


class GenerativePrior(nn.Module):
    """Base class. Subclasses implement ``_decode(v, e)`` on batched input."""

    name = "prior"
    supports_text = False
    # whether engines should hand this prior normalised latents
    normalized_input = True
    output_range = (0.0, 1.0)
    text_dim = TEXT_DIM

    def __init__(self, latent_shape, output_shape, sampling_steps=0):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.output_shape = tuple(output_shape)
        self.sampling_steps = int(sampling_steps)

    def decode(self, v_n, e=None):
        """Map latent(s) to image(s). Accepts one latent or a leading batch axis."""
        single = v_n.dim() == len(self.latent_shape)
        vb = v_n.unsqueeze(0) if single else v_n
        if tuple(vb.shape[1:]) != self.latent_shape:
            raise InputError(f"latent shape {tuple(vb.shape[1:])} does not match prior latent {self.latent_shape}")
        if not is_zero_embedding(e):
            if not self.supports_text:
                raise CapabilityError(f"prior {self.name!r} does not accept text embeddings")
            e = e.to(vb.dtype)
            if e.dim() == 1:
                e = e.unsqueeze(0).expand(vb.shape[0], -1)
            if e.shape != (vb.shape[0], self.text_dim):
                raise InputError(f"text embedding shape {tuple(e.shape)} incompatible with batch of {vb.shape[0]}")
        else:
            e = None
        x = self._decode(vb, e)
        return x[0] if single else x

    def forward(self, v_n, e=None):
        return self.decode(v_n, e)

    def _decode(self, v, e):
        raise NotImplementedError

    def describe(self):
        return {
            "name": self.name,
            "latent_shape": list(self.latent_shape),
            "output_shape": list(self.output_shape),
            "sampling_steps": self.sampling_steps,
            "supports_text": self.supports_text,
            "normalized_input": self.normalized_input,
        }


class IdentityPrior(GenerativePrior):
    name = "identity"
    normalized_input = False
    output_range = (-float("inf"), float("inf"))

    def __init__(self, image_shape=(3, 32, 32)):
        super().__init__(image_shape, image_shape)

    def _decode(self, v, e):
        return v.reshape(v.shape[0], *self.output_shape)


class _FiLM(nn.Module):
    def __init__(self, text_dim, channels):
        super().__init__()
        self.proj = nn.Linear(text_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h, e):
        if e is None:
            return h
        scale, shift = self.proj(e).chunk(2, dim=1)
        return h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]


def _up(cin, cout):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, 1, 1),
        nn.GroupNorm(8, cout),
        nn.SiLU(),
    )


class ToyDecoder(nn.Module):
    """4x8x8 latent -> 3x32x32 image in (0, 1), optionally FiLM-conditioned on text."""

    def __init__(self, latent_ch=4, width=64, text_dim=TEXT_DIM):
        super().__init__()
        self.inp = nn.Sequential(nn.Conv2d(latent_ch, width, 3, 1, 1), nn.GroupNorm(8, width), nn.SiLU())
        self.film = _FiLM(text_dim, width)
        self.mid = nn.Sequential(nn.Conv2d(width, width, 3, 1, 1), nn.GroupNorm(8, width), nn.SiLU())
        self.up1 = _up(width, width)
        self.up2 = _up(width, width // 2)
        self.out = nn.Conv2d(width // 2, 3, 3, 1, 1)

    def forward(self, v, e=None):
        h = self.film(self.inp(v), e)
        h = self.mid(h)
        h = self.up2(self.up1(h))
        return torch.sigmoid(self.out(h))


class ToyEncoder(nn.Module):
    """Training-time counterpart of :class:`ToyDecoder`; never used by attacks."""

    def __init__(self, latent_ch=4, width=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, 1, 1), nn.GroupNorm(8, width // 2), nn.SiLU(),
            nn.Conv2d(width // 2, width, 3, 2, 1), nn.GroupNorm(8, width), nn.SiLU(),
            nn.Conv2d(width, width, 3, 2, 1), nn.GroupNorm(8, width), nn.SiLU(),
            nn.Conv2d(width, latent_ch, 3, 1, 1),
        )

    def forward(self, x):
        return self.net(x)


TOY_DECODER_ASSET = "toy_decoder_v1.zip"


class ToyDecoderPrior(GenerativePrior):
    name = "toy_decoder"
    supports_text = True

    def __init__(self, decoder=None, latent_ch=4, width=64, meta=None):
        super().__init__((latent_ch, 8, 8), (3, 32, 32))
        self.decoder = decoder if decoder is not None else ToyDecoder(latent_ch, width)
        self.decoder.eval()
        for p in self.decoder.parameters():
            p.requires_grad_(False)
        self.meta = meta or {}

    def _decode(self, v, e):
        return self.decoder(v, e)

    def save(self, path, encoder=None, meta=None):
        tensors = {f"decoder.{k}": a for k, a in state_dict_arrays(self.decoder).items()}
        if encoder is not None:
            tensors.update({f"encoder.{k}": a for k, a in state_dict_arrays(encoder).items()})
        info = dict(self.meta, **(meta or {}))
        info.update(latent_shape=list(self.latent_shape), width=self.decoder.inp[0].out_channels)
        save_archive(path, "toy_decoder", tensors, info)

    @classmethod
    def load(cls, path=None, with_encoder=False):
        """Load decoder weights; defaults to the packaged asset."""
        if path is None:
            asset = resources.files("featinv") / "assets" / TOY_DECODER_ASSET
            if not asset.is_file():
                raise CapabilityError("packaged toy decoder weights are missing; run `python -m featinv.training`")
            with resources.as_file(asset) as p:
                meta, arrays = load_archive(p, kind="toy_decoder")
        else:
            meta, arrays = load_archive(path, kind="toy_decoder")
        latent_ch, width = meta["latent_shape"][0], meta["width"]
        dec = ToyDecoder(latent_ch, width)
        load_state_arrays(dec, {k[len("decoder."):]: v for k, v in arrays.items() if k.startswith("decoder.")})
        prior = cls(dec, latent_ch, width, meta=meta)
        if not with_encoder:
            return prior
        enc = ToyEncoder(latent_ch, width)
        load_state_arrays(enc, {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")})
        enc.eval()
        return prior, enc

    def encode(self, encoder, x):
        """Normalised latent of ``x`` under the paired training encoder."""
        with torch.no_grad():
            return normalize_latent(encoder(x), batched=True)


def linear_beta_schedule(n_train_steps=1000, beta_start=0.00085, beta_end=0.012):
    return torch.linspace(beta_start, beta_end, n_train_steps, dtype=torch.float64)


class LDMAdapter(GenerativePrior):
    """Adapter around an external latent diffusion model.

    ``denoiser(x_t, t, e)`` predicts noise, ``vae_decoder(z)`` maps the final
    latent to an image in [-1, 1]. Both can be passed directly or loaded from
    a TorchScript file at ``weights_path`` exposing ``denoise`` and
    ``decode``. ``scheduler`` and ``guidance_scale`` are pass-through
    settings; only the linear schedule with deterministic DDIM updates is
    implemented here.
    """

    name = "ldm_adapter"
    supports_text = True

    def __init__(
        self,
        denoiser=None,
        vae_decoder=None,
        weights_path=None,
        latent_shape=(4, 64, 64),
        output_shape=(3, 512, 512),
        sampling_steps=20,
        n_train_steps=1000,
        scheduler="linear",
        guidance_scale=1.0,
        latent_scale=0.18215,
        text_dim=TEXT_DIM,
    ):
        super().__init__(latent_shape, output_shape, sampling_steps)
        if sampling_steps < 1:
            raise ConfigError("sampling_steps must be >= 1", "prior.sampling_steps")
        if weights_path is not None and (denoiser is None or vae_decoder is None):
            module = torch.jit.load(str(weights_path))
            denoiser = denoiser or module.denoise
            vae_decoder = vae_decoder or module.decode
        self.denoiser = denoiser
        self.vae_decoder = vae_decoder
        self.scheduler = scheduler
        self.guidance_scale = float(guidance_scale)
        self.latent_scale = latent_scale
        self.text_dim = text_dim
        betas = linear_beta_schedule(n_train_steps)
        self.alphas_cumprod = torch.cumprod(1 - betas, dim=0)
        self.n_train_steps = n_train_steps

    def timesteps(self):
        ts = np.linspace(self.n_train_steps - 1, 0, self.sampling_steps).round().astype(np.int64)
        return [int(t) for t in ts]

    def _eps(self, x, t, e):
        if e is None or self.guidance_scale == 1.0:
            return self.denoiser(x, t, e)
        uncond = self.denoiser(x, t, None)
        cond = self.denoiser(x, t, e)
        return uncond + self.guidance_scale * (cond - uncond)

    def _decode(self, v, e):
        if self.denoiser is None or self.vae_decoder is None:
            raise CapabilityError("LDM adapter has no weights; set prior.weights_path")
        x = v
        ts = self.timesteps()
        for i, t in enumerate(ts):
            a_t = self.alphas_cumprod[t].to(x.dtype)
            a_prev = self.alphas_cumprod[ts[i + 1]].to(x.dtype) if i + 1 < len(ts) else torch.ones((), dtype=x.dtype)
            eps = self._eps(x, t, e)
            x0 = (x - (1 - a_t).sqrt() * eps) / a_t.sqrt()
            x = a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps
        img = self.vae_decoder(x / self.latent_scale)
        return ((img + 1) / 2).clamp(0, 1)


PRIORS = ("identity", "toy_decoder", "ldm_adapter")


def build_prior(name, image_shape=(3, 32, 32), weights_path=None, sampling_steps=20, **settings):
    if name == "identity":
        return IdentityPrior(image_shape)
    if name == "toy_decoder":
        return ToyDecoderPrior.load(weights_path)
    if name == "ldm_adapter":
        return LDMAdapter(weights_path=weights_path, sampling_steps=sampling_steps, **settings)
    raise ConfigError(f"unknown prior {name!r}; choose from {list(PRIORS)}", "prior.name")
