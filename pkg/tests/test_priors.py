import numpy as np
import pytest
import torch

from featinv.data import make_shapes
from featinv.errors import CapabilityError, ConfigError, DegenerateLatentError, InputError
from featinv.metrics import psnr
from featinv.priors import (
    HashTextEncoder,
    IdentityPrior,
    LDMAdapter,
    ToyDecoderPrior,
    build_prior,
    embed_text,
    is_zero_embedding,
    normalize_latent,
)


def test_normalize_fixed_point():
    v = torch.randn(1000, dtype=torch.float64)
    v = (v - v.mean()) / v.std(unbiased=False)
    assert torch.allclose(normalize_latent(v), v, atol=1e-6)


def test_normalize_hand_oracle():
    out = normalize_latent(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    assert out.tolist() == pytest.approx([-1.2247449, 0.0, 1.2247449], abs=1e-6)


def test_normalize_degenerate():
    with pytest.raises(DegenerateLatentError):
        normalize_latent(torch.full((10,), 5.0))
    with pytest.raises(DegenerateLatentError):
        normalize_latent(torch.stack([torch.randn(4), torch.ones(4)]), batched=True)


def test_normalize_batched_independent():
    v = torch.randn(3, 2, 4, 4)
    out = normalize_latent(v, batched=True)
    for i in range(3):
        assert torch.allclose(out[i], normalize_latent(v[i]), atol=1e-6)


def test_identity_prior_is_reshape():
    prior = IdentityPrior((3, 4, 4))
    v = torch.randn(2, 3, 4, 4)
    assert torch.equal(prior.decode(v), v)
    with pytest.raises(InputError):
        prior.decode(torch.randn(2, 3, 5, 5))
    with pytest.raises(CapabilityError):
        prior.decode(v, HashTextEncoder()("blue sky"))


def test_text_embedding_contract():
    enc = HashTextEncoder()
    assert is_zero_embedding(embed_text(enc, ""))
    a, b = embed_text(enc, "blue sky"), embed_text(enc, "blue sky")
    assert torch.equal(a, b) and not is_zero_embedding(a)
    assert torch.equal(embed_text(enc, "blue sky  \n"), a)
    assert torch.equal(embed_text(enc, "Blue Sky"), a)
    assert not torch.equal(embed_text(enc, "snow"), a)
    with pytest.raises(CapabilityError):
        embed_text(None, "blue sky")


def test_toy_decoder_autoencodes_held_out_images():
    prior, enc = ToyDecoderPrior.load(with_encoder=True)
    images, _, _ = make_shapes(32, seed=4242)
    x = torch.from_numpy(images)
    with torch.no_grad():
        recon = prior.decode(prior.encode(enc, x))
    scores = [psnr(a * 255, b * 255) for a, b in zip(x.numpy(), recon.numpy())]
    assert np.mean(scores) > 25.0
    assert recon.min() >= 0 and recon.max() <= 1


def test_toy_decoder_text_conditioning_changes_output():
    prior = ToyDecoderPrior.load()
    v = torch.randn(1, *prior.latent_shape, generator=torch.Generator().manual_seed(0))
    enc = HashTextEncoder()
    with torch.no_grad():
        plain = prior.decode(v)
        assert torch.equal(prior.decode(v, enc("")), plain)
        assert not torch.allclose(prior.decode(v, enc("circle")), plain)


class _CountingDenoiser:
    def __init__(self):
        self.calls = []

    def __call__(self, x, t, e):
        self.calls.append(t)
        return torch.zeros_like(x)


def test_ldm_adapter_runs_requested_steps():
    den = _CountingDenoiser()
    prior = LDMAdapter(den, lambda z: torch.tanh(z[:, :3]), latent_shape=(4, 8, 8), output_shape=(3, 8, 8),
                       sampling_steps=20)
    out = prior.decode(torch.randn(4, 8, 8))
    assert len(den.calls) == 20
    assert den.calls == sorted(den.calls, reverse=True) and den.calls[0] == 999 and den.calls[-1] == 0
    assert out.shape == (3, 8, 8)


def test_ldm_guidance_calls_both_branches():
    den = _CountingDenoiser()
    prior = LDMAdapter(den, lambda z: z[:, :3], latent_shape=(4, 4, 4), output_shape=(3, 4, 4),
                       sampling_steps=5, guidance_scale=7.5)
    prior.decode(torch.randn(4, 4, 4), HashTextEncoder()("blue sky"))
    assert len(den.calls) == 10


def test_ldm_without_weights_is_capability_error():
    prior = LDMAdapter()
    with pytest.raises(CapabilityError):
        prior.decode(torch.randn(4, 64, 64))


def test_build_prior_errors():
    with pytest.raises(ConfigError, match="prior.name"):
        build_prior("gan")
    with pytest.raises(ConfigError, match="prior.sampling_steps"):
        LDMAdapter(sampling_steps=0)
