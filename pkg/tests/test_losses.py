import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featinv.errors import ConfigError, InputError, NumericError
from featinv.losses import (
    LossWeights,
    compose,
    gaussian_contrast_mean,
    logcosh,
    negentropy_loss,
    reconstruction_loss,
    temporal_loss,
    tv_loss,
)

from oracles import gaussian_logcosh2_mean, gaussian_logcosh2_var, tv_bruteforce


def test_reconstruction_zero_and_offset():
    z = torch.randn(10)
    assert reconstruction_loss(z, z).item() == 0
    assert reconstruction_loss(z + 1, z).item() == pytest.approx(1.0)


@pytest.mark.parametrize("a,b", [((10,), (1,)), ((2, 5), (5,)), ((4, 1), (4, 3))])
def test_reconstruction_never_broadcasts(a, b):
    with pytest.raises(InputError):
        reconstruction_loss(torch.zeros(a), torch.zeros(b))


def test_tv_constant_and_hand_case():
    assert tv_loss(torch.full((3, 5, 5), 0.7)).item() == 0
    # pairs: two vertical (0,0),(1,1) -> 0; two horizontal (0,1) -> 1 each; /4
    assert tv_loss(torch.tensor([[0.0, 1.0], [0.0, 1.0]])).item() == pytest.approx(0.5)


def test_tv_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(100):
        img = rng.random((3, 8, 8))
        assert abs(tv_loss(torch.from_numpy(img)).item() - tv_bruteforce(img)) < 1e-6


def test_tv_per_sample():
    x = torch.rand(4, 3, 6, 7, dtype=torch.float64)
    per = tv_loss(x, per_sample=True)
    assert per.shape == (4,)
    for i in range(4):
        assert per[i].item() == pytest.approx(tv_bruteforce(x[i].numpy()), abs=1e-12)


def test_negentropy_zero_latent():
    assert negentropy_loss(torch.zeros(100)).item() == 0


def test_negentropy_monte_carlo_oracle():
    v = torch.randn(100_000, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    ref = -gaussian_logcosh2_mean(1.0)
    se = math.sqrt(gaussian_logcosh2_var(1.0) / v.numel())
    assert abs(negentropy_loss(v, 1.0).item() - ref) < 3 * se


@pytest.mark.parametrize("alpha", [1.0, 1.5, 2.0])
def test_gauss_hermite_reference(alpha):
    assert gaussian_contrast_mean(alpha) == pytest.approx(gaussian_logcosh2_mean(alpha), abs=1e-10)


def test_negentropy_large_values_finite():
    v = torch.tensor([1000.0, -1000.0, 1000.0, -1000.0])
    for mode in ("literal", "squared_difference"):
        out = negentropy_loss(v, 2.0, mode=mode)
        assert torch.isfinite(out)
    # log cosh(2000) = 2000 - log 2, so G = 2*(2000 - log2)/4
    assert negentropy_loss(v, 2.0).item() == pytest.approx(-(2000 - math.log(2)) / 2)


def test_squared_difference_is_zero_in_expectation():
    v = torch.randn(200_000, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert negentropy_loss(v, 1.0, mode="squared_difference").item() < 1e-5


@pytest.mark.parametrize("alpha", [0.5, 2.5])
def test_negentropy_alpha_range(alpha):
    with pytest.raises(ConfigError):
        negentropy_loss(torch.zeros(3), alpha)


def test_temporal_cases():
    v = torch.randn(2, 4)
    assert temporal_loss(v, v).item() == 0
    one = torch.randn(1, 5)
    assert temporal_loss(one, one.mean(0, keepdim=True)).item() == 0
    pair = torch.tensor([[0.0], [2.0]])
    vbar = pair.mean(0, keepdim=True).expand_as(pair)
    assert temporal_loss(pair, vbar, per_sample=True).tolist() == [1.0, 1.0]
    with pytest.raises(InputError):
        temporal_loss(torch.zeros(3), torch.zeros(4))


def test_compose_weights():
    rec, tv, neg, tmp = (torch.tensor(v) for v in (1.0, 2.0, 3.0, 4.0))
    assert compose(LossWeights(0, 0, 0), rec, tv, neg, tmp).total.item() == 1.0
    assert compose(LossWeights(1.0, 10.0), rec, tv, neg, tmp).total.item() == 1 + 2 + 30
    assert compose(LossWeights(lambda_s=1.0, lambda_c=5.0), rec, tv, neg, tmp).total.item() == 1 + 2 + 20


@pytest.mark.parametrize("bad", ["tv", "negentropy", "temporal", "reconstruction"])
def test_compose_names_nan_component(bad):
    parts = dict(reconstruction=torch.tensor(1.0), tv=torch.tensor(1.0), negentropy=torch.tensor(1.0), temporal=torch.tensor(1.0))
    parts[bad] = torch.tensor(float("nan"))
    with pytest.raises(NumericError, match=bad):
        compose(LossWeights(), **parts)


@pytest.mark.parametrize("field,value", [("lambda_s", -1.0), ("lambda_txt", float("inf")), ("alpha", 3.0)])
def test_weight_validation(field, value):
    with pytest.raises(ConfigError, match=f"weights.{field}"):
        LossWeights(**{field: value})


# ---------------------------------------------------------------- gradients


def _fd_check(fn, x, eps=1e-6, tol=1e-3):
    x = x.clone().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    flat = x.detach().clone().view(-1)
    numeric = torch.empty_like(flat)
    for i in range(flat.numel()):
        p, m = flat.clone(), flat.clone()
        p[i] += eps
        m[i] -= eps
        numeric[i] = (fn(p.view(x.shape)) - fn(m.view(x.shape))) / (2 * eps)
    err = (analytic.view(-1) - numeric).norm() / max(numeric.norm().item(), 1e-12)
    assert err < tol, err


def test_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(0)
    target = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    vbar = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    probe = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    _fd_check(lambda x: reconstruction_loss(x, target), probe)
    _fd_check(lambda x: tv_loss(x), probe)
    _fd_check(lambda x: negentropy_loss(x, 1.3), probe)
    _fd_check(lambda x: negentropy_loss(x, 1.0, mode="squared_difference"), probe)
    _fd_check(lambda x: temporal_loss(x, vbar), probe)
    w = LossWeights(1.0, 10.0, 5.0, 1.5)
    _fd_check(lambda x: compose(w, reconstruction_loss(x, target), tv_loss(x), negentropy_loss(x, 1.5),
                                temporal_loss(x, vbar)).total, probe)


# ---------------------------------------------------------------- properties


arrays = st.lists(st.floats(-50, 50, allow_nan=False), min_size=4, max_size=64)


@settings(max_examples=60, deadline=None)
@given(arrays)
def test_logcosh_matches_naive_where_safe(values):
    t = torch.tensor(values, dtype=torch.float64)
    assert torch.allclose(logcosh(t), torch.log(torch.cosh(t)), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays, st.floats(-5, 5))
def test_tv_is_shift_invariant_and_nonnegative(values, c):
    x = torch.tensor(values, dtype=torch.float64).view(1, 1, -1)
    assert tv_loss(x).item() >= 0
    assert tv_loss(x + c).item() == pytest.approx(tv_loss(x).item(), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays, arrays)
def test_reconstruction_symmetric(a, b):
    n = min(len(a), len(b))
    x, y = torch.tensor(a[:n]), torch.tensor(b[:n])
    assert reconstruction_loss(x, y).item() == pytest.approx(reconstruction_loss(y, x).item())
    assert reconstruction_loss(x, y).item() >= 0
