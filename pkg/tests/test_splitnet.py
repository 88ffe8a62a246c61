import numpy as np
import pytest
import torch
from torch import nn

from featinv.errors import ConfigError, InputError
from featinv.io import sha256_tensor
from featinv.splitnet import (
    CIFAR_MEAN,
    CIFAR_STD,
    MODELS,
    TargetModel,
    build_model,
    classify,
    extract_features,
    split,
)


def test_partition_of_three_layer_cnn():
    layers = [nn.Conv2d(3, 4, 3, padding=1), nn.Conv2d(4, 4, 3, padding=1), nn.Sequential(nn.Flatten(), nn.Linear(4 * 8 * 8, 2))]
    model = TargetModel("tiny", layers, (3, 8, 8), (0.0,) * 3, (1.0,) * 3)
    sm = split(model, 1)
    assert list(sm.f1)[1] is layers[0]
    assert list(sm.f2) == layers[1:]


@pytest.mark.parametrize("name", sorted(MODELS))
def test_every_split_composes_to_full_model(name):
    model = build_model(name)
    x = torch.rand(16, *model.input_shape, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        full = model(x)
    for k in range(1, model.n_layers):
        sm = split(model, k)
        out = classify(sm, extract_features(sm, x))
        assert (out - full).abs().max().item() < 1e-5


@pytest.mark.parametrize("k", [0, 5, -1, 2.0])
def test_split_index_out_of_range(toy_cnn, k):
    with pytest.raises(ConfigError, match=r"model.split_index.*\[1, 4\]"):
        split(toy_cnn, k)


def test_vit_token_shape():
    sm = split(build_model("toy_vit"), 2)
    # 32x32 image with 8x8 patches -> 16 tokens of width 32
    assert sm.feature_shape == (16, 32)
    assert extract_features(sm, torch.rand(3, 32, 32)).shape == (16, 32)


def test_identity_f1_returns_preprocessed_input(identity_split):
    x = torch.rand(2, 3, 32, 32)
    mean = torch.tensor(CIFAR_MEAN).view(3, 1, 1)
    std = torch.tensor(CIFAR_STD).view(3, 1, 1)
    assert torch.allclose(extract_features(identity_split, x), (x - mean) / std)


def test_meanpool_of_constant():
    sm = split(build_model("meanpool_probe"), 1)
    z = extract_features(sm, torch.ones(1, 4, 4))
    assert z.shape == (1, 2, 2)
    assert torch.equal(z, torch.ones(1, 2, 2))


def test_feature_checksum_stable():
    x = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(3))
    a = sha256_tensor(extract_features(split(build_model("toy_cnn"), 2), x))
    b = sha256_tensor(extract_features(split(build_model("toy_cnn"), 2), x))
    assert a == b


def test_shape_mismatch(toy_cnn):
    with pytest.raises(InputError):
        extract_features(split(toy_cnn, 1), torch.rand(3, 16, 16))


def test_unknown_model():
    with pytest.raises(ConfigError, match="model.name"):
        build_model("resnet9000")


def test_halves_are_frozen_but_f1_differentiable(toy_cnn):
    sm = split(toy_cnn, 2)
    assert not any(p.requires_grad for p in toy_cnn.parameters())
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    sm.f1(x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_bundled_classifier_is_trained():
    from featinv.data import make_shapes

    images, labels, _ = make_shapes(64, seed=99)
    with torch.no_grad():
        pred = build_model("toy_cnn")(torch.from_numpy(images)).argmax(1).numpy()
    assert np.mean(pred == labels) > 0.9
