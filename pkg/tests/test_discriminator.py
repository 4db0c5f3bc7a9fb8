import math

import numpy as np
import pytest
import torch
from torch import nn

from fusefill.config import Config
from fusefill.discriminator import Discriminator

from conftest import tiny_config

# Pooled map per group at 128 px: (channels, height, width).
TABLE_MAPS = [(64, 64, 64), (128, 32, 32), (256, 16, 16), (512, 8, 8), (1024, 4, 4)]


def _plain(**kw):
    return Discriminator(tiny_config(spectral_norm=False, **kw), n_classes=5)


def test_full_size_shapes():
    D = Discriminator(Config(), n_classes=10)
    feat, maps = D.features(torch.randn(1, 3, 128, 128), return_maps=True)
    assert [tuple(m.shape[1:]) for m in maps] == TABLE_MAPS
    assert feat.shape == (1, 1024) and D.feature_dim == 1024
    assert D.classify(feat).shape == (1, 10)
    assert D.score(feat).shape == (1,)


def test_rejects_wrong_resolution(tiny_cfg):
    D = Discriminator(tiny_cfg, 3)
    with pytest.raises(ValueError):
        D.features(torch.randn(2, 1, 16, 16))


def test_set_score_is_mean_of_image_scores():
    D = _plain().eval()
    x = torch.randn(2, 3, 1, 8, 8)
    per_image = torch.stack([torch.stack([D(x[b, k:k + 1])[0] for k in range(3)]) for b in range(2)])
    assert torch.allclose(D.set_score(x), per_image.mean(1), atol=1e-6)


def test_zero_class_head_gives_log_n_cross_entropy():
    D = Discriminator(tiny_config(spectral_norm=False), n_classes=10)
    nn.init.zeros_(D.class_head.weight)
    nn.init.zeros_(D.class_head.bias)
    logits = D.classify(D.features(torch.randn(4, 1, 8, 8)))
    ce = nn.functional.cross_entropy(logits, torch.tensor([0, 3, 7, 9]))
    assert ce.item() == pytest.approx(math.log(10), abs=1e-6)


def test_single_image_set_predicts_one():
    D = _plain()
    a = D.predict_coefficients(torch.randn(4, 1, D.feature_dim), torch.randn(4, D.feature_dim))
    assert torch.equal(a, torch.ones(4, 1))


def test_zero_regressor_predicts_uniform():
    D = _plain()
    for m in D.regressor.modules():
        if isinstance(m, nn.Linear):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
    a = D.predict_coefficients(torch.randn(2, 4, D.feature_dim), torch.randn(2, D.feature_dim))
    assert torch.allclose(a, torch.full((2, 4), 0.25))


def test_pair_scores_softmax_worked_example():
    D = _plain(regressor_hidden=0)
    F = D.feature_dim
    with torch.no_grad():
        D.regressor.weight.zero_()
        D.regressor.weight[0, 0] = 1.0
        D.regressor.bias.zero_()
    cond = torch.zeros(1, 2, F)
    cond[0, 0, 0] = 2.0
    a = D.predict_coefficients(cond, torch.randn(1, F))
    assert a[0].tolist() == pytest.approx([1 / (1 + math.exp(-2)), 1 / (1 + math.exp(2))], abs=1e-6)


def test_predictions_lie_on_simplex_and_permute_with_inputs():
    D = _plain()
    cond, gen = torch.randn(3, 4, D.feature_dim), torch.randn(3, D.feature_dim)
    a = D.predict_coefficients(cond, gen)
    assert torch.allclose(a.sum(-1), torch.ones(3), atol=1e-6) and (a >= 0).all()
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(D.predict_coefficients(cond[:, perm], gen), a[:, perm], atol=1e-6)


def test_single_linear_regressor_ignores_generated_feature():
    # Documents why the default regressor has a hidden layer.
    D = _plain(regressor_hidden=0)
    cond = torch.randn(2, 3, D.feature_dim)
    a1 = D.predict_coefficients(cond, torch.randn(2, D.feature_dim))
    a2 = D.predict_coefficients(cond, 10 * torch.randn(2, D.feature_dim))
    assert torch.allclose(a1, a2, atol=1e-6)


def test_hidden_regressor_depends_on_generated_feature():
    D = _plain()
    cond = torch.randn(2, 3, D.feature_dim)
    a1 = D.predict_coefficients(cond, torch.randn(2, D.feature_dim))
    a2 = D.predict_coefficients(cond, 10 * torch.randn(2, D.feature_dim))
    assert not torch.allclose(a1, a2, atol=1e-4)


def test_heads_share_trunk_but_not_each_other():
    D = _plain()
    x = torch.randn(3, 1, 8, 8)
    feat = D.features(x)
    logits = D.classify(feat)
    with torch.no_grad():
        D.score_head.weight.add_(1.0)
    assert torch.equal(D.classify(D.features(x)), logits)
    with torch.no_grad():
        D.stem.weight.mul_(2.0)
    assert not torch.equal(D.classify(D.features(x)), logits)


def test_spectral_norm_bounds_top_singular_value():
    D = Discriminator(tiny_config(), 3).train()
    x = torch.randn(4, 1, 8, 8)
    for _ in range(200):
        D.features(x)  # power iteration runs in train mode
    D.eval()
    layers = [D.score_head, D.class_head, D.stem]
    for layer in layers:
        w = layer.weight.detach().flatten(1)
        assert torch.linalg.matrix_norm(w, ord=2).item() <= 1 + 1e-3


def test_score_gradient_matches_finite_differences():
    D = _plain().double().eval()
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    D(x).sum().backward()
    g = x.grad.flatten()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for i in rng.choice(64, 8, replace=False):
        xp, xm = x.detach().clone().flatten(), x.detach().clone().flatten()
        xp[i] += eps
        xm[i] -= eps
        num = (D(xp.view_as(x)) - D(xm.view_as(x))).item() / (2 * eps)
        assert abs(num - g[i].item()) <= 1e-3 * max(1.0, abs(num))
