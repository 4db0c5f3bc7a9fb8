"""Fusion discriminator: shared trunk with score, classifier and coefficient-regression heads."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .config import Config


def _sn(module, enabled):
    return spectral_norm(module) if enabled else module


class ReLUFirstBlock(nn.Module):
    def __init__(self, c_in, c_out, sn=True):
        super().__init__()
        self.conv0 = _sn(nn.Conv2d(c_in, c_out, 3, padding=1), sn)
        self.conv1 = _sn(nn.Conv2d(c_out, c_out, 3, padding=1), sn)
        self.shortcut = nn.Identity() if c_in == c_out else _sn(nn.Conv2d(c_in, c_out, 1, bias=False), sn)

    def forward(self, x):
        dx = self.conv1(F.relu(self.conv0(F.relu(x))))
        return self.shortcut(x) + dx


class Discriminator(nn.Module):
    def __init__(self, cfg: Config, n_classes: int):
        super().__init__()
        self.cfg = cfg
        sn = cfg.spectral_norm
        self.stem = _sn(nn.Conv2d(cfg.channels, cfg.disc_stem, 1), sn)
        groups, c_in = [], cfg.disc_stem
        for c in cfg.disc_channels:
            blocks = []
            for _ in range(cfg.disc_blocks_per_group):
                blocks.append(ReLUFirstBlock(c_in, c, sn))
                c_in = c
            blocks.append(nn.AvgPool2d(2))
            groups.append(nn.Sequential(*blocks))
        self.groups = nn.ModuleList(groups)
        self.feature_dim = c_in
        self.score_head = _sn(nn.Linear(c_in, 1), sn)
        self.class_head = _sn(nn.Linear(c_in, n_classes), sn)
        # A single linear layer on [f_k, f_gen] splits into w1.f_k + w2.f_gen + b; the
        # f_gen part is shared by every k and cancels in the softmax over k.
        if cfg.regressor_hidden > 0:
            self.regressor = nn.Sequential(_sn(nn.Linear(2 * c_in, cfg.regressor_hidden), sn), nn.ReLU(),
                                           _sn(nn.Linear(cfg.regressor_hidden, 1), sn))
        else:
            self.regressor = _sn(nn.Linear(2 * c_in, 1), sn)

    def features(self, x, return_maps=False):
        """Pooled trunk feature, (B, feature_dim)."""
        cfg = self.cfg
        if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"expected (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}")
        h = self.stem(x)
        maps = []
        for g in self.groups:
            h = g(h)
            maps.append(h)
        feat = F.relu(h).mean((2, 3))
        return (feat, maps) if return_maps else feat

    def score(self, feat):
        return self.score_head(feat).squeeze(-1)

    def classify(self, feat):
        return self.class_head(feat)

    def forward(self, x):
        return self.score(self.features(x))

    def set_score(self, x):
        """Mean of per-image scores over the K images; x: (B, K, C, H, W) -> (B,)."""
        b, k = x.shape[:2]
        return self(x.flatten(0, 1)).view(b, k).mean(1)

    def pair_scores(self, cond_feat, gen_feat):
        """cond_feat: (B, K, F), gen_feat: (B, F) -> s: (B, K)."""
        gen = gen_feat[:, None].expand_as(cond_feat)
        return self.regressor(torch.cat([cond_feat, gen], -1)).squeeze(-1)

    def predict_coefficients(self, cond_feat, gen_feat):
        if cond_feat.shape[1] == 1:
            return torch.ones(cond_feat.shape[:2], dtype=cond_feat.dtype, device=cond_feat.device)
        return torch.softmax(self.pair_scores(cond_feat, gen_feat), dim=-1)
