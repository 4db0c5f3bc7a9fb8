"""Loss terms. All reductions are means over the batch."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

MS_EPS = 1e-8


@dataclass
class LossWeights:
    rec: float = 1.0   # lambda_1
    ms: float = 0.01   # lambda_m
    reg: float = 1.0   # lambda_a

    def __post_init__(self):
        if min(self.rec, self.ms, self.reg) < 0:
            raise ValueError("loss weights must be non-negative")


def weighted_reconstruction(fake, cond, a):
    """sum_k a^k * mean|x_k - fake|.

    fake: (B, C, H, W), cond: (B, K, C, H, W), a: (B, K).
    """
    if cond.shape[2:] != fake.shape[1:] or cond.shape[:2] != a.shape:
        raise ValueError(f"shape mismatch: fake {tuple(fake.shape)}, cond {tuple(cond.shape)}, a {tuple(a.shape)}")
    mae = (cond - fake[:, None]).abs().flatten(2).mean(-1)     # (B, K)
    return (a * mae).sum(1).mean()


def hinge_d_loss(real_scores, fake_scores):
    return F.relu(1.0 + fake_scores).mean() + F.relu(1.0 - real_scores).mean()


def hinge_g_loss(fake_scores):
    return -fake_scores.mean()


def classification_loss(logits, labels):
    return F.cross_entropy(logits, labels)


def mode_seeking(feat1, feat2, a1, a2):
    """Per-sample ||f1 - f2||_1 / (||a1 - a2||_1 + eps), averaged.

    Accepts single vectors or (B, dim) / (B, K) batches.
    """
    feat1, feat2, a1, a2 = (torch.atleast_2d(t) for t in (feat1, feat2, a1, a2))
    den = (a1 - a2).abs().sum(-1)
    if (den <= MS_EPS).any():
        raise ValueError("degenerate coefficient draws: a1 == a2")
    return ((feat1 - feat2).abs().sum(-1) / (den + MS_EPS)).mean()


def interpolation_regression(a_pred, a):
    return (torch.atleast_2d(a_pred) - torch.atleast_2d(a)).norm(dim=-1).mean()


D_TERMS = ("L_D", "L_c_D")
G_TERMS = ("L_GD", "L_1", "L_c_G", "L_m", "L_a")


def assemble_objectives(terms: dict, weights: LossWeights):
    """Return (discriminator objective, generator objective).

    Absent terms (ablated) contribute nothing. ``L_a_D`` is the optional
    regressor-training term of the discriminator step.
    """
    zero = 0.0

    def t(name):
        return terms.get(name, zero)

    d_obj = t("L_D") + t("L_c_D")
    if "L_a_D" in terms:
        d_obj = d_obj + weights.reg * terms["L_a_D"]
    g_obj = (t("L_GD") + weights.rec * t("L_1") + t("L_c_G")
             - weights.ms * t("L_m") + weights.reg * t("L_a"))
    return d_obj, g_obj
