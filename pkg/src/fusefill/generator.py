"""Fusion generator: residual U-Net with bottleneck fusion and attentional skips."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .config import Config

SIMPLEX_TOL = 1e-4


def check_simplex(a: torch.Tensor, K: int | None = None) -> None:
    if K is not None and a.shape[-1] != K:
        raise ValueError(f"coefficient vector has {a.shape[-1]} entries, expected K={K}")
    if (a < -SIMPLEX_TOL).any() or ((a.sum(-1) - 1).abs() > SIMPLEX_TOL).any():
        raise ValueError("coefficients must be non-negative and sum to 1")


class ResBlock(nn.Module):
    """Three pre-activation 3x3 convs (BN + leaky ReLU) with a projected shortcut."""

    def __init__(self, c_in, c_out, slope=0.2, resample=None):
        super().__init__()
        layers = []
        for i in range(3):
            layers += [nn.BatchNorm2d(c_in if i == 0 else c_out), nn.LeakyReLU(slope),
                       nn.Conv2d(c_in if i == 0 else c_out, c_out, 3, padding=1)]
        self.body = nn.Sequential(*layers)
        self.shortcut = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)
        self.resample = resample

    def forward(self, x):
        y = self.shortcut(x) + self.body(x)
        if self.resample == "down":
            y = F.avg_pool2d(y, 2)
        elif self.resample == "up":
            y = F.interpolate(y, scale_factor=2, mode="nearest")
        return y


def _proj(c_in, c_out, sn=True):
    conv = nn.Conv2d(c_in, c_out, 1, bias=False)
    return spectral_norm(conv) if sn else conv


def _scale(xi, a):
    # xi: (B, K, C, H, W), a: (B, K)
    return xi * a[:, :, None, None, None]


class NonLocalFusion(nn.Module):
    """Each decoder location attends over every location of every scaled encoder map.

    Projections are bias-free so a branch whose coefficient is zero contributes
    exactly nothing.
    """

    def __init__(self, enc_channels, dec_channels):
        super().__init__()
        self.inner = max(1, enc_channels // 8)
        self.f = _proj(enc_channels, self.inner)
        self.g = _proj(dec_channels, self.inner)
        self.h = _proj(enc_channels, self.inner)
        self.v = nn.Conv2d(self.inner, self.inner, 1, bias=False)

    @property
    def out_channels(self):
        return self.inner

    def _flat(self, conv, x):
        # (B, K, C, H, W) -> (B, K, N, c)
        b, k = x.shape[:2]
        y = conv(x.flatten(0, 1))
        return y.flatten(2).transpose(1, 2).reshape(b, k, -1, self.inner)

    def attention_map(self, phi, scaled_xi):
        """Row-stochastic (B, K, N, N) map; rows are decoder queries."""
        if phi.shape[-2:] != scaled_xi.shape[-2:]:
            raise ValueError(f"spatial mismatch {tuple(phi.shape[-2:])} vs {tuple(scaled_xi.shape[-2:])}")
        q = self.g(phi).flatten(2).transpose(1, 2)          # (B, N, c)
        keys = self._flat(self.f, scaled_xi)                # (B, K, N, c)
        return torch.softmax(torch.einsum("bnc,bkmc->bknm", q, keys), dim=-1)

    def forward(self, scaled_xi, phi):
        b, k, _, hh, ww = scaled_xi.shape
        attn = self.attention_map(phi, scaled_xi)
        values = self._flat(self.h, scaled_xi)
        out = torch.einsum("bknm,bkmc->bknc", attn, values)
        out = out.transpose(2, 3).reshape(b * k, self.inner, hh, ww)
        return self.v(out).view(b, k, self.inner, hh, ww).sum(1)


class LocalFusion(NonLocalFusion):
    """Ablation: each location only looks at its own position, mixing over k."""

    def attention_map(self, phi, scaled_xi):
        """Per-location weights over k, shape (B, K, N), softmax across k."""
        if phi.shape[-2:] != scaled_xi.shape[-2:]:
            raise ValueError("spatial mismatch")
        q = self.g(phi).flatten(2).transpose(1, 2)
        keys = self._flat(self.f, scaled_xi)
        return torch.softmax((q[:, None] * keys).sum(-1), dim=1)

    def forward(self, scaled_xi, phi):
        b, k, _, hh, ww = scaled_xi.shape
        w = self.attention_map(phi, scaled_xi)              # (B, K, N)
        values = self._flat(self.h, scaled_xi) * w[..., None]
        out = values.transpose(2, 3).reshape(b * k, self.inner, hh, ww)
        return self.v(out).view(b, k, self.inner, hh, ww).sum(1)


class Generator(nn.Module):
    """Encoder blocks are indexed n-1 (shallow) .. 0 (deep); decoder blocks 1 .. n."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        enc, dec = list(cfg.gen_encoder), list(cfg.gen_decoder)
        self.depth = n = len(enc)
        slope = cfg.leaky_slope
        self.stem = nn.Conv2d(cfg.channels, cfg.gen_stem, 1)
        widths = [cfg.gen_stem] + enc
        self.encoder = nn.ModuleList(
            ResBlock(widths[i], widths[i + 1], slope, "down") for i in range(n))
        self.middle = ResBlock(enc[-1], enc[-1], slope)
        # encoder block r is self.encoder[n - 1 - r]
        self.enc_width = {r: enc[n - 1 - r] for r in range(n)}
        self.skips = cfg.skips
        fusion_cls = {"naf": NonLocalFusion, "local": LocalFusion}.get(cfg.attention)
        self.fusion = nn.ModuleDict()
        decoder, c_in = [], enc[-1]
        for r in range(1, n + 1):
            prev = r - 1
            if prev in self.skips:
                fuse = fusion_cls(self.enc_width[prev], dec[prev - 1])
                self.fusion[str(prev)] = fuse
                c_in += fuse.out_channels
            decoder.append(ResBlock(c_in, dec[r - 1], slope, "up"))
            c_in = dec[r - 1]
        self.decoder = nn.ModuleList(decoder)
        self.head = nn.Sequential(nn.BatchNorm2d(c_in), nn.LeakyReLU(slope),
                                  nn.Conv2d(c_in, cfg.channels, 1))

    def encode(self, x):
        """Return ({r: xi_r}, psi) for a (B, C, H, W) batch."""
        cfg = self.cfg
        if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"expected (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}")
        h = self.stem(x)
        feats = {}
        for i, block in enumerate(self.encoder):
            h = block(h)
            feats[self.depth - 1 - i] = h
        return feats, self.middle(h)

    @staticmethod
    def fuse_bottleneck(psi, a):
        """psi: (B, K, C, h, w), a: (B, K) -> sum_k a^k psi^k."""
        if psi.shape[:2] != a.shape:
            raise ValueError(f"psi batch/K {tuple(psi.shape[:2])} does not match a {tuple(a.shape)}")
        check_simplex(a)
        return (psi * a[:, :, None, None, None].to(psi.dtype)).sum(1)

    def decode(self, eta0, skips, a, return_features=False):
        """skips: {r: (B, K, C_r, H_r, W_r)} for each configured skip level."""
        missing = [r for r in self.skips if r not in skips]
        if missing:
            raise ValueError(f"missing skip levels {missing}")
        phi, trace = eta0, {}
        for r, block in enumerate(self.decoder, start=1):
            prev = r - 1
            if prev in self.skips:
                eta = self.fusion[str(prev)](_scale(skips[prev], a.to(phi.dtype)), phi)
                trace[f"eta{prev}"] = eta
                phi = torch.cat([eta, phi], 1)
            trace[f"in{r}"] = phi
            phi = block(phi)
            trace[f"phi{r}"] = phi
        out = torch.tanh(self.head(phi))
        return (out, trace) if return_features else out

    def forward(self, x, a):
        """x: (B, K, C, H, W); a: (B, K) or (B, D, K) for D draws sharing one encoding.

        Returns (B, C, H, W) or (B, D, C, H, W).
        """
        b, k = x.shape[:2]
        multi = a.dim() == 3
        a3 = a if multi else a[:, None]
        if a3.shape[0] != b or a3.shape[-1] != k:
            raise ValueError(f"{k} conditional images but coefficients of shape {tuple(a.shape)}")
        check_simplex(a3)
        d = a3.shape[1]
        feats, psi = self.encode(x.flatten(0, 1))
        psi = psi.view(b, k, *psi.shape[1:])
        skips = {r: feats[r].view(b, k, *feats[r].shape[1:]) for r in self.skips}
        # repeat per draw: (B*D, ...)
        af = a3.reshape(b * d, k)
        psi = psi.repeat_interleave(d, 0)
        skips = {r: s.repeat_interleave(d, 0) for r, s in skips.items()}
        out = self.decode(self.fuse_bottleneck(psi, af), skips, af)
        return out.view(b, d, *out.shape[1:]) if multi else out

    def generate(self, images, a):
        """Single-set convenience: images (K, C, H, W), a (K,) -> (C, H, W)."""
        a = torch.as_tensor(a, dtype=images.dtype)
        if images.shape[0] != a.shape[0]:
            raise ValueError(f"K mismatch: {images.shape[0]} images, {a.shape[0]} coefficients")
        return self(images[None], a[None])[0]
