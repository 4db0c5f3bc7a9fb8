"""Desk-scale quality metrics and downstream classification harnesses.

A small CNN trained on seen categories stands in for the ImageNet networks,
so absolute metric values are only comparable between runs that share an
extractor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from torch import nn

from .config import Config
from .datasets import SEEN, Dataset
from .generator import Generator
from .trainer import generate_augmented_set

COV_EPS = 1e-6


# -- metrics ------------------------------------------------------------------

def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets (rows = samples)."""
    a = np.asarray(features_a, np.float64)
    b = np.asarray(features_b, np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise ValueError("feature dimensions differ")
    if min(len(a), len(b)) < dim + 1:
        raise ValueError(f"need >= {dim + 1} samples per set, got {len(a)} and {len(b)}")
    eye = np.eye(dim) * COV_EPS
    sa = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    sb = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    root_a = _psd_sqrt(sa)
    # Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), the latter symmetric PSD
    mid = root_a @ sb @ root_a
    w = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_root = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mean(0) - b.mean(0)
    return float(max(diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_root, 0.0))


def inception_score(probs) -> float:
    """exp(E_x KL(p(y|x) || p(y)))."""
    p = np.asarray(probs, np.float64)
    marginal = p.mean(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0).sum(1)
    return float(np.exp(kl.mean()))


def pairwise_diversity(embeddings) -> float:
    """Mean pairwise L2 distance between unit-normalized embeddings."""
    e = np.asarray(embeddings, np.float64)
    if len(e) < 2:
        raise ValueError("need at least two samples")
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    sq = (e * e).sum(1)
    d2 = np.clip(sq[:, None] + sq[None] - 2 * e @ e.T, 0, None)
    iu = np.triu_indices(len(e), 1)
    return float(np.sqrt(d2[iu]).mean())


def lpips_avg(sets, extractor=None) -> float:
    """Average over categories of the within-category pairwise diversity.

    ``sets`` is a list (or dict) of per-category arrays; they are images when an
    extractor is given and embeddings otherwise.
    """
    sets = list(sets.values()) if isinstance(sets, dict) else list(sets)
    if extractor is not None:
        sets = [embed(extractor, s) for s in sets]
    return float(np.mean([pairwise_diversity(s) for s in sets]))


# -- feature extractor -----------------------------------------------------------

class FeatureExtractor(nn.Module):
    """Small conv classifier; the pre-activation penultimate layer is the embedding."""

    def __init__(self, channels: int, n_classes: int, dim: int = 32):
        super().__init__()
        layers, c = [], channels
        for w in (16, 32, 64):
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.trunk = nn.Sequential(*layers)
        self.embed = nn.Linear(c, dim)
        self.fc = nn.Linear(dim, n_classes)
        self.dim = dim
        self.n_classes = n_classes

    def embedding(self, x):
        return self.embed(self.trunk(x).mean((2, 3)))

    def forward(self, x):
        return self.fc(F.relu(self.embedding(x)))


def train_extractor(images, labels, n_classes, dim=32, epochs=30, seed=0, batch_size=64,
                    lr=1e-3) -> FeatureExtractor:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    x = torch.as_tensor(np.asarray(images, np.float32))
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    net = FeatureExtractor(x.shape[1], n_classes, dim)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    for _ in range(epochs):
        for idx in torch.randperm(len(x), generator=gen).split(batch_size):
            opt.zero_grad()
            F.cross_entropy(net(x[idx]), y[idx]).backward()
            opt.step()
    return net.eval()


def seen_images(dataset: Dataset):
    imgs, labels = [], []
    for i, c in enumerate(dataset.categories_in(SEEN)):
        imgs.append(dataset.images[c])
        labels += [i] * len(dataset.images[c])
    return np.concatenate(imgs), np.asarray(labels)


def extractor_for(dataset: Dataset, cfg: Config, seed: int | None = None) -> FeatureExtractor:
    """Train the evaluation extractor on every seen-category image."""
    imgs, labels = seen_images(dataset)
    return train_extractor(imgs, labels, len(dataset.seen), cfg.extractor_dim,
                           cfg.extractor_epochs, cfg.seed if seed is None else seed)


@torch.no_grad()
def embed(extractor: FeatureExtractor, images, batch_size=256) -> np.ndarray:
    extractor.eval()
    x = torch.as_tensor(np.asarray(images, np.float32))
    return torch.cat([extractor.embedding(b) for b in x.split(batch_size)]).numpy().astype(np.float64)


@torch.no_grad()
def class_probs(extractor: FeatureExtractor, images, batch_size=256) -> np.ndarray:
    extractor.eval()
    x = torch.as_tensor(np.asarray(images, np.float32))
    return torch.cat([torch.softmax(extractor(b), 1) for b in x.split(batch_size)]).numpy().astype(np.float64)


@dataclass
class MetricReport:
    fid: float | None = None
    is_score: float | None = None
    lpips_avg: float | None = None
    per_category: dict = field(default_factory=dict)


def evaluate_generator(generator: Generator, dataset: Dataset, extractor: FeatureExtractor, cfg: Config,
                       rng: np.random.Generator, metrics=("fid", "is", "lpips")) -> MetricReport:
    """Per unseen category: sample real images, generate from them, then score."""
    real, gen_sets = [], {}
    for cat in dataset.unseen:
        pool = dataset.images[cat]
        idx = rng.choice(len(pool), size=min(cfg.fid_real_count, len(pool)), replace=False)
        real.append(pool[idx])
        fake, _ = generate_augmented_set(generator, {cat: pool[idx]}, cfg.fid_gen_count, cfg.k_gen, rng)
        gen_sets[cat] = fake
    report = MetricReport()
    gen_all = np.concatenate(list(gen_sets.values()))
    if "fid" in metrics:
        report.fid = fid(embed(extractor, np.concatenate(real)), embed(extractor, gen_all))
    if "is" in metrics:
        report.is_score = inception_score(class_probs(extractor, gen_all))
        for cat, g in gen_sets.items():
            report.per_category.setdefault(cat, {})["is"] = inception_score(class_probs(extractor, g))
    if "lpips" in metrics:
        divs = {cat: pairwise_diversity(embed(extractor, g)) for cat, g in gen_sets.items()}
        report.lpips_avg = float(np.mean(list(divs.values())))
        for cat, v in divs.items():
            report.per_category.setdefault(cat, {})["lpips"] = v
    return report


# -- classification harnesses ------------------------------------------------------

def traditional_augment(images, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop/shift, rotation and brightness/contrast jitter."""
    images = np.asarray(images, np.float32)
    out = []
    size = images.shape[-1]
    for _ in range(count):
        x = torch.from_numpy(images[rng.integers(len(images))])
        shift = [int(v) for v in rng.integers(-size // 8, size // 8 + 1, size=2)]
        x = TF.affine(x, angle=float(rng.uniform(-15, 15)), translate=shift,
                      scale=float(rng.uniform(0.9, 1.1)), shear=[0.0], fill=-1.0)
        x = x * float(rng.uniform(0.8, 1.2)) + float(rng.uniform(-0.1, 0.1))
        out.append(x.clamp(-1, 1).numpy())
    return np.stack(out) if out else np.zeros((0,) + images.shape[1:], np.float32)


def linear_probe_accuracy(train_x, train_y, test_x, test_y, seed=0) -> float:
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(scaler.transform(train_x), train_y)
    return float((clf.predict(scaler.transform(test_x)) == np.asarray(test_y)).mean())


def _augmented_features(extractor, train_imgs: dict, augment, generator, count, k_gen, rng):
    feats, labels = [], []
    for label, (cat, imgs) in enumerate(train_imgs.items()):
        feats.append(embed(extractor, imgs))
        labels += [label] * len(imgs)
        if augment == "traditional":
            extra = traditional_augment(imgs, count, rng)
        elif augment == "generated":
            if generator is None:
                raise ValueError("augment=generated needs a generator")
            extra, _ = generate_augmented_set(generator, {cat: imgs}, count, min(k_gen, len(imgs)), rng)
        else:
            continue
        feats.append(embed(extractor, extra))
        labels += [label] * len(extra)
    return np.concatenate(feats), np.asarray(labels)


def low_data_eval(dataset: Dataset, generator: Generator | None = None, samples_per_category: int = 10,
                  augment: str = "none", seed: int = 0, extractor: FeatureExtractor | None = None,
                  cfg: Config | None = None) -> float:
    """Linear probe on frozen seen-trained features, trained on a few images per unseen category."""
    if augment not in ("none", "traditional", "generated"):
        raise ValueError(f"unknown augment mode {augment!r}")
    cfg = cfg or (generator.cfg if generator is not None else Config())
    extractor = extractor or extractor_for(dataset, cfg)
    rng = np.random.default_rng(seed)
    train_imgs, test_x, test_y = {}, [], []
    for label, cat in enumerate(dataset.unseen):
        pool = dataset.images[cat]
        if len(pool) < samples_per_category + 1:
            raise ValueError(f"category {cat} has {len(pool)} images, need > {samples_per_category}")
        perm = rng.permutation(len(pool))
        train_imgs[cat] = pool[perm[:samples_per_category]]
        test_x.append(pool[perm[samples_per_category:]])
        test_y += [label] * (len(pool) - samples_per_category)
    fx, fy = _augmented_features(extractor, train_imgs, augment, generator, cfg.augment_count, cfg.k_gen, rng)
    return linear_probe_accuracy(fx, fy, embed(extractor, np.concatenate(test_x)), test_y, seed)


def few_shot_eval(dataset: Dataset, generator: Generator | None, n_way: int = 5, n_shot: int = 5,
                  episodes: int = 10, seed: int = 0, extractor: FeatureExtractor | None = None,
                  cfg: Config | None = None, augment: bool = True, n_query: int = 15) -> float:
    """Mean N-way C-shot accuracy over episodes drawn from unseen categories."""
    cfg = cfg or (generator.cfg if generator is not None else Config())
    if n_way > len(dataset.unseen):
        raise ValueError(f"{n_way}-way needs {n_way} unseen categories, have {len(dataset.unseen)}")
    extractor = extractor or extractor_for(dataset, cfg)
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(episodes):
        cats = [dataset.unseen[i] for i in rng.choice(len(dataset.unseen), n_way, replace=False)]
        shots, qx, qy = {}, [], []
        for label, cat in enumerate(cats):
            pool = dataset.images[cat]
            if len(pool) < n_shot + 1:
                raise ValueError(f"category {cat} too small for {n_shot}-shot")
            perm = rng.permutation(len(pool))
            shots[cat] = pool[perm[:n_shot]]
            q = pool[perm[n_shot:n_shot + n_query]]
            qx.append(q)
            qy += [label] * len(q)
        mode = "generated" if augment and generator is not None else "none"
        fx, fy = _augmented_features(extractor, shots, mode, generator, cfg.augment_count, cfg.k_gen, rng)
        accs.append(linear_probe_accuracy(fx, fy, embed(extractor, np.concatenate(qx)), qy, seed))
    return float(np.mean(accs))


# -- interpolation ----------------------------------------------------------------

def sweep_coefficients(steps: int = 9, include_endpoints: bool = False) -> np.ndarray:
    """[0.9, 0.1] ... [0.1, 0.9] in equal steps (optionally framed by [1, 0] and [0, 1])."""
    w = np.linspace(0.9, 0.1, steps) if steps > 1 else np.array([0.5])
    if include_endpoints:
        w = np.concatenate([[1.0], w, [0.0]])
    return np.stack([w, 1 - w], 1)


@torch.no_grad()
def interpolation_sweep(generator: Generator, x1, x2, steps: int = 9, include_endpoints: bool = False):
    """Frames (steps, C, H, W) generated from the pair (x1, x2) along the coefficient line."""
    generator.eval()
    a = torch.from_numpy(sweep_coefficients(steps, include_endpoints)).float()
    pair = torch.stack([torch.as_tensor(x1), torch.as_tensor(x2)]).float()
    return generator(pair[None].expand(len(a), *pair.shape), a).numpy()


def save_strip(frames, path) -> None:
    """Horizontal PNG strip of (N, C, H, W) frames in [-1, 1]."""
    from .datasets import save_png
    save_png(np.concatenate(list(np.asarray(frames)), axis=2), path)
