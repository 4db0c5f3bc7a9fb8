"""Category-folder image datasets, seen/unseen splits and episode sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SEEN, UNSEEN = "seen", "unseen"


class DatasetError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    """Either explicit category lists or a (seed, ratio) random split."""
    seen: tuple = ()
    unseen: tuple = ()
    seed: int = 0
    ratio: float = 0.8

    @property
    def explicit(self) -> bool:
        return bool(self.seen or self.unseen)

    @classmethod
    def from_file(cls, path) -> "SplitSpec":
        seen, unseen = [], []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition("=")
            names = [n.strip() for n in rest.split(",") if n.strip()]
            if key.strip() == SEEN:
                seen += names
            elif key.strip() == UNSEEN:
                unseen += names
            else:
                raise DatasetError(f"bad split line: {line!r}")
        return cls(seen=tuple(seen), unseen=tuple(unseen))

    def write(self, path) -> None:
        Path(path).write_text(f"seen = {', '.join(self.seen)}\nunseen = {', '.join(self.unseen)}\n")


@dataclass
class Dataset:
    categories: list
    images: dict            # category -> float32 array (N, C, H, W) in [-1, 1]
    split: dict             # category -> "seen" | "unseen"
    image_shape: tuple      # (H, W, C)
    files: dict = field(default_factory=dict)

    def categories_in(self, split: str) -> list:
        return [c for c in self.categories if self.split[c] == split]

    @property
    def seen(self) -> list:
        return self.categories_in(SEEN)

    @property
    def unseen(self) -> list:
        return self.categories_in(UNSEEN)

    def label_of(self, category, split: str | None = None) -> int:
        return self.categories_in(split or self.split[category]).index(category)

    def count(self, split: str) -> int:
        return sum(len(self.images[c]) for c in self.categories_in(split))


@dataclass
class EpisodeBatch:
    category: str
    images: np.ndarray          # (K, C, H, W)
    coefficients: list         # one or two arrays of shape (K,)
    label: int
    indices: np.ndarray

    @property
    def k(self) -> int:
        return len(self.images)


def load_image(path, size: int, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if channels not in (1, 3):
        arr = np.repeat(arr[:, :, :1], channels, axis=2)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def split_categories(categories, spec: SplitSpec) -> dict:
    categories = sorted(categories)
    if spec.explicit:
        missing = (set(spec.seen) | set(spec.unseen)) - set(categories)
        if missing:
            raise DatasetError(f"split names unknown categories: {sorted(missing)}")
        if set(spec.seen) & set(spec.unseen):
            raise DatasetError("seen and unseen overlap")
        seen = set(spec.seen)
        unseen = set(spec.unseen) if spec.unseen else set(categories) - seen
        if seen | unseen != set(categories):
            raise DatasetError("split does not cover every category")
        return {c: SEEN if c in seen else UNSEEN for c in categories}
    n_seen = int(round(spec.ratio * len(categories)))
    n_seen = min(max(n_seen, 1), len(categories) - 1) if len(categories) > 1 else len(categories)
    order = np.random.default_rng(spec.seed).permutation(len(categories))
    seen = {categories[i] for i in order[:n_seen]}
    return {c: SEEN if c in seen else UNSEEN for c in categories}


def load_dataset(root_path, split_spec: SplitSpec | None = None, image_size: int = 128,
                 channels: int = 3) -> Dataset:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"data root {root} is not a directory")
    cat_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not cat_dirs:
        raise DatasetError(f"no category directories under {root}")
    images, files = {}, {}
    for d in cat_dirs:
        paths = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise DatasetError(f"category {d.name} has no images")
        arrs, kept = [], []
        for p in paths:
            try:
                arrs.append(load_image(p, image_size, channels))
                kept.append(p)
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s: %s", p, exc)
        if not arrs:
            raise DatasetError(f"category {d.name} has no decodable images")
        images[d.name] = np.stack(arrs)
        files[d.name] = kept
    categories = sorted(images)
    split = split_categories(categories, split_spec or SplitSpec())
    return Dataset(categories, images, split, (image_size, image_size, channels), files)


def dataset_from_arrays(arrays: dict, seen: list) -> Dataset:
    """In-memory dataset, mainly for tests and generated sets."""
    categories = sorted(arrays)
    split = {c: SEEN if c in seen else UNSEEN for c in categories}
    _, c, h, w = next(iter(arrays.values())).shape
    return Dataset(categories, {k: np.asarray(v, np.float32) for k, v in arrays.items()},
                   split, (h, w, c))


def sample_coefficients(K: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform point on the (K-1)-simplex (normalized unit exponentials)."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K == 1:
        return np.ones(1)
    e = rng.standard_exponential(K)
    return e / e.sum()


def sample_episode(dataset: Dataset, rng: np.random.Generator, K: int, split: str = SEEN,
                   num_coefficient_draws: int = 1, max_retries: int = 10) -> EpisodeBatch:
    if num_coefficient_draws not in (1, 2):
        raise ValueError("num_coefficient_draws must be 1 or 2")
    eligible = [c for c in dataset.categories_in(split) if len(dataset.images[c]) >= K]
    if not eligible:
        raise EpisodeError(f"no {split} category has >= {K} images")
    category = eligible[rng.integers(len(eligible))]
    pool = dataset.images[category]
    idx = rng.choice(len(pool), size=K, replace=False)
    coeffs = [sample_coefficients(K, rng)]
    if num_coefficient_draws == 2:
        for _ in range(max_retries + 1):
            a2 = sample_coefficients(K, rng)
            if np.abs(coeffs[0] - a2).sum() > 1e-8:
                break
        else:
            raise EpisodeError("could not draw two distinct coefficient vectors (K=1?)")
        coeffs.append(a2)
    return EpisodeBatch(category, pool[idx], coeffs, dataset.label_of(category, split), idx)


def save_png(array, path) -> None:
    """Write one (C, H, W) image in [-1, 1] as PNG."""
    arr = np.asarray(array, dtype=np.float32)
    arr = np.clip((arr + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    Image.fromarray(arr[:, :, 0] if mode == "L" else arr, mode).save(path)


# -- procedural glyph data ---------------------------------------------------

def _glyph_strokes(rng):
    strokes = []
    for _ in range(rng.integers(2, 5)):
        if rng.random() < 0.6:
            strokes.append(("line", rng.uniform(0.15, 0.85, size=(2, 2))))
        else:
            c = rng.uniform(0.35, 0.65, size=2)
            r = rng.uniform(0.12, 0.3)
            t0 = rng.uniform(0, 2 * np.pi)
            strokes.append(("arc", (c, r, t0, t0 + rng.uniform(np.pi / 2, 2 * np.pi))))
    return strokes


def _render_glyph(strokes, rng, size, canvas=96):
    from PIL import ImageDraw

    im = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(im)
    angle = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.85, 1.1)
    shift = rng.uniform(-0.06, 0.06, size=2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) * scale
    width = int(rng.integers(canvas // 16, canvas // 9))

    def warp(p):
        p = (np.asarray(p) - 0.5) @ rot.T + 0.5 + shift
        return [tuple(q) for q in p * canvas]

    for kind, params in strokes:
        if kind == "line":
            pts = params + rng.normal(0, 0.02, size=params.shape)
        else:
            c, r, t0, t1 = params
            t = np.linspace(t0, t1, 24)
            pts = np.stack([c[0] + r * np.cos(t), c[1] + r * np.sin(t)], 1)
            pts = pts + rng.normal(0, 0.008, size=pts.shape)
        draw.line(warp(pts), fill=255, width=width, joint="curve")
    return im.resize((size, size), Image.LANCZOS)


def make_glyph_dataset(root, n_categories: int = 20, per_category: int = 30, size: int = 32,
                       seed: int = 0) -> Path:
    """Write an Omniglot-like folder tree of hand-drawn-style stroke glyphs."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(n_categories):
        strokes = _glyph_strokes(rng)
        d = root / f"glyph_{c:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_category):
            _render_glyph(strokes, rng, size).save(d / f"{i:03d}.png")
    return root
