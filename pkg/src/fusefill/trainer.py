"""Alternating D/G optimisation over seen-category episodes."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .config import Config
from .datasets import SEEN, Dataset, EpisodeBatch, EpisodeError, sample_coefficients, sample_episode
from .discriminator import Discriminator
from .generator import Generator
from .losses import (LossWeights, assemble_objectives, hinge_d_loss, hinge_g_loss,
                     interpolation_regression, mode_seeking, weighted_reconstruction)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, report):
        super().__init__(f"non-finite loss term {term}: {report.get(term)}")
        self.term = term
        self.report = report


def param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _check(report, names):
    for name in names:
        if name in report and not math.isfinite(report[name]):
            raise NonFiniteLossError(name, report)


class Trainer:
    """Owns G, D, both optimizers, the episode rng and progress counters."""

    def __init__(self, cfg: Config, seen_categories: list):
        self.cfg = cfg
        self.seen_categories = list(seen_categories)
        torch.manual_seed(cfg.seed)
        self.G = Generator(cfg)
        self.D = Discriminator(cfg, len(self.seen_categories))
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=betas)
        self.weights = LossWeights(cfg.lambda_rec, cfg.lambda_ms, cfg.lambda_reg)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.step = 0

    @property
    def draws(self) -> int:
        return 1 if self.cfg.disable_lm else 2

    # -- one optimisation step ------------------------------------------------

    def sample_batch(self, dataset: Dataset) -> list:
        return [sample_episode(dataset, self.rng, self.cfg.k_train, SEEN, self.draws)
                for _ in range(self.cfg.batch_episodes)]

    @staticmethod
    def _tensors(episodes: list[EpisodeBatch]):
        x = torch.from_numpy(np.stack([e.images for e in episodes])).float()
        labels = torch.tensor([e.label for e in episodes])
        a = torch.from_numpy(np.stack([np.stack(e.coefficients) for e in episodes])).float()
        return x, labels, a

    def d_half_step(self, x, labels, a, fakes, report):
        cfg, D = self.cfg, self.D
        b, k = x.shape[:2]
        n_fake = fakes.shape[1] if cfg.fake_uses_both_draws else 1
        D.train()
        feat = D.features(torch.cat([x.flatten(0, 1), fakes[:, :n_fake].flatten(0, 1)]))
        real_feat, fake_feat = feat[:b * k], feat[b * k:]
        terms = {
            "L_D": hinge_d_loss(D.score(real_feat).view(b, k).mean(1), D.score(fake_feat)),
            "L_c_D": F.cross_entropy(D.classify(real_feat), labels.repeat_interleave(k)),
        }
        if cfg.regressor_in_d and k > 1:
            a_pred = D.predict_coefficients(real_feat.view(b, k, -1), fake_feat.view(b, n_fake, -1)[:, 0])
            terms["L_a_D"] = interpolation_regression(a_pred, a[:, 0])
        d_obj, _ = assemble_objectives(terms, self.weights)
        report.update({n: t.item() for n, t in terms.items()})
        report["D_objective"] = d_obj.item()
        _check(report, list(terms) + ["D_objective"])
        self.opt_d.zero_grad(set_to_none=True)
        d_obj.backward()
        self.opt_d.step()

    def g_half_step(self, x, labels, a, fakes, report):
        cfg, D = self.cfg, self.D
        b, k = x.shape[:2]
        n_draw = fakes.shape[1]
        D.eval()
        D.requires_grad_(False)
        try:
            feat = D.features(fakes.flatten(0, 1)).view(b, n_draw, -1)
            f1 = feat[:, 0]
            terms = {"L_GD": hinge_g_loss(D.score(f1))}
            if not cfg.disable_l1:
                terms["L_1"] = weighted_reconstruction(fakes[:, 0], x, a[:, 0])
            terms["L_c_G"] = F.cross_entropy(D.classify(f1), labels)
            if not cfg.disable_lm:
                terms["L_m"] = mode_seeking(feat[:, 0], feat[:, 1], a[:, 0], a[:, 1])
            if not cfg.disable_la:
                with torch.no_grad():
                    real_feat = D.features(x.flatten(0, 1)).view(b, k, -1)
                terms["L_a"] = interpolation_regression(D.predict_coefficients(real_feat, f1), a[:, 0])
        finally:
            D.requires_grad_(True)
        _, g_obj = assemble_objectives(terms, self.weights)
        report.update({n: t.item() for n, t in terms.items()})
        report["G_objective"] = g_obj.item()
        _check(report, list(terms) + ["G_objective"])
        self.opt_g.zero_grad(set_to_none=True)
        g_obj.backward()
        self.opt_g.step()

    def train_step(self, episodes: list[EpisodeBatch]) -> dict:
        """One D half-step on detached fakes, then one G half-step. Returns the loss report."""
        need = self.draws
        for e in episodes:
            if len(e.coefficients) < need:
                raise ValueError(f"episode has {len(e.coefficients)} coefficient draws, need {need}")
        x, labels, a = self._tensors(episodes)
        a = a[:, :need]
        self.G.train()
        fakes = self.G(x, a)
        report: dict = {}
        self.d_half_step(x, labels, a, fakes.detach(), report)
        self.g_half_step(x, labels, a, fakes, report)
        self.step += 1
        return report

    # -- persistence ------------------------------------------------------------

    def state(self) -> dict:
        return {
            "kind": "fusefill-train-state",
            "config": self.cfg.to_dict(),
            "seen_categories": self.seen_categories,
            "epoch": self.epoch,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "generator": self.G.state_dict(),
            "discriminator": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
        }

    def save(self, path) -> Path:
        return ckpt_io.save(self.state(), path)

    @classmethod
    def from_state(cls, state: dict) -> "Trainer":
        cfg = Config.from_dict(state["config"])
        tr = cls(cfg, state["seen_categories"])
        tr.G.load_state_dict(state["generator"])
        tr.D.load_state_dict(state["discriminator"])
        tr.opt_g.load_state_dict(state["opt_g"])
        tr.opt_d.load_state_dict(state["opt_d"])
        tr.rng.bit_generator.state = state["rng_state"]
        torch.set_rng_state(state["torch_rng"])
        tr.epoch, tr.step = state["epoch"], state["step"]
        return tr

    @classmethod
    def load(cls, path) -> "Trainer":
        return cls.from_state(ckpt_io.load(path))


def load_generator(path) -> tuple[Generator, Config]:
    """Generator in inference mode plus its config, from a checkpoint file."""
    state = ckpt_io.load(path)
    cfg = Config.from_dict(state["config"])
    G = Generator(cfg)
    G.load_state_dict(state["generator"])
    G.eval()
    return G, cfg


def steps_per_epoch(cfg: Config, dataset: Dataset) -> int:
    if cfg.steps_per_epoch > 0:
        return cfg.steps_per_epoch
    episodes = math.ceil(dataset.count(SEEN) / cfg.k_train)
    return max(1, math.ceil(episodes / cfg.batch_episodes))


def train(cfg: Config | None, dataset: Dataset, out_dir=None, resume=None, progress=None) -> Trainer:
    """Run ``cfg.epochs`` epochs, writing ckpt_<epoch>.bin and train_log.jsonl to ``out_dir``.

    When resuming, every setting comes from the checkpoint except ``epochs``,
    which is taken from ``cfg`` if given.
    """
    if resume:
        trainer = Trainer.load(resume)
        if cfg is not None:
            trainer.cfg = trainer.cfg.replace(epochs=cfg.epochs)
    else:
        trainer = Trainer(cfg, dataset.seen)
    cfg = trainer.cfg
    if not any(len(dataset.images[c]) >= cfg.k_train for c in dataset.seen):
        raise EpisodeError(f"no seen category has >= {cfg.k_train} images")
    if cfg.k_train == 1 and not cfg.disable_lm:
        raise EpisodeError("mode seeking needs K >= 2; set disable_lm for K=1")
    if trainer.seen_categories != dataset.seen:
        raise EpisodeError("dataset seen categories differ from the checkpoint's")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_file = open(out / "train_log.jsonl", "a") if out else None
    n_steps = steps_per_epoch(trainer.cfg, dataset)
    try:
        while trainer.epoch < trainer.cfg.epochs:
            epoch = trainer.epoch + 1
            for _ in range(n_steps):
                try:
                    report = trainer.train_step(trainer.sample_batch(dataset))
                except NonFiniteLossError as exc:
                    if out:
                        (out / "nonfinite_dump.json").write_text(json.dumps(
                            {"step": trainer.step, "epoch": epoch, "term": exc.term, "report": exc.report}))
                    raise
                if log_file:
                    log_file.write(json.dumps({"step": trainer.step, "epoch": epoch, **report}) + "\n")
                if progress:
                    progress(trainer.step, report)
            trainer.epoch = epoch
            if out and (epoch % trainer.cfg.checkpoint_every == 0 or epoch == trainer.cfg.epochs):
                trainer.save(out / f"ckpt_{epoch}.bin")
            log.info("epoch %d done (step %d)", epoch, trainer.step)
    finally:
        if log_file:
            log_file.close()
    return trainer


@torch.no_grad()
def generate_augmented_set(generator: Generator, images_by_category: dict, per_category_count: int,
                           k_gen: int, rng: np.random.Generator, batch_size: int = 64):
    """Generate ``per_category_count`` images for each category from K_gen-image subsets.

    Returns (images (N, C, H, W) float32 array, labels list of category names).
    """
    for cat, imgs in images_by_category.items():
        if len(imgs) < k_gen:
            raise EpisodeError(f"category {cat} has {len(imgs)} images, K_gen={k_gen} requested")
    generator.eval()
    out, labels = [], []
    for cat, imgs in images_by_category.items():
        imgs = np.asarray(imgs, np.float32)
        done = 0
        while done < per_category_count:
            n = min(batch_size, per_category_count - done)
            idx = np.stack([rng.choice(len(imgs), size=k_gen, replace=False) for _ in range(n)])
            a = np.stack([sample_coefficients(k_gen, rng) for _ in range(n)])
            fake = generator(torch.from_numpy(imgs[idx]), torch.from_numpy(a).float())
            out.append(fake.numpy())
            labels += [cat] * n
            done += n
    if not out:
        c, s = generator.cfg.channels, generator.cfg.image_size
        return np.zeros((0, c, s, s), np.float32), labels
    return np.concatenate(out), labels
