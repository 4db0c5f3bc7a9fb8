"""Command-line entry point: train, generate, interpolate, evaluate, augment-eval."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import FIELD_TYPES, Config, ConfigError, build_config, format_value, read_kv_file
from .datasets import DatasetError, EpisodeError, SplitSpec, load_dataset, load_image, make_glyph_dataset, save_png

log = logging.getLogger("fusefill")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_DATA = 4
EXIT_CONFIG = 5

OUT_ROOT_ENV = "FUSEFILL_OUT_ROOT"


class CLIError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _source_revision() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"git:{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"fusefill-{__version__}"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config keys (override --config file and preset)")
    for name, f in FIELD_TYPES.items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="V", default=None,
                       help=f"{f.metadata['help']} (default: {format_value(f.default)})")


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _resolve_config(args, base: Config | None = None) -> Config:
    over = _overrides(args)
    if base is not None:
        merged = {k: format_value(v) for k, v in base.to_dict().items()}
        merged.update(over)
        return build_config(merged)
    path = getattr(args, "config", None)
    if path and not Path(path).is_file():
        raise ConfigError(f"config file {path} not found")
    file_values = read_kv_file(path) if path else {}
    return build_config(file_values, over)


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{args.command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"


def _split_spec(cfg: Config) -> SplitSpec:
    if cfg.split_file:
        return SplitSpec.from_file(cfg.split_file)
    return SplitSpec(seed=cfg.split_seed, ratio=cfg.split_ratio)


def _load_data(path, cfg: Config):
    if path is None:
        raise CLIError("--data is required", EXIT_USAGE)
    try:
        return load_dataset(path, _split_spec(cfg), cfg.image_size, cfg.channels)
    except (DatasetError, OSError) as exc:
        raise CLIError(f"cannot read data root {path}: {exc}", EXIT_DATA) from exc


def _load_trainer_state(path):
    from . import checkpoint as ckpt_io
    if path is None:
        raise CLIError("--ckpt is required", EXIT_USAGE)
    try:
        return ckpt_io.load(path)
    except FileNotFoundError as exc:
        raise CLIError(str(exc), EXIT_CHECKPOINT) from exc
    except CheckpointError as exc:
        raise CLIError(f"bad checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


def _generator_from(args):
    from .generator import Generator
    state = _load_trainer_state(args.ckpt)
    cfg = _resolve_config(args, Config.from_dict(state["config"]))
    G = Generator(cfg)
    G.load_state_dict(state["generator"])
    return G.eval(), cfg


class Manifest:
    """run_manifest.json, written before work starts and finalized at the end."""

    def __init__(self, out: Path, command: str, cfg: Config | None, argv, seed):
        self.path = out / "run_manifest.json"
        self.data = {
            "subcommand": command,
            "argv": list(argv),
            "config": cfg.to_dict() if cfg else None,
            "seed": seed,
            "source_revision": _source_revision(),
            "output_dir": str(out.resolve()),
            "start_time": datetime.now(timezone.utc).isoformat(),
            "end_time": None,
            "outputs": [],
        }
        out.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2) + "\n")

    def finish(self, outputs=(), **extra):
        self.data["outputs"] = sorted(str(p) for p in outputs)
        self.data["end_time"] = datetime.now(timezone.utc).isoformat()
        self.data.update(extra)
        self._write()


# -- subcommands --------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    from .trainer import train
    import torch
    if args.resume:
        state = _load_trainer_state(args.resume)
        cfg = _resolve_config(args, Config.from_dict(state["config"]))
    else:
        cfg = _resolve_config(args)
    out = _out_dir(args)
    ds = _load_data(args.data, cfg)
    man = Manifest(out, "train", cfg, argv, cfg.seed)
    from .config import write_config
    write_config(cfg, out / "config.cfg")
    torch.use_deterministic_algorithms(True)
    t0 = time.time()

    def progress(step, report):
        if step % args.log_every == 0:
            log.info("step %d  %s", step, "  ".join(f"{k}={v:.4f}" for k, v in report.items()))

    trainer = train(cfg, ds, out, resume=args.resume, progress=progress)
    man.finish(sorted(out.glob("ckpt_*.bin")) + [out / "train_log.jsonl", out / "config.cfg"],
               steps=trainer.step, seconds=round(time.time() - t0, 2))
    print(f"trained {trainer.step} steps -> {out}")
    return EXIT_OK


def cmd_generate(args, argv) -> int:
    from .trainer import generate_augmented_set
    G, cfg = _generator_from(args)
    k = args.k or cfg.k_gen
    ds = _load_data(args.data, cfg)
    cats = args.category or ds.unseen
    unknown = [c for c in cats if c not in ds.images]
    if unknown:
        raise CLIError(f"unknown categories {unknown}", EXIT_DATA)
    out = _out_dir(args)
    man = Manifest(out, "generate", cfg, argv, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    written = []
    try:
        imgs, labels = generate_augmented_set(G, {c: ds.images[c] for c in cats}, args.count, k, rng)
    except EpisodeError as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc
    counters: dict = {}
    for img, cat in zip(imgs, labels):
        d = out / cat
        d.mkdir(exist_ok=True)
        i = counters[cat] = counters.get(cat, -1) + 1
        path = d / f"{i:05d}.png"
        save_png(img, path)
        written.append(path)
    man.finish(written, categories=cats, k=k, count=args.count)
    print(f"wrote {len(written)} images for {len(cats)} categories -> {out}")
    return EXIT_OK


def cmd_interpolate(args, argv) -> int:
    from .evaluation import interpolation_sweep, save_strip
    G, cfg = _generator_from(args)
    try:
        x1 = load_image(args.x1, cfg.image_size, cfg.channels)
        x2 = load_image(args.x2, cfg.image_size, cfg.channels)
    except OSError as exc:
        raise CLIError(f"cannot read image: {exc}", EXIT_DATA) from exc
    out = _out_dir(args)
    man = Manifest(out, "interpolate", cfg, argv, cfg.seed)
    frames = interpolation_sweep(G, x1, x2, args.steps, args.endpoints)
    path = out / "interpolation.png"
    save_strip(frames, path)
    man.finish([path], frames=len(frames))
    print(f"wrote {len(frames)}-frame strip -> {path}")
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    from .evaluation import evaluate_generator, extractor_for
    G, cfg = _generator_from(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = set(metrics) - {"fid", "is", "lpips"}
    if bad:
        raise CLIError(f"unknown metrics {sorted(bad)}", EXIT_USAGE)
    ds = _load_data(args.data, cfg)
    out = _out_dir(args)
    man = Manifest(out, "evaluate", cfg, argv, cfg.seed)
    ext = extractor_for(ds, cfg)
    rep = evaluate_generator(G, ds, ext, cfg, np.random.default_rng(cfg.seed), metrics)
    path = out / "metrics.csv"
    dataset_name = Path(args.data).name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "category", "value", "dataset", "config_hash", "seed"])
        for m, v in (("fid", rep.fid), ("is", rep.is_score), ("lpips", rep.lpips_avg)):
            if m in metrics:
                w.writerow([m, "all", f"{v:.6f}", dataset_name, cfg.digest(), cfg.seed])
        for cat, vals in rep.per_category.items():
            for m, v in vals.items():
                w.writerow([m, cat, f"{v:.6f}", dataset_name, cfg.digest(), cfg.seed])
    man.finish([path])
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_augment_eval(args, argv) -> int:
    from .evaluation import extractor_for, few_shot_eval, low_data_eval
    G, cfg = _generator_from(args)
    ds = _load_data(args.data, cfg)
    out = _out_dir(args)
    man = Manifest(out, "augment-eval", cfg, argv, cfg.seed)
    ext = extractor_for(ds, cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    try:
        if args.mode == "lowdata":
            for aug in args.augment.split(","):
                for s in seeds:
                    acc = low_data_eval(ds, G, args.samples, aug, s, ext, cfg)
                    rows.append(["lowdata", aug, args.samples, s, f"{acc:.6f}"])
        else:
            for aug in (False, True):
                for s in seeds:
                    acc = few_shot_eval(ds, G, args.n_way, args.n_shot, args.episodes, s, ext, cfg, aug)
                    rows.append([f"fewshot-{args.n_way}way-{args.n_shot}shot",
                                 "generated" if aug else "none", args.n_shot, s, f"{acc:.6f}"])
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc
    path = out / "augment_eval.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protocol", "augment", "samples", "seed", "accuracy", "dataset", "config_hash"])
        for r in rows:
            w.writerow(r + [Path(args.data).name, cfg.digest()])
    man.finish([path])
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_make_glyphs(args, argv) -> int:
    out = Path(args.out)
    make_glyph_dataset(out, args.categories, args.per_category, args.size, args.seed)
    print(f"wrote {args.categories} glyph categories -> {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CLIError(f"{self.prog}: error: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusefill", description=__doc__)
    p.add_argument("--version", action="version", version=f"fusefill {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help, needs_ckpt=True):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<subcommand>-<time>)")
        if needs_ckpt:
            sp.add_argument("--ckpt", help="checkpoint file (ckpt_<epoch>.bin)")
        return sp

    sp = add("train", cmd_train, "train generator and discriminator on seen categories", needs_ckpt=False)
    sp.add_argument("--config", help="flat key = value config file")
    sp.add_argument("--data", help="dataset root with one directory per category")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--log-every", type=int, default=50)
    _add_config_flags(sp)

    sp = add("generate", cmd_generate, "generate images for (unseen) categories")
    sp.add_argument("--data", help="dataset root providing conditional images")
    sp.add_argument("--k", type=int, default=None, help="conditional images per sample (default: k_gen)")
    sp.add_argument("--count", type=int, default=128, help="images per category")
    sp.add_argument("--category", action="append", help="category name (repeatable; default: all unseen)")
    _add_config_flags(sp)

    sp = add("interpolate", cmd_interpolate, "coefficient sweep between two images as a PNG strip")
    sp.add_argument("--x1", required=True)
    sp.add_argument("--x2", required=True)
    sp.add_argument("--steps", type=int, default=9)
    sp.add_argument("--endpoints", action="store_true", help="add [1,0] and [0,1] frames")
    _add_config_flags(sp)

    sp = add("evaluate", cmd_evaluate, "FID / IS / LPIPS-style diversity on unseen categories")
    sp.add_argument("--data")
    sp.add_argument("--metrics", default="fid,is,lpips")
    _add_config_flags(sp)

    sp = add("augment-eval", cmd_augment_eval, "low-data or few-shot classification with generated data")
    sp.add_argument("--data")
    sp.add_argument("--mode", choices=["lowdata", "fewshot"], default="lowdata")
    sp.add_argument("--samples", type=int, default=10, help="training images per unseen category (lowdata)")
    sp.add_argument("--augment", default="none,traditional,generated", help="lowdata augment modes")
    sp.add_argument("--n-way", type=int, default=5)
    sp.add_argument("--n-shot", type=int, default=5)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--seeds", default="0,1,2")
    _add_config_flags(sp)

    sp = sub.add_parser("make-glyphs", help="write a procedural glyph dataset for desk-scale runs")
    sp.set_defaults(fn=cmd_make_glyphs)
    sp.add_argument("--out", required=True)
    sp.add_argument("--categories", type=int, default=20)
    sp.add_argument("--per-category", type=int, default=30)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    return p


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except CLIError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args, argv)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, EpisodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
