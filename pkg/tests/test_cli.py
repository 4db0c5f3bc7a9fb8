import csv
import json

import pytest

from fusefill import cli
from fusefill.config import FIELD_TYPES, write_config

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained(glyph_root, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path = tmp / "tiny.cfg"
    write_config(tiny_config(epochs=1, steps_per_epoch=2, augment_count=8, fid_gen_count=12,
                             fid_real_count=11, extractor_epochs=2, extractor_dim=4, split_seed=1), cfg_path)
    out = tmp / "run"
    code = cli.run(["train", "--config", str(cfg_path), "--data", str(glyph_root), "--out", str(out),
                    "--log-every", "1"])
    assert code == cli.EXIT_OK
    return out


def test_help_lists_every_config_key(capsys):
    assert cli.run(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for name in FIELD_TYPES:
        assert f"--{name.replace('_', '-')}" in text
    assert "(default: 128)" in text


def test_usage_errors():
    assert cli.run([]) == cli.EXIT_USAGE
    assert cli.run(["nosuch"]) == cli.EXIT_USAGE
    assert cli.run(["generate", "--data", "x"]) == cli.EXIT_USAGE  # no --ckpt


def test_config_and_data_errors(tmp_path, glyph_root):
    assert cli.run(["train", "--config", str(tmp_path / "missing.cfg"), "--data", str(glyph_root)]) == cli.EXIT_CONFIG
    assert cli.run(["train", "--lr", "-1", "--data", str(glyph_root)]) == cli.EXIT_CONFIG
    assert cli.run(["train", "--lr", "abc", "--data", str(glyph_root)]) == cli.EXIT_CONFIG
    assert cli.run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_bad_checkpoint(tmp_path, glyph_root):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    assert cli.run(["generate", "--ckpt", str(bad), "--data", str(glyph_root)]) == cli.EXIT_CHECKPOINT
    assert cli.run(["generate", "--ckpt", str(tmp_path / "gone.bin"),
                    "--data", str(glyph_root)]) == cli.EXIT_CHECKPOINT


def test_train_outputs_and_manifest(trained):
    assert (trained / "ckpt_1.bin").exists() and (trained / "config.cfg").exists()
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    man = json.loads((trained / "run_manifest.json").read_text())
    assert man["subcommand"] == "train" and man["end_time"] and man["steps"] == 2
    assert man["config"]["image_size"] == 8
    assert any(o.endswith("ckpt_1.bin") for o in man["outputs"])


def test_resume_extends_training(trained, glyph_root, tmp_path):
    out = tmp_path / "resumed"
    code = cli.run(["train", "--resume", str(trained / "ckpt_1.bin"), "--epochs", "2",
                    "--data", str(glyph_root), "--out", str(out)])
    assert code == 0
    assert (out / "ckpt_2.bin").exists()
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 2


def test_generate(trained, glyph_root, tmp_path):
    out = tmp_path / "gen"
    code = cli.run(["generate", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--k", "2", "--count", "5", "--out", str(out)])
    assert code == 0
    pngs = sorted(out.glob("*/*.png"))
    assert len(pngs) == 10  # two unseen categories
    assert cli.run(["generate", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--category", "nosuch", "--out", str(tmp_path / "g2")]) == cli.EXIT_DATA
    assert cli.run(["generate", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--k", "50", "--out", str(tmp_path / "g3")]) == cli.EXIT_DATA


def test_interpolate(trained, glyph_root, tmp_path):
    imgs = sorted(glyph_root.glob("*/*.png"))[:2]
    out = tmp_path / "interp"
    code = cli.run(["interpolate", "--ckpt", str(trained / "ckpt_1.bin"), "--x1", str(imgs[0]),
                    "--x2", str(imgs[1]), "--steps", "5", "--endpoints", "--out", str(out)])
    assert code == 0
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["frames"] == 7
    assert cli.run(["interpolate", "--ckpt", str(trained / "ckpt_1.bin"), "--x1", str(tmp_path / "no.png"),
                    "--x2", str(imgs[1]), "--out", str(out)]) == cli.EXIT_DATA


def test_evaluate(trained, glyph_root, tmp_path):
    out = tmp_path / "eval"
    code = cli.run(["evaluate", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--metrics", "is,lpips", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    overall = {r["metric"] for r in rows if r["category"] == "all"}
    assert overall == {"is", "lpips"}
    assert cli.run(["evaluate", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--metrics", "bleu", "--out", str(out)]) == cli.EXIT_USAGE


def test_augment_eval(trained, glyph_root, tmp_path):
    out = tmp_path / "aug"
    code = cli.run(["augment-eval", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--mode", "lowdata", "--samples", "5", "--augment", "none,generated", "--seeds", "0,1",
                    "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "augment_eval.csv")))
    assert len(rows) == 4 and {r["augment"] for r in rows} == {"none", "generated"}
    code = cli.run(["augment-eval", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--mode", "fewshot", "--n-way", "2", "--n-shot", "3", "--episodes", "1", "--seeds", "0",
                    "--out", str(tmp_path / "fs")])
    assert code == 0
    assert cli.run(["augment-eval", "--ckpt", str(trained / "ckpt_1.bin"), "--data", str(glyph_root),
                    "--mode", "fewshot", "--n-way", "9", "--seeds", "0",
                    "--out", str(tmp_path / "fs2")]) == cli.EXIT_DATA


def test_out_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
    args = cli.build_parser().parse_args(["train"])
    assert cli._out_dir(args).parent == tmp_path


def test_make_glyphs(tmp_path):
    assert cli.run(["make-glyphs", "--out", str(tmp_path / "g"), "--categories", "3",
                    "--per-category", "2", "--size", "16"]) == 0
    assert len(list((tmp_path / "g").glob("*/*.png"))) == 6
