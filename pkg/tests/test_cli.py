import subprocess
import sys
from pathlib import Path

import pytest

from capnet.cli import main

SMALL_CFG = """\
# tiny pipeline
image_size = 32
samples_per_class = 4
grid_side = 2
conv_channels = 4
d = 8
hidden = 16
caption_embed = 8
attr_embed = 4
att_dim = 8
extractor_channels = 8
extractor_fc = 8
epochs = 2
attr_epochs = 1
batch_size = 8
"""


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root: Path) -> None:
    cfg = root / "c.cfg"
    cfg.write_text(SMALL_CFG)
    d, v, m = root / "data", root / "vocab", root / "models"
    assert run("gen-data", "--config", cfg, "--out", d, "--quiet") == 0
    manifest = d / "manifest.tsv"
    assert run("build-vocab", "--config", cfg, "--manifest", manifest, "--out", v) == 0
    assert run("train-attr", "--config", cfg, "--manifest", manifest, "--vocab", v, "--out", m, "--quiet") == 0
    assert run("train-caption", "--config", cfg, "--manifest", manifest, "--vocab", v, "--out", m,
               "--quiet") == 0
    ck, ack = m / "caption.ckpt", m / "attr.ckpt"
    images = sorted((d / "images").glob("*.ppm"))[:2]
    assert run("caption", "--checkpoint", ck, "--attr-checkpoint", ack, "--vocab", v, "--image", *images,
               "--out", root / "captions") == 0
    assert run("evaluate", "--manifest", manifest, "--checkpoint", ck, "--attr-checkpoint", ack,
               "--vocab", v, "--out", root / "eval") == 0
    assert run("attn-eval", "--manifest", manifest, "--checkpoint", ck, "--attr-checkpoint", ack,
               "--vocab", v, "--out", root / "attn") == 0
    assert run("ablate", "--config", cfg, "--set", "epochs=1", "--seeds", "0,1", "--out", root / "ablate",
               "--quiet") == 0
    assert run("grad-check", "--out", root / "gc") == 0


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    pipeline(a)
    pipeline(b)
    return a, b


class TestPipeline:
    def test_byte_identical_reruns(self, pipeline_runs):
        a, b = map(snapshot, pipeline_runs)
        assert a.keys() == b.keys()
        assert [k for k in a if a[k] != b[k]] == []

    def test_artifacts(self, pipeline_runs):
        root = pipeline_runs[0]
        files = set(snapshot(root))
        for f in ("data/manifest.tsv", "data/config.cfg", "vocab/vocab.txt", "vocab/attr_vocab.txt",
                  "models/attr.ckpt", "models/caption.ckpt", "models/train_log.csv", "models/attr_log.csv",
                  "captions/captions.tsv", "eval/metrics.csv", "eval/candidates.tsv", "attn/localization.csv",
                  "ablate/ablation_seed0.csv", "ablate/ablation_seed1.csv", "ablate/summary.csv",
                  "gc/grad_check.txt"):
            assert f in files, f
        assert any(f.startswith("captions/") and f.endswith(".pgm") for f in files)
        rows = (root / "ablate/ablation_seed0.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows] == ["model", "adaptive", "vanilla", "attr_only", "full"]
        assert (root / "models/train_log.csv").read_text().startswith("epoch,lr,train_loss,val_loss\n")

    def test_outputs_stay_in_out_dirs(self, pipeline_runs):
        tops = {f.split("/")[0] for f in snapshot(pipeline_runs[0])}
        assert tops == {"c.cfg", "data", "vocab", "models", "captions", "eval", "attn", "ablate", "gc"}

    def test_grad_check_report(self, pipeline_runs):
        text = (pipeline_runs[0] / "gc/grad_check.txt").read_text()
        assert text.rstrip().endswith("flagged none")


class TestEvaluateIdentity:
    def test_b1_one(self, pipeline_runs, tmp_path):
        d = pipeline_runs[0] / "data"
        lines = [ln.split("\t") for ln in (d / "manifest.tsv").read_text().splitlines()]
        cand = tmp_path / "cand.tsv"
        cand.write_text("".join(f"{p[0]}\t{p[2]}\n" for p in lines if p[5] == "test"))
        assert run("evaluate", "--manifest", d / "manifest.tsv", "--candidates", cand, "--out", tmp_path) == 0
        row = (tmp_path / "metrics.csv").read_text().splitlines()[1].split(",")
        assert row[1] == "1.0000" and row[7] == "10.0000"


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run("fly") == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand(self, capsys):
        assert main([]) == 1
        assert "gen-data" in capsys.readouterr().err

    def test_bad_config_value(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("th = 1.5\n")
        assert run("gen-data", "--config", tmp_path / "c.cfg", "--out", tmp_path / "d") == 1
        assert "th" in capsys.readouterr().err

    def test_missing_manifest_is_io(self, tmp_path):
        assert run("build-vocab", "--manifest", tmp_path / "nope.tsv", "--out", tmp_path) == 2

    def test_corrupt_checkpoint_is_format(self, pipeline_runs, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        v = pipeline_runs[0] / "vocab"
        assert run("evaluate", "--manifest", pipeline_runs[0] / "data/manifest.tsv", "--checkpoint", bad,
                   "--vocab", v, "--out", tmp_path) == 2

    def test_attribute_mode_needs_extractor(self, pipeline_runs, tmp_path):
        root = pipeline_runs[0]
        assert run("evaluate", "--manifest", root / "data/manifest.tsv", "--checkpoint", root / "models/caption.ckpt",
                   "--vocab", root / "vocab", "--out", tmp_path) == 1

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "capnet.cli", "grad-check", "--mode", "vanilla",
                               "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "flagged none" in proc.stdout
