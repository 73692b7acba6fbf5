import os
import subprocess
import sys

import numpy as np
import pytest

from talkdiff.cli import main
from talkdiff.config import ExperimentConfig
from talkdiff.io import file_digest, load_tensors, read_manifest

TINY = {
    "corpus.n_clips": 2,
    "corpus.n_frames": 8,
    "corpus.feature_dim": 3,
    "corpus.height": 16,
    "corpus.width": 16,
    "atom.latent_dim": 16,
    "atom.n_blocks": 1,
    "atom.max_steps": 3,
    "codec.base_channels": 8,
    "codec.emb_dim": 2,
    "codec.max_steps": 3,
    "motion.steps": 2,
    "mtov.base_channels": 8,
    "mtov.channel_mult": (1, 2),
    "mtov.attn_levels": (1,),
    "mtov.max_steps": 2,
    "schedule.n_steps": 3,
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny corpus plus one checkpoint per trainable stage, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.txt"
    ExperimentConfig(TINY).save(cfg)
    assert run("gen-corpus", "--config", cfg, "--out", root / "corpus", "--seed", 1) == 0
    assert run("train-atom", "--config", cfg, "--corpus", root / "corpus", "--out", root / "atom") == 0
    assert run("train-codec", "--config", cfg, "--corpus", root / "corpus", "--out", root / "codec") == 0
    assert run("finetune-motion-codec", "--corpus", root / "corpus", "--codec", root / "codec", "--out", root / "mcodec") == 0
    assert run("train-mtov", "--config", cfg, "--corpus", root / "corpus", "--codec", root / "codec", "--motion-codec", root / "mcodec", "--out", root / "mtov") == 0
    return root


def models(root):
    return ["--atom", root / "atom", "--codec", root / "codec", "--motion-codec", root / "mcodec", "--mtov", root / "mtov", "--corpus", root / "corpus"]


def test_gen_corpus_layout(tmp_path):
    assert run("gen-corpus", "--out", tmp_path / "d", "--clips", 8, "--frames", 16, "--seed", 7) == 0
    dirs = sorted(p.name for p in (tmp_path / "d").iterdir() if p.is_dir())
    assert dirs == [f"clip_{i:04d}" for i in range(8)]
    man = read_manifest(tmp_path / "d" / "manifest.txt")
    assert man["clips"] == "8" and man["seed"] == "7" and man["config.n_frames"] == "16"


def test_checkpoint_manifests(workspace):
    corpus_digest = file_digest(workspace / "corpus" / "manifest.txt")
    for name, kind in (("atom", "atom"), ("codec", "codec"), ("mcodec", "motion-codec"), ("mtov", "mtov")):
        man = read_manifest(workspace / name / "manifest.txt")
        assert man["kind"] == kind
        assert man["model.sha256"] == file_digest(workspace / name / "model.bin")
        assert man["input.corpus"] == corpus_digest
        assert man["config.corpus.n_frames"] == "8"
        assert man["log.sha256"] == file_digest(workspace / name / "log.txt")
    codec_man = read_manifest(workspace / "codec" / "manifest.txt")
    assert codec_man["phase2_step"] == "2"
    mc_man = read_manifest(workspace / "mcodec" / "manifest.txt")
    assert mc_man["decoder.sha256"] == codec_man["decoder.sha256"]
    assert mc_man["input.codec"] == codec_man["model.sha256"]
    log_line = (workspace / "atom" / "log.txt").read_text().splitlines()[0]
    assert log_line.startswith("step=0 loss=")


def test_sample_writes_landmarks(workspace, tmp_path):
    clip = workspace / "corpus" / "clip_0000"
    out = tmp_path / "lm.bin"
    assert run("sample", "--atom", workspace / "atom", "--audio", clip / "features.bin", "--lid", clip / "landmarks_frontal.bin", "--out", out, "--steps", 2) == 0
    assert load_tensors(out)["landmarks"].shape == (8, 68, 3)
    man = read_manifest(str(out) + ".manifest.txt")
    assert man["invocations"] == "2"


def test_generate_and_evaluate(workspace, tmp_path):
    out = tmp_path / "gen"
    assert run("generate", *models(workspace), "--out", out, "--clip", 1, "--seed", 2) == 0
    arrays = load_tensors(out / "video.bin")
    assert arrays["video"].shape == (8, 3, 16, 16)
    man = read_manifest(out / "manifest.txt")
    assert man["invocations"] == "3" and man["frames"] == "8"
    assert len(list((out / "frames").glob("*.png"))) == 8
    report = tmp_path / "report.txt"
    assert run("evaluate", "--pred", out, "--ref", workspace / "corpus" / "clip_0001", "--out", report) == 0
    rep = read_manifest(report)
    for key in ("lmd", "psnr", "sync_corr"):
        assert np.isfinite(float(rep[key]))


def test_frame_mode_invocations(workspace, tmp_path):
    assert run("generate", *models(workspace), "--out", tmp_path / "f", "--mode", "frame", "--steps", 2) == 0
    assert read_manifest(tmp_path / "f" / "manifest.txt")["invocations"] == str(8 * 2)


def test_generate_long(workspace, tmp_path):
    assert run("generate-long", *models(workspace), "--out", tmp_path / "long", "--clips", "0,1,0") == 0
    arrays = load_tensors(tmp_path / "long" / "video.bin")
    assert arrays["video"].shape[0] == 24 and arrays["landmarks_frontal"].shape == (24, 68, 3)
    assert run("evaluate", "--pred", tmp_path / "long", "--ref", *(workspace / "corpus" / f"clip_000{i}" for i in (0, 1, 0))) == 0


def test_commands_are_byte_reproducible(workspace, tmp_path):
    cfg = workspace / "tiny.txt"
    assert run("train-atom", "--config", cfg, "--corpus", workspace / "corpus", "--out", tmp_path / "atom") == 0
    assert file_digest(tmp_path / "atom" / "model.bin") == file_digest(workspace / "atom" / "model.bin")
    a, b = tmp_path / "g1", tmp_path / "g2"
    assert run("generate", *models(workspace), "--out", a) == 0
    assert run("generate", *models(workspace), "--out", b) == 0
    assert file_digest(a / "video.bin") == file_digest(b / "video.bin")


def test_inspect(workspace, capsys):
    assert run("inspect", workspace / "atom") == 0
    assert "kind: atom" in capsys.readouterr().out
    assert run("inspect", workspace / "atom" / "model.bin") == 0
    assert capsys.readouterr().out.startswith("container ")


def test_stage_tagged_failures(workspace, tmp_path, capsys):
    assert run("train-atom", "--corpus", workspace / "corpus", "--out", tmp_path / "x") == 1
    assert "error [inputs]" in capsys.readouterr().err
    assert run("train-atom", "--set", "atom.bogus=1", "--corpus", workspace / "corpus", "--out", tmp_path / "x") == 1
    assert "error [config]" in capsys.readouterr().err
    assert run("generate", *models(workspace), "--out", tmp_path / "y", "--clip", 9) == 1
    assert "error [inputs]" in capsys.readouterr().err
    # a codec checkpoint where an atom checkpoint is expected
    assert run("sample", "--atom", workspace / "codec", "--audio", "a", "--lid", "b", "--out", tmp_path / "z") == 1
    assert "FormatError" in capsys.readouterr().err


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        run("gen-corpus", "--out", "x", "--bogus")
    assert info.value.code != 0


def test_thread_env_and_module_entry(workspace, tmp_path):
    env = {**os.environ, "MDTK_NUM_THREADS": "1"}
    cmd = [sys.executable, "-m", "talkdiff.cli", "inspect", str(workspace / "codec")]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "kind: codec" in res.stdout
    res = subprocess.run(cmd, env={**env, "MDTK_NUM_THREADS": "many"}, capture_output=True, text=True, check=False)
    assert res.returncode != 0 and "MDTK_NUM_THREADS" in res.stderr
