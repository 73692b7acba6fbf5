"""Checkpoint directories: ``model.bin`` (tensor container), ``manifest.txt`` and ``log.txt``.

The manifest embeds the resolved experiment config, the model digest and the digests of
every input the run consumed, so any artifact can be traced back to its sources.
"""

from __future__ import annotations

from pathlib import Path

from .atom import AudioToMotion
from .codec import TriPlaneCodec
from .config import ExperimentConfig
from .io import FormatError, file_digest, format_value, load_tensors, read_manifest, save_tensors, write_manifest, write_text
from .mtov import MotionToVideo

MODEL_FILE = "model.bin"
MANIFEST_FILE = "manifest.txt"
LOG_FILE = "log.txt"


def atom_from_config(cfg: ExperimentConfig) -> AudioToMotion:
    a = cfg.section("atom")
    return AudioToMotion(
        n_frames=cfg["corpus.n_frames"], audio_dim=cfg["corpus.feature_dim"], seed=cfg["seed"], **cfg.schedule_params(), **a
    )


def codec_from_config(cfg: ExperimentConfig) -> TriPlaneCodec:
    if cfg["corpus.height"] != cfg["corpus.width"]:
        raise ValueError("the tri-plane codec expects square frames")
    return TriPlaneCodec(clip_len=cfg["corpus.n_frames"], input_res=cfg["corpus.height"], seed=cfg["seed"], **cfg.section("codec"))


def mtov_from_config(cfg: ExperimentConfig) -> MotionToVideo:
    return MotionToVideo(seed=cfg["seed"], **cfg.schedule_params(), **cfg.section("mtov"))


_BUILDERS = {"atom": atom_from_config, "codec": codec_from_config, "motion-codec": codec_from_config, "mtov": mtov_from_config}


def format_log(records) -> str:
    return "".join(" ".join(f"{k}={format_value(v)}" for k, v in rec.items()) + "\n" for rec in records)


def save_checkpoint(out_dir, kind: str, model, cfg: ExperimentConfig, inputs: dict[str, str] | None = None, extra: dict | None = None, log=None) -> dict[str, str]:
    """Write ``model`` (an estimator with ``to_arrays``) and its manifest; returns the manifest."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = save_tensors(out / MODEL_FILE, model.to_arrays())
    entries: dict[str, object] = {"format": "talkdiff-checkpoint-1", "kind": kind, "model.sha256": digest}
    entries.update(cfg.embedded())
    for name, d in (inputs or {}).items():
        entries[f"input.{name}"] = d
    entries.update(extra or {})
    if log is not None:
        write_text(out / LOG_FILE, format_log(log))
        entries["log.sha256"] = file_digest(out / LOG_FILE)
    write_manifest(out / MANIFEST_FILE, entries)
    return {k: format_value(v) for k, v in entries.items()}


def load_checkpoint(path, kind: str | None = None):
    """Rebuild the estimator stored in checkpoint directory ``path`` (digest verified)."""
    path = Path(path)
    man = read_manifest(path / MANIFEST_FILE)
    if kind is not None and man.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {man.get('kind')!r}")
    if file_digest(path / MODEL_FILE) != man.get("model.sha256"):
        raise FormatError(f"{path}: model digest does not match manifest")
    cfg = ExperimentConfig.from_embedded(man)
    model = _BUILDERS[man["kind"]](cfg).load_arrays(load_tensors(path / MODEL_FILE))
    return model, man, cfg
