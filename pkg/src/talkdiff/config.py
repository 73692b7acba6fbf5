"""Flat, typed ``key: value`` experiment configuration."""

from __future__ import annotations

from pathlib import Path

from .io import format_manifest, format_value, parse_manifest, write_manifest

# Desk-scale defaults. Section prefixes map onto estimator constructor arguments.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out_dir": "runs",
    "schedule.T": 1000,
    "schedule.beta_start": 0.0015,
    "schedule.beta_end": 0.0195,
    "schedule.eta": 0.0,
    "schedule.n_steps": 50,
    "corpus.n_clips": 8,
    "corpus.n_frames": 16,
    "corpus.feature_dim": 8,
    "corpus.height": 32,
    "corpus.width": 32,
    "corpus.n_identities": 4,
    "atom.latent_dim": 64,
    "atom.n_blocks": 2,
    "atom.n_heads": 2,
    "atom.n_trunk_blocks": 1,
    "atom.merge_trunk": True,
    "atom.lr": 1e-3,
    "atom.max_steps": 4000,
    "atom.batch_size": 8,
    "atom.w_recon": 1.0,
    "atom.w_vel": 1.0,
    "atom.optimizer": "adam",
    "atom.dtype": "float32",
    "codec.emb_dim": 4,
    "codec.base_channels": 16,
    "codec.n_resblocks": 1,
    "codec.downsample": 2,
    "codec.temporal_downsample": 2,
    "codec.lr": 2e-3,
    "codec.max_steps": 3000,
    "codec.batch_size": 4,
    "codec.phase2_fraction": 0.5,
    "codec.lambda1": 1.0,
    "codec.lambda2": 1.0,
    "codec.dtype": "float32",
    "motion.steps": 300,
    "motion.lr": 1e-3,
    "mtov.base_channels": 32,
    "mtov.channel_mult": (1, 2, 2),
    "mtov.n_resblocks": 1,
    "mtov.attn_levels": (1, 2),
    "mtov.n_heads": 2,
    "mtov.lr": 1e-3,
    "mtov.max_steps": 1500,
    "mtov.batch_size": 4,
    "mtov.dtype": "float32",
    "pipeline.blend_sigma": 1.0,
}

# Full-scale values, kept as a preset for reference runs.
FULL_SCALE_OVERRIDES: dict[str, object] = {
    "corpus.n_frames": 16,
    "corpus.height": 256,
    "corpus.width": 256,
    "atom.latent_dim": 512,
    "atom.n_blocks": 8,
    "atom.lr": 1e-4,
    "atom.max_steps": 300_000,
    "atom.batch_size": 64,
    "codec.base_channels": 384,
    "codec.n_resblocks": 2,
    "codec.downsample": 8,
    "codec.temporal_downsample": 1,
    "codec.lr": 4e-4,
    "codec.max_steps": 400_000,
    "motion.lr": 1e-4,
    "motion.steps": 60_000,
    "mtov.base_channels": 128,
    "mtov.channel_mult": (1, 2, 4, 4),
    "mtov.n_resblocks": 2,
    "mtov.attn_levels": (1, 2, 3),
    "mtov.n_heads": 8,
    "mtov.lr": 1e-4,
    "mtov.max_steps": 600_000,
    "mtov.batch_size": 12,
}


def _coerce(key: str, raw, default):
    """Convert ``raw`` (string or value) to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, tuple):
            if isinstance(raw, (tuple, list)):
                return tuple(int(x) for x in raw)
            text = str(raw).strip()
            return tuple(int(x) for x in text.split(",")) if text else ()
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


class ExperimentConfig:
    """Typed configuration; unknown keys are rejected."""

    def __init__(self, values: dict | None = None, **overrides):
        self._values = dict(DEFAULTS)
        self.update({**(values or {}), **{k.replace("__", "."): v for k, v in overrides.items()}})

    @classmethod
    def full_scale(cls) -> "ExperimentConfig":
        return cls(FULL_SCALE_OVERRIDES)

    def update(self, values: dict) -> "ExperimentConfig":
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self._values[k] = _coerce(k, v, DEFAULTS[k])
        return self

    def __getitem__(self, key: str):
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self._values == other._values

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)

    def section(self, name: str) -> dict[str, object]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def schedule_params(self) -> dict[str, object]:
        s = self.section("schedule")
        return {"T": s["T"], "beta_start": s["beta_start"], "beta_end": s["beta_end"], "eta": s["eta"], "n_steps": s["n_steps"]}

    def format(self) -> str:
        return format_manifest(self._values)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        return cls(parse_manifest(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        write_manifest(path, self._values)

    def embedded(self) -> dict[str, str]:
        """Entries prefixed with ``config.`` for inclusion in run manifests."""
        return {f"config.{k}": format_value(v) for k, v in self._values.items()}

    @classmethod
    def from_embedded(cls, manifest: dict[str, str]) -> "ExperimentConfig":
        return cls({k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")})

    def __repr__(self) -> str:
        return f"ExperimentConfig({len(self._values)} keys, seed={self['seed']})"
