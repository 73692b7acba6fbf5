"""Analytic talking-head corpus.

Every clip pairs an audio-rate amplitude envelope with frontal landmarks whose mouth
opening is a fixed linear function of that envelope, a slow head-pose trajectory, and a
rasterized RGB rendering.  Because the audio-to-lip map is known in closed form, sync and
disentanglement can be checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from skimage.draw import polygon as fill_polygon

from . import geometry as geo
from .io import file_digest, load_tensors, read_manifest, save_tensors, write_manifest
from .video import make_pose_frames

MAX_OPENING = 0.15
AUDIO_PER_VIDEO = 2
SUPERSAMPLE = 4

# Vertical mouth displacement weights: upper points move up by w*g/2, their mirrored
# lower partners move down by the same amount so the centroid never moves.
_UPPER = np.array([49, 50, 51, 52, 53, 61, 62, 63])
_LOWER = np.array([59, 58, 57, 56, 55, 67, 66, 65])
_WEIGHTS = np.array([0.5, 0.8, 1.0, 0.8, 0.5, 0.7, 1.0, 0.7])


def opening(amplitude):
    """Inner-lip gap (face units) produced by an amplitude in [0, 1]."""
    return MAX_OPENING * np.asarray(amplitude, dtype=np.float64)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class IdentitySpec:
    template: np.ndarray
    face_width: float
    jaw_depth: float
    eye_spacing: float
    skin: np.ndarray
    lips: np.ndarray
    mouth: np.ndarray
    eyes: np.ndarray
    background: np.ndarray


def _raw_template(face_width: float, jaw_depth: float, eye_spacing: float) -> np.ndarray:
    pts = np.zeros((68, 3))
    # Viewer-left half (x <= 0) is written explicitly, the rest is mirrored.
    for i in range(9):
        phi = np.pi * i / 16
        pts[i] = [-face_width * np.cos(phi), 0.1 - jaw_depth * np.sin(phi), 0.3 * np.sin(phi) - 0.2]
    pts[8, 0] = 0.0
    e = 0.5 * eye_spacing
    brow_x = np.array([-0.85, -0.68, -0.5, -0.32, -0.15]) * eye_spacing
    brow_y = np.array([0.26, 0.33, 0.35, 0.33, 0.28])
    for k in range(5):
        pts[17 + k] = [brow_x[k], brow_y[k], 0.1]
    for k, (y, z) in enumerate([(-0.05, 0.15), (-0.2, 0.25), (-0.35, 0.33), (-0.5, 0.4)]):
        pts[27 + k] = [0.0, y, z]
    for k, (x, z) in enumerate([(-0.2, 0.2), (-0.1, 0.26), (0.0, 0.3)]):
        pts[31 + k] = [x, -0.6, z]
    eye = [(-0.22, 0.0), (-0.1, 0.08), (0.07, 0.08), (0.22, 0.0), (0.07, -0.07), (-0.1, -0.07)]
    for k, (dx, dy) in enumerate(eye):
        pts[36 + k] = [-e + dx, dy, 0.05]
    outer = {48: (-0.4, -0.95), 49: (-0.27, -0.86), 50: (-0.12, -0.82), 51: (0.0, -0.84), 57: (0.0, -1.11), 58: (-0.12, -1.1), 59: (-0.27, -1.06)}
    for i, (x, y) in outer.items():
        pts[i] = [x, y, 0.25]
    inner = {60: -0.3, 61: -0.13, 62: 0.0, 66: 0.0, 67: -0.13}
    for i, x in inner.items():
        pts[i] = [x, -0.95, 0.24]
    left = [i for i in range(68) if geo.MIRROR[i] != i and pts[geo.MIRROR[i]].any() and not pts[i].any()]
    for i in left:
        m = pts[geo.MIRROR[i]]
        pts[i] = [-m[0], m[1], m[2]]
    return pts


def _normalize_symmetric(pts: np.ndarray) -> np.ndarray:
    out = pts.copy()
    out[:, 1:] -= out[:, 1:].mean(axis=0)
    return out / geo.interocular(out)


def gen_identity(seed: int) -> IdentitySpec:
    rng = _rng(seed, 101)
    face_width = float(rng.uniform(0.9, 1.1))
    jaw_depth = float(rng.uniform(1.5, 1.75))
    eye_spacing = float(rng.uniform(0.9, 1.1))
    template = _normalize_symmetric(_raw_template(face_width, jaw_depth, eye_spacing))
    template.setflags(write=False)
    skin = np.array([0.85, 0.68, 0.55]) + rng.uniform(-0.1, 0.1, 3)
    return IdentitySpec(
        template=template,
        face_width=face_width,
        jaw_depth=jaw_depth,
        eye_spacing=eye_spacing,
        skin=np.clip(skin, 0, 1),
        lips=np.clip(np.array([0.72, 0.32, 0.32]) + rng.uniform(-0.05, 0.05, 3), 0, 1),
        mouth=np.array([0.08, 0.03, 0.03]),
        eyes=np.clip(np.array([0.2, 0.15, 0.1]) + rng.uniform(-0.05, 0.05, 3), 0, 1),
        background=np.clip(np.array([0.45, 0.5, 0.55]) + rng.uniform(-0.1, 0.1, 3), 0, 1),
    )


@dataclass(frozen=True)
class PhonemeStream:
    amplitudes: np.ndarray  # [2S], in [0, 1], amplitudes[0] == 0
    features: np.ndarray  # [2S, d], channel 0 == amplitudes


def gen_phoneme_stream(seed: int, S: int, d: int, knot_every: int = 4) -> PhonemeStream:
    if S < 2 or d < 1:
        raise ValueError("need S >= 2 and d >= 1")
    rng = _rng(seed, 202)
    n = AUDIO_PER_VIDEO * S
    knots_x = np.arange(0, n + knot_every, knot_every, dtype=np.float64)
    knots_y = rng.uniform(0.0, 1.0, len(knots_x))
    knots_y[0] = 0.0
    amp = PchipInterpolator(knots_x, knots_y)(np.arange(n, dtype=np.float64))
    amp = np.clip(amp, 0.0, 1.0)
    amp[0] = 0.0
    feats = np.empty((n, d), dtype=np.float64)
    feats[:, 0] = amp
    if d > 1:
        feats[:, 1:] = 0.5 * rng.standard_normal((n, d - 1))
    return PhonemeStream(amplitudes=amp, features=feats)


def gen_pose_trajectory(seed: int, S: int) -> list[geo.SimilarityTransform]:
    rng = _rng(seed, 303)
    deg = np.pi / 180.0
    t = np.arange(S) / S
    params = []
    for amp in (15.0 * deg, 10.0 * deg, 0.05, 0.04, 0.04):
        a = rng.uniform(0.3, 1.0) * amp
        f = rng.uniform(0.25, 0.75)
        ph = rng.uniform(0, 2 * np.pi)
        params.append(a * np.sin(2 * np.pi * f * t + ph))
    yaw, pitch, ds, tx, ty = params
    return [
        geo.SimilarityTransform(1.0 + ds[i], geo.rotation_matrix(yaw[i], pitch[i]), np.array([tx[i], ty[i], 0.0]))
        for i in range(S)
    ]


def mouth_frames(template: np.ndarray, gaps) -> np.ndarray:
    """Template copies with the inner-lip gap set to each value of ``gaps``."""
    gaps = np.asarray(gaps, dtype=np.float64)
    out = np.repeat(np.asarray(template, dtype=np.float64)[None], len(gaps), axis=0)
    half = 0.5 * gaps[:, None] * _WEIGHTS[None, :]
    out[:, _UPPER, 1] += half
    out[:, _LOWER, 1] -= half
    return out


def video_rate(amplitudes: np.ndarray) -> np.ndarray:
    return np.asarray(amplitudes)[::AUDIO_PER_VIDEO]


def gen_landmark_clip(identity: IdentitySpec, stream: PhonemeStream, pose_traj) -> tuple[np.ndarray, np.ndarray]:
    frontal = mouth_frames(identity.template, opening(video_rate(stream.amplitudes)))
    posed = geo.apply_transform(frontal, pose_traj)
    return frontal, posed


def _render_frame(frame: np.ndarray, identity: IdentitySpec, H: int, W: int) -> np.ndarray:
    k = SUPERSAMPLE
    Hs, Ws = H * k, W * k
    pix = geo.to_pixels(frame, Hs, Ws)
    canvas = np.empty((3, Hs, Ws), dtype=np.float64)
    canvas[:] = identity.background[:, None, None]

    def paint(indices, color):
        rr, cc = fill_polygon(pix[indices, 0], pix[indices, 1], shape=(Hs, Ws))
        canvas[:, rr, cc] = np.asarray(color)[:, None]

    paint(list(range(0, 17)) + list(range(26, 16, -1)), identity.skin)
    paint(list(geo.RIGHT_EYE), identity.eyes)
    paint(list(geo.LEFT_EYE), identity.eyes)
    paint(list(range(48, 60)), identity.lips)
    paint(list(range(60, 68)), identity.mouth)
    return canvas.reshape(3, H, k, W, k).mean(axis=(2, 4))


def render_face_clip(posed, identity: IdentitySpec, H: int, W: int) -> np.ndarray:
    posed = geo.check_landmarks(posed)
    if H < 16 or W < 16:
        raise ValueError("render size must be at least 16x16")
    clip = np.stack([_render_frame(f, identity, H, W) for f in posed])
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------ corpus


@dataclass
class CorpusConfig:
    n_clips: int = 8
    n_frames: int = 16
    feature_dim: int = 8
    height: int = 32
    width: int = 32
    n_identities: int = 4


@dataclass
class Corpus:
    """Stacked clip arrays; the leading axis indexes clips."""

    features: np.ndarray  # [N, 2S, d]
    amplitudes: np.ndarray  # [N, 2S]
    frontal: np.ndarray  # [N, S, 68, 3]
    posed: np.ndarray  # [N, S, 68, 3]
    poses: np.ndarray  # [N, S, 13]
    video: np.ndarray  # [N, S, 3, H, W]
    pose_frames: np.ndarray  # [N, S, 3, H, W]
    identity: np.ndarray  # [N, S, 3, H, W]
    templates: np.ndarray  # [N, 68, 3]
    identity_ids: np.ndarray  # [N]
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def l_id(self) -> np.ndarray:
        return self.frontal[:, 0]

    def pose_transforms(self, i: int) -> list[geo.SimilarityTransform]:
        return [geo.SimilarityTransform.from_array(v) for v in self.poses[i]]

    def subset(self, idx) -> "Corpus":
        idx = np.atleast_1d(idx)
        kw = {f.name: getattr(self, f.name)[idx] for f in fields(self) if f.name != "config"}
        return Corpus(**kw, config=replace(self.config, n_clips=len(idx)))


def make_clip(config: CorpusConfig, seed: int, index: int, identity_seed: int) -> dict[str, np.ndarray]:
    S, d, H, W = config.n_frames, config.feature_dim, config.height, config.width
    ident = gen_identity(identity_seed)
    stream = gen_phoneme_stream(_seed(seed, index, 1), S, d)
    traj = gen_pose_trajectory(_seed(seed, index, 2), S)
    frontal, posed = gen_landmark_clip(ident, stream, traj)
    video = render_face_clip(posed, ident, H, W)
    # identity frames: a neighbouring clip of the same speaker
    prev_stream = gen_phoneme_stream(_seed(seed, index, 3), S, d)
    prev_traj = gen_pose_trajectory(_seed(seed, index, 4), S)
    _, prev_posed = gen_landmark_clip(ident, prev_stream, prev_traj)
    return {
        "features": stream.features.astype(np.float32),
        "amplitudes": stream.amplitudes,
        "frontal": frontal,
        "posed": posed,
        "poses": np.stack([p.to_array() for p in traj]),
        "video": video,
        "pose_frames": make_pose_frames(video),
        "identity": render_face_clip(prev_posed, ident, H, W),
        "template": np.array(ident.template),
    }


def _seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def make_corpus(config: CorpusConfig | None = None, seed: int = 0) -> Corpus:
    config = config or CorpusConfig()
    if config.n_clips < 1 or config.n_identities < 1:
        raise ValueError("corpus needs at least one clip and one identity")
    ids = np.arange(config.n_clips) % config.n_identities
    clips = [make_clip(config, seed, i, _seed(seed, int(ids[i]), 9)) for i in range(config.n_clips)]
    stack = lambda key: np.stack([c[key] for c in clips])  # noqa: E731
    return Corpus(
        features=stack("features"),
        amplitudes=stack("amplitudes"),
        frontal=stack("frontal"),
        posed=stack("posed"),
        poses=stack("poses"),
        video=stack("video"),
        pose_frames=stack("pose_frames"),
        identity=stack("identity"),
        templates=stack("template"),
        identity_ids=ids.astype(np.int64),
        config=config,
    )


CLIP_FILES = ("features", "landmarks_frontal", "landmarks_posed", "poses", "video", "pose_frames", "identity")


def save_corpus(corpus: Corpus, out_dir, seed: int | None = None) -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: dict[str, object] = {"format": "talkdiff-corpus-1"}
    for k, v in vars(corpus.config).items():
        entries[f"config.{k}"] = v
    if seed is not None:
        entries["seed"] = seed
    entries["clips"] = len(corpus)
    for i in range(len(corpus)):
        d = out_dir / f"clip_{i:04d}"
        payload = {
            "features": {"features": corpus.features[i], "amplitudes": corpus.amplitudes[i]},
            "landmarks_frontal": {"landmarks": corpus.frontal[i], "template": corpus.templates[i]},
            "landmarks_posed": {"landmarks": corpus.posed[i]},
            "poses": {"poses": corpus.poses[i]},
            "video": {"video": corpus.video[i]},
            "pose_frames": {"video": corpus.pose_frames[i]},
            "identity": {"video": corpus.identity[i], "identity_id": np.array([corpus.identity_ids[i]], dtype=np.float64)},
        }
        for name in CLIP_FILES:
            digest = save_tensors(d / f"{name}.bin", payload[name])
            entries[f"clip_{i:04d}/{name}.bin"] = digest
    write_manifest(out_dir / "manifest.txt", entries)
    return {k: str(v) for k, v in entries.items()}


def load_corpus(path, verify: bool = True) -> Corpus:
    path = Path(path)
    man = read_manifest(path / "manifest.txt")
    cfg_types = {f.name: f.type for f in fields(CorpusConfig)}
    cfg = CorpusConfig(**{k: int(man[f"config.{k}"]) for k in cfg_types})
    n = int(man["clips"])
    parts: dict[str, list] = {k: [] for k in ("features", "amplitudes", "frontal", "posed", "poses", "video", "pose_frames", "identity", "templates", "identity_ids")}
    for i in range(n):
        d = path / f"clip_{i:04d}"
        if verify:
            for name in CLIP_FILES:
                rel = f"clip_{i:04d}/{name}.bin"
                if file_digest(path / rel) != man[rel]:
                    raise ValueError(f"digest mismatch for {rel}")
        feats = load_tensors(d / "features.bin")
        front = load_tensors(d / "landmarks_frontal.bin")
        ident = load_tensors(d / "identity.bin")
        parts["features"].append(feats["features"])
        parts["amplitudes"].append(feats["amplitudes"])
        parts["frontal"].append(front["landmarks"])
        parts["templates"].append(front["template"])
        parts["posed"].append(load_tensors(d / "landmarks_posed.bin")["landmarks"])
        parts["poses"].append(load_tensors(d / "poses.bin")["poses"])
        parts["video"].append(load_tensors(d / "video.bin")["video"])
        parts["pose_frames"].append(load_tensors(d / "pose_frames.bin")["video"])
        parts["identity"].append(ident["video"])
        parts["identity_ids"].append(int(ident["identity_id"][0]))
    stacked = {k: np.stack(v) if k != "identity_ids" else np.array(v, dtype=np.int64) for k, v in parts.items()}
    return Corpus(**stacked, config=cfg)


def gen_corpus(config: CorpusConfig, seed: int, out_dir) -> dict[str, str]:
    return save_corpus(make_corpus(config, seed), out_dir, seed=seed)
