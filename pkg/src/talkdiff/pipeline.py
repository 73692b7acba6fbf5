"""End-to-end talking-head generation: audio -> landmarks -> tri-plane latent -> video."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .atom import AudioToMotion
from .codec import TriPlaneCodec
from .mtov import ConditionSet, MotionToVideo
from .nn import params_digest
from .video import blend, check_clip, make_pose_frames


class PipelineError(RuntimeError):
    """An error raised inside a named generation stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def build_conditions(landmarks, pose_frames, identity_clip, video_codec: TriPlaneCodec, motion_codec: TriPlaneCodec) -> ConditionSet:
    """Encode (batched) pose-aligned landmarks, pose frames and identity frames.

    ``landmarks`` is ``[N, S, 68, 3]``, the clips ``[N, S, C, H, W]``.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    pose_frames = np.asarray(pose_frames)
    identity_clip = np.asarray(identity_clip)
    if landmarks.ndim == 3:
        landmarks, pose_frames, identity_clip = landmarks[None], pose_frames[None], identity_clip[None]
    if not (len(landmarks) == len(pose_frames) == len(identity_clip)):
        raise ValueError("condition inputs disagree on batch size")
    H, W = pose_frames.shape[-2:]
    motion = np.stack([geo.rasterize_motion(seq, H, W) for seq in landmarks])
    return ConditionSet(
        Z_L=motion_codec.transform(motion),
        Z_P=video_codec.transform(pose_frames),
        Z_I=video_codec.transform(identity_clip),
    )


def train_mtov(corpus, video_codec: TriPlaneCodec, motion_codec: TriPlaneCodec, **params) -> MotionToVideo:
    """Fit the latent denoiser on a corpus with frozen codecs (checked by digest)."""
    before = (params_digest(video_codec.model_), params_digest(motion_codec.model_))
    cond = build_conditions(corpus.posed, corpus.pose_frames, corpus.identity, video_codec, motion_codec)
    target = video_codec.transform(corpus.video)
    model = MotionToVideo(**params).fit(target, cond)
    after = (params_digest(video_codec.model_), params_digest(motion_codec.model_))
    if before != after:
        raise RuntimeError("codec parameters changed during MToV training")
    return model


@dataclass
class GeneratedClip:
    video: np.ndarray  # [S, C, H, W], blended onto the pose source
    raw: np.ndarray  # decoded MToV output before blending
    landmarks_frontal: np.ndarray
    landmarks_aligned: np.ndarray
    invocations: int
    identity_input: np.ndarray
    l_id: np.ndarray


@dataclass
class GeneratedLong:
    video: np.ndarray
    landmarks_frontal: np.ndarray
    clips: list[GeneratedClip] = field(default_factory=list)

    @property
    def invocations(self) -> int:
        return sum(c.invocations for c in self.clips)


@dataclass
class TalkingHeadPipeline:
    atom: AudioToMotion
    video_codec: TriPlaneCodec
    motion_codec: TriPlaneCodec
    mtov: MotionToVideo
    blend_sigma: float = 1.0
    atom_steps: int | None = None
    mtov_steps: int | None = None

    @property
    def clip_len(self) -> int:
        return self.atom.n_frames

    def render_latent(self, cond: ConditionSet, n_steps: int | None, seed: int, mode: str = "joint") -> tuple[np.ndarray, int]:
        """Sample and decode one clip.  ``mode="frame"`` runs one full sampling chain per
        output frame (keeping frame ``i`` of chain ``i``), the frame-by-frame reference."""
        n_steps = n_steps or self.mtov_steps or self.mtov.n_steps
        if mode == "joint":
            z, calls = self.mtov.sample(cond, n_steps, seed)
            return self.video_codec.inverse_transform(z.numpy())[0], calls
        if mode != "frame":
            raise ValueError(f"unknown generation mode {mode!r}")
        frames, calls = [], 0
        for i in range(self.video_codec.clip_len):
            z, c = self.mtov.sample(cond, n_steps, seed + i)
            frames.append(self.video_codec.inverse_transform(z.numpy())[0, i])
            calls += c
        return np.stack(frames), calls

    def generate_clip(
        self,
        audio,
        identity_clip,
        pose_source_clip,
        pose_source_landmarks,
        l_id,
        n_steps: int | None = None,
        seed: int = 0,
        mode: str = "joint",
        landmarks=None,
    ) -> GeneratedClip:
        """Generate ``S`` frames for one audio window.

        ``landmarks`` may supply frontal motion directly, bypassing audio-to-motion sampling.
        """
        with stage("inputs"):
            identity_clip = check_clip(identity_clip, name="identity_clip")
            pose_source_clip = check_clip(pose_source_clip, name="pose_source_clip")
            pose_source_landmarks = geo.check_landmarks(pose_source_landmarks)
            if len(pose_source_landmarks) != len(pose_source_clip):
                raise ValueError("pose source clip and landmarks disagree on frame count")
        with stage("audio-to-motion"):
            if landmarks is None:
                frontal, _ = self.atom.sample_motion(audio, l_id, self.atom_steps, seed)
            else:
                frontal = geo.check_landmarks(landmarks)
        with stage("align"):
            aligned = geo.align_motion_to_reference(frontal, pose_source_landmarks)
        with stage("conditions"):
            cond = build_conditions(aligned, make_pose_frames(pose_source_clip), identity_clip, self.video_codec, self.motion_codec)
        with stage("motion-to-video"):
            raw, calls = self.render_latent(cond, n_steps, seed, mode)
        with stage("blend"):
            video = blend(raw, pose_source_clip, self.blend_sigma).astype(np.float32)
        return GeneratedClip(video, raw, frontal, aligned, calls, identity_clip, np.asarray(l_id, dtype=np.float64))

    def generate_long(
        self,
        audio_long,
        seed_identity_clip,
        pose_source_clip,
        pose_source_landmarks,
        l_id,
        n_steps: int | None = None,
        seed: int = 0,
    ) -> GeneratedLong:
        """Chain ``k`` clips: each reuses the previous output as identity frames and the
        previous final landmark frame as its initial landmark."""
        S = self.clip_len
        audio_long = np.asarray(audio_long)
        with stage("inputs"):
            if audio_long.ndim != 2 or len(audio_long) == 0 or len(audio_long) % (2 * S):
                raise ValueError(f"audio length must be a positive multiple of {2 * S}, got {audio_long.shape}")
            k = len(audio_long) // (2 * S)
            pose_source_clip = check_clip(pose_source_clip, name="pose_source_clip")
            pose_source_landmarks = geo.check_landmarks(pose_source_landmarks)
            if len(pose_source_clip) != k * S or len(pose_source_landmarks) != k * S:
                raise ValueError(f"pose source must have {k * S} frames")
        clips: list[GeneratedClip] = []
        identity = seed_identity_clip
        current = np.asarray(l_id, dtype=np.float64)
        for j in range(k):
            win = slice(j * S, (j + 1) * S)
            out = self.generate_clip(
                audio_long[2 * j * S : 2 * (j + 1) * S], identity, pose_source_clip[win], pose_source_landmarks[win], current, n_steps, seed + j
            )
            clips.append(out)
            identity = out.video
            current = out.landmarks_frontal[-1]
        return GeneratedLong(
            video=np.concatenate([c.video for c in clips]),
            landmarks_frontal=np.concatenate([c.landmarks_frontal for c in clips]),
            clips=clips,
        )
