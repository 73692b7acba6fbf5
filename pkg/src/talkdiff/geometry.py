"""68-point 3D landmark geometry: index sets, similarity transforms, alignment and rasterization.

Coordinates are in normalized face space: x to the viewer's right, y up, z toward the
camera.  Frontal faces have their centroid at the origin and inter-ocular distance 1
(distance between the two eye centers).  Projection to the image plane is orthographic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

N_POINTS = 68
LIP = np.arange(48, 68)
NONLIP = np.arange(0, 48)

RIGHT_EYE = np.arange(36, 42)
LEFT_EYE = np.arange(42, 48)
INNER_LIP_TOP_MID = 62
INNER_LIP_BOTTOM_MID = 66

# Polyline groups of the standard 68-point annotation: (indices, closed)
CONTOURS: tuple[tuple[range, bool], ...] = (
    (range(0, 17), False),  # jaw
    (range(17, 22), False),  # right brow
    (range(22, 27), False),  # left brow
    (range(27, 31), False),  # nose bridge
    (range(31, 36), False),  # nostrils
    (range(36, 42), True),  # right eye
    (range(42, 48), True),  # left eye
    (range(48, 60), True),  # outer lip
    (range(60, 68), True),  # inner lip
)

# Viewer-side mirror partner of every point.
MIRROR = np.array(
    [16 - i for i in range(17)]
    + [26 - (i - 17) for i in range(17, 27)]
    + [27, 28, 29, 30]
    + [35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)


def split_lip_indices() -> tuple[np.ndarray, np.ndarray]:
    """Mouth points 48..67 and the remaining rigid points 0..47."""
    return LIP.copy(), NONLIP.copy()


def coordinate_columns(indices: np.ndarray) -> np.ndarray:
    """Flattened ``[68*3]`` column indices for a set of point indices."""
    indices = np.asarray(indices)
    return (indices[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)


def check_landmarks(seq, *, allow_frame: bool = False) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.float64)
    if allow_frame and arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (N_POINTS, 3):
        raise ValueError(f"expected landmarks shaped [S, 68, 3], got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("landmark sequence must have at least one frame")
    if not np.all(np.isfinite(arr)):
        raise ValueError("landmarks contain non-finite values")
    return arr


def eye_centers(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return frame[RIGHT_EYE].mean(axis=0), frame[LEFT_EYE].mean(axis=0)


def interocular(frame: np.ndarray) -> float:
    r, l = eye_centers(frame)
    return float(np.linalg.norm(l - r))


def normalize_frontal(frame: np.ndarray) -> np.ndarray:
    """Translate centroid to the origin and scale to unit inter-ocular distance."""
    frame = np.asarray(frame, dtype=np.float64)
    centered = frame - frame.mean(axis=0)
    return centered / interocular(centered)


# ------------------------------------------------------------ transforms


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def to_array(self) -> np.ndarray:
        """Packed ``[13]`` vector: scale, rotation row-major, translation."""
        return np.concatenate([[self.scale], self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_array(cls, vec) -> "SimilarityTransform":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(float(vec[0]), vec[1:10].reshape(3, 3), vec[10:13])


Transforms = Union[SimilarityTransform, Sequence[SimilarityTransform]]


def rotation_matrix(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation about y (yaw), then x (pitch), then z (roll); angles in radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


def estimate_similarity_transform(src, dst) -> SimilarityTransform:
    """Least-squares similarity (Umeyama) mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching [K, 3] point sets, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise ValueError("need at least 3 correspondences")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X, Y = src - mu_s, dst - mu_d
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise np.linalg.LinAlgError("degenerate source points: rank < 2 after centering")
    cov = Y.T @ X / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    var_s = (X * X).sum() / src.shape[0]
    scale = float((D * d).sum() / var_s)
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(scale, R, t)


def _per_frame(tf: Transforms, n_frames: int) -> list[SimilarityTransform]:
    if isinstance(tf, SimilarityTransform):
        return [tf] * n_frames
    tfs = list(tf)
    if len(tfs) != n_frames:
        raise ValueError(f"got {len(tfs)} transforms for {n_frames} frames")
    return tfs


def apply_transform(seq, tf: Transforms) -> np.ndarray:
    seq = check_landmarks(seq)
    return np.stack([f.apply(frame) for f, frame in zip(_per_frame(tf, len(seq)), seq)])


def frontalize(seq, pose: Transforms) -> np.ndarray:
    """Remove known per-frame head pose."""
    seq = check_landmarks(seq)
    return apply_transform(seq, [p.inverse() for p in _per_frame(pose, len(seq))])


def align_motion_to_reference(frontal, reference) -> np.ndarray:
    """Pose frontal motion like ``reference``, frame by frame, fitting on the rigid points only."""
    frontal = check_landmarks(frontal)
    reference = check_landmarks(reference)
    if len(frontal) != len(reference):
        raise ValueError(f"frame count mismatch: {len(frontal)} vs {len(reference)}")
    out = np.empty_like(frontal)
    for i, (f, r) in enumerate(zip(frontal, reference)):
        tf = estimate_similarity_transform(f[NONLIP], r[NONLIP])
        out[i] = tf.apply(f)
    return out


def add_residual(l_id, delta) -> np.ndarray:
    l_id = np.asarray(l_id, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if l_id.shape != (N_POINTS, 3):
        raise ValueError(f"l_id must be [68, 3], got {l_id.shape}")
    if delta.ndim == 2 and delta.shape[1] == N_POINTS * 3:
        delta = delta.reshape(len(delta), N_POINTS, 3)
    if delta.ndim != 3 or delta.shape[1:] != (N_POINTS, 3):
        raise ValueError(f"delta must be [S, 68, 3], got {delta.shape}")
    return l_id[None] + delta


# ------------------------------------------------------------ rasterization

# Square region of face space that maps onto the image.
FACE_BOX = 1.4


def to_pixels(points: np.ndarray, H: int, W: int) -> np.ndarray:
    """Face-space x/y to continuous (row, col) image coordinates; pixel centers at integers."""
    cols = (points[..., 0] + FACE_BOX) / (2 * FACE_BOX) * W - 0.5
    rows = (FACE_BOX - points[..., 1]) / (2 * FACE_BOX) * H - 0.5
    return np.stack([rows, cols], axis=-1)


def disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= (r + 0.5) ** 2
    return np.stack([dy[keep], dx[keep]], axis=1)


def _line(r0: int, c0: int, r1: int, c1: int) -> np.ndarray:
    n = max(abs(r1 - r0), abs(c1 - c0)) + 1
    rr = np.rint(np.linspace(r0, r1, n)).astype(np.int64)
    cc = np.rint(np.linspace(c0, c1, n)).astype(np.int64)
    return np.stack([rr, cc], axis=1)


def rasterize_motion(seq, H: int, W: int, radius: int | None = None) -> np.ndarray:
    """Binary ``[S, 1, H, W]`` motion clip: a disc per landmark plus contour polylines."""
    seq = check_landmarks(seq)
    if H < 8 or W < 8:
        raise ValueError(f"raster size must be at least 8x8, got {H}x{W}")
    if radius is None:
        radius = max(1, int(round(min(H, W) / 32)))
    offsets = disc_offsets(radius)
    out = np.zeros((len(seq), 1, H, W), dtype=np.float32)
    for i, frame in enumerate(seq):
        pix = np.rint(to_pixels(frame, H, W)).astype(np.int64)
        pts = [pix[:, None, :] + offsets[None]]
        for idx, closed in CONTOURS:
            idx = list(idx)
            pairs = zip(idx, idx[1:] + ([idx[0]] if closed else []))
            for a, b in pairs:
                pts.append(_line(*pix[a], *pix[b])[None])
        allp = np.concatenate([p.reshape(-1, 2) for p in pts])
        ok = (allp[:, 0] >= 0) & (allp[:, 0] < H) & (allp[:, 1] >= 0) & (allp[:, 1] < W)
        allp = allp[ok]
        out[i, 0, allp[:, 0], allp[:, 1]] = 1.0
    return out
