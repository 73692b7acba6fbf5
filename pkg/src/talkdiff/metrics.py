"""Desk-scale evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

PSNR_CAP = 99.0


def lmd(pred, gt, full_face: bool = False) -> float:
    """Mean Euclidean distance over frames and lip points (all 68 points with ``full_face``)."""
    pred = geo.check_landmarks(pred, allow_frame=True)
    gt = geo.check_landmarks(gt, allow_frame=True)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    idx = slice(None) if full_face else geo.LIP
    return float(np.linalg.norm(pred[:, idx] - gt[:, idx], axis=-1).mean())


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def mouth_open_signal(seq) -> np.ndarray:
    """Per-frame vertical gap between the inner-lip top and bottom midpoints."""
    seq = geo.check_landmarks(seq, allow_frame=True)
    return seq[:, geo.INNER_LIP_TOP_MID, 1] - seq[:, geo.INNER_LIP_BOTTOM_MID, 1]


def sync_corr(s1, s2) -> float:
    s1 = np.asarray(s1, dtype=np.float64).ravel()
    s2 = np.asarray(s2, dtype=np.float64).ravel()
    if s1.shape != s2.shape or len(s1) < 3:
        raise ValueError("sync_corr needs two equal-length signals of length >= 3")
    a, b = s1 - s1.mean(), s2 - s2.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        raise ValueError("zero-variance signal")
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def temporal_consistency(clip) -> float:
    """Mean absolute difference between consecutive frames."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim < 2 or len(clip) < 2:
        raise ValueError("need at least two frames")
    return float(np.abs(np.diff(clip, axis=0)).mean())


def mouth_box(posed_frame: np.ndarray, H: int, W: int, margin: int = 1) -> tuple[int, int, int, int]:
    """Pixel bounding box ``(r0, r1, c0, c1)`` (exclusive ends) of the outer lip contour."""
    pix = geo.to_pixels(posed_frame[48:60], H, W)
    r0, c0 = np.floor(pix.min(axis=0)).astype(int) - margin
    r1, c1 = np.ceil(pix.max(axis=0)).astype(int) + margin + 1
    return max(r0, 0), min(r1, H), max(c0, 0), min(c1, W)


def raster_mouth_signal(clip, posed, threshold: float = 0.45) -> np.ndarray:
    """Mouth-opening proxy read off RGB frames: summed darkness below ``threshold``
    luminance inside the mouth box located from the (posed) landmarks."""
    clip = np.asarray(clip, dtype=np.float64)
    posed = geo.check_landmarks(posed)
    if len(clip) != len(posed):
        raise ValueError("clip and landmarks disagree on frame count")
    H, W = clip.shape[-2:]
    lum = 0.299 * clip[:, 0] + 0.587 * clip[:, 1] + 0.114 * clip[:, 2]
    out = np.empty(len(clip))
    for i in range(len(clip)):
        r0, r1, c0, c1 = mouth_box(posed[i], H, W)
        out[i] = np.clip(threshold - lum[i, r0:r1, c0:c1], 0.0, None).sum()
    return out


@dataclass
class MetricReport:
    """Named per-clip metric values with aggregate mean/std."""

    per_clip: dict[str, list[float]] = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        self.per_clip.setdefault(name, []).append(float(value))

    def aggregate(self) -> dict[str, tuple[float, float]]:
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in self.per_clip.items()}

    def as_entries(self) -> dict[str, object]:
        entries: dict[str, object] = {}
        for name, (mean, std) in self.aggregate().items():
            entries[f"{name}.mean"] = mean
            entries[f"{name}.std"] = std
            entries[f"{name}.per_clip"] = self.per_clip[name]
        return entries
