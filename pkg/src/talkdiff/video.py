"""Clip-level helpers: pose-frame masking, lower-half blending, PNG frame export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter1d


def check_clip(clip, *, channels: int | None = None, name: str = "clip") -> np.ndarray:
    arr = np.asarray(clip)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be [S, C, H, W], got shape {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def make_pose_frames(target) -> np.ndarray:
    """Keep the upper half of every frame; zero rows ``H/2 .. H-1``."""
    target = check_clip(target, name="target")
    H = target.shape[2]
    if H % 2:
        raise ValueError(f"frame height must be even, got {H}")
    out = target.copy()
    out[:, :, H // 2 :, :] = 0
    return out


def lower_half_mask(H: int, sigma: float) -> np.ndarray:
    """Per-row weight of the generated clip: 1 below the midline, 0 above, Gaussian-softened."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    mask = np.zeros(H, dtype=np.float64)
    mask[H // 2 :] = 1.0
    if int(4.0 * sigma + 0.5) > 0:  # smaller sigmas give a unit kernel
        mask = gaussian_filter1d(mask, sigma, mode="nearest", truncate=4.0)
    return mask


def blend(generated, background, sigma: float = 1.0) -> np.ndarray:
    """Alpha-composite the lower half of ``generated`` onto ``background``."""
    generated = check_clip(generated, name="generated")
    background = check_clip(background, name="background")
    if generated.shape != background.shape:
        raise ValueError(f"shape mismatch: {generated.shape} vs {background.shape}")
    m = lower_half_mask(generated.shape[2], sigma)[None, None, :, None]
    if sigma == 0:
        return np.where(m > 0.5, generated, background)
    out = m * generated + (1.0 - m) * background
    # keep the result inside [min, max] of the two inputs despite rounding
    lo, hi = np.minimum(generated, background), np.maximum(generated, background)
    return np.clip(out, lo, hi).astype(np.result_type(generated, background))


def write_png_frames(clip, out_dir) -> list[Path]:
    clip = check_clip(clip)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip):
        img = np.clip(np.rint(np.transpose(frame, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
        if img.shape[2] == 1:
            img = img[:, :, 0]
        path = out_dir / f"frame_{i:04d}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths
