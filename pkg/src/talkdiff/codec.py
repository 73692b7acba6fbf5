"""Tri-plane video autoencoder.

A clip ``[S, C, H, W]`` is encoded into three 2D planes: ``hw`` (time averaged out),
``hs`` (width averaged out) and ``ws`` (height averaged out).  The decoder broadcasts the
three planes back over the ``(s, h, w)`` volume, sums them and upsamples to the clip.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .nn import load_state_numpy, params_digest, resolve_dtype, seed_everything, state_dict_numpy

log = logging.getLogger(__name__)


@dataclass
class TriPlaneLatent:
    """Batched planes: ``hw [B, c, h, w]``, ``hs [B, c, h, s]``, ``ws [B, c, w, s]``."""

    hw: object
    hs: object
    ws: object

    def __post_init__(self):
        (b, c, h, w), (b2, c2, h2, s), (b3, c3, w3, s3) = self.hw.shape, self.hs.shape, self.ws.shape
        if not (b == b2 == b3 and c == c2 == c3 and h == h2 and w == w3 and s == s3):
            raise ValueError(f"inconsistent plane shapes {tuple(self.hw.shape)}, {tuple(self.hs.shape)}, {tuple(self.ws.shape)}")

    @property
    def extents(self) -> tuple[int, int, int, int]:
        """``(c, h, w, s)``."""
        _, c, h, w = self.hw.shape
        return c, h, w, self.hs.shape[-1]

    @property
    def batch(self) -> int:
        return self.hw.shape[0]

    def planes(self):
        return self.hw, self.hs, self.ws

    def flatten(self) -> torch.Tensor:
        parts = [torch.as_tensor(p).reshape(self.batch, -1) for p in self.planes()]
        return torch.cat(parts, dim=1)

    @classmethod
    def unflatten(cls, flat: torch.Tensor, extents) -> "TriPlaneLatent":
        c, h, w, s = extents
        b = flat.shape[0]
        n1, n2 = c * h * w, c * h * s
        return cls(
            flat[:, :n1].reshape(b, c, h, w),
            flat[:, n1 : n1 + n2].reshape(b, c, h, s),
            flat[:, n1 + n2 :].reshape(b, c, w, s),
        )

    def numpy(self) -> "TriPlaneLatent":
        conv = lambda p: p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p)  # noqa: E731
        return TriPlaneLatent(conv(self.hw), conv(self.hs), conv(self.ws))

    def torch(self, dtype=torch.float32) -> "TriPlaneLatent":
        return TriPlaneLatent(*(torch.as_tensor(p, dtype=dtype) for p in self.planes()))

    def __getitem__(self, idx) -> "TriPlaneLatent":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return TriPlaneLatent(self.hw[idx], self.hs[idx], self.ws[idx])

    @classmethod
    def concat_channels(cls, latents) -> "TriPlaneLatent":
        latents = list(latents)
        return cls(*(torch.cat([torch.as_tensor(getattr(z, n)) for z in latents], dim=1) for n in ("hw", "hs", "ws")))

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        z = self.numpy()
        return {f"{prefix}hw": z.hw, f"{prefix}hs": z.hs, f"{prefix}ws": z.ws}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "") -> "TriPlaneLatent":
        return cls(arrays[f"{prefix}hw"], arrays[f"{prefix}hs"], arrays[f"{prefix}ws"])


# ------------------------------------------------------------ layers


def _group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock2d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            _group_norm(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            _group_norm(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Conv2p1d(nn.Module):
    """Factorized 3D convolution: 3x3 spatial then 3-tap temporal, on ``[B, C, S, H, W]``."""

    def __init__(self, cin: int, cout: int, t_stride: int = 1):
        super().__init__()
        self.spatial = nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1))
        self.temporal = nn.Conv3d(cout, cout, (3, 1, 1), stride=(t_stride, 1, 1), padding=(1, 0, 0), padding_mode="replicate")

    def forward(self, x):
        return self.temporal(self.spatial(x))


class ResBlock3d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.n1, self.c1 = _group_norm(ch), Conv2p1d(ch, ch)
        self.n2, self.c2 = _group_norm(ch), Conv2p1d(ch, ch)

    def forward(self, x):
        h = self.c1(F.silu(self.n1(x)))
        return x + self.c2(F.silu(self.n2(h)))


def _frames(fn, x):
    """Apply a 2D module to every frame of ``[B, C, S, H, W]``."""
    b, c, s, h, w = x.shape
    y = fn(x.permute(0, 2, 1, 3, 4).reshape(b * s, c, h, w))
    return y.reshape(b, s, *y.shape[1:]).permute(0, 2, 1, 3, 4)


class TriPlaneEncoder(nn.Module):
    # parameter-name prefixes adapted when fine-tuning on binary motion clips
    MOTION_LAYERS = ("stem.", "frame_blocks.0.")

    def __init__(self, in_ch: int, base: int, emb_dim: int, n_res: int, n_down: int, t_down: int | None = None):
        super().__init__()
        self.n_down = n_down
        self.stem = nn.Conv2d(in_ch, base, 4, stride=2, padding=1) if n_down else nn.Conv2d(in_ch, base, 3, padding=1)
        self.frame_blocks = nn.ModuleList([ResBlock2d(base) for _ in range(n_res)])
        self.extra_down = nn.ModuleList([nn.Conv2d(base, base, 4, stride=2, padding=1) for _ in range(max(n_down - 1, 0))])
        t_down = n_down if t_down is None else t_down
        self.temporal_down = nn.ModuleList([Conv2p1d(base, base, t_stride=2) for _ in range(t_down)])
        self.vol_blocks = nn.ModuleList([ResBlock3d(base) for _ in range(n_res)])
        self.norm = _group_norm(base)
        self.proj = nn.ModuleDict({
            k: nn.Sequential(nn.Conv2d(base, base, 3, padding=1), nn.SiLU(), nn.Conv2d(base, emb_dim, 1))
            for k in ("hw", "hs", "ws")
        })

    def forward(self, clip: torch.Tensor) -> TriPlaneLatent:
        x = clip.permute(0, 2, 1, 3, 4)  # [B, C, S, H, W]
        x = _frames(self.stem, x)
        for blk in self.frame_blocks:
            x = _frames(blk, x)
        for down in self.extra_down:
            x = _frames(down, F.silu(x))
        for down in self.temporal_down:
            x = down(x)
        for blk in self.vol_blocks:
            x = blk(x)
        x = F.silu(self.norm(x))  # [B, C, s, h, w]
        hw = self.proj["hw"](x.mean(dim=2))
        hs = self.proj["hs"](x.mean(dim=4).permute(0, 1, 3, 2))
        ws = self.proj["ws"](x.mean(dim=3).permute(0, 1, 3, 2))
        return TriPlaneLatent(hw, hs, ws)


class TriPlaneDecoder(nn.Module):
    def __init__(self, out_ch: int, base: int, emb_dim: int, n_res: int, n_down: int, t_down: int | None = None):
        super().__init__()
        self.n_down = n_down
        self.lift = nn.ModuleDict({k: nn.Conv2d(emb_dim, base, 3, padding=1) for k in ("hw", "hs", "ws")})
        self.vol_blocks = nn.ModuleList([ResBlock3d(base) for _ in range(n_res)])
        t_down = n_down if t_down is None else t_down
        self.temporal_up = nn.ModuleList([Conv2p1d(base, base) for _ in range(t_down)])
        self.frame_blocks = nn.ModuleList([ResBlock2d(base) for _ in range(n_res)])
        self.spatial_up = nn.ModuleList([nn.ConvTranspose2d(base, base, 4, stride=2, padding=1) for _ in range(n_down)])
        self.norm = _group_norm(base)
        self.out = nn.Conv2d(base, out_ch, 3, padding=1)

    def forward(self, z: TriPlaneLatent) -> torch.Tensor:
        hw = self.lift["hw"](z.hw)  # [B, C, h, w]
        hs = self.lift["hs"](z.hs)  # [B, C, h, s]
        ws = self.lift["ws"](z.ws)  # [B, C, w, s]
        x = hw[:, :, None] + hs.permute(0, 1, 3, 2)[:, :, :, :, None] + ws.permute(0, 1, 3, 2)[:, :, :, None, :]
        for blk in self.vol_blocks:
            x = blk(x)
        for up in self.temporal_up:
            x = up(F.interpolate(x, scale_factor=(2, 1, 1), mode="nearest"))
        for blk in self.frame_blocks:
            x = _frames(blk, x)
        for up in self.spatial_up:
            x = _frames(up, F.silu(x))
        x = _frames(self.out, F.silu(self.norm(x)))
        return x.permute(0, 2, 1, 3, 4)  # [B, S, C, H, W]


class PerceptualFeatures(nn.Module):
    """Frozen, seeded random-convolution pyramid standing in for a pretrained feature net."""

    def __init__(self, in_ch: int = 3, width: int = 8, levels: int = 3, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.levels = levels
        self.c1 = nn.ParameterList()
        self.c2 = nn.ParameterList()
        for _ in range(levels):
            self.c1.append(nn.Parameter(torch.randn(width, in_ch, 3, 3, generator=gen) / (3 * in_ch**0.5), requires_grad=False))
            self.c2.append(nn.Parameter(torch.randn(width, width, 3, 3, generator=gen) / (3 * width**0.5), requires_grad=False))

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = frames
        for k in range(self.levels):
            if k:
                x = F.avg_pool2d(x, 2)
            h = torch.tanh(F.conv2d(x, self.c1[k].to(x.dtype), padding=1))
            feats.append(torch.tanh(F.conv2d(h, self.c2[k].to(x.dtype), padding=1)))
        return feats


def codec_loss(clip, recon, lambda1: float = 1.0, lambda2: float = 1.0, features: PerceptualFeatures | None = None):
    """``lambda1 * mean|clip - recon| + lambda2 * mean|phi(clip) - phi(recon)|`` over ``[B, S, C, H, W]``."""
    clip = torch.as_tensor(clip)
    recon = torch.as_tensor(recon, dtype=clip.dtype)
    if clip.shape != recon.shape:
        raise ValueError(f"shape mismatch {tuple(clip.shape)} vs {tuple(recon.shape)}")
    loss = lambda1 * (clip - recon).abs().mean()
    if lambda2:
        if features is None:
            features = PerceptualFeatures(in_ch=clip.shape[-3])
        flat = lambda v: v.reshape(-1, *v.shape[-3:])  # noqa: E731
        fa, fb = features(flat(clip)), features(flat(recon))
        loss = loss + lambda2 * sum((a - b).abs().mean() for a, b in zip(fa, fb)) / len(fa)
    return loss


class TriPlaneAutoencoder(nn.Module):
    def __init__(self, in_ch: int, base: int, emb_dim: int, n_res: int, n_down: int, t_down: int | None = None):
        super().__init__()
        self.encoder = TriPlaneEncoder(in_ch, base, emb_dim, n_res, n_down, t_down)
        self.decoder = TriPlaneDecoder(in_ch, base, emb_dim, n_res, n_down, t_down)

    def forward(self, clip):
        return self.decoder(self.encoder(clip))


# ------------------------------------------------------------ estimator


def _replicate(clip: np.ndarray, channels: int) -> np.ndarray:
    if clip.shape[-3] == channels:
        return clip
    if clip.shape[-3] != 1:
        raise ValueError(f"cannot adapt {clip.shape[-3]}-channel clip to {channels} channels")
    reps = [1] * clip.ndim
    reps[-3] = channels
    return np.tile(clip, reps)


class TriPlaneCodec(TransformerMixin, BaseEstimator):
    """Tri-plane video autoencoder with a ``fit`` / ``transform`` / ``inverse_transform`` surface.

    ``fit`` trains on clips ``[N, S, C, H, W]`` in [0, 1] with an L1 phase followed by
    L1 + perceptual loss.  :meth:`finetune_motion` returns a copy whose designated
    encoder layers are adapted to binary motion clips while the decoder stays frozen.
    """

    def __init__(
        self,
        in_channels: int = 3,
        clip_len: int = 16,
        input_res: int = 32,
        emb_dim: int = 4,
        base_channels: int = 16,
        n_resblocks: int = 1,
        downsample: int = 2,
        temporal_downsample: int = 2,
        lr: float = 2e-3,
        max_steps: int = 3000,
        batch_size: int = 4,
        phase2_fraction: float = 0.5,
        lambda1: float = 1.0,
        lambda2: float = 1.0,
        seed: int = 0,
        dtype: str = "float32",
        log_every: int = 100,
    ):
        self.in_channels = in_channels
        self.clip_len = clip_len
        self.input_res = input_res
        self.emb_dim = emb_dim
        self.base_channels = base_channels
        self.n_resblocks = n_resblocks
        self.downsample = downsample
        self.temporal_downsample = temporal_downsample
        self.lr = lr
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.phase2_fraction = phase2_fraction
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.seed = seed
        self.dtype = dtype
        self.log_every = log_every

    # -- construction

    def _validate_config(self) -> tuple[int, int]:
        for name in ("clip_len", "input_res"):
            v = getattr(self, name)
            if v < 8 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two >= 8, got {v}")
        if self.emb_dim < 1:
            raise ValueError("emb_dim must be >= 1")
        for name in ("downsample", "temporal_downsample"):
            d = getattr(self, name)
            if d < 1 or d & (d - 1):
                raise ValueError(f"{name} must be a power of two, got {d}")
        if self.input_res % self.downsample or self.clip_len % self.temporal_downsample:
            raise ValueError("input_res and clip_len must be divisible by their downsample factors")
        return int(np.log2(self.downsample)), int(np.log2(self.temporal_downsample))

    def _build(self) -> TriPlaneAutoencoder:
        n_down, t_down = self._validate_config()
        seed_everything(self.seed)
        model = TriPlaneAutoencoder(self.in_channels, self.base_channels, self.emb_dim, self.n_resblocks, n_down, t_down)
        return model.to(resolve_dtype(self.dtype))

    @property
    def latent_extents(self) -> tuple[int, int, int, int]:
        """``(c, h, w, s)`` of the planes produced for a configured clip."""
        side = self.input_res // self.downsample
        return self.emb_dim, side, side, self.clip_len // self.temporal_downsample

    def _check_clips(self, X, channels: int | None = None) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 4:
            X = X[None]
        want = (self.clip_len, channels or self.in_channels, self.input_res, self.input_res)
        if X.ndim != 5 or X.shape[1:] != want:
            raise ValueError(f"expected clips shaped [N, {', '.join(map(str, want))}], got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("clips contain non-finite values")
        return X

    # -- training

    def fit(self, X, y=None):
        X = self._check_clips(X)
        self.model_ = self._build()
        self.features_ = PerceptualFeatures(self.in_channels).to(resolve_dtype(self.dtype))
        self.phase2_step_ = int(round(self.phase2_fraction * self.max_steps))
        self.loss_curve_ = self._train(self.model_, X, X, list(self.model_.parameters()), self.lr, self.max_steps, perceptual_from=self.phase2_step_)
        self.model_.eval()
        return self

    def _train(self, model, X_in, X_target, params, lr, steps, perceptual_from=None):
        dtype = resolve_dtype(self.dtype)
        gen = torch.Generator().manual_seed(int(self.seed) + 1)
        X_in = torch.as_tensor(X_in, dtype=dtype)
        X_target = torch.as_tensor(X_target, dtype=dtype)
        opt = torch.optim.Adam(params, lr=lr)
        n = len(X_in)
        bs = min(self.batch_size, n)
        curve = []
        model.train()
        for step in range(steps):
            idx = torch.randperm(n, generator=gen)[:bs]
            recon = model(X_in[idx])
            use_perc = perceptual_from is not None and step >= perceptual_from
            l1 = (recon - X_target[idx]).abs().mean()
            loss = codec_loss(X_target[idx], recon, self.lambda1, self.lambda2 if use_perc else 0.0, self.features_)
            if not torch.isfinite(loss):
                gnorm = float(sum(p.grad.norm() ** 2 for p in params if p.grad is not None) ** 0.5)
                raise FloatingPointError(f"non-finite codec loss at step {step} (lr={lr}, last grad-norm={gnorm:.3g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            curve.append({"step": step, "loss": loss.item(), "l1": l1.item(), "phase": 2 if use_perc else 1})
            if self.log_every and step % self.log_every == 0:
                log.info("codec step %d loss %.5f l1 %.5f", step, loss.item(), l1.item())
        return curve

    # -- transform surface

    def encode(self, clips: torch.Tensor) -> TriPlaneLatent:
        check_is_fitted(self, "model_")
        return self.model_.encoder(clips)

    def decode(self, z: TriPlaneLatent) -> torch.Tensor:
        check_is_fitted(self, "model_")
        return self.model_.decoder(z)

    def transform(self, X) -> TriPlaneLatent:
        """Encode clips; single-channel (binary motion) clips are replicated to the input channels."""
        check_is_fitted(self, "model_")
        X = np.asarray(X)
        if X.ndim in (4, 5) and X.shape[-3] == 1 and self.in_channels != 1:
            X = _replicate(X, self.in_channels)
        X = self._check_clips(X)
        with torch.no_grad():
            z = self.encode(torch.as_tensor(X, dtype=resolve_dtype(self.dtype)))
        return z.numpy()

    def inverse_transform(self, Z: TriPlaneLatent) -> np.ndarray:
        check_is_fitted(self, "model_")
        c, h, w, s = self.latent_extents
        if Z.extents != (c, h, w, s):
            raise ValueError(f"latent extents {Z.extents} do not match codec {(c, h, w, s)}")
        with torch.no_grad():
            out = self.decode(Z.torch(resolve_dtype(self.dtype)))
        return out.clamp(0.0, 1.0).numpy()

    def reconstruct(self, X) -> np.ndarray:
        return self.inverse_transform(self.transform(X))

    def reconstruction_loss(self, X, channels: int | None = None) -> float:
        """Mean absolute reconstruction error on ``X`` (binary motion clips are channel-replicated)."""
        check_is_fitted(self, "model_")
        X = self._check_clips(X, channels)
        X = _replicate(X, self.in_channels)
        with torch.no_grad():
            t = torch.as_tensor(X, dtype=resolve_dtype(self.dtype))
            return float((self.model_(t) - t).abs().mean())

    # -- motion fine-tune

    def decoder_digest(self) -> str:
        check_is_fitted(self, "model_")
        return params_digest(self.model_.decoder)

    def finetune_motion(self, M, steps: int = 500, lr: float = 1e-3, seed: int | None = None, trainable=None) -> "TriPlaneCodec":
        """Copy of this codec with only the designated encoder layers adapted to motion clips ``M``.

        ``M`` is ``[N, S, 1, H, W]`` binary; it is replicated to the codec's channel count.
        """
        check_is_fitted(self, "model_")
        M = _replicate(self._check_clips(M, channels=1), self.in_channels)
        prefixes = tuple(trainable or TriPlaneEncoder.MOTION_LAYERS)
        new = copy.deepcopy(self)
        if seed is not None:
            new.seed = seed
        model = new.model_
        named = dict(model.named_parameters())
        chosen = [n for n in named if n.startswith("encoder.") and n[len("encoder.") :].startswith(prefixes)]
        if not chosen:
            raise ValueError(f"no encoder parameters match {prefixes}")
        for n, p in named.items():
            p.requires_grad_(n in chosen)
        frozen_before = {n: p.detach().clone() for n, p in named.items() if n not in chosen}
        dec_digest = params_digest(model.decoder)
        new.finetune_curve_ = new._train(model, M, M, [named[n] for n in chosen], lr, steps, perceptual_from=None)
        for n, p in named.items():
            p.requires_grad_(True)
            if n in frozen_before and not torch.equal(frozen_before[n], p.detach()):
                raise RuntimeError(f"frozen parameter {n} changed during motion fine-tune")
        if params_digest(model.decoder) != dec_digest:
            raise RuntimeError("decoder changed during motion fine-tune")
        model.eval()
        new.finetuned_layers_ = chosen
        new.in_channels_motion_ = 1
        return new

    # -- persistence

    def to_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "model_")
        return state_dict_numpy(self.model_, "model.")

    def load_arrays(self, arrays) -> "TriPlaneCodec":
        self.model_ = self._build()
        load_state_numpy(self.model_, arrays, "model.")
        self.model_.eval()
        self.features_ = PerceptualFeatures(self.in_channels).to(resolve_dtype(self.dtype))
        return self
