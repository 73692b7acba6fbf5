"""Audio-to-motion diffusion over residual landmark sequences.

The denoiser predicts the clean residual ``delta_0 = L - l_id`` (``[S, 204]``) from its
noised version.  Mouth coordinates and rigid-face coordinates are processed by separate
transformer-decoder stacks; only the mouth stack cross-attends to the audio embedding.
The two streams are scattered back into the original coordinate order and refined by a
merged trunk that cross-attends to the initial-landmark embedding.  Every block is
modulated by the timestep embedding (FiLM).
"""

from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import geometry as geo
from .diffusion import forward_noise_batch, make_linear_schedule, sample
from .nn import TimestepMLP, load_state_numpy, resolve_dtype, seed_everything, sinusoidal_positions, state_dict_numpy

log = logging.getLogger(__name__)

POINT_DIM = geo.N_POINTS * 3


def atom_loss(pred, target, w_recon: float = 1.0, w_vel: float = 1.0):
    """Weighted reconstruction MSE plus MSE of frame-to-frame differences (frames on axis -2)."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if w_recon < 0 or w_vel < 0:
        raise ValueError("loss weights must be non-negative")
    diff = pred - target
    recon = (diff * diff).mean()
    if pred.shape[-2] < 2:
        return w_recon * recon
    vel = diff[..., 1:, :] - diff[..., :-1, :]
    return w_recon * recon + w_vel * (vel * vel).mean()


class FiLM(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 2 * dim)

    def forward(self, x, t_emb):
        scale, shift = self.proj(t_emb).unsqueeze(1).chunk(2, dim=-1)
        return x * (1 + scale) + shift


class FiLMDecoderLayer(nn.Module):
    """Pre-norm transformer decoder layer; cross-attention is optional."""

    def __init__(self, dim: int, heads: int, cross: bool, ff_mult: int = 2):
        super().__init__()
        self.n1, self.f1 = nn.LayerNorm(dim), FiLM(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross = cross
        if cross:
            self.n2 = nn.LayerNorm(dim)
            self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.n3, self.f3 = nn.LayerNorm(dim), FiLM(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, x, t_emb, memory=None):
        h = self.f1(self.n1(x), t_emb)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        if self.cross:
            h = self.n2(x)
            x = x + self.cross_attn(h, memory, memory, need_weights=False)[0]
        return x + self.ff(self.f3(self.n3(x), t_emb))


def _encoder(dim: int, heads: int, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(dim, heads, 2 * dim, dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, layers, norm=nn.LayerNorm(dim), enable_nested_tensor=False)


class AtomNet(nn.Module):
    def __init__(
        self,
        n_frames: int,
        audio_dim: int,
        latent_dim: int,
        n_blocks: int,
        n_heads: int,
        n_trunk_blocks: int = 1,
        merge_trunk: bool = True,
        lip_points=None,
    ):
        super().__init__()
        lip = np.asarray(geo.LIP if lip_points is None else lip_points)
        nonlip = np.setdiff1d(np.arange(geo.N_POINTS), lip)
        if len(lip) == 0 or len(nonlip) == 0 or lip.min() < 0 or lip.max() >= geo.N_POINTS:
            raise ValueError("lip index set must be a proper non-empty subset of 0..67")
        self.register_buffer("lip_cols", torch.as_tensor(geo.coordinate_columns(lip)), persistent=False)
        self.register_buffer("nonlip_cols", torch.as_tensor(geo.coordinate_columns(nonlip)), persistent=False)
        D = latent_dim
        self.n_frames = n_frames
        self.register_buffer("pos_video", sinusoidal_positions(n_frames, D), persistent=False)
        self.register_buffer("pos_audio", sinusoidal_positions(2 * n_frames, D), persistent=False)

        self.audio_in = nn.Linear(audio_dim, D)
        self.audio_encoder = _encoder(D, n_heads, 2)
        self.landmark_in = nn.Linear(POINT_DIM, D)
        self.landmark_encoder = _encoder(D, n_heads, 2)
        self.time = TimestepMLP(D)

        n_lip, n_non = len(self.lip_cols), len(self.nonlip_cols)
        self.lip_in, self.lip_out = nn.Linear(n_lip, D), nn.Linear(D, n_lip)
        self.lip_blocks = nn.ModuleList([FiLMDecoderLayer(D, n_heads, cross=True) for _ in range(n_blocks)])
        self.nonlip_in, self.nonlip_out = nn.Linear(n_non, D), nn.Linear(D, n_non)
        self.nonlip_blocks = nn.ModuleList([FiLMDecoderLayer(D, n_heads, cross=False) for _ in range(n_blocks)])

        self.merge_trunk = merge_trunk
        if merge_trunk:
            self.trunk_in, self.trunk_out = nn.Linear(POINT_DIM, D), nn.Linear(D, POINT_DIM)
            self.trunk_blocks = nn.ModuleList([FiLMDecoderLayer(D, n_heads, cross=True) for _ in range(n_trunk_blocks)])

    def encode_audio(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != 2 * self.n_frames:
            raise ValueError(f"expected {2 * self.n_frames} audio frames, got {features.shape[1]}")
        return self.audio_encoder(self.audio_in(features) + self.pos_audio.to(features.dtype))

    def encode_landmark(self, l_id: torch.Tensor) -> torch.Tensor:
        x = self.landmark_in(l_id.reshape(l_id.shape[0], 1, POINT_DIM))
        x = x.expand(-1, self.n_frames, -1) + self.pos_video.to(x.dtype)
        return self.landmark_encoder(x)

    def streams(self, delta_t, t_emb, F_A):
        pos = self.pos_video.to(delta_t.dtype)
        mem_a = torch.cat([t_emb[:, None], F_A], dim=1)
        h = self.lip_in(delta_t[..., self.lip_cols]) + pos
        for blk in self.lip_blocks:
            h = blk(h, t_emb, mem_a)
        g = self.nonlip_in(delta_t[..., self.nonlip_cols]) + pos
        for blk in self.nonlip_blocks:
            g = blk(g, t_emb)
        return self.lip_out(h), self.nonlip_out(g)

    def forward(self, delta_t, t, F_A, F_L):
        if delta_t.shape[1:] != (self.n_frames, POINT_DIM):
            raise ValueError(f"expected residuals [B, {self.n_frames}, {POINT_DIM}], got {tuple(delta_t.shape)}")
        t_emb = self.time(t)
        lip, nonlip = self.streams(delta_t, t_emb, F_A)
        merged = delta_t.new_zeros(delta_t.shape)
        merged[..., self.lip_cols] = lip
        merged[..., self.nonlip_cols] = nonlip
        if not self.merge_trunk:
            return merged
        mem_l = torch.cat([t_emb[:, None], F_L], dim=1)
        h = self.trunk_in(merged) + self.pos_video.to(merged.dtype)
        for blk in self.trunk_blocks:
            h = blk(h, t_emb, mem_l)
        return merged + self.trunk_out(h)


class AudioToMotion(BaseEstimator):
    """Residual landmark diffusion model conditioned on audio features and an initial landmark.

    ``fit(X, y)`` takes audio features ``X [N, 2S, d]`` and frontal landmark sequences
    ``y [N, S, 68, 3]``; ``predict`` samples landmark sequences for new audio.
    """

    def __init__(
        self,
        n_frames: int = 16,
        audio_dim: int = 8,
        latent_dim: int = 64,
        n_blocks: int = 2,
        n_heads: int = 2,
        n_trunk_blocks: int = 1,
        merge_trunk: bool = True,
        T: int = 1000,
        beta_start: float = 0.0015,
        beta_end: float = 0.0195,
        eta: float = 0.0,
        n_steps: int = 50,
        lr: float = 1e-4,
        max_steps: int = 5000,
        batch_size: int = 8,
        w_recon: float = 1.0,
        w_vel: float = 1.0,
        optimizer: str = "adam",
        seed: int = 0,
        dtype: str = "float32",
        log_every: int = 500,
    ):
        self.n_frames = n_frames
        self.audio_dim = audio_dim
        self.latent_dim = latent_dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.n_trunk_blocks = n_trunk_blocks
        self.merge_trunk = merge_trunk
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.eta = eta
        self.n_steps = n_steps
        self.lr = lr
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.w_recon = w_recon
        self.w_vel = w_vel
        self.optimizer = optimizer
        self.seed = seed
        self.dtype = dtype
        self.log_every = log_every

    @property
    def schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end, self.eta)

    def _build(self) -> AtomNet:
        if min(self.n_frames, self.audio_dim, self.latent_dim, self.n_blocks, self.n_heads) < 1:
            raise ValueError("all AToM dimensions must be positive")
        seed_everything(self.seed)
        net = AtomNet(self.n_frames, self.audio_dim, self.latent_dim, self.n_blocks, self.n_heads, self.n_trunk_blocks, self.merge_trunk)
        return net.to(resolve_dtype(self.dtype))

    def initialize(self) -> "AudioToMotion":
        """Build an untrained network (for inspection, gradient checks, ablations)."""
        self.net_ = self._build()
        self.loss_curve_ = []
        return self

    def _check_audio(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1:] != (2 * self.n_frames, self.audio_dim):
            raise ValueError(f"expected audio features [N, {2 * self.n_frames}, {self.audio_dim}], got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("audio features contain non-finite values")
        return X

    def _tensor(self, a) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a), dtype=resolve_dtype(self.dtype))

    # -- training

    def fit(self, X, y, l_id=None):
        X = self._check_audio(X)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (len(X), self.n_frames, geo.N_POINTS, 3):
            raise ValueError(f"expected landmarks [{len(X)}, {self.n_frames}, 68, 3], got {y.shape}")
        l_id = y[:, 0] if l_id is None else np.asarray(l_id, dtype=np.float64)
        if l_id.shape != (len(X), geo.N_POINTS, 3):
            raise ValueError(f"expected l_id [{len(X)}, 68, 3], got {l_id.shape}")
        delta = (y - l_id[:, None]).reshape(len(X), self.n_frames, POINT_DIM)
        self.initialize()
        self.loss_curve_ = self._train(self._tensor(X), self._tensor(l_id), self._tensor(delta))
        self.net_.eval()
        return self

    def _train(self, audio, l_id, delta0):
        net = self.net_
        sched = self.schedule
        params = list(net.parameters())
        if self.optimizer == "adam":
            opt = torch.optim.Adam(params, lr=self.lr)
        elif self.optimizer == "sgd":
            opt = torch.optim.SGD(params, lr=self.lr)
        else:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        gen = torch.Generator().manual_seed(int(self.seed) + 1)
        n = len(audio)
        bs = min(self.batch_size, n)
        curve = []
        net.train()
        for step in range(self.max_steps):
            idx = torch.randperm(n, generator=gen)[:bs]
            x0 = delta0[idx]
            t = torch.randint(1, sched.T + 1, (bs,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            xt = forward_noise_batch(x0, t, eps, sched)
            pred = net(xt, t, net.encode_audio(audio[idx]), net.encode_landmark(l_id[idx]))
            diff = pred - x0
            recon = (diff * diff).mean()
            vel = ((diff[:, 1:] - diff[:, :-1]) ** 2).mean()
            loss = self.w_recon * recon + self.w_vel * vel
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if not torch.isfinite(loss):
                gnorm = float(sum(float(p.grad.norm()) ** 2 for p in params if p.grad is not None) ** 0.5)
                raise FloatingPointError(f"non-finite AToM loss at step {step} (lr={self.lr}, grad-norm={gnorm:.3g})")
            opt.step()
            curve.append({"step": step, "loss": loss.item(), "recon": recon.item(), "vel": vel.item()})
            if self.log_every and step % self.log_every == 0:
                log.info("atom step %d loss %.6f", step, loss.item())
        return curve

    # -- inference

    def _denoiser(self, F_A, F_L):
        net = self.net_
        dtype = resolve_dtype(self.dtype)

        def denoise(z, t, _ctx):
            tt = torch.full((z.shape[0],), int(t), dtype=torch.long)
            with torch.no_grad():
                return net(z.to(dtype), tt, F_A, F_L).to(z.dtype)

        return denoise

    def sample_motion(self, audio, l_id, n_steps: int | None = None, seed: int = 0) -> tuple[np.ndarray, int]:
        """One clip of frontal landmarks ``[S, 68, 3]`` and the denoiser call count."""
        check_is_fitted(self, "net_")
        audio = self._check_audio(audio)
        if len(audio) != 1:
            raise ValueError("sample_motion takes a single clip of audio")
        l_id = np.asarray(l_id, dtype=np.float64)
        geo.check_landmarks(l_id, allow_frame=True)
        with torch.no_grad():
            F_A = self.net_.encode_audio(self._tensor(audio))
            F_L = self.net_.encode_landmark(self._tensor(l_id[None]))
        delta, calls = sample(self._denoiser(F_A, F_L), (1, self.n_frames, POINT_DIM), self.schedule, n_steps or self.n_steps, seed)
        delta = delta[0].numpy()
        if not np.all(np.isfinite(delta)):
            raise FloatingPointError("sampled residuals are not finite (is the model trained?)")
        return geo.add_residual(l_id, delta), calls

    def predict(self, X, l_id, seed: int = 0) -> np.ndarray:
        X = self._check_audio(X)
        l_id = np.asarray(l_id, dtype=np.float64)
        if l_id.ndim == 2:
            l_id = np.repeat(l_id[None], len(X), axis=0)
        return np.stack([self.sample_motion(X[i : i + 1], l_id[i], seed=seed + i)[0] for i in range(len(X))])

    def chain_motion(self, audio_long, l_id, n_steps: int | None = None, seed: int = 0) -> np.ndarray:
        """Generate ``k`` consecutive clips, each starting from the previous clip's last frame."""
        audio_long = np.asarray(audio_long, dtype=np.float64)
        clip_audio = 2 * self.n_frames
        if audio_long.ndim != 2 or len(audio_long) % clip_audio or len(audio_long) == 0:
            raise ValueError(f"audio length must be a positive multiple of {clip_audio}, got {audio_long.shape}")
        out = []
        current = np.asarray(l_id, dtype=np.float64)
        for j in range(len(audio_long) // clip_audio):
            seq, _ = self.sample_motion(audio_long[j * clip_audio : (j + 1) * clip_audio], current, n_steps, seed + j)
            out.append(seq)
            current = seq[-1]
        return np.concatenate(out)

    # -- persistence

    def to_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        return state_dict_numpy(self.net_, "net.")

    def load_arrays(self, arrays) -> "AudioToMotion":
        self.net_ = self._build()
        load_state_numpy(self.net_, arrays, "net.")
        self.net_.eval()
        return self
