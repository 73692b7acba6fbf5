"""Motion-to-video diffusion over tri-plane latents.

The denoiser is a small 2D U-Net shared by the three planes.  Each plane's input is the
channel concatenation ``[z_t | Z_L | Z_P | Z_I]`` of that plane; the planes are convolved
separately and exchange information through attention over the union of their tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .codec import TriPlaneLatent
from .diffusion import forward_noise_batch, make_linear_schedule, sample
from .nn import TimestepMLP, load_state_numpy, resolve_dtype, seed_everything, state_dict_numpy

log = logging.getLogger(__name__)

PLANES = ("hw", "hs", "ws")


@dataclass
class ConditionSet:
    """Landmark, pose and identity latents sharing one set of plane extents."""

    Z_L: TriPlaneLatent
    Z_P: TriPlaneLatent
    Z_I: TriPlaneLatent

    def __post_init__(self):
        ext = [z.extents[1:] for z in (self.Z_L, self.Z_P, self.Z_I)]
        if len(set(ext)) != 1 or len({z.batch for z in (self.Z_L, self.Z_P, self.Z_I)}) != 1:
            raise ValueError(f"condition latents disagree on plane extents/batch: {ext}")

    @property
    def channels(self) -> int:
        return sum(z.extents[0] for z in (self.Z_L, self.Z_P, self.Z_I))

    @property
    def batch(self) -> int:
        return self.Z_L.batch

    def stacked(self) -> TriPlaneLatent:
        return TriPlaneLatent.concat_channels([self.Z_L, self.Z_P, self.Z_I])

    def __getitem__(self, idx) -> "ConditionSet":
        return ConditionSet(self.Z_L[idx], self.Z_P[idx], self.Z_I[idx])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {**self.Z_L.to_arrays("Z_L."), **self.Z_P.to_arrays("Z_P."), **self.Z_I.to_arrays("Z_I.")}

    @classmethod
    def from_arrays(cls, arrays) -> "ConditionSet":
        return cls(*(TriPlaneLatent.from_arrays(arrays, f"{k}.") for k in ("Z_L", "Z_P", "Z_I")))


# ------------------------------------------------------------ network


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.n1, self.c1 = _gn(cin), nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(temb, cout)
        self.n2, self.c2 = _gn(cout), nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x))) + self.t(F.silu(temb))[:, :, None, None]
        return self.skip(x) + self.c2(F.silu(self.n2(h)))


class CrossPlaneAttention(nn.Module):
    """Self-attention over the flattened tokens of all three planes jointly."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = _gn(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, planes: list[torch.Tensor]) -> list[torch.Tensor]:
        shapes = [p.shape for p in planes]
        tokens = torch.cat([self.norm(p).flatten(2).transpose(1, 2) for p in planes], dim=1)
        out = self.attn(tokens, tokens, tokens, need_weights=False)[0]
        res, start = [], 0
        for p, (b, c, h, w) in zip(planes, shapes):
            n = h * w
            res.append(p + out[:, start : start + n].transpose(1, 2).reshape(b, c, h, w))
            start += n
        return res


class TriPlaneUNet(nn.Module):
    def __init__(self, latent_ch: int, cond_ch: int, base: int, channel_mult, n_res: int, attn_levels, heads: int):
        super().__init__()
        self.latent_ch, self.cond_ch = latent_ch, cond_ch
        temb = 4 * base
        self.time = nn.Sequential(TimestepMLP(base), nn.Linear(base, temb))
        self.stem = nn.Conv2d(latent_ch + cond_ch, base, 3, padding=1)
        self.plane_emb = nn.Parameter(torch.zeros(3, base))
        chans = [base * m for m in channel_mult]
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [base]
        ch = base
        for lvl, cout in enumerate(chans):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(n_res):
                blocks.append(TimeResBlock(ch, cout, temb))
                attns.append(CrossPlaneAttention(cout, heads) if lvl in attn_levels else nn.Identity())
                ch = cout
                skips.append(ch)
            self.down.append(blocks)
            self.down_attn.append(attns)
            if lvl < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)
        self.mid1 = TimeResBlock(ch, ch, temb)
        self.mid_attn = CrossPlaneAttention(ch, heads)
        self.mid2 = TimeResBlock(ch, ch, temb)
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(len(chans))):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(n_res + 1):
                blocks.append(TimeResBlock(ch + skips.pop(), chans[lvl], temb))
                ch = chans[lvl]
                attns.append(CrossPlaneAttention(ch, heads) if lvl in attn_levels else nn.Identity())
            self.up.append(blocks)
            self.up_attn.append(attns)
            if lvl > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.out_norm = _gn(ch)
        self.out = nn.Conv2d(ch, latent_ch, 3, padding=1)

    @staticmethod
    def _attend(attn, planes):
        return planes if isinstance(attn, nn.Identity) else attn(planes)

    def forward(self, z: TriPlaneLatent, t: torch.Tensor, cond: TriPlaneLatent) -> TriPlaneLatent:
        if cond.extents[0] != self.cond_ch or z.extents[0] != self.latent_ch:
            raise ValueError(
                f"channel mismatch: latent {z.extents[0]} / condition {cond.extents[0]}, "
                f"model expects {self.latent_ch} / {self.cond_ch}"
            )
        temb = self.time(t)
        xs = [self.stem(torch.cat([zp, cp], dim=1)) + self.plane_emb[i][None, :, None, None]
              for i, (zp, cp) in enumerate(zip(z.planes(), cond.planes()))]
        shapes = [x.shape[-2:] for x in xs]
        hs = [xs]
        for lvl, (blocks, attns) in enumerate(zip(self.down, self.down_attn)):
            for blk, attn in zip(blocks, attns):
                xs = self._attend(attn, [blk(x, temb) for x in xs])
                hs.append(xs)
            if lvl < len(self.down) - 1:
                xs = [self.downsample[lvl](x) for x in xs]
                hs.append(xs)
        xs = [self.mid1(x, temb) for x in xs]
        xs = self.mid_attn(xs)
        xs = [self.mid2(x, temb) for x in xs]
        for i, (blocks, attns) in enumerate(zip(self.up, self.up_attn)):
            for blk, attn in zip(blocks, attns):
                skip = hs.pop()
                xs = self._attend(attn, [blk(torch.cat([x, s], dim=1), temb) for x, s in zip(xs, skip)])
            if i < len(self.upsample):
                target = [s.shape[-2:] for s in hs[-1]]
                xs = [self.upsample[i](F.interpolate(x, size=tuple(sz), mode="nearest")) for x, sz in zip(xs, target)]
        out = [self.out(F.silu(self.out_norm(x))) for x in xs]
        assert [o.shape[-2:] for o in out] == shapes
        return TriPlaneLatent(*out)


# ------------------------------------------------------------ estimator


class MotionToVideo(BaseEstimator):
    """Conditional tri-plane latent diffusion; ``fit(Z, cond)`` on clean target latents."""

    def __init__(
        self,
        base_channels: int = 32,
        channel_mult: tuple = (1, 2, 2),
        n_resblocks: int = 1,
        attn_levels: tuple = (1, 2),
        n_heads: int = 2,
        T: int = 1000,
        beta_start: float = 0.0015,
        beta_end: float = 0.0195,
        eta: float = 0.0,
        n_steps: int = 50,
        lr: float = 1e-3,
        max_steps: int = 1500,
        batch_size: int = 4,
        seed: int = 0,
        dtype: str = "float32",
        log_every: int = 500,
    ):
        self.base_channels = base_channels
        self.channel_mult = channel_mult
        self.n_resblocks = n_resblocks
        self.attn_levels = attn_levels
        self.n_heads = n_heads
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.eta = eta
        self.n_steps = n_steps
        self.lr = lr
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.seed = seed
        self.dtype = dtype
        self.log_every = log_every

    @property
    def schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end, self.eta)

    def _build(self, latent_ch: int, cond_ch: int) -> TriPlaneUNet:
        if min(self.base_channels, self.n_resblocks, self.n_heads, *self.channel_mult) < 1:
            raise ValueError("all U-Net dimensions must be positive")
        seed_everything(self.seed)
        net = TriPlaneUNet(latent_ch, cond_ch, self.base_channels, tuple(self.channel_mult), self.n_resblocks, tuple(self.attn_levels), self.n_heads)
        return net.to(resolve_dtype(self.dtype))

    def initialize(self, latent_extents, cond_channels: int, stats=None) -> "MotionToVideo":
        """Build an untrained denoiser for latents of ``(c, h, w, s)`` extents."""
        c, h, w, s = latent_extents
        n_down = len(self.channel_mult) - 1
        if any(v % (2**n_down) for v in (h, w, s)):
            raise ValueError(f"plane extents {(h, w, s)} must be divisible by {2**n_down}")
        self.latent_extents_ = tuple(int(v) for v in latent_extents)
        self.cond_channels_ = int(cond_channels)
        self.net_ = self._build(c, cond_channels)
        self.stats_ = np.array(stats if stats is not None else [0.0, 1.0, 0.0, 1.0], dtype=np.float64)
        self.loss_curve_ = []
        return self

    # latents/conditions are standardized by scalar mean/std fitted on the training set
    def _norm_z(self, flat):
        return (flat - self.stats_[0]) / self.stats_[1]

    def _denorm_z(self, flat):
        return flat * self.stats_[1] + self.stats_[0]

    def _norm_cond(self, cond: ConditionSet) -> TriPlaneLatent:
        dtype = resolve_dtype(self.dtype)
        stacked = cond.stacked().torch(dtype)
        return TriPlaneLatent(*((p - self.stats_[2]) / self.stats_[3] for p in stacked.planes()))

    def fit(self, Z: TriPlaneLatent, cond: ConditionSet):
        if Z.batch != cond.batch:
            raise ValueError("latent and condition batch sizes differ")
        if Z.extents[1:] != cond.Z_L.extents[1:]:
            raise ValueError(f"latent extents {Z.extents} do not match conditions {cond.Z_L.extents}")
        dtype = resolve_dtype(self.dtype)
        flat = Z.torch(torch.float64).flatten()
        cflat = cond.stacked().torch(torch.float64).flatten()
        stats = [float(flat.mean()), float(flat.std()), float(cflat.mean()), float(cflat.std())]
        self.initialize(Z.extents, cond.channels, stats)
        z0 = self._norm_z(flat).to(dtype)
        c_all = self._norm_cond(cond)
        self.loss_curve_ = self._train(z0, c_all)
        self.net_.eval()
        return self

    def _train(self, z0: torch.Tensor, cond: TriPlaneLatent):
        net, sched = self.net_, self.schedule
        params = list(net.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        gen = torch.Generator().manual_seed(int(self.seed) + 1)
        n = len(z0)
        bs = min(self.batch_size, n)
        curve = []
        net.train()
        for step in range(self.max_steps):
            idx = torch.randperm(n, generator=gen)[:bs]
            x0 = z0[idx]
            t = torch.randint(1, sched.T + 1, (bs,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            xt = forward_noise_batch(x0, t, eps, sched)
            pred = net(TriPlaneLatent.unflatten(xt, self.latent_extents_), t, cond[idx]).flatten()
            loss = ((pred - x0) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if not torch.isfinite(loss):
                gnorm = float(sum(float(p.grad.norm()) ** 2 for p in params if p.grad is not None) ** 0.5)
                raise FloatingPointError(f"non-finite MToV loss at step {step} (lr={self.lr}, grad-norm={gnorm:.3g})")
            opt.step()
            curve.append({"step": step, "loss": loss.item()})
            if self.log_every and step % self.log_every == 0:
                log.info("mtov step %d loss %.6f", step, loss.item())
        return curve

    def denoise(self, z_t: TriPlaneLatent, t: int, cond: ConditionSet) -> TriPlaneLatent:
        """Predicted clean latent (in the original latent scale) for a noisy latent."""
        check_is_fitted(self, "net_")
        dtype = resolve_dtype(self.dtype)
        flat = self._norm_z(z_t.torch(dtype).flatten())
        tt = torch.full((z_t.batch,), int(t), dtype=torch.long)
        out = self.net_(TriPlaneLatent.unflatten(flat, self.latent_extents_), tt, self._norm_cond(cond))
        return TriPlaneLatent.unflatten(self._denorm_z(out.flatten()), self.latent_extents_)

    def sample(self, cond: ConditionSet, n_steps: int | None = None, seed: int = 0) -> tuple[TriPlaneLatent, int]:
        """DDIM sample of clean latents (original scale) and the denoiser invocation count."""
        check_is_fitted(self, "net_")
        dtype = resolve_dtype(self.dtype)
        c_norm = self._norm_cond(cond)
        net, ext = self.net_, self.latent_extents_

        def denoise(z, t, _ctx):
            tt = torch.full((z.shape[0],), int(t), dtype=torch.long)
            with torch.no_grad():
                out = net(TriPlaneLatent.unflatten(z.to(dtype), ext), tt, c_norm)
            return out.flatten().to(z.dtype)

        c, h, w, s = ext
        n = c * (h * w + h * s + w * s)
        flat, calls = sample(denoise, (cond.batch, n), self.schedule, n_steps or self.n_steps, seed)
        return TriPlaneLatent.unflatten(self._denorm_z(flat), ext), calls

    def to_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        return {
            **state_dict_numpy(self.net_, "net."),
            "meta.latent_extents": np.array(self.latent_extents_, dtype=np.float64),
            "meta.cond_channels": np.array([self.cond_channels_], dtype=np.float64),
            "meta.stats": self.stats_,
        }

    def load_arrays(self, arrays) -> "MotionToVideo":
        ext = tuple(int(v) for v in arrays["meta.latent_extents"])
        self.initialize(ext, int(arrays["meta.cond_channels"][0]), arrays["meta.stats"])
        load_state_numpy(self.net_, arrays, "net.")
        self.net_.eval()
        return self
