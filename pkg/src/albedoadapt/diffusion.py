"""Conditional denoising-diffusion albedo estimator.

The estimator is a small pixel-space U-shaped conv net that predicts the
noise added to an albedo image, conditioned on the rgb image by channel
concatenation. Internally images live in [-1, 1]; the public sampling API
speaks (H, W, 3) float arrays in [0, 1].

noise_pred_loss accepts explicit (t, eps) draws so tests can pin the
randomness; training draws both per sample from an explicit generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import PipelineError, derive_seed
from .torchutil import Checkpoint, clone_state, init_params, torch_gen


class DiffusionError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    """Linear-beta schedule; alpha_bar index 0 is the exact no-noise limit."""

    timesteps: int
    betas: np.ndarray  # shape (T,), betas[i] is beta_{i+1}
    alpha_bars: np.ndarray  # shape (T+1,), alpha_bars[0] = 1.0

    @classmethod
    def linear(cls, timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.06):
        if timesteps < 1:
            raise DiffusionError("timesteps must be >= 1")
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        if betas.min() <= 0.0 or betas.max() >= 1.0:
            raise DiffusionError("betas must lie in (0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(timesteps=timesteps, betas=betas, alpha_bars=alpha_bars)

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if len(self.betas) != self.timesteps:
            raise DiffusionError("betas length must equal timesteps")
        if len(self.alpha_bars) != self.timesteps + 1:
            raise DiffusionError("alpha_bars length must equal timesteps + 1")
        if self.betas.min() <= 0.0 or self.betas.max() >= 1.0:
            raise DiffusionError("betas must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0.0):
            raise DiffusionError("alpha_bar must be strictly decreasing")

    def alpha_bar(self, t):
        """alpha_bar at integer timestep(s) t, 0 <= t <= T."""
        t_arr = np.asarray(t)
        if t_arr.min() < 0 or t_arr.max() > self.timesteps:
            raise DiffusionError(f"t outside [0, {self.timesteps}]")
        return self.alpha_bars[t_arr]

    def to_dict(self) -> dict:
        return {"timesteps": self.timesteps, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        betas = np.asarray(data["betas"], dtype=np.float64)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(timesteps=int(data["timesteps"]), betas=betas, alpha_bars=alpha_bars)


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    t may be an int or a per-sample 1-D tensor; t = 0 is the documented
    no-noise limit (alpha_bar = 1 exactly).
    """
    if eps.shape != x0.shape:
        raise DiffusionError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    if torch.is_tensor(t):
        ab = torch.as_tensor(
            schedule.alpha_bar(t.detach().cpu().numpy()), dtype=x0.dtype
        )
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    else:
        ab = torch.as_tensor(schedule.alpha_bar(int(t)), dtype=x0.dtype)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# denoiser networks


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t_norm: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            torch.arange(half, dtype=t_norm.dtype) * (-math.log(1000.0) / (half - 1))
        )
        ang = t_norm[:, None] * 1000.0 * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class CondUNet(nn.Module):
    """Small U-shaped denoiser, ~100k parameters at base_channels=24."""

    def __init__(self, base_channels: int = 24):
        super().__init__()
        c = base_channels
        self.base_channels = c
        emb = 2 * c
        self.embed = SinusoidalEmbedding(emb)
        self.emb_fc1 = nn.Linear(emb, emb)
        self.emb_fc2 = nn.Linear(emb, c)
        self.conv_in = nn.Conv2d(6, c, 3, padding=1)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(4, 2 * c)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.norm2 = nn.GroupNorm(4, 2 * c)
        self.mid = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.norm3 = nn.GroupNorm(4, 2 * c)
        self.up2 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.norm4 = nn.GroupNorm(4, c)
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x_t, t_norm, cond):
        temb = self.emb_fc2(self.act(self.emb_fc1(self.embed(t_norm))))
        h0 = self.conv_in(torch.cat([x_t, cond], dim=1))
        h0 = self.act(h0 + temb[:, :, None, None])
        h1 = self.act(self.norm1(self.down1(h0)))
        h2 = self.act(self.norm2(self.down2(h1)))
        m = self.act(self.mid(h2)) + h2
        u1 = nn.functional.interpolate(m, scale_factor=2, mode="nearest")
        u1 = self.act(self.norm3(self.up1(u1)) + h1)
        u2 = nn.functional.interpolate(u1, scale_factor=2, mode="nearest")
        u2 = self.act(self.norm4(self.up2(u2)) + h0)
        return self.conv_out(u2)


class TinyDenoiser(nn.Module):
    """367-parameter denoiser for double-precision finite-difference tests;
    the timestep enters as one constant channel."""

    def __init__(self, hidden: int = 4):
        super().__init__()
        self.hidden = hidden
        self.conv1 = nn.Conv2d(7, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 3, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x_t, t_norm, cond):
        tch = t_norm[:, None, None, None].expand(-1, 1, x_t.shape[2], x_t.shape[3])
        h = self.act(self.conv1(torch.cat([x_t, cond, tch], dim=1)))
        return self.conv2(h)


def build_denoiser(arch: dict) -> nn.Module:
    kind = arch.get("type", "cond_unet")
    if kind == "cond_unet":
        return CondUNet(base_channels=int(arch.get("base_channels", 24)))
    if kind == "tiny":
        return TinyDenoiser(hidden=int(arch.get("hidden", 4)))
    raise DiffusionError(f"unknown denoiser arch {kind!r}")


def denoiser_checkpoint(
    model: nn.Module, arch: dict, schedule: NoiseSchedule, provenance: str,
    meta: Optional[dict] = None,
) -> Checkpoint:
    return Checkpoint(
        kind="denoiser",
        arch=arch,
        state=clone_state(model),
        provenance=provenance,
        schedule=schedule.to_dict(),
        meta=dict(meta or {}),
    )


def load_denoiser(ckpt: Checkpoint) -> tuple[nn.Module, NoiseSchedule]:
    if ckpt.kind != "denoiser":
        raise DiffusionError(f"expected denoiser checkpoint, got {ckpt.kind!r}")
    model = build_denoiser(ckpt.arch)
    dtype = next(iter(ckpt.state.values())).dtype
    model.to(dtype)
    model.load_state_dict(ckpt.state)
    return model, NoiseSchedule.from_dict(ckpt.schedule)


def fresh_denoiser(arch: dict, schedule: NoiseSchedule, seed: int) -> Checkpoint:
    model = build_denoiser(arch)
    init_params(model, torch_gen(derive_seed(seed, "denoiser-init")))
    if isinstance(model, CondUNet):
        # zero output layer: training starts from the identity-free
        # prediction eps=0 and ramps up smoothly
        with torch.no_grad():
            model.conv_out.weight.zero_()
            model.conv_out.bias.zero_()
    return denoiser_checkpoint(model, arch, schedule, provenance="random_init")


# ---------------------------------------------------------------------------
# loss


def noise_pred_loss(
    model: nn.Module,
    x0: torch.Tensor,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    t: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Per-element mean of ||eps - eps_hat||^2 with per-sample t and eps.

    t/eps default to fresh draws from `generator`; pass them explicitly to
    make the loss a deterministic function of the parameters.
    """
    if x0.numel() == 0:
        raise DiffusionError("empty batch")
    if x0.shape != cond.shape:
        raise DiffusionError(f"x0 shape {x0.shape} != cond shape {cond.shape}")
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.timesteps + 1, (n,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, dtype=x0.dtype, generator=generator)
    x_t = forward_noise(x0, t, eps, schedule)
    t_norm = t.to(x0.dtype) / float(schedule.timesteps)
    pred = model(x_t, t_norm, cond)
    if not torch.isfinite(pred).all():
        raise DiffusionError("non-finite activations in denoiser output")
    return torch.mean((eps - pred) ** 2)


# ---------------------------------------------------------------------------
# sampling


def _strided_taus(timesteps: int, steps: int) -> list[int]:
    if not (1 <= steps <= timesteps):
        raise DiffusionError(f"steps must be in [1, {timesteps}]")
    taus = np.unique(np.round(np.linspace(timesteps, 1, steps)).astype(int))
    return list(taus[::-1])


def to_model_space(imgs: np.ndarray) -> torch.Tensor:
    arr = np.asarray(imgs, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    return x * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> np.ndarray:
    arr = ((x + 1.0) / 2.0).clamp(0.0, 1.0).permute(0, 2, 3, 1).contiguous()
    return arr.detach().cpu().numpy().astype(np.float64)


def sample_albedo(
    ckpt_or_model,
    conditions: np.ndarray,
    schedule: Optional[NoiseSchedule] = None,
    seed: int = 0,
    steps: int = 50,
    batch_size: int = 64,
) -> np.ndarray:
    """Strided ancestral sampling conditioned on rgb image(s).

    Accepts one (H, W, 3) image or a stack (N, H, W, 3); returns matching
    rank. Noise is drawn per condition from seeds derived as (seed, index),
    so the draws never depend on how conditions are batched; with a fixed
    batch_size results are bitwise reproducible (conv kernels may differ at
    float32 epsilon across unusual batch shapes).
    """
    if isinstance(ckpt_or_model, Checkpoint):
        model, schedule = load_denoiser(ckpt_or_model)
    else:
        model = ckpt_or_model
        if schedule is None:
            raise DiffusionError("schedule required when passing a bare model")
    single = np.asarray(conditions).ndim == 3
    conds = np.asarray(conditions, dtype=np.float64)
    if single:
        conds = conds[None]
    n = conds.shape[0]
    taus = _strided_taus(schedule.timesteps, steps)
    model.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            cond = to_model_space(conds[lo:hi])
            gens = [torch_gen(derive_seed(seed, "sample", i)) for i in range(lo, hi)]
            shape = (3, cond.shape[2], cond.shape[3])
            x = torch.stack([torch.randn(shape, generator=g) for g in gens])
            for k, t in enumerate(taus):
                t_prev = taus[k + 1] if k + 1 < len(taus) else 0
                ab_t = float(schedule.alpha_bar(t))
                ab_p = float(schedule.alpha_bar(t_prev))
                t_norm = torch.full((x.shape[0],), t / schedule.timesteps, dtype=x.dtype)
                eps_hat = model(x, t_norm, cond)
                x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
                x0_hat = x0_hat.clamp(-1.0, 1.0)
                # re-derive the noise from the clamped estimate; keeps long
                # trajectories bounded when the raw prediction is off
                eps_hat = (x - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
                if t_prev == 0:
                    x = x0_hat
                    continue
                sigma = math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(
                    max(1.0 - ab_t / ab_p, 0.0)
                )
                dir_coef = math.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0))
                z = torch.stack([torch.randn(shape, generator=g) for g in gens])
                x = math.sqrt(ab_p) * x0_hat + dir_coef * eps_hat + sigma * z
            outs.append(from_model_space(x))
    result = np.concatenate(outs, axis=0)
    return result[0] if single else result


# ---------------------------------------------------------------------------
# training


def finetune(
    base: Checkpoint,
    pairs: Sequence[tuple],
    steps: int,
    lr: float,
    seed: int,
    provenance: str,
    batch_size: int = 16,
    sample_ids: Optional[Sequence[str]] = None,
) -> tuple[Checkpoint, dict]:
    """Train a copy of `base` on (albedo, rgb) pairs; base is never mutated.

    Returns (checkpoint, log); the log carries per-step losses and the
    sample ids of every batch for training-set provenance audits.
    """
    if not pairs:
        raise DiffusionError("empty pair set")
    model, schedule = load_denoiser(base)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(pairs))]
    if len(sample_ids) != len(pairs):
        raise DiffusionError("sample_ids length must match pairs")
    base_hash = base.content_hash()
    albedos = to_model_space(np.stack([a for a, _ in pairs]))
    conds = to_model_space(np.stack([c for _, c in pairs]))
    gen = torch_gen(derive_seed(seed, "finetune", provenance))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    batches = []
    model.train()
    for step in range(steps):
        # cosine decay to 10% of the peak rate
        frac = step / max(steps - 1, 1)
        for group in opt.param_groups:
            group["lr"] = lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))
        idx = torch.randint(0, len(pairs), (batch_size,), generator=gen)
        loss = noise_pred_loss(
            model, albedos[idx], conds[idx], schedule, generator=gen
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        batches.append([sample_ids[i] for i in idx.tolist()])
    meta = {"base_hash": base_hash, "steps": steps, "lr": lr}
    ckpt = denoiser_checkpoint(model, base.arch, schedule, provenance, meta=meta)
    log = {"losses": losses, "batches": batches, "base_hash": base_hash}
    return ckpt, log
