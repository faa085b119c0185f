"""Preference fine-tuning against a frozen reference model.

The loss compares how much better the policy predicts the win image's noise
than the reference does, versus the same margin on the lose image:

    loss = -log sigmoid(-beta * T * omega * [(w_theta - w_ref) - (l_theta - l_ref)])

with each term a per-element mean squared noise-prediction error. With the
policy equal to the reference the bracket vanishes and the loss is exactly
ln 2, independent of pair, timestep, noise, and beta. Gradients flow only
through the policy terms; the reference stays frozen.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np
import torch

from .core import PipelineError, PreferencePair, derive_seed
from .diffusion import (
    NoiseSchedule,
    forward_noise,
    load_denoiser,
    denoiser_checkpoint,
    to_model_space,
)
from .torchutil import Checkpoint, torch_gen

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class DPOError(PipelineError):
    pass


def _residual(model, x0, t, eps, cond, schedule) -> torch.Tensor:
    """Per-sample mean squared noise-prediction error, shape (B,)."""
    x_t = forward_noise(x0, t, eps, schedule)
    t_norm = t.to(x0.dtype) / float(schedule.timesteps)
    pred = model(x_t, t_norm, cond)
    if not torch.isfinite(pred).all():
        raise DPOError("non-finite policy output")
    return ((eps - pred) ** 2).mean(dim=(1, 2, 3))


def _pair_losses(
    model,
    ref_model,
    cond: torch.Tensor,
    win: torch.Tensor,
    lose: torch.Tensor,
    t: torch.Tensor,
    eps_w: torch.Tensor,
    eps_l: torch.Tensor,
    schedule: NoiseSchedule,
    beta: float,
    omega: float,
) -> torch.Tensor:
    w_theta = _residual(model, win, t, eps_w, cond, schedule)
    l_theta = _residual(model, lose, t, eps_l, cond, schedule)
    with torch.no_grad():
        w_ref = _residual(ref_model, win, t, eps_w, cond, schedule)
        l_ref = _residual(ref_model, lose, t, eps_l, cond, schedule)
    margin = (w_theta - w_ref) - (l_theta - l_ref)
    # final reduction in float64 so the zero-margin value is ln 2 exactly
    arg = beta * schedule.timesteps * omega * margin.to(torch.float64)
    return torch.nn.functional.softplus(arg)


def dpo_loss(
    model,
    ref_model,
    pair: PreferencePair,
    t: int,
    eps_w: torch.Tensor,
    eps_l: torch.Tensor,
    schedule: NoiseSchedule,
    beta: float,
    omega: float = 1.0,
) -> torch.Tensor:
    """Single-pair loss with pinned timestep and noise draws."""
    if not (1 <= t <= schedule.timesteps):
        raise DPOError(f"t {t} outside [1, {schedule.timesteps}]")
    dtype = next(model.parameters()).dtype
    cond = to_model_space(pair.condition).to(dtype)
    win = to_model_space(pair.win).to(dtype)
    lose = to_model_space(pair.lose).to(dtype)
    t_vec = torch.full((1,), int(t), dtype=torch.long)
    losses = _pair_losses(
        model, ref_model, cond, win, lose, t_vec,
        eps_w.to(dtype), eps_l.to(dtype), schedule, beta, omega,
    )
    return losses.mean()


def corrupt_pairs(
    pairs: Sequence[PreferencePair], fraction: float, seed: int
) -> list[PreferencePair]:
    """Swap win/lose on round(fraction * count) pairs, seeded; swapped pairs
    are marked corrupted and intentionally break the score ordering."""
    if not (0.0 <= fraction <= 1.0):
        raise DPOError(f"fraction {fraction} outside [0, 1]")
    n_swap = int(round(fraction * len(pairs)))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(pairs), size=n_swap, replace=False).tolist())
    out = []
    for i, p in enumerate(pairs):
        if i in chosen:
            out.append(
                PreferencePair(
                    condition_id=p.condition_id,
                    condition=p.condition,
                    win=p.lose,
                    lose=p.win,
                    win_score=p.lose_score,
                    lose_score=p.win_score,
                    win_source_iter=p.lose_source_iter,
                    lose_source_iter=p.win_source_iter,
                    corrupted=True,
                )
            )
        else:
            out.append(p)
    return out


def dpo_finetune(
    last: Checkpoint,
    pairs: Sequence[PreferencePair],
    steps: int,
    lr: float,
    beta: float,
    seed: int,
    pair_batch: int = 8,
    omega: float = 1.0,
) -> tuple[Checkpoint, dict]:
    """Fine-tune the last-iteration model on preference pairs.

    The reference is a frozen copy of `last`; it is asserted bit-identical
    after training. The returned log records whether the mean loss over the
    last 10% of steps beat the ln 2 reference fixed point.
    """
    if not pairs:
        raise DPOError("empty pair set")
    model, schedule = load_denoiser(last)
    ref_model, _ = load_denoiser(last)
    ref_model.eval()
    for p in ref_model.parameters():
        p.requires_grad_(False)
    ref_before = {k: v.clone() for k, v in ref_model.state_dict().items()}

    conds = to_model_space(np.stack([p.condition for p in pairs]))
    wins = to_model_space(np.stack([p.win for p in pairs]))
    loses = to_model_space(np.stack([p.lose for p in pairs]))
    gen = torch_gen(derive_seed(seed, "dpo"))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, len(pairs), (pair_batch,), generator=gen)
        t = torch.randint(1, schedule.timesteps + 1, (pair_batch,), generator=gen)
        eps_w = torch.randn(wins[idx].shape, generator=gen)
        eps_l = torch.randn(loses[idx].shape, generator=gen)
        loss = _pair_losses(
            model, ref_model, conds[idx], wins[idx], loses[idx],
            t, eps_w, eps_l, schedule, beta, omega,
        ).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    for k, v in ref_model.state_dict().items():
        if not torch.equal(v, ref_before[k]):
            raise DPOError(f"reference parameter {k} changed during fine-tune")

    tail = losses[-max(1, len(losses) // 10) :] if losses else []
    tail_mean = float(np.mean(tail)) if tail else float("nan")
    beat_reference = bool(tail and tail_mean < LN2)
    if losses and not beat_reference:
        log.warning(
            "preference fine-tune did not beat the ln2 fixed point "
            "(tail mean %.4f)", tail_mean,
        )
    meta = {
        "base_hash": last.content_hash(),
        "steps": steps,
        "lr": lr,
        "beta": beta,
        "tail_mean_loss": tail_mean,
        "beat_reference": beat_reference,
    }
    ckpt = denoiser_checkpoint(model, last.arch, schedule, provenance="dpo", meta=meta)
    return ckpt, {"losses": losses, **meta}


def pair_manifest_rows(pairs: Sequence[PreferencePair]) -> list[dict]:
    return [
        {
            "condition_id": p.condition_id,
            "win_iter": p.win_source_iter,
            "lose_iter": p.lose_source_iter,
            "win_score": p.win_score,
            "lose_score": p.lose_score,
            "corrupted": p.corrupted,
        }
        for p in pairs
    ]
