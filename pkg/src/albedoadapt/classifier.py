"""Binary albedo-vs-shaded classifier and its training loops.

The net normalizes each input image to zero mean intensity before any conv,
so raw brightness alone cannot separate the classes; the synthetic initial
training additionally applies the illuminance augmentation to both classes.
Scores are raw sigmoid outputs in (0, 1); probability clamping happens only
inside the cross-entropy loss.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import PipelineError, PNSets, ScenePair, derive_seed
from .synthgen import AUGMENT_KNEE, GAIN_RANGE
from .torchutil import Checkpoint, clone_state, init_params, torch_gen

CE_CLAMP = 1e-7


class ClassifierError(PipelineError):
    pass


class ClassifierNet(nn.Module):
    """Small conv net with per-image mean-intensity normalization."""

    def __init__(self, channels: int = 24):
        super().__init__()
        c = channels
        self.channels = c
        self.conv1 = nn.Conv2d(3, c, 3, stride=2, padding=1)
        self.gn1 = nn.GroupNorm(4, c)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.gn2 = nn.GroupNorm(4, 2 * c)
        self.conv3 = nn.Conv2d(2 * c, 64, 3, stride=2, padding=1)
        self.fc1 = nn.Linear(64, 32)
        self.fc2 = nn.Linear(32, 1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x - x.mean(dim=(1, 2, 3), keepdim=True)
        h = self.act(self.gn1(self.conv1(x)))
        h = self.act(self.gn2(self.conv2(h)))
        h = self.act(self.conv3(h))
        h = h.mean(dim=(2, 3))
        h = self.act(self.fc1(h))
        return torch.sigmoid(self.fc2(h)).squeeze(1)


class TinyClassifier(nn.Module):
    """117-parameter head for double-precision finite-difference tests."""

    def __init__(self, hidden: int = 4):
        super().__init__()
        self.hidden = hidden
        self.conv = nn.Conv2d(3, hidden, 3, padding=1)
        self.fc = nn.Linear(hidden, 1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x - x.mean(dim=(1, 2, 3), keepdim=True)
        h = self.act(self.conv(x)).mean(dim=(2, 3))
        return torch.sigmoid(self.fc(h)).squeeze(1)


def build_classifier(arch: dict) -> nn.Module:
    kind = arch.get("type", "convnet")
    if kind == "convnet":
        return ClassifierNet(channels=int(arch.get("channels", 24)))
    if kind == "tiny":
        return TinyClassifier(hidden=int(arch.get("hidden", 4)))
    raise ClassifierError(f"unknown classifier arch {kind!r}")


def classifier_checkpoint(
    model: nn.Module, arch: dict, provenance: str, meta: Optional[dict] = None
) -> Checkpoint:
    return Checkpoint(
        kind="classifier",
        arch=arch,
        state=clone_state(model),
        provenance=provenance,
        meta=dict(meta or {}),
    )


def load_classifier(ckpt: Checkpoint) -> nn.Module:
    if ckpt.kind != "classifier":
        raise ClassifierError(f"expected classifier checkpoint, got {ckpt.kind!r}")
    model = build_classifier(ckpt.arch)
    model.to(next(iter(ckpt.state.values())).dtype)
    model.load_state_dict(ckpt.state)
    return model


# ---------------------------------------------------------------------------
# loss


def binary_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probability clamping at 1e-7."""
    if probs.numel() == 0:
        raise ClassifierError("empty batch")
    uniq = set(labels.detach().cpu().to(torch.float64).unique().tolist())
    if not uniq <= {0.0, 1.0}:
        raise ClassifierError(f"non-binary labels: {sorted(uniq)}")
    # log/reduction in float64 so p == 0.5 yields ln 2 exactly
    p = probs.to(torch.float64).clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    y = labels.to(torch.float64)
    return torch.mean(-(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)))


def ce_loss(model: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return binary_ce(model(images), labels)


# ---------------------------------------------------------------------------
# scoring


def _to_batch(images, dtype: torch.dtype) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def score_batch(model_or_ckpt, images, batch_size: int = 64) -> np.ndarray:
    model = (
        load_classifier(model_or_ckpt)
        if isinstance(model_or_ckpt, Checkpoint)
        else model_or_ckpt
    )
    dtype = next(model.parameters()).dtype
    x = _to_batch(images, dtype)
    model.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            outs.append(model(x[lo : lo + batch_size]).detach().cpu().numpy())
    return np.concatenate(outs).astype(np.float64)


def score(model_or_ckpt, image) -> float:
    return float(score_batch(model_or_ckpt, np.asarray(image)[None])[0])


def classifier_accuracy(model_or_ckpt, items: Sequence[tuple]) -> float:
    """Fraction correct on (image, label) items; ambiguous items are
    excluded from the denominator."""
    judged = [(img, lab) for img, lab in items if lab != "ambiguous"]
    if not judged:
        raise ClassifierError("no unambiguous items to score")
    scores = score_batch(model_or_ckpt, np.stack([img for img, _ in judged]))
    correct = sum(
        1
        for s, (_, lab) in zip(scores, judged)
        if (s >= 0.5) == (lab == "positive")
    )
    return correct / len(judged)


# ---------------------------------------------------------------------------
# augmentation (torch twin of synthgen.illuminance_augment)


def soft_gain_torch(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    u = x * gain
    knee = AUGMENT_KNEE
    shoulder = knee + (1.0 - knee) * torch.tanh((u - knee) / (1.0 - knee))
    out = torch.where(u <= knee, u, shoulder)
    return torch.where(gain.expand_as(u) <= 1.0, u, out)


def _augment_batch(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    lo, hi = GAIN_RANGE
    gains = lo + (hi - lo) * torch.rand(
        (x.shape[0], 1, 1, 1), dtype=x.dtype, generator=gen
    )
    return soft_gain_torch(x, gains)


# ---------------------------------------------------------------------------
# training


def _train(
    model: nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    steps: int,
    lr: float,
    batch_size: int,
    gen: torch.Generator,
    augment: bool,
) -> list[float]:
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        batch = images[idx]
        if augment:
            batch = _augment_batch(batch, gen)
        loss = ce_loss(model, batch, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def train_initial(
    pairs: Sequence[ScenePair],
    channels: int,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    holdout_frac: float = 0.1,
) -> tuple[Checkpoint, dict]:
    """Train the initial classifier on synthetic (albedo=1, rgb=0) images
    with the illuminance augmentation applied to both classes."""
    albedos = [p.albedo for p in pairs]
    rgbs = [p.rgb for p in pairs]
    if not albedos or not rgbs:
        raise ClassifierError("both classes required for initial training")
    images = np.stack(albedos + rgbs)
    labels = np.array([1.0] * len(albedos) + [0.0] * len(rgbs))
    perm = np.random.default_rng(derive_seed(seed, "classifier-split")).permutation(
        len(images)
    )
    n_hold = max(1, int(len(images) * holdout_frac))
    hold, train = perm[:n_hold], perm[n_hold:]
    if labels[train].min() == labels[train].max():
        raise ClassifierError("training split lost one class; add more data")

    arch = {"type": "convnet", "channels": channels}
    model = build_classifier(arch)
    gen = torch_gen(derive_seed(seed, "classifier-init"))
    init_params(model, gen)
    x = _to_batch(images[train], torch.float32)
    y = torch.from_numpy(labels[train]).to(torch.float32)
    losses = _train(model, x, y, steps, lr, batch_size, gen, augment=True)

    hold_scores = score_batch(model, images[hold])
    hold_acc = float(
        np.mean((hold_scores >= 0.5) == (labels[hold] == 1.0))
    )
    ckpt = classifier_checkpoint(
        model, arch, provenance="initial", meta={"holdout_accuracy": hold_acc}
    )
    return ckpt, {"holdout_accuracy": hold_acc, "losses": losses}


def finetune_classifier(
    prev: Checkpoint,
    pnsets: PNSets,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    provenance: str = "finetuned",
) -> tuple[Checkpoint, dict]:
    """Fine-tune from the previous classifier on the current P/N sets."""
    if not pnsets.positives or not pnsets.negatives:
        raise ClassifierError("both P and N sets must be nonempty")
    model = load_classifier(prev)
    images = np.stack(
        [m.albedo for m in pnsets.positives] + [m.albedo for m in pnsets.negatives]
    )
    labels = np.array(
        [1.0] * len(pnsets.positives) + [0.0] * len(pnsets.negatives)
    )
    x = _to_batch(images, torch.float32)
    y = torch.from_numpy(labels).to(torch.float32)
    gen = torch_gen(derive_seed(seed, "classifier-finetune", pnsets.iteration))
    losses = _train(model, x, y, steps, lr, batch_size, gen, augment=False)
    ckpt = classifier_checkpoint(
        model, prev.arch, provenance=provenance, meta={"steps": steps}
    )
    return ckpt, {"losses": losses}
