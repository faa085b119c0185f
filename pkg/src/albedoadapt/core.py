"""Shared data model: image contract, domain types, run configuration, seeding.

Images are plain numpy arrays of shape (H, W, 3), dtype float64, values in
[0, 1]. We validate that contract at module boundaries instead of wrapping
arrays in a class. Every stochastic component derives its own seed from the
single root seed in :class:`RunConfig`, keyed by a string tag, so that runs
are reproducible and resumable without threading RNG objects everywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

# Shading may brighten before the composition clip; see synthgen.
SHADING_MAX = 1.5

LABELS = ("positive", "negative", "ambiguous", "unlabeled")
PROVENANCES = ("manual", "pseudo", "oracle")


class PipelineError(Exception):
    """Base class for errors raised by this package."""


class DatasetError(PipelineError):
    """Raised for dataset I/O problems or on-load invariant violations."""


class ConfigError(PipelineError):
    """Raised when a run configuration fails validation."""


# ---------------------------------------------------------------------------
# image contract


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (H, W, 3) float [0, 1] contract and return the array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name}: expected float dtype, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"{name}: values outside [0, 1] (min {arr.min():.6g}, max {arr.max():.6g})"
        )
    return arr


def validate_shading(img: np.ndarray, name: str = "shading") -> np.ndarray:
    """Like validate_image but with the pre-clip range [0, SHADING_MAX]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > SHADING_MAX + 1e-12:
        raise ValueError(
            f"{name}: values outside [0, {SHADING_MAX}] "
            f"(min {arr.min():.6g}, max {arr.max():.6g})"
        )
    return arr


def quantize(img: np.ndarray, bit_depth: int = 16, scale: float = 1.0) -> np.ndarray:
    """Snap values to the bit_depth storage grid over [0, scale].

    Rendering quantizes albedo/shading before composition so the Lambertian
    identity survives a save/load round trip exactly (the files store the
    same grid).
    """
    levels = (1 << bit_depth) - 1
    arr = np.asarray(img, dtype=np.float64)
    return np.round(arr / scale * levels) / levels * scale


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def image_id(rgb: np.ndarray, bit_depth: int = 16) -> str:
    """Content hash of an rgb image; the stable sample identity."""
    levels = (1 << bit_depth) - 1
    q = np.round(np.asarray(rgb, dtype=np.float64) * levels).astype(np.uint32)
    h = hashlib.sha256()
    h.update(np.asarray(q.shape, dtype=np.int64).tobytes())
    h.update(q.astype("<u4").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# seeding


def derive_seed(root: int, *tags: object) -> int:
    """Deterministic 63-bit stream seed for a named component.

    Keyed by (root, tags) only — never by call order — so resumed runs draw
    the same streams as uninterrupted ones.
    """
    key = f"{root}|" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_for(root: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *tags))


# ---------------------------------------------------------------------------
# domain types


@dataclass
class ScenePair:
    """A (rgb, albedo, shading) triple from one rendered scene.

    For domain_tag == "synthetic", rgb equals clip(albedo * shading) to 1e-6;
    for "real_like", rgb additionally carries nuisance effects and albedo is
    kept only as the hidden evaluation truth.
    """

    rgb: np.ndarray
    albedo: np.ndarray
    shading: np.ndarray
    domain_tag: str
    sample_id: str = ""

    def __post_init__(self) -> None:
        validate_image(self.rgb, "rgb")
        validate_image(self.albedo, "albedo")
        validate_shading(self.shading, "shading")
        if self.domain_tag not in ("synthetic", "real_like"):
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")
        if self.rgb.shape != self.albedo.shape or self.rgb.shape != self.shading.shape:
            raise ValueError("rgb/albedo/shading shapes differ")
        if not self.sample_id:
            self.sample_id = image_id(self.rgb)

    def check_synthetic_invariant(self, tol: float = 1e-6) -> float:
        """Max deviation from the Lambertian identity; raises past tol."""
        composed = np.clip(self.albedo * self.shading, 0.0, 1.0)
        err = float(np.abs(self.rgb - composed).max())
        if self.domain_tag == "synthetic" and err >= tol:
            raise DatasetError(
                f"sample {self.sample_id}: rgb deviates from clip(albedo*shading) "
                f"by {err:.3g} (tol {tol:.3g})"
            )
        return err


@dataclass
class LabeledAlbedo:
    """An albedo estimate together with its label and label provenance."""

    sample_id: str
    condition_id: str
    albedo: np.ndarray
    score: Optional[float]
    label: str
    provenance: str
    iteration: int

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def check_pseudo_invariant(self, tau_pos: float, tau_neg: float) -> None:
        if self.provenance != "pseudo":
            return
        if self.label == "positive" and (self.score is None or self.score < tau_pos):
            raise ValueError(
                f"pseudo positive {self.sample_id} has score {self.score} < {tau_pos}"
            )
        if self.label == "negative" and (self.score is None or self.score > tau_neg):
            raise ValueError(
                f"pseudo negative {self.sample_id} has score {self.score} > {tau_neg}"
            )


@dataclass
class PNSets:
    """Iteration-indexed positive and negative sets."""

    iteration: int
    positives: list[LabeledAlbedo] = field(default_factory=list)
    negatives: list[LabeledAlbedo] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        pos_ids = {a.sample_id for a in self.positives}
        neg_ids = {a.sample_id for a in self.negatives}
        overlap = pos_ids & neg_ids
        if overlap:
            raise ValueError(f"positive/negative overlap: {sorted(overlap)[:5]}")
        for member in list(self.positives) + list(self.negatives):
            if member.iteration > self.iteration:
                raise ValueError(
                    f"member {member.sample_id} from iteration {member.iteration} "
                    f"> set iteration {self.iteration}"
                )

    @property
    def positive_ids(self) -> set[str]:
        return {a.sample_id for a in self.positives}

    @property
    def negative_ids(self) -> set[str]:
        return {a.sample_id for a in self.negatives}


@dataclass
class PreferencePair:
    """A (win, lose) albedo pair for one condition image, ordered by score."""

    condition_id: str
    condition: np.ndarray
    win: np.ndarray
    lose: np.ndarray
    win_score: float
    lose_score: float
    win_source_iter: int
    lose_source_iter: int
    corrupted: bool = False

    def validate(self) -> None:
        """Score-order invariant; corrupt_pairs intentionally bypasses this."""
        if not self.win_score > self.lose_score:
            raise ValueError(
                f"pair for {self.condition_id}: win_score {self.win_score} "
                f"<= lose_score {self.lose_score}"
            )


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """All knobs for a full run; defaults are the toy-benchmark settings."""

    seed: int = 0
    image_size: int = 32
    bit_depth: int = 16

    # phase-1 loop
    num_iterations: int = 2
    tau_pos: float = 0.99
    tau_neg: float = 0.3
    tau_rectify: float = 0.5
    manual_budget: int = 40  # per class
    oracle_mse_threshold: float = 0.03

    # datasets
    synthetic_count: int = 256
    pool_count: int = 192
    eval_count: int = 64

    # diffusion model
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.06
    sample_steps: int = 40
    base_channels: int = 24
    model_batch_size: int = 16
    model_pretrain_steps: int = 2000
    model_pretrain_lr: float = 2e-3
    model_finetune_steps: int = 500
    model_finetune_lr: float = 5e-4
    infer_batch: int = 64

    # classifier
    classifier_channels: int = 24
    classifier_batch_size: int = 32
    classifier_init_steps: int = 800
    classifier_init_lr: float = 1e-3
    classifier_finetune_steps: int = 300
    classifier_finetune_lr: float = 5e-4

    # phase-2 DPO
    # High beta saturates the preference sigmoid once a small margin exists,
    # which caps total parameter drift; pushing further only teaches the
    # model to please the judging classifier at the expense of accuracy.
    dpo_steps: int = 100
    dpo_lr: float = 5e-6
    dpo_beta: float = 5.0
    dpo_pair_batch: int = 8

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not (0.0 <= self.tau_neg < self.tau_rectify < self.tau_pos <= 1.0):
            raise ConfigError(
                "thresholds must satisfy 0 <= tau_neg < tau_rectify < tau_pos <= 1, "
                f"got ({self.tau_neg}, {self.tau_rectify}, {self.tau_pos})"
            )
        if self.bit_depth not in (8, 16):
            raise ConfigError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if not (1 <= self.sample_steps <= self.timesteps):
            raise ConfigError("sample_steps must be in [1, timesteps]")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16 (metrics need an 11px window)")
        for name in (
            "manual_budget",
            "synthetic_count",
            "pool_count",
            "eval_count",
            "model_batch_size",
            "classifier_batch_size",
            "dpo_pair_batch",
            "infer_batch",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in (
            "model_pretrain_steps",
            "model_finetune_steps",
            "classifier_init_steps",
            "classifier_finetune_steps",
            "dpo_steps",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def require_disjoint_ids(groups: Iterable[Iterable[str]]) -> None:
    """Raise if any sample id appears in more than one group."""
    seen: set[str] = set()
    for group in groups:
        for sid in group:
            if sid in seen:
                raise ValueError(f"sample id {sid} appears in more than one set")
            seen.add(sid)
