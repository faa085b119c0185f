"""Dataset and label persistence.

Layout of a dataset directory::

    manifest.json
    images/<sample_id>_rgb.png
    images/<sample_id>_albedo.png
    images/<sample_id>_shading.png

PNGs are 16-bit; shading is stored scaled by SHADING_MAX so its [0, 1.5]
range fits the unit grid. Albedo and shading are quantized to the storage
grid before rgb is composed from them, so values written to disk load back
bitwise identical and sample ids are stable across round trips.

Labels live in an append-only JSONL store; the last record wins per sample
within a provenance rank, and manual labels outrank oracle ones, which
outrank pseudo ones.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import cv2
import numpy as np

from .core import (
    SHADING_MAX,
    DatasetError,
    LABELS,
    PROVENANCES,
    ScenePair,
    validate_image,
)

MANIFEST_VERSION = 1

_PROVENANCE_RANK = {"pseudo": 0, "oracle": 1, "manual": 2}


# ---------------------------------------------------------------------------
# PNG round trip


def write_png(path: str, img: np.ndarray, scale: float = 1.0) -> None:
    """Write a float (H, W, 3) image in [0, scale] as a 16-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DatasetError(f"{path}: expected (H, W, 3), got {arr.shape}")
    raw = np.round(np.clip(arr, 0.0, scale) / scale * 65535.0).astype(np.uint16)
    bgr = raw[:, :, ::-1]
    if not cv2.imwrite(path, bgr):
        raise DatasetError(f"failed to write {path}")


def read_png(path: str, scale: float = 1.0) -> np.ndarray:
    """Read a 16-bit PNG back to float64 in [0, scale]."""
    bgr = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if bgr is None:
        raise DatasetError(f"failed to read {path}")
    if bgr.ndim != 3 or bgr.shape[2] != 3:
        raise DatasetError(f"{path}: expected 3 channels, got shape {bgr.shape}")
    if bgr.dtype != np.uint16:
        raise DatasetError(f"{path}: expected 16-bit png, got {bgr.dtype}")
    raw = bgr[:, :, ::-1].astype(np.float64)
    return raw / 65535.0 * scale


# ---------------------------------------------------------------------------
# datasets


def save_dataset(dirpath: str, pairs: Iterable[ScenePair], seed: int) -> str:
    """Write scene pairs plus a manifest; returns the manifest path."""
    pairs = list(pairs)
    ids = [p.sample_id for p in pairs]
    dupes = {sid for sid in ids if ids.count(sid) > 1}
    if dupes:
        raise DatasetError(f"duplicate sample ids: {sorted(dupes)[:5]}")
    imgdir = os.path.join(dirpath, "images")
    os.makedirs(imgdir, exist_ok=True)
    entries = []
    domains = sorted({p.domain_tag for p in pairs})
    for pair in pairs:
        sid = pair.sample_id
        files = {
            "rgb": f"images/{sid}_rgb.png",
            "albedo": f"images/{sid}_albedo.png",
            "shading": f"images/{sid}_shading.png",
        }
        write_png(os.path.join(dirpath, files["rgb"]), pair.rgb)
        write_png(os.path.join(dirpath, files["albedo"]), pair.albedo)
        write_png(os.path.join(dirpath, files["shading"]), pair.shading, scale=SHADING_MAX)
        entries.append({"sample_id": sid, "domain_tag": pair.domain_tag, **files})
    domain = domains[0] if len(domains) == 1 else ("mixed" if domains else "empty")
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "domain": domain,
        "samples": entries,
    }
    manifest_path = os.path.join(dirpath, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_dataset(dirpath: str, check: bool = True) -> list[ScenePair]:
    """Load a dataset directory; optionally re-check the Lambertian identity.

    Stored rgb was quantized once more than the albedo/shading product, so
    the on-disk identity holds to one quantization step rather than the
    in-memory 1e-6.
    """
    manifest_path = os.path.join(dirpath, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"no manifest.json in {dirpath}")
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON: {exc}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(
            f"{manifest_path}: unsupported version {manifest.get('version')!r}"
        )
    pairs = []
    tol = 1.0 / 65535.0 + 1e-9
    for entry in manifest["samples"]:
        sid = entry["sample_id"]
        try:
            rgb = read_png(os.path.join(dirpath, entry["rgb"]))
            albedo = read_png(os.path.join(dirpath, entry["albedo"]))
            shading = read_png(os.path.join(dirpath, entry["shading"]), scale=SHADING_MAX)
        except DatasetError as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        pair = ScenePair(
            rgb=rgb,
            albedo=albedo,
            shading=shading,
            domain_tag=entry["domain_tag"],
            sample_id=sid,
        )
        if check and pair.domain_tag == "synthetic":
            pair.check_synthetic_invariant(tol=tol)
        pairs.append(pair)
    return pairs


def save_albedo(path: str, albedo: np.ndarray) -> None:
    write_png(path, validate_image(albedo, "albedo"))


def load_albedo(path: str) -> np.ndarray:
    return validate_image(read_png(path), "albedo")


# ---------------------------------------------------------------------------
# jsonl helpers


def write_jsonl(path: str, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# ---------------------------------------------------------------------------
# label store


@dataclass
class LabelRecord:
    sample_id: str
    label: str
    provenance: str
    score: Optional[float]
    iteration: int
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "label": self.label,
            "provenance": self.provenance,
            "score": self.score,
            "iteration": self.iteration,
            "timestamp": self.timestamp,
        }


class LabelStore:
    """Append-only JSONL label log with provenance-ranked resolution."""

    def __init__(self, path: str):
        self.path = path

    def append(
        self,
        sample_id: str,
        label: str,
        provenance: str,
        score: Optional[float] = None,
        iteration: int = 0,
        timestamp: Optional[float] = None,
    ) -> LabelRecord:
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        rec = LabelRecord(
            sample_id=sample_id,
            label=label,
            provenance=provenance,
            score=score,
            iteration=iteration,
            timestamp=time.time() if timestamp is None else timestamp,
        )
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True))
            fh.write("\n")
        return rec

    def records(self) -> list[LabelRecord]:
        if not os.path.exists(self.path):
            return []
        out = []
        for row in read_jsonl(self.path):
            out.append(
                LabelRecord(
                    sample_id=row["sample_id"],
                    label=row["label"],
                    provenance=row["provenance"],
                    score=row.get("score"),
                    iteration=int(row.get("iteration", 0)),
                    timestamp=float(row.get("timestamp", 0.0)),
                )
            )
        return out

    def effective(self) -> dict[str, LabelRecord]:
        """Resolve to one record per sample: manual > oracle > pseudo, then
        append order."""
        best: dict[str, LabelRecord] = {}
        for rec in self.records():
            prev = best.get(rec.sample_id)
            if prev is None or (
                _PROVENANCE_RANK[rec.provenance] >= _PROVENANCE_RANK[prev.provenance]
            ):
                best[rec.sample_id] = rec
        return best
