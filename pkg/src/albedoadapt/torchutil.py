"""Torch determinism helpers and the checkpoint file format.

Checkpoints are a single JSON header line followed by the raw little-endian
tensor blob in state-dict order. The content hash covers architecture,
schedule, and parameter bytes but not provenance, so a zero-step fine-tune
hashes identically to its base.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .core import PipelineError

_DTYPES = {"f4": torch.float32, "f8": torch.float64}
_DTYPE_TAGS = {torch.float32: "f4", torch.float64: "f8"}


class CheckpointError(PipelineError):
    pass


def pin_threads() -> None:
    """Single-threaded torch: reproducible and fastest at this model size."""
    torch.set_num_threads(1)


def torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & (2**63 - 1))
    return g


def _fan_in(weight: torch.Tensor) -> int:
    if weight.ndim == 2:
        return weight.shape[1]
    return weight.shape[1] * int(np.prod(weight.shape[2:]))


def init_params(model: nn.Module, gen: torch.Generator) -> nn.Module:
    """Uniform(-1/sqrt(fan_in), ..) init for conv/linear layers, drawn from
    an explicit generator so construction never touches global RNG state."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                bound = 1.0 / math.sqrt(_fan_in(m.weight))
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
    return model


def clone_state(model_or_state) -> dict:
    if isinstance(model_or_state, nn.Module):
        state = model_or_state.state_dict()
    else:
        state = model_or_state
    return {k: v.detach().clone().cpu() for k, v in state.items()}


@dataclass
class Checkpoint:
    """Serialized model: parameters + enough metadata to rebuild it."""

    kind: str  # denoiser | classifier
    arch: dict
    state: dict  # name -> torch tensor, insertion-ordered
    provenance: str
    schedule: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def _blob(self) -> bytes:
        parts = []
        for name, tensor in self.state.items():
            arr = tensor.detach().cpu().numpy()
            tag = _DTYPE_TAGS.get(tensor.dtype)
            if tag is None:
                raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
            parts.append(arr.astype("<" + tag, copy=False).tobytes())
        return b"".join(parts)

    def _hash_payload(self, blob: bytes) -> bytes:
        desc = {
            "kind": self.kind,
            "arch": self.arch,
            "schedule": self.schedule,
            "tensors": self._tensor_specs(),
        }
        return json.dumps(desc, sort_keys=True).encode("utf-8") + blob

    def _tensor_specs(self) -> list[dict]:
        return [
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": _DTYPE_TAGS[tensor.dtype],
            }
            for name, tensor in self.state.items()
        ]

    def content_hash(self) -> str:
        return hashlib.sha256(self._hash_payload(self._blob())).hexdigest()

    def save(self, path: str) -> str:
        blob = self._blob()
        header = {
            "format": 1,
            "kind": self.kind,
            "provenance": self.provenance,
            "arch": self.arch,
            "schedule": self.schedule,
            "meta": self.meta,
            "tensors": self._tensor_specs(),
            "hash": hashlib.sha256(self._hash_payload(blob)).hexdigest(),
        }
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(blob)
        return header["hash"]

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                header_line = fh.readline()
                blob = fh.read()
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad checkpoint header: {exc}")
        if header.get("format") != 1:
            raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
        state = {}
        offset = 0
        for spec in header["tensors"]:
            dtype = spec["dtype"]
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = count * (4 if dtype == "f4" else 8)
            chunk = blob[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"{path}: truncated tensor {spec['name']}")
            arr = np.frombuffer(chunk, dtype="<" + dtype).reshape(spec["shape"]).copy()
            state[spec["name"]] = torch.from_numpy(arr)
            offset += nbytes
        if offset != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
        ckpt = cls(
            kind=header["kind"],
            arch=header["arch"],
            state=state,
            provenance=header["provenance"],
            schedule=header.get("schedule"),
            meta=header.get("meta", {}),
        )
        actual = ckpt.content_hash()
        if actual != header["hash"]:
            raise CheckpointError(
                f"{path}: hash mismatch (header {header['hash'][:12]}.., "
                f"content {actual[:12]}..)"
            )
        return ckpt

    def with_provenance(self, provenance: str, meta: Optional[dict] = None) -> "Checkpoint":
        return Checkpoint(
            kind=self.kind,
            arch=copy.deepcopy(self.arch),
            state=clone_state(self.state),
            provenance=provenance,
            schedule=copy.deepcopy(self.schedule),
            meta=dict(meta or {}),
        )
