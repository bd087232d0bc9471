"""Adapter export/import and the on-disk adapter checkpoint format.

Layout: ``manifest.json`` (base_id, rank, alpha, per-matrix shapes, file
names and sha256, metadata) plus one little-endian float32 row-major blob
per matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .lora import _linear_dims, is_adaptable, lora_modules, wrap_module
from .models import CausalLM

FORMAT_VERSION = 1


class AdapterError(ValueError):
    pass


class AdapterShapeError(AdapterError):
    pass


class BaseMismatchError(AdapterError):
    pass


class CheckpointCorruptError(AdapterError):
    pass


@dataclass
class AdapterCheckpoint:
    base_id: str
    matrices: dict[str, tuple[np.ndarray, np.ndarray]]
    alpha: float
    metadata: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        ranks = {A.shape[0] for A, _ in self.matrices.values()}
        if len(ranks) != 1:
            raise AdapterShapeError(f"inconsistent adapter ranks {sorted(ranks)}")
        return ranks.pop()

    def validate(self) -> None:
        for name, (A, B) in self.matrices.items():
            if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[1] or A.shape[0] < 1:
                raise AdapterShapeError(f"{name}: A {A.shape} and B {B.shape} are inconsistent")


def export_adapter(model: CausalLM, metadata: dict | None = None) -> AdapterCheckpoint:
    mods = lora_modules(model)
    if not mods:
        raise AdapterError("model carries no adapter")
    alphas = {m.alpha for m in mods.values()}
    if len(alphas) != 1:
        raise AdapterError("adapters with differing alpha cannot share one checkpoint")
    mats = {
        name: (
            m.lora_A.detach().cpu().numpy().astype("<f4", copy=True),
            m.lora_B.detach().cpu().numpy().astype("<f4", copy=True),
        )
        for name, m in sorted(mods.items())
    }
    return AdapterCheckpoint(model.base_id, mats, alphas.pop(), dict(metadata or {}))


def import_adapter(model: CausalLM, ckpt: AdapterCheckpoint, strict_base: bool = True) -> CausalLM:
    """Attach the checkpoint's deltas to ``model`` in place and return it.

    Any adapter the model already carries is replaced.
    """
    ckpt.validate()
    if strict_base and ckpt.base_id != model.base_id:
        raise BaseMismatchError(f"adapter was trained on {ckpt.base_id!r}, target is {model.base_id!r}")
    modules = dict(model.named_modules())
    problems = []
    for name, (A, B) in ckpt.matrices.items():
        mod = modules.get(name)
        base = getattr(mod, "base", mod)
        if mod is None or not is_adaptable(base):
            problems.append(f"{name} (no such layer)")
            continue
        n_in, n_out = _linear_dims(base)
        if A.shape[1] != n_in or B.shape[0] != n_out:
            problems.append(f"{name} (adapter {B.shape[0]}x{A.shape[1]} vs layer {n_out}x{n_in})")
    if problems:
        raise AdapterShapeError("adapter shape mismatch: " + ", ".join(problems))
    model.detach_adapter()
    for p in model.parameters():
        p.requires_grad_(False)
    for name, (A, B) in ckpt.matrices.items():
        wrapped = wrap_module(model, name, rank=A.shape[0], alpha=ckpt.alpha)
        wrapped.set_matrices(torch.from_numpy(A.copy()), torch.from_numpy(B.copy()), ckpt.alpha)
    return model


def _blob_name(name: str, which: str) -> str:
    return f"{name}.{which}.f32"


def save_adapter(ckpt: AdapterCheckpoint, directory: str | Path) -> Path:
    ckpt.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, (A, B) in ckpt.matrices.items():
        entry = {"name": name, "rank": int(A.shape[0])}
        for which, mat in (("A", A), ("B", B)):
            raw = np.ascontiguousarray(mat, dtype="<f4").tobytes()
            fname = _blob_name(name, which)
            (directory / fname).write_bytes(raw)
            entry[which] = {"file": fname, "shape": list(mat.shape), "sha256": hashlib.sha256(raw).hexdigest()}
        entries.append(entry)
    manifest = {
        "format": FORMAT_VERSION,
        "base_id": ckpt.base_id,
        "rank": ckpt.rank,
        "alpha": ckpt.alpha,
        "dtype": "float32-le",
        "matrices": entries,
        "metadata": ckpt.metadata,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_adapter(directory: str | Path) -> AdapterCheckpoint:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no adapter manifest in {directory}")
    try:
        manifest = json.loads(path.read_text())
        mats = {}
        for entry in manifest["matrices"]:
            pair = []
            for which in ("A", "B"):
                info = entry[which]
                raw = (directory / info["file"]).read_bytes()
                if hashlib.sha256(raw).hexdigest() != info["sha256"]:
                    raise CheckpointCorruptError(f"checksum mismatch for {info['file']}")
                pair.append(np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).copy())
            mats[entry["name"]] = tuple(pair)
        return AdapterCheckpoint(manifest["base_id"], mats, float(manifest["alpha"]), manifest.get("metadata", {}))
    except (KeyError, TypeError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        if isinstance(exc, AdapterError):
            raise
        raise CheckpointCorruptError(f"corrupt adapter manifest in {directory}: {exc}") from exc
