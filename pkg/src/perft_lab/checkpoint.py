"""Checkpoint format: a directory of raw weight files plus a JSON manifest.

    <dir>/manifest.json
    <dir>/weights/<param-name>.bin

Each .bin holds the parameter's float64 values, little-endian, C row-major,
no header. The manifest records name, shape, role, trainable flag, and a
sha256 per tensor, along with the model config and any attached variant
config, so a checkpoint is self-describing and loads without the original
construction code path being re-run.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from typing import Optional

import numpy as np

from .model import LanguageModel, ModelConfig, attach_variant, build_model
from .numerics import ParseError, Rng
from .peft import PerftConfig

FORMAT = "perft-lab-checkpoint/1"


def _tensor_bytes(value: np.ndarray, dtype: str = "<f8") -> bytes:
    return np.ascontiguousarray(value.astype(dtype)).tobytes(order="C")


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_checkpoint(path, model: LanguageModel, extra: Optional[dict] = None,
                    dtype: str = "<f8") -> None:
    """dtype "<f8" is the working precision; "<f4" is offered purely as a
    smaller storage option (loads back as float64)."""
    if dtype not in ("<f8", "<f4"):
        raise ParseError(f"checkpoint dtype must be <f8 or <f4, got {dtype!r}")
    wdir = os.path.join(path, "weights")
    os.makedirs(wdir, exist_ok=True)
    params = []
    for p in model.parameters():
        raw = _tensor_bytes(p.value, dtype)
        fname = p.name + ".bin"
        with open(os.path.join(wdir, fname), "wb") as fh:
            fh.write(raw)
        params.append({
            "name": p.name,
            "shape": list(p.value.shape),
            "file": f"weights/{fname}",
            "role": p.role,
            "trainable": bool(p.trainable),
            "sha256": _sha256(raw),
        })
    manifest = {
        "format": FORMAT,
        "dtype": dtype,
        "order": "C",
        "model_config": asdict(model.cfg),
        "perft_config": asdict(model.perft_cfg) if model.perft_cfg else None,
        "extra": extra or {},
        "params": params,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, verify: bool = True) -> LanguageModel:
    """Rebuild the model a checkpoint describes and load its exact bytes."""
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"{mpath}: invalid JSON ({e.msg})") from e
    if manifest.get("format") != FORMAT:
        raise ParseError(f"{mpath}: unknown format {manifest.get('format')!r}")
    dtype = manifest.get("dtype", "<f8")
    itemsize = 8 if dtype == "<f8" else 4
    cfg = ModelConfig(**manifest["model_config"])
    model = build_model(cfg, seed=0)
    pcfg_dict = manifest.get("perft_config")
    if pcfg_dict is not None:
        attach_variant(model, PerftConfig(**pcfg_dict), Rng(0))
    by_name = {p.name: p for p in model.parameters()}
    seen = set()
    for entry in manifest["params"]:
        name = entry["name"]
        p = by_name.get(name)
        if p is None:
            raise ParseError(f"{mpath}: parameter {name!r} not present in rebuilt model")
        fpath = os.path.join(path, entry["file"])
        with open(fpath, "rb") as fh:
            raw = fh.read()
        shape = tuple(entry["shape"])
        expect = (int(np.prod(shape)) if shape else 1) * itemsize
        if len(raw) != expect:
            raise ParseError(f"{fpath}: expected {expect} bytes for shape {shape}, found {len(raw)}")
        if verify and _sha256(raw) != entry["sha256"]:
            raise ParseError(f"{fpath}: sha256 mismatch; file corrupt")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)
        if p.value.shape != arr.shape:
            raise ParseError(
                f"{mpath}: shape {arr.shape} for {name!r} does not match model {p.value.shape}"
            )
        p.value[...] = arr
        p.trainable = bool(entry["trainable"])
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise ParseError(f"{mpath}: missing tensors for {sorted(missing)[:4]} ...")
    return model


def backbone_checksum(model: LanguageModel) -> str:
    """sha256 over all backbone (non-adapter) parameter bytes, in name order."""
    h = hashlib.sha256()
    for p in sorted(model.parameters(), key=lambda q: q.name):
        if p.role == "backbone":
            h.update(p.name.encode())
            h.update(_tensor_bytes(p.value))
    return h.hexdigest()
