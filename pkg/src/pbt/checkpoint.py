"""Checkpoint directories: ``manifest.json`` plus raw little-endian ``tensors.bin``.

A full checkpoint holds every parameter. A delta checkpoint (used for
transfer learning) references a base checkpoint by path and SHA-256 of its
``tensors.bin`` and stores only tensors that are new or differ from the
base, so one base serves many adapted models.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .battmoe import ExpertRegistry
from .errors import CheckpointError
from .model import AdapterSpec, ModelState, PBTConfig

FORMAT = "pbt-checkpoint"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(model: ModelState, out: Path, names, extra):
    out.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(out / "tensors.bin", "wb") as fh:
        for name in names:
            arr = model.params[name]
            dt = str(arr.dtype)
            if dt not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {dt} for {name}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes(order="C")
            fh.write(raw)
            index.append({"name": name, "shape": list(arr.shape), "dtype": dt, "file": "tensors.bin", "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        **extra,
        "config": model.config.to_dict(),
        "registry": model.registry.to_json(),
        "param_order": list(model.params),
        "frozen": sorted(model.frozen),
        "adapter": None if model.adapter is None else vars(model.adapter).copy(),
        "meta": model.meta,
        "tensors": index,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, allow_nan=False), encoding="utf-8")
    return out


def save_checkpoint(model: ModelState, path) -> Path:
    return _write(model, Path(path), list(model.params), {"kind": "full"})


def save_delta_checkpoint(model: ModelState, path, base_path) -> Path:
    """Store only tensors absent from, or different to, the checkpoint at ``base_path``."""
    base_path = Path(base_path)
    base = load_checkpoint(base_path)
    changed = [
        k
        for k, v in model.params.items()
        if k not in base.params or base.params[k].shape != v.shape or base.params[k].dtype != v.dtype or base.params[k].tobytes() != v.tobytes()
    ]
    ref = {"path": os.path.relpath(base_path.resolve(), Path(path).resolve()), "sha256": _sha256(base_path / "tensors.bin")}
    return _write(model, Path(path), changed, {"kind": "delta", "base": ref})


def _read_tensors(root: Path, manifest):
    params = {}
    blobs = {}
    for e in manifest["tensors"]:
        f = e["file"]
        if f not in blobs:
            blobs[f] = (root / f).read_bytes()
        raw = blobs[f][e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{root / f}: truncated tensor {e['name']}")
        params[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
    return params


def load_checkpoint(path) -> ModelState:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {root}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{root}: not a {FORMAT} directory")
    params = _read_tensors(root, manifest)
    if manifest.get("kind") == "delta":
        base_dir = (root / manifest["base"]["path"]).resolve()
        if _sha256(base_dir / "tensors.bin") != manifest["base"]["sha256"]:
            raise CheckpointError(f"{root}: base checkpoint {base_dir} does not match the recorded hash")
        base = load_checkpoint(base_dir)
        merged = {}
        for name in manifest["param_order"]:
            merged[name] = params[name] if name in params else base.params[name]
        params = merged
    else:
        params = {name: params[name] for name in manifest["param_order"]}
    adapter = manifest.get("adapter")
    return ModelState(
        PBTConfig.from_dict(manifest["config"]),
        ExpertRegistry.from_json(manifest["registry"]),
        params,
        frozenset(manifest.get("frozen", ())),
        None if adapter is None else AdapterSpec(**adapter),
        manifest.get("meta", {}),
    )
