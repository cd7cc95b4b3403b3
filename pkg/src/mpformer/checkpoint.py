"""Checkpoint files: a JSON manifest plus one little-endian raw blob."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams
from .numerics import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


def params_hash(params: ModelParams) -> str:
    """SHA-256 over names, shapes and little-endian bytes of all parameters."""
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, params: ModelParams, cfg: ModelConfig, *, step: int = 0,
                    extra_arrays: dict[str, np.ndarray] | None = None, run_config: dict | None = None,
                    meta: dict | None = None) -> str:
    """Write ``manifest.json`` + ``params.bin`` into directory ``path``; returns the params hash."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    arrays = [(n, p.data) for n, p in params.items()] + sorted((extra_arrays or {}).items())
    with open(out / BLOB, "wb") as fh:
        for name, arr in arrays:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset,
                            "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    digest = params_hash(params)
    manifest = {
        "version": FORMAT_VERSION,
        "step": step,
        "hash": digest,
        "model": cfg.to_dict(),
        "run_config": run_config or {},
        "meta": meta or {},
        "arrays": entries,
    }
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return digest


def load_checkpoint(path: str | Path):
    """Return ``(params, cfg, manifest, extra_arrays)``."""
    src = Path(path)
    with open(src / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    cfg = ModelConfig.from_dict(manifest["model"])
    blob = (src / BLOB).read_bytes()
    params, extra = ModelParams(), {}
    for e in manifest["arrays"]:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        if e["name"].startswith("opt."):
            extra[e["name"]] = arr
        else:
            params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    if params_hash(params) != manifest["hash"]:
        raise ValueError("checkpoint blob does not match manifest hash")
    return params, cfg, manifest, extra
