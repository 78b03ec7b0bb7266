"""Checkpoint persistence: JSON manifest plus raw little-endian float64 blob.

The manifest carries a format tag, the model config, a parameter index
(name, shape, offset) and the blob's sha256. Loading verifies size and hash
before any parameter is materialized, so a corrupt blob never yields a
partial model.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .optim import Parameter

FORMAT_TAG = "routedlm-ckpt-v1"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def params_blob(params: dict[str, Parameter]) -> bytes:
    parts = []
    for name, p in params.items():
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def params_hash(params: dict[str, Parameter]) -> str:
    """Content hash over parameter names, shapes and little-endian bytes."""
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(str(tuple(p.data.shape)).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(stem: str | Path, kind: str, config: dict,
                    params: dict[str, Parameter], extra: dict | None = None) -> dict:
    """Write <stem>.json + <stem>.bin; returns the manifest."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = params_blob(params)
    index = []
    offset = 0
    for name, p in params.items():
        nbytes = p.data.size * 8
        index.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += nbytes
    manifest = {
        "format": FORMAT_TAG,
        "kind": kind,
        "config": config,
        "params": index,
        "blob_bytes": offset,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "params_sha256": params_hash(params),
        "extra": extra or {},
    }
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def load_checkpoint(stem: str | Path, expected_kind: str | None = None
                    ) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a checkpoint; returns (manifest, name -> array)."""
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if expected_kind and manifest.get("kind") != expected_kind:
        raise ValueError(f"expected checkpoint kind {expected_kind!r}, "
                         f"found {manifest.get('kind')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"checkpoint blob truncated: {len(blob)} bytes, "
                         f"manifest says {manifest['blob_bytes']}")
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ValueError("checkpoint blob hash mismatch")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = np.ascontiguousarray(arr.reshape(shape))
    return manifest, arrays


def arrays_to_params(arrays: dict[str, np.ndarray], trainable: bool = True
                     ) -> dict[str, Parameter]:
    return {name: Parameter(arr, name, trainable=trainable)
            for name, arr in arrays.items()}
