"""Parameter checkpoints: one zip holding ``manifest.json`` and ``params.bin``.

``params.bin`` is the concatenation of every parameter as little-endian
float64 in manifest order; the manifest lists ``name``, ``shape`` and byte
``offset`` for each entry, plus free-form ``meta``.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

FORMAT = "necho-checkpoint/1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value, dtype=_LE_F64, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "dtype": "<f8", "total_bytes": offset,
                "params": entries, "meta": meta or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep the archive byte-stable across runs
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        info = zipfile.ZipInfo("params.bin", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, b"".join(chunks))
    return path


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, meta)``; arrays are native-endian float64 copies."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("params.bin")
    except (KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{path}: params.bin has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=_LE_F64, count=count, offset=entry["offset"])
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
    return params, manifest.get("meta", {})


def check_compatible(manifest_params: Mapping[str, tuple], expected: Mapping[str, tuple]) -> None:
    """Raise listing every parameter whose presence or shape disagrees."""
    problems = []
    for name, shape in expected.items():
        if name not in manifest_params:
            problems.append(f"{name}: missing from checkpoint")
        elif tuple(manifest_params[name]) != tuple(shape):
            problems.append(f"{name}: checkpoint {tuple(manifest_params[name])} vs model {tuple(shape)}")
    for name in manifest_params:
        if name not in expected:
            problems.append(f"{name}: not a model parameter")
    if problems:
        raise CheckpointError("checkpoint does not match model: " + "; ".join(problems))
