"""Parameter checkpoint archives.

An archive is an uncompressed zip holding ``manifest.json`` and one
``tensors/<name>.f32`` member per tensor: a flat little-endian float32 array.
Integer buffers (BatchNorm step counters) are stored the same way and cast back
on load. Member timestamps are fixed so identical state yields identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_tensors(path, tensors: Mapping[str, torch.Tensor], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False).ravel()
            _write_member(zf, f"tensors/{name}.f32", arr.tobytes())
            entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")})
        manifest = {"format_version": FORMAT_VERSION, **dict(meta or {}), "tensors": entries}
        _write_member(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
    path.write_bytes(buf.getvalue())
    return path


def load_tensors(path):
    """Return ``(manifest, {name: tensor})``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors: Dict[str, torch.Tensor] = {}
        for entry in manifest["tensors"]:
            raw = np.frombuffer(zf.read(f"tensors/{entry['name']}.f32"), dtype="<f4")
            dtype = getattr(torch, entry["dtype"])
            tensors[entry["name"]] = torch.from_numpy(raw.copy()).reshape(entry["shape"]).to(dtype)
    return manifest, tensors


def save_module(path, module: torch.nn.Module, **meta) -> Path:
    return save_tensors(path, module.state_dict(), meta)


def load_module(path, module: torch.nn.Module) -> dict:
    manifest, tensors = load_tensors(path)
    module.load_state_dict(tensors)
    return manifest
