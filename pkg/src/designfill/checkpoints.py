"""Deterministic checkpoint files.

A checkpoint is a zip holding manifest.json plus one .npy per tensor.
Entries are written in sorted order with a fixed timestamp, so saving the
same state twice yields byte-identical files (reproducibility is checked by
hashing).
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .utils import canonical_json

FORMAT_VERSION = 1

_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointFormatError(ValueError):
    pass


def _entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data, compresslevel=6)


def save_checkpoint(path, manifest: dict, arrays: Dict[str, np.ndarray]):
    manifest = dict(manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    manifest["arrays"] = sorted(arrays)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "manifest.json", canonical_json(manifest).encode("utf-8"))
        for name in sorted(arrays):
            ab = io.BytesIO()
            np.save(ab, np.ascontiguousarray(arrays[name]))
            _entry(zf, f"arrays/{name}.npy", ab.getvalue())
    p.write_bytes(buf.getvalue())


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
            arrays = {}
            for name in manifest.get("arrays", []):
                arrays[name] = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")))
    except (KeyError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    return manifest, arrays
