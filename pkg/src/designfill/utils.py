"""Small shared helpers: canonical JSON, hashing, determinism, run metadata."""

from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path


class NonFiniteLoss(RuntimeError):
    """Training loss became NaN/inf; raised before the optimizer step."""


def canonical_json(obj) -> str:
    """Stable byte form for hashing and manifests: sorted keys, no spaces."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def set_determinism(seed: int, deterministic: bool = True):
    """Seed python/numpy/torch. In deterministic mode torch runs single
    threaded so reductions are order-stable across runs of the same build."""
    import numpy as np

    random.seed(seed)
    np.random.seed(seed % (2**32))
    try:
        import torch
    except ImportError:
        return
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def count_params(module) -> int:
    return sum(int(p.numel()) for p in module.parameters())


def write_text(path, text: str):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")
