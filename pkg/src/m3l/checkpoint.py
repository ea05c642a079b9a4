"""Checkpoint archive: one ``.npz`` holding flat float arrays plus a manifest.

Keys:

* ``weights/<name>``  learnable tensors (encoder and FC classifier)
* ``stats/<name>``    BN running mean / variance
* ``memory/<domain>`` identity centroid matrix of one source domain
* ``__manifest__``    JSON: shapes, dtypes, layer names, memory m and tau,
  the resolved experiment config, iteration and epoch

Arrays are stored at full float64 precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderParams
from .memory import IdentityMemory

FORMAT = "m3l-checkpoint/1"


def pack(params: EncoderParams, memories: dict[int, IdentityMemory] | None = None, extra: dict | None = None):
    arrays: dict[str, np.ndarray] = {}
    manifest = {"format": FORMAT, "weights": {}, "stats": {}, "memories": {}}
    for group, tensors in (("weights", params.weights), ("stats", params.stats)):
        for name, t in tensors.items():
            a = t.detach().cpu().numpy()
            arrays[f"{group}/{name}"] = a
            manifest[group][name] = {"shape": list(a.shape), "dtype": str(a.dtype)}
    for domain_id, mem in (memories or {}).items():
        a = mem.centroids.detach().cpu().numpy()
        arrays[f"memory/{domain_id}"] = a
        manifest["memories"][str(domain_id)] = {
            "shape": list(a.shape),
            "momentum": mem.momentum,
            "temperature": mem.temperature,
        }
    manifest.update(extra or {})
    return arrays, manifest


def save_archive(path, params, memories=None, extra=None) -> Path:
    path = Path(path)
    arrays, manifest = pack(params, memories, extra)
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def save_checkpoint(path, state) -> Path:
    extra = {"config": state.config.to_dict(), "iteration": state.iteration, "epoch": state.epoch}
    return save_archive(path, state.params, state.memories, extra)


def load_checkpoint(path) -> tuple[EncoderParams, dict[int, IdentityMemory], dict]:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: not an {FORMAT} archive")
        weights = {k: torch.from_numpy(z[f"weights/{k}"].copy()).requires_grad_(True) for k in manifest["weights"]}
        stats = {k: torch.from_numpy(z[f"stats/{k}"].copy()) for k in manifest["stats"]}
        memories = {}
        for key, meta in manifest["memories"].items():
            memories[int(key)] = IdentityMemory(
                int(key), torch.from_numpy(z[f"memory/{key}"].copy()), meta["momentum"], meta["temperature"]
            )
    return EncoderParams(weights, stats), memories, manifest
