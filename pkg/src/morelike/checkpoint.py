"""Checkpoint directory format: manifest.json + weights.bin.

The manifest lists every tensor (name, shape, dtype, byte offset/length in
the blob) along with a config echo, the iteration count, the rng state, and
optional extra training state. Weights are little-endian float32 concatenated
in manifest entry order; save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine import Tensor

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    iteration: int
    config: dict
    rng_state: dict | None
    arrays: dict[str, np.ndarray]
    extra: dict


def save_checkpoint(
    path: str,
    tensors: dict,
    config: dict,
    iteration: int,
    rng_state: dict | None,
    kind: str,
    extra: dict | None = None,
) -> str:
    os.makedirs(path, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoint tensors must be float32, got {arr.dtype} for {name!r}"
            )
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": offset,
                "length": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "kind": kind,
        "iteration": int(iteration),
        "config": config,
        "rng_state": rng_state,
        "extra": extra or {},
        "entries": entries,
    }
    with open(os.path.join(path, WEIGHTS), "wb") as f:
        f.write(b"".join(blobs))
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(os.path.join(path, MANIFEST)) as f:
            manifest = json.load(f)
        with open(os.path.join(path, WEIGHTS), "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"not a checkpoint directory: {path} ({e})") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {path}: {e}") from None
    for key in ("kind", "iteration", "config", "entries"):
        if key not in manifest:
            raise CheckpointError(f"manifest missing {key!r}")
    total = sum(e["length"] for e in manifest["entries"])
    if total != len(blob):
        raise CheckpointError(
            f"weight blob length {len(blob)} does not match manifest total {total}"
        )
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["dtype"] != "f32" or count * 4 != e["length"]:
            raise CheckpointError(f"inconsistent entry for {e['name']!r}")
        raw = blob[e["offset"] : e["offset"] + e["length"]]
        arrays[e["name"]] = (
            np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        )
    return Checkpoint(
        kind=manifest["kind"],
        iteration=manifest["iteration"],
        config=manifest["config"],
        rng_state=manifest.get("rng_state"),
        arrays=arrays,
        extra=manifest.get("extra", {}),
    )


def assign_from_arrays(named: dict[str, Tensor], arrays: dict[str, np.ndarray],
                       prefix: str = "") -> None:
    """Copy checkpoint arrays into live tensors by name; shapes must match."""
    for name, tensor in named.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {arr.shape} vs model {tensor.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
