"""Flat key->array checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header listing ``{key, shape, offset, nbytes}`` per entry plus free-form
metadata, then the concatenated little-endian float64 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import bnn, optim

MAGIC = b"PACSDE\x00\x01"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for key, value in arrays.items():
        arr = np.asarray(value, dtype="<f8")
        entries.append(
            {"key": key, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        )
        blobs.append(arr.tobytes())  # tobytes always emits C order
        offset += arr.nbytes
    header = json.dumps(
        {"version": 1, "meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for key {entry['key']!r}")
        flat = np.frombuffer(payload[start:start + nbytes], dtype="<f8")
        arrays[entry["key"]] = flat.reshape(entry["shape"]).astype(np.float64)
    return arrays, header.get("meta", {})


def save_training_state(
    path,
    posterior: bnn.WeightPosterior,
    adam: optim.AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """Checkpoint the posterior (and optionally optimizer state) with metadata."""
    meta = dict(meta or {})
    meta["layer_widths"] = list(posterior.arch.layer_widths)
    meta["activation"] = posterior.arch.hidden_activation
    meta["time_input"] = posterior.arch.time_input
    arrays = dict(posterior.to_flat_dict())
    if adam is not None:
        meta["adam.lr"] = adam.lr
        for key, arr in adam.m.items():
            arrays[f"adam.m.{key}"] = arr
        for key, arr in adam.v.items():
            arrays[f"adam.v.{key}"] = arr
        arrays["adam.tau"] = np.asarray(float(adam.tau))
    write_arrays(path, arrays, meta)


def load_training_state(path) -> tuple[bnn.WeightPosterior, optim.AdamState | None, dict]:
    arrays, meta = read_arrays(path)
    try:
        arch = bnn.MlpArch(
            layer_widths=tuple(int(w) for w in meta["layer_widths"]),
            hidden_activation=meta.get("activation", "softplus"),
            time_input=bool(meta.get("time_input", False)),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing architecture metadata ({exc})") from None
    posterior = bnn.WeightPosterior.from_flat_dict(arch, arrays)
    adam = None
    if "adam.tau" in arrays:
        adam = optim.AdamState(lr=float(meta.get("adam.lr", 1e-3)),
                               tau=int(round(float(arrays["adam.tau"]))))
        for key in posterior.to_flat_dict():
            adam.m[key] = np.array(arrays[f"adam.m.{key}"])
            adam.v[key] = np.array(arrays[f"adam.v.{key}"])
    return posterior, adam, meta


def checkpoint_path(directory, label: str) -> Path:
    return Path(directory) / f"checkpoint_{label}.ckpt"
