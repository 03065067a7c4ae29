"""Single-file checkpoint container used by every trained component.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header (version,
free-form meta, array descriptors), then the raw little-endian array blobs
in descriptor order. Arrays are stored exactly; loading reproduces bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"RTCKPT01"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    descriptors = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        descriptors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta, "arrays": descriptors},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        payload = fh.read()
    arrays = {}
    for desc in header["arrays"]:
        start, nbytes = desc["offset"], desc["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated (array {desc['name']})")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(desc["dtype"]))
        arrays[desc["name"]] = arr.reshape(desc["shape"]).copy()
    return arrays, header["meta"]


def state_dict_arrays(state_dict) -> dict[str, np.ndarray]:
    """Torch state dict -> plain float/int arrays for the container."""
    return {name: tensor.detach().cpu().numpy() for name, tensor in state_dict.items()}


def load_state_dict(module, arrays: dict[str, np.ndarray]) -> None:
    """Restore container arrays into a torch module, strict on names/shapes."""
    import torch

    expected = module.state_dict()
    missing = expected.keys() - arrays.keys()
    surplus = arrays.keys() - expected.keys()
    if missing or surplus:
        raise CheckpointError(f"state dict mismatch: missing {sorted(missing)}, "
                              f"surplus {sorted(surplus)}")
    module.load_state_dict({name: torch.from_numpy(arrays[name].copy())
                            for name in expected})
