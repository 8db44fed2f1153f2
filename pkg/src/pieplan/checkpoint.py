"""Binary checkpoint archive: parameter name -> (shape, float64 LE values).

Header records a format version and the model configuration hash so a
checkpoint can be rejected when loaded against a different architecture.
Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"PPCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, named_params: Iterable[tuple[str, "np.ndarray"]],
                    config_hash: str) -> None:
    """Write parameters in iteration order (order is part of the byte layout)."""
    items = [(name, np.ascontiguousarray(arr, dtype=np.float64)) for name, arr in named_params]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        h = config_hash.encode("utf-8")
        fh.write(struct.pack("<H", len(h)))
        fh.write(h)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict, str]:
    """Return ({name: float64 array}, config_hash). Rejects version mismatch."""
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<H", take(2))
    config_hash = take(hlen).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
        params[name] = arr
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return params, config_hash


def load_into(model, path, expected_hash: str | None = None) -> None:
    """Restore a model's parameters in place from a checkpoint file."""
    params, config_hash = load_checkpoint(path)
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"{path}: config hash {config_hash} does not match expected {expected_hash}")
    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(params))
    extra = sorted(set(params) - set(model_params))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter mismatch, missing={missing} extra={extra}")
    for name, tensor in model_params.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, model expects {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(arr)
