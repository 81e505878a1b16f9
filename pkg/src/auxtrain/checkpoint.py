"""Checkpoint format: JSON header plus flat little-endian array payload.

Layout: an 8-byte magic, a little-endian uint32 header length, the UTF-8
JSON header (model variant, config, ablation strength, epoch, seed, free-form
extras, and an index of the stored arrays), then the raw array bytes
concatenated in index order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AUXCKPT1"


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    variant: str
    config: dict
    alpha: float
    epoch: int
    seed: int
    arrays: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    index = []
    offset = 0
    blobs = []
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(le.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "variant": ckpt.variant,
            "config": ckpt.config,
            "alpha": ckpt.alpha,
            "epoch": ckpt.epoch,
            "seed": ckpt.seed,
            "extra": ckpt.extra,
            "arrays": index,
        }
    ).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = data[start + header_len :]
    arrays = {}
    for meta in header["arrays"]:
        raw = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        if len(raw) != meta["nbytes"]:
            raise CheckpointError(f"truncated array payload for {meta['name']!r}")
        arrays[meta["name"]] = (
            np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
        )
    return Checkpoint(
        variant=header["variant"],
        config=header["config"],
        alpha=header["alpha"],
        epoch=header["epoch"],
        seed=header["seed"],
        arrays=arrays,
        extra=header.get("extra", {}),
    )
