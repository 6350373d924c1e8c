"""Versioned on-disk container for trained parameters.

Layout, in order:

* 8-byte magic ``AGGNETv1``
* little-endian uint32 header length
* canonical JSON header (sorted keys, no whitespace): variant, class
  count, depths, seed, epoch, history length, and the tensor name/shape
  manifest
* every parameter tensor as little-endian float64, in declaration order
* little-endian uint32 CRC-32 of the tensor payload

Everything about the model is recoverable from the file alone.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import AggNetConfig, param_shapes
from .ops import DTYPE

MAGIC = b"AGGNETv1"


@dataclass(frozen=True)
class Checkpoint:
    config: AggNetConfig
    params: dict
    seed: int
    epoch: int
    history_len: int


def _header(config, params, seed, epoch, history_len):
    return {
        "variant": config.variant,
        "class_count": config.class_count,
        "stem_depth": config.stem_depth,
        "module_depths": list(config.module_depths),
        "input_channels": config.input_channels,
        "seed": int(seed),
        "epoch": int(epoch),
        "history_len": int(history_len),
        "tensors": [[name, list(shape)] for name, shape in param_shapes(config)],
    }


def save_checkpoint(path, config, params, seed, epoch, history_len=0):
    """Write params to `path`; tensors are stored float64 regardless of DTYPE."""
    header = _header(config, params, seed, epoch, history_len)
    for name, shape in param_shapes(config):
        if name not in params:
            raise DataError(f"parameter table is missing {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise DataError(
                f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(params[name], dtype="<f8").tobytes()
        for name, _ in param_shapes(config))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Read a checkpoint back; raises DataError on any structural defect."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (head_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    head_start = len(MAGIC) + 4
    if len(blob) < head_start + head_len + 4:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[head_start:head_start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unparseable header ({exc})") from exc
    try:
        config = AggNetConfig(
            variant=header["variant"],
            class_count=header["class_count"],
            stem_depth=header["stem_depth"],
            module_depths=tuple(header["module_depths"]),
            input_channels=header["input_channels"],
        )
        declared = [(n, tuple(s)) for n, s in header["tensors"]]
        seed, epoch = int(header["seed"]), int(header["epoch"])
        history_len = int(header["history_len"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: incomplete header ({exc})") from exc
    if declared != [(n, tuple(s)) for n, s in param_shapes(config)]:
        raise DataError(f"{path}: tensor manifest disagrees with the architecture")
    n_elems = sum(int(np.prod(s)) for _, s in declared)
    payload_start = head_start + head_len
    payload_end = payload_start + 8 * n_elems
    if len(blob) != payload_end + 4:
        raise DataError(
            f"{path}: expected {payload_end + 4} bytes, file has {len(blob)}")
    payload = blob[payload_start:payload_end]
    (crc,) = struct.unpack_from("<I", blob, payload_end)
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise DataError(f"{path}: payload CRC mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    params, offset = {}, 0
    for name, shape in declared:
        size = int(np.prod(shape))
        params[name] = flat[offset:offset + size].reshape(shape).astype(DTYPE)
        offset += size
    return Checkpoint(config=config, params=params, seed=seed, epoch=epoch,
                      history_len=history_len)
