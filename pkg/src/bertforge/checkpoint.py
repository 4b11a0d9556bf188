"""Named-tensor checkpoint files with exact (bitwise) round-trip.

Layout: 4 magic bytes, u32 format version, u32 header length, a UTF-8
JSON header (model config, free-form extra metadata, and a tensor
directory of name/shape/offset), then the raw little-endian f32 payloads
back to back. Tensors are written in sorted name order so identical state
always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import ShapeError, Tensor
from .model import ModelConfig

MAGIC = b"BFCK"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointError(RuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file, or its header is malformed."""


class CheckpointVersionError(CheckpointError):
    """Written by an incompatible format version."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the header or a tensor payload does."""


class UnknownTensorError(CheckpointError):
    """Checkpoint names a tensor the target model does not have."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint config differs from the one the caller expects."""


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    params: Mapping[str, Tensor | np.ndarray],
    config: ModelConfig,
    path: str,
    extra: dict | None = None,
) -> None:
    arrays = {}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        # astype keeps 0-d shapes intact; tobytes() serializes in C order
        arrays[name] = arr.astype("<f4", copy=False)
    directory = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps(
        {"config": config.to_dict(), "extra": extra or {}, "tensors": directory},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_U32.pack(FORMAT_VERSION))
        f.write(_U32.pack(len(header)))
        f.write(header)
        for name in sorted(arrays):
            f.write(arrays[name].tobytes())


def load_checkpoint(path: str, expect_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 2 * _U32.size:
        raise TruncatedCheckpointError(f"{path}: shorter than the fixed prologue")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a checkpoint file")
    pos = len(MAGIC)
    (version,) = _U32.unpack_from(blob, pos)
    pos += _U32.size
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    (header_len,) = _U32.unpack_from(blob, pos)
    pos += _U32.size
    if len(blob) < pos + header_len:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
        extra = header.get("extra", {})
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointFormatError(f"{path}: malformed header ({err})") from err
    payload = blob[pos + header_len :]
    tensors = {}
    for entry in directory:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if offset + nbytes > len(payload):
            raise TruncatedCheckpointError(
                f"{path}: payload for tensor {name} ends past end of file"
            )
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
            .reshape(shape)
            .copy()
        )
    if expect_config is not None and config != expect_config:
        raise ConfigMismatchError(
            f"{path}: checkpoint config {config.to_dict()} does not match "
            f"expected {expect_config.to_dict()}"
        )
    return Checkpoint(config=config, tensors=tensors, extra=extra)


def assign_parameters(
    params: Mapping[str, Tensor],
    state: Mapping[str, np.ndarray],
    require_all: bool = True,
) -> None:
    """Copy checkpoint arrays into live parameters, in place and bitwise."""
    for name, arr in state.items():
        if name not in params:
            raise UnknownTensorError(f"checkpoint tensor {name!r} has no target parameter")
        target = params[name]
        if target.data.shape != arr.shape:
            raise ShapeError(
                f"tensor {name}: checkpoint shape {arr.shape} does not match "
                f"parameter shape {target.data.shape}"
            )
        target.data[...] = arr
    if require_all:
        missing = sorted(set(params) - set(state))
        if missing:
            raise UnknownTensorError(f"checkpoint is missing parameters: {missing}")
