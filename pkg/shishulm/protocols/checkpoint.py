"""
Anything dealing with packing and unpacking checkpoint files.

Layout (all integers little-endian)::

    magic        4 octets  b"SHLM"
    version      u16
    config_len   u32
    config       config_len octets, canonical JSON of the ModelConfig
    n_records    u32
    n_records x
        name_len u16
        name     name_len octets, UTF-8 parameter name
        dtype    u8  (CheckpointDtype)
        ndim     u8
        dims     ndim x u32
        payload  row-major little-endian values
    crc32        u32 over everything before it

Shared ShishuMLP weights are stored once under their group name (``blocks.shishu_<g>...``) and a
tied output head is not stored at all.
"""

import json
import struct
import zlib
from enum import IntEnum
from typing import Dict, Tuple

import numpy as np
import torch
from loguru import logger

from ..model.config import ModelConfig
from ..model.transformer import ShishuLM
from .atomic import PathLike, atomic_write
from .config_file import canonical_json

MAGIC = b"SHLM"
VERSION = 1

_HEADER_FMT = "<4sH"
_U32 = "<I"
_U16 = "<H"
_RECORD_FMT = "<BB"


class CheckpointError(Exception):
    """Error with a checkpoint file"""


class CheckpointDtype(IntEnum):
    """Payload element types."""

    F32 = 0
    F64 = 1

    @property
    def numpy_dtype(self) -> str:
        """str: Little-endian numpy dtype string."""

        return "<f4" if self == CheckpointDtype.F32 else "<f8"

    @property
    def torch_dtype(self) -> torch.dtype:
        """torch.dtype: Matching torch dtype."""

        return torch.float32 if self == CheckpointDtype.F32 else torch.float64

    @classmethod
    def from_torch(cls, dtype: torch.dtype):
        """Make an object from a torch dtype."""

        if dtype == torch.float32:
            return cls.F32
        if dtype == torch.float64:
            return cls.F64
        raise CheckpointError(f"cannot store dtype {dtype}")


def pack_checkpoint(config: ModelConfig, tensors: Dict[str, torch.Tensor]) -> bytes:
    """Pack a config and named tensors into checkpoint bytes."""

    config_raw = canonical_json(config.to_dict()).encode()
    raw = struct.pack(_HEADER_FMT, MAGIC, VERSION)
    raw += struct.pack(_U32, len(config_raw)) + config_raw
    raw += struct.pack(_U32, len(tensors))

    for name, tensor in tensors.items():
        dtype = CheckpointDtype.from_torch(tensor.dtype)
        name_raw = name.encode()
        raw += struct.pack(_U16, len(name_raw)) + name_raw
        raw += struct.pack(_RECORD_FMT, dtype.value, tensor.dim())
        raw += struct.pack(f"<{tensor.dim()}I", *tensor.shape)
        values = tensor.detach().cpu().contiguous().numpy()
        raw += values.astype(dtype.numpy_dtype, copy=False).tobytes()

    raw += zlib.crc32(raw, 0).to_bytes(4, "little")
    return raw


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        out = self.raw[self.offset : self.offset + size]
        self.offset += size
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_checkpoint(raw: bytes) -> Tuple[ModelConfig, Dict[str, torch.Tensor]]:
    """
    Unpack checkpoint bytes.

    Raises
    ------
    CheckpointError
        Bad magic, unsupported version, bad CRC, truncated data or an invalid config.
    """

    if len(raw) < struct.calcsize(_HEADER_FMT) + 4:
        raise CheckpointError("checkpoint is too short")

    body, crc = raw[:-4], raw[-4:]
    if zlib.crc32(body, 0).to_bytes(4, "little") != crc:
        raise CheckpointError("checkpoint CRC check failed")

    reader = _Reader(body)
    magic, version = reader.unpack(_HEADER_FMT)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")

    (config_len,) = reader.unpack(_U32)
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(config_len).decode()))
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"invalid embedded config: {e}") from e

    (n_records,) = reader.unpack(_U32)
    tensors = {}
    for _ in range(n_records):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode()
        tag, ndim = reader.unpack(_RECORD_FMT)
        try:
            dtype = CheckpointDtype(tag)
        except ValueError:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        dims = reader.unpack(f"<{ndim}I")
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = reader.take(count * np.dtype(dtype.numpy_dtype).itemsize)
        values = np.frombuffer(payload, dtype=dtype.numpy_dtype).reshape(dims)
        tensors[name] = torch.tensor(values, dtype=dtype.torch_dtype)

    if reader.offset != len(body):
        raise CheckpointError(f"{len(body) - reader.offset} trailing octets in checkpoint")

    return config, tensors


def save_checkpoint(model: ShishuLM, path: PathLike):
    """Write a model's config and weights atomically."""

    atomic_write(path, pack_checkpoint(model.config, model.state_dict()))
    logger.info(f"wrote checkpoint {path}")


def load_checkpoint(path: PathLike) -> Tuple[ModelConfig, ShishuLM]:
    """
    Read a checkpoint into a new model.

    Raises
    ------
    CheckpointError
        The file is corrupt, has another format version or its tensors do not match the
        embedded config.
    """

    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    config, tensors = unpack_checkpoint(raw)

    model = ShishuLM(config)
    dtypes = {t.dtype for t in tensors.values()}
    if len(dtypes) == 1:
        model = model.to(dtypes.pop())

    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint tensors do not match config: missing {missing}, unexpected {extra}"
        )
    for name, tensor in tensors.items():
        if tensor.shape != expected[name].shape:
            raise CheckpointError(
                f"{name} has shape {tuple(tensor.shape)}, config expects "
                f"{tuple(expected[name].shape)}"
            )

    model.load_state_dict(tensors)
    return config, model
