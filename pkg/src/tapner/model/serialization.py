"""Binary container for model weights and probe parameters.

Layout (little-endian):

    magic      4 bytes   b"EMBW" (model weights) or b"EMBP" (probe)
    version    u32       container format version (1)
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON: config fields + tensor manifest
                         manifest entries: {name, shape, dtype}
    crc32      u32       checksum of the payload bytes
    payload    bytes     tensors, row-major, concatenated in manifest order

Model files store float32 tensors in ``named_parameters()`` order; probe
files store float64 tensors. Integrity is checked on load: short files and
corrupted payloads raise ``ChecksumError``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from ..errors import ChecksumError, ConfigMismatchError
from .config import ModelConfig
from .transformer import TinyDecoderLM

MAGIC_WEIGHTS = b"EMBW"
MAGIC_PROBE = b"EMBP"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


def save_container(
    path: str | Path, magic: bytes, meta: dict, arrays: list[tuple[str, np.ndarray]]
) -> None:
    manifest = []
    payload = bytearray()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder not in ("<", "=", "|"):
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        payload.extend(arr.tobytes())
    meta_blob = json.dumps({**meta, "tensors": manifest}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, FORMAT_VERSION, len(meta_blob)))
        f.write(meta_blob)
        f.write(_CRC.pack(zlib.crc32(bytes(payload))))
        f.write(payload)


def load_container(
    path: str | Path, expect_magic: bytes | None = None
) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ChecksumError(f"{path}: file too short for header")
    magic, version, meta_len = _HEADER.unpack_from(blob, 0)
    if expect_magic is not None and magic != expect_magic:
        raise ConfigMismatchError(
            f"{path}: expected kind {expect_magic!r}, found {magic!r}"
        )
    if version != FORMAT_VERSION:
        raise ConfigMismatchError(f"{path}: unsupported container version {version}")
    off = _HEADER.size
    if len(blob) < off + meta_len + _CRC.size:
        raise ChecksumError(f"{path}: truncated metadata block")
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (crc_expected,) = _CRC.unpack_from(blob, off)
    payload = blob[off + _CRC.size :]
    expected_size = sum(
        int(np.prod(t["shape"], dtype=np.int64)) * np.dtype(t["dtype"]).itemsize
        for t in meta["tensors"]
    )
    if len(payload) != expected_size:
        raise ChecksumError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {expected_size}"
        )
    if zlib.crc32(payload) != crc_expected:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays = {}
    pos = 0
    for t in meta["tensors"]:
        dtype = np.dtype(t["dtype"])
        size = int(np.prod(t["shape"], dtype=np.int64)) * dtype.itemsize
        arrays[t["name"]] = (
            np.frombuffer(payload[pos : pos + size], dtype=dtype)
            .reshape(t["shape"])
            .copy()
        )
        pos += size
    return meta, arrays


def save_model(model: TinyDecoderLM, path: str | Path) -> None:
    arrays = [
        (name, p.detach().to(torch.float32).numpy())
        for name, p in model.named_parameters()
    ]
    save_container(path, MAGIC_WEIGHTS, {"config": model.cfg.as_dict()}, arrays)


def load_model(path: str | Path, expect: ModelConfig | None = None) -> TinyDecoderLM:
    meta, arrays = load_container(path, expect_magic=MAGIC_WEIGHTS)
    cfg = ModelConfig.from_dict(meta["config"])
    if expect is not None and cfg != expect:
        raise ConfigMismatchError(
            f"{path}: stored config {cfg.as_dict()} != expected {expect.as_dict()}"
        )
    model = TinyDecoderLM(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise ConfigMismatchError(f"{path}: missing tensor {name}")
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise ConfigMismatchError(
                    f"{path}: tensor {name} has shape {arrays[name].shape}, "
                    f"expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arrays[name]))
    model.eval()
    model.mark_updated()
    return model
