"""Binary tensor files and layer checkpoints.

Tensor file layout (all integers little-endian)::

    16 bytes  magic  b"SWTENSR1" padded with NUL bytes
    u32       rank
    u32*rank  dims
    u8        dtype tag (0 = f32, 1 = f64)
    ...       raw little-endian scalars, row-major

A checkpoint is one file: a 16-byte ``SWCKPT01`` magic, a u32 manifest
length, the UTF-8 JSON manifest, then one tensor record per field in the
order listed under ``"fields"`` in the manifest.
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .errors import FileError, FormatError
from .sw_layer import SwConfig, SwState

TENSOR_MAGIC = b"SWTENSR1".ljust(16, b"\0")
CHECKPOINT_MAGIC = b"SWCKPT01".ljust(16, b"\0")
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_OF:
        arr = arr.astype(np.float64)
    tag = _TAG_OF[arr.dtype]
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", tag)
    return header + np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()


def _read_exact(buf: io.BytesIO, n: int, what: str) -> bytes:
    offset = buf.tell()
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}", offset)
    return data


def _decode_from(buf: io.BytesIO) -> np.ndarray:
    start = buf.tell()
    if _read_exact(buf, 16, "magic") != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", start)
    (rank,) = struct.unpack("<I", _read_exact(buf, 4, "rank"))
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}", start + 16)
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, "dims"))
    tag_offset = buf.tell()
    (tag,) = struct.unpack("<B", _read_exact(buf, 1, "dtype tag"))
    if tag not in _TAGS:
        raise FormatError(f"unknown dtype tag {tag}", tag_offset)
    dt = _TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(buf, count * dt.itemsize, "payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = _decode_from(buf)
    if buf.tell() != len(data):
        raise FormatError("trailing bytes after tensor payload", buf.tell())
    return arr


def write_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FileError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc


def read_tensor(path) -> np.ndarray:
    return decode_tensor(_read_bytes(path))


def _state_fields(state: SwState) -> list:
    fields = [
        ("lambda_mean", state.lambda_mean),
        ("lambda_cov", state.lambda_cov),
        ("gamma", state.gamma),
        ("beta", state.beta),
    ]
    fields += [(f"running_mean[{g}]", m) for g, m in enumerate(state.running_mean)]
    fields += [(f"running_cov[{g}]", m) for g, m in enumerate(state.running_cov)]
    return fields


def save_checkpoint(path, state: SwState, config: SwConfig) -> None:
    fields = _state_fields(state)
    manifest = dict(config.to_dict(), step_count=int(state.step_count), fields=[name for name, _ in fields])
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in fields:
            fh.write(encode_tensor(arr))


def load_checkpoint(path) -> tuple[SwState, SwConfig]:
    data = _read_bytes(path)
    buf = io.BytesIO(data)
    if _read_exact(buf, 16, "checkpoint magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (length,) = struct.unpack("<I", _read_exact(buf, 4, "manifest length"))
    manifest_offset = buf.tell()
    try:
        manifest = json.loads(_read_exact(buf, length, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", manifest_offset) from exc
    tensors = {}
    for name in manifest.get("fields", []):
        tensors[name] = _decode_from(buf)
    if buf.tell() != len(data):
        raise FormatError("trailing bytes after checkpoint", buf.tell())
    config = SwConfig.from_dict(manifest)
    try:
        n_groups = sum(1 for name in tensors if name.startswith("running_mean["))
        state = SwState(
            lambda_mean=tensors["lambda_mean"],
            lambda_cov=tensors["lambda_cov"],
            gamma=tensors["gamma"],
            beta=tensors["beta"],
            running_mean=np.stack([tensors[f"running_mean[{g}]"] for g in range(n_groups)]),
            running_cov=np.stack([tensors[f"running_cov[{g}]"] for g in range(n_groups)]),
            step_count=int(manifest.get("step_count", 0)),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing field {exc.args[0]!r}") from exc
    return state, config
