"""Binary tensor files and the training checkpoint container.

Tensor file layout (little endian throughout):

    magic  4 bytes  "A2SI"
    u32    format version (currently 1)
    u32    ndim
    u32*   dims, row-major
    f64*   payload; complex tensors store the real plane then the
           imaginary plane, so their payload is twice prod(dims) values

A checkpoint is a single file holding a text header of `meta` key/value
lines followed by named tensor blocks in the layout above. Writing is
fully deterministic (sorted keys), which the byte-identical-rerun
acceptance check relies on.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"A2SI"
TENSOR_VERSION = 1
_CHECKPOINT_HEADER = b"AGENTREG-CHECKPOINT 1\n"


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        payload = np.ascontiguousarray(arr.real, dtype="<f8").tobytes() + \
            np.ascontiguousarray(arr.imag, dtype="<f8").tobytes()
    else:
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


def tensor_from_bytes(raw: bytes, context: str = "<bytes>") -> np.ndarray:
    try:
        if raw[:4] != TENSOR_MAGIC:
            raise DataError(f"{context}: bad magic {raw[:4]!r}")
        version, ndim = struct.unpack_from("<II", raw, 4)
        if version != TENSOR_VERSION:
            raise DataError(f"{context}: unsupported tensor version {version}")
        dims = struct.unpack_from(f"<{ndim}I", raw, 12)
        offset = 12 + 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        payload = np.frombuffer(raw, dtype="<f8", offset=offset)
        if payload.size == count:
            return payload.reshape(dims).astype(np.float64)
        if payload.size == 2 * count:
            real = payload[:count].reshape(dims)
            imag = payload[count:].reshape(dims)
            return (real + 1j * imag).astype(np.complex128)
        raise DataError(
            f"{context}: payload holds {payload.size} values, expected "
            f"{count} (real) or {2 * count} (complex)")
    except struct.error as exc:
        raise DataError(f"{context}: truncated tensor data ({exc})") from exc


def save_tensor(path, arr: np.ndarray) -> None:
    path = Path(path)
    try:
        path.write_bytes(tensor_bytes(arr))
    except OSError as exc:
        raise DataError(f"cannot write tensor file {path}: {exc}") from exc


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    return tensor_from_bytes(raw, context=str(path))


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    path = Path(path)
    chunks = [_CHECKPOINT_HEADER]
    for key in sorted(meta):
        value = meta[key]
        chunks.append(f"meta {key} {value}\n".encode())
    for name in sorted(tensors):
        block = tensor_bytes(tensors[name])
        chunks.append(f"tensor {name} {len(block)}\n".encode())
        chunks.append(block)
    chunks.append(b"end\n")
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(_CHECKPOINT_HEADER):
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(_CHECKPOINT_HEADER)
    meta: dict = {}
    tensors: dict = {}
    while pos < len(raw):
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode()
        pos = nl + 1
        if line == "end":
            return meta, tensors
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, size = rest.rsplit(" ", 1)
            size = int(size)
            tensors[name] = tensor_from_bytes(raw[pos:pos + size],
                                              context=f"{path}:{name}")
            pos += size
        else:
            raise DataError(f"{path}: unknown checkpoint record {kind!r}")
    raise DataError(f"{path}: missing end marker")
