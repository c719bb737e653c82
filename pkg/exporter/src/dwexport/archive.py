"""Standalone writers for the engine's on-disk formats (.dwm/.dwd) and IDX.

The exporter never imports the engine package; the byte layout is the
only contract the two sides share. Every archive is one little-endian
container: a 4-byte magic, u16 format version, u8 kind code, u8 zero,
canonical-JSON metadata behind a u32 length, a payload of concatenated
C-order tensors behind a u64 length, and a trailing CRC-32 over
metadata + payload. Tensor offsets live in the metadata, and writes are
pure functions of their inputs, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

from .errors import CountMismatchError, RangeError

FORMAT_VERSION = 1
MODEL_MAGIC = b"DWMO"
MODEL_KIND = 1
DATASET_MAGIC = b"DWDS"
DATASET_KIND = 3

_DTYPES = {"u8": "<u1", "i64": "<i8", "f32": "<f4", "f64": "<f8"}


def canonical_json(obj) -> bytes:
    """Stable serialization: sorted keys, no whitespace, no NaN."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class PayloadBuilder:
    """Accumulates tensors and hands back their metadata entries."""

    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray, dtype: str) -> dict:
        data = np.ascontiguousarray(arr.astype(_DTYPES[dtype], copy=False)).tobytes()
        entry = {
            "dtype": dtype,
            "shape": [int(d) for d in arr.shape],
            "offset": self.offset,
            "nbytes": len(data),
        }
        self.chunks.append(data)
        self.offset += len(data)
        return entry

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


def write_archive(path, magic: bytes, kind: int, metadata: dict, payload: bytes) -> None:
    meta = canonical_json(metadata)
    body = bytearray()
    body += magic
    body += struct.pack("<HBB", FORMAT_VERSION, kind, 0)
    body += struct.pack("<I", len(meta))
    body += meta
    body += struct.pack("<Q", len(payload))
    body += payload
    body += struct.pack("<I", zlib.crc32(meta + payload) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(body))


def write_model_archive(path, input_shape, layer_entries, taps, manifest, provenance, payload) -> None:
    metadata = {
        "input_shape": [int(d) for d in input_shape],
        "layers": layer_entries,
        "taps": {k: int(v) for k, v in taps.items()},
        "model_metadata": manifest,
        "provenance": provenance or {},
    }
    write_archive(path, MODEL_MAGIC, MODEL_KIND, metadata, payload)


def quantize_pixels(images) -> np.ndarray:
    """Validate float images in [0,1] (or u8 passthrough) and return u8."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images
    arr = images.astype(np.float64)
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise RangeError("float images must lie in [0, 1]")
    return np.round(arr * 255.0).astype(np.uint8)


def write_dataset_archive(path, images, labels, provenance=None) -> None:
    """Write a .dwd image-classification archive (u8 pixels, u8 labels)."""
    pixels = quantize_pixels(images)
    if pixels.ndim not in (3, 4):
        raise RangeError(f"dataset images must be 3D or 4D, got {pixels.shape}")
    labels = np.asarray(labels)
    if labels.shape != (len(pixels),):
        raise CountMismatchError(f"{len(pixels)} images but {labels.shape} labels")
    if labels.min() < 0 or labels.max() > 255:
        raise RangeError("labels must fit in u8")
    builder = PayloadBuilder()
    tensors = {
        "pixels": builder.add(pixels, "u8"),
        "labels": builder.add(labels.astype(np.uint8), "u8"),
    }
    metadata = {
        "count": int(len(pixels)),
        "scale": 1.0 / 255.0,
        "tensors": tensors,
        "provenance": provenance or {},
    }
    write_archive(path, DATASET_MAGIC, DATASET_KIND, metadata, builder.bytes())


def write_idx_pair(directory, stem: str, images, labels) -> tuple[str, str]:
    """Write big-endian IDX image/label files named <stem>-*-ubyte."""
    import os

    pixels = quantize_pixels(images)
    if pixels.ndim != 3:
        raise RangeError(f"IDX images must be (N, rows, cols), got {pixels.shape}")
    labels = np.asarray(labels)
    if labels.shape != (len(pixels),):
        raise CountMismatchError(f"{len(pixels)} images but {labels.shape} labels")
    n, rows, cols = pixels.shape
    images_path = os.path.join(directory, f"{stem}-images-idx3-ubyte")
    labels_path = os.path.join(directory, f"{stem}-labels-idx1-ubyte")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.astype(np.uint8).tobytes())
    return images_path, labels_path


def read_idx_pair(images_path, labels_path):
    """Read an IDX pair back as (images u8 (N,rows,cols), labels i64)."""
    with open(images_path, "rb") as f:
        blob = f.read()
    magic, n, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != 0x00000803 or len(blob) != 16 + n * rows * cols:
        raise RangeError(f"{images_path}: not a valid IDX image file")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    with open(labels_path, "rb") as f:
        lblob = f.read()
    lmagic, ln = struct.unpack_from(">II", lblob, 0)
    if lmagic != 0x00000801 or len(lblob) != 8 + ln or ln != n:
        raise RangeError(f"{labels_path}: not a matching IDX label file")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return images.copy(), labels
