"""On-disk archives for models (.dwm), targets (.dwt), and datasets (.dwd).

All three share one little-endian container: a 4-byte magic, u16 format
version, u8 kind code, u8 reserved zero, a canonical-JSON metadata block
(u32 length prefix), a payload of concatenated C-order tensors (u64
length prefix), and a trailing CRC-32 over metadata + payload bytes.
Tensor byte ranges and dtypes are declared in the metadata, so readers
never guess offsets. Files must contain exactly the declared bytes;
anything shorter or longer fails as truncated.

Floating payloads are stored little-endian ("<f4"/"<f8"), making the
files byte-identical across platforms. Dataset pixels are stored as u8
with an explicit scale so image archives round-trip exactly.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .correction import CorrectionConfig
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    CountMismatchError,
    OutOfRangeInputError,
    ShapeMismatchError,
    TruncatedError,
    VersionUnsupportedError,
)
from .nn import Layer, Model
from .otcore import TargetDistribution

__all__ = [
    "ArchiveHeader",
    "FORMAT_VERSION",
    "MODEL_EXT",
    "TARGETS_EXT",
    "DATASET_EXT",
    "save_model",
    "load_model",
    "save_targets",
    "load_targets",
    "save_dataset",
    "load_dataset",
    "read_header",
    "read_idx",
    "file_sha256",
    "canonical_json",
]

FORMAT_VERSION = 1
MODEL_EXT = ".dwm"
TARGETS_EXT = ".dwt"
DATASET_EXT = ".dwd"

_MAGICS = {b"DWMO": 1, b"DWTG": 2, b"DWDS": 3}
_KIND_MAGIC = {v: k for k, v in _MAGICS.items()}
_DTYPES = {"u8": "<u1", "i64": "<i8", "f32": "<f4", "f64": "<f8"}


@dataclass(frozen=True)
class ArchiveHeader:
    magic: bytes
    version: int
    kind: int
    metadata: dict


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


class _PayloadBuilder:
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


def _read_tensor(payload: bytes, entry: dict) -> np.ndarray:
    dtype = np.dtype(_DTYPES[entry["dtype"]])
    off, nbytes = int(entry["offset"]), int(entry["nbytes"])
    shape = tuple(int(d) for d in entry["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if nbytes != expected or off < 0 or off + nbytes > len(payload):
        raise TruncatedError(
            f"tensor range [{off}, {off + nbytes}) invalid for payload of {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize, offset=off).reshape(shape)


def _write_archive(path, kind: int, metadata: dict, payload: bytes) -> None:
    meta = canonical_json(metadata)
    body = bytearray()
    body += _KIND_MAGIC[kind]
    body += struct.pack("<HBB", FORMAT_VERSION, kind, 0)
    body += struct.pack("<I", len(meta))
    body += meta
    body += struct.pack("<Q", len(payload))
    body += payload
    body += struct.pack("<I", zlib.crc32(meta + payload) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(body))


def _read_archive(path, expect_magic: bytes):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise TruncatedError(f"{path}: file too short for a header")
    magic = blob[:4]
    if magic not in _MAGICS:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if magic != expect_magic:
        raise BadMagicError(
            f"{path}: expected {expect_magic.decode()} archive, found {magic.decode()}"
        )
    version, kind, reserved = struct.unpack_from("<HBB", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionUnsupportedError(f"{path}: format version {version} unsupported")
    if kind != _MAGICS[magic] or reserved != 0:
        raise BadMagicError(f"{path}: kind byte {kind} inconsistent with magic")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    if len(blob) < pos + meta_len + 8:
        raise TruncatedError(f"{path}: metadata block truncated")
    meta_bytes = blob[pos : pos + meta_len]
    pos += meta_len
    (payload_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) != pos + payload_len + 4:
        raise TruncatedError(
            f"{path}: file length {len(blob)} != declared {pos + payload_len + 4}"
        )
    payload = blob[pos : pos + payload_len]
    (crc,) = struct.unpack_from("<I", blob, pos + payload_len)
    actual = zlib.crc32(meta_bytes + payload) & 0xFFFFFFFF
    if crc != actual:
        raise ChecksumMismatchError(
            f"{path}: checksum {actual:08x} != stored {crc:08x}"
        )
    try:
        metadata = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedError(f"{path}: metadata is not valid JSON: {exc}") from exc
    header = ArchiveHeader(magic=magic, version=version, kind=kind, metadata=metadata)
    return header, payload


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def _revive(v):
    if isinstance(v, list):
        return tuple(_revive(x) for x in v)
    return v


# --- models ----------------------------------------------------------------

_TENSOR_DTYPES = {
    "target_t": "f64",
    "target_variance": "f64",
}


def save_model(path, model: Model, provenance: dict | None = None) -> None:
    """Write a model archive; weights as f32, correction targets as f64."""
    builder = _PayloadBuilder()
    layer_entries = []
    for layer in model.layers:
        scalars: dict = {}
        tensors: dict = {}
        if layer.kind == "correction":
            target: TargetDistribution = layer.params["target"]
            cfg: CorrectionConfig = layer.params["cfg"]
            scalars.update(
                lambda1=cfg.lambda1,
                lambda2=cfg.lambda2,
                n_iter=cfg.n_iter,
                preserve_zeros=cfg.preserve_zeros,
                zero_tolerance=cfg.zero_tolerance,
                target_layer_id=target.layer_id,
                target_count=target.sample_count,
            )
            tensors["target_t"] = builder.add(target.t, "f64")
            tensors["target_variance"] = builder.add(target.variance, "f64")
        else:
            for key, value in layer.params.items():
                if isinstance(value, np.ndarray):
                    tensors[key] = builder.add(value, _TENSOR_DTYPES.get(key, "f32"))
                elif value is not None:
                    scalars[key] = _jsonable(value)
        layer_entries.append(
            {
                "kind": layer.kind,
                "name": layer.name,
                "source": layer.source,
                "shortcut": layer.shortcut,
                "scalars": scalars,
                "tensors": tensors,
            }
        )
    metadata = {
        "input_shape": list(model.input_shape),
        "layers": layer_entries,
        "taps": {k: int(v) for k, v in model.taps.items()},
        "model_metadata": _jsonable_dict(model.metadata),
        "provenance": _jsonable_dict(provenance or {}),
    }
    _write_archive(path, 1, metadata, builder.bytes())


def _jsonable_dict(d: dict) -> dict:
    return {str(k): _jsonable(v) for k, v in d.items()}


def load_model(path) -> Model:
    header, payload = _read_archive(path, b"DWMO")
    meta = header.metadata
    layers = []
    for entry in meta["layers"]:
        tensors = {k: _read_tensor(payload, v).copy() for k, v in entry["tensors"].items()}
        scalars = {k: _revive(v) for k, v in entry["scalars"].items()}
        if entry["kind"] == "correction":
            cfg = CorrectionConfig(
                lambda1=scalars["lambda1"],
                lambda2=scalars["lambda2"],
                n_iter=int(scalars["n_iter"]),
                preserve_zeros=bool(scalars["preserve_zeros"]),
                zero_tolerance=scalars["zero_tolerance"],
            )
            target = TargetDistribution(
                t=tensors["target_t"],
                sample_count=int(scalars["target_count"]),
                variance=tensors["target_variance"],
                layer_id=scalars["target_layer_id"],
            )
            params = {"target": target, "cfg": cfg}
        else:
            params = {**scalars, **tensors}
        layers.append(
            Layer(
                kind=entry["kind"],
                params=params,
                name=entry["name"],
                source=entry["source"],
                shortcut=entry["shortcut"],
            )
        )
    return Model(
        layers=layers,
        input_shape=tuple(meta["input_shape"]),
        taps={k: int(v) for k, v in meta["taps"].items()},
        metadata=meta.get("model_metadata", {}),
    )


# --- targets ---------------------------------------------------------------


def save_targets(path, targets: dict, provenance: dict | None = None) -> None:
    """Write a target archive mapping layer ids to rank profiles (f64)."""
    builder = _PayloadBuilder()
    entries = {}
    for layer_id, target in sorted(targets.items()):
        entries[layer_id] = {
            "n": target.n,
            "count": target.sample_count,
            "tensors": {
                "t": builder.add(target.t, "f64"),
                "variance": builder.add(target.variance, "f64"),
            },
        }
    metadata = {"targets": entries, "provenance": _jsonable_dict(provenance or {})}
    _write_archive(path, 2, metadata, builder.bytes())


def load_targets(path) -> dict:
    header, payload = _read_archive(path, b"DWTG")
    out = {}
    for layer_id, entry in header.metadata["targets"].items():
        t = _read_tensor(payload, entry["tensors"]["t"]).copy()
        variance = _read_tensor(payload, entry["tensors"]["variance"]).copy()
        if len(t) != int(entry["n"]):
            raise CountMismatchError(
                f"target '{layer_id}': tensor length {len(t)} != declared n {entry['n']}"
            )
        out[layer_id] = TargetDistribution(
            t=t,
            sample_count=int(entry["count"]),
            variance=variance,
            layer_id=layer_id,
        )
    return out


# --- datasets ---------------------------------------------------------------


def save_dataset(path, images, labels, provenance: dict | None = None) -> None:
    """Write an image-classification dataset archive.

    Accepts float images in [0,1] (quantized to u8) or u8 images stored
    as-is; labels must fit in u8. Shapes: (N,H,W) or (N,H,W,C).
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim not in (3, 4):
        raise ShapeMismatchError(f"dataset images must be 3D or 4D, got {images.shape}")
    if labels.shape != (len(images),):
        raise CountMismatchError(
            f"{len(images)} images but {labels.shape} labels"
        )
    if images.dtype == np.uint8:
        pixels = images
    else:
        arr = images.astype(np.float64)
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise OutOfRangeInputError("float images must lie in [0, 1]")
        pixels = np.round(arr * 255.0).astype(np.uint8)
    if labels.min() < 0 or labels.max() > 255:
        raise OutOfRangeInputError("labels must fit in u8")
    builder = _PayloadBuilder()
    tensors = {
        "pixels": builder.add(pixels, "u8"),
        "labels": builder.add(labels.astype(np.uint8), "u8"),
    }
    metadata = {
        "count": int(len(images)),
        "scale": 1.0 / 255.0,
        "tensors": tensors,
        "provenance": _jsonable_dict(provenance or {}),
    }
    _write_archive(path, 3, metadata, builder.bytes())


def load_dataset(path):
    """Returns (images f32 in [0,1], labels i64, metadata dict)."""
    header, payload = _read_archive(path, b"DWDS")
    meta = header.metadata
    pixels = _read_tensor(payload, meta["tensors"]["pixels"])
    labels = _read_tensor(payload, meta["tensors"]["labels"]).astype(np.int64)
    if len(pixels) != meta["count"] or len(labels) != meta["count"]:
        raise CountMismatchError(
            f"{path}: declared {meta['count']} samples, found {len(pixels)} images"
            f" and {len(labels)} labels"
        )
    images = pixels.astype(np.float32) * np.float32(meta["scale"])
    return images, labels, meta


def read_header(path) -> ArchiveHeader:
    """Parse and verify any archive, returning its header only."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic not in _MAGICS:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    header, _ = _read_archive(path, magic)
    return header


# --- IDX import --------------------------------------------------------------


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(images_path, labels_path):
    """Read the classic big-endian IDX pair (u8 images + u8 labels).

    Gzipped files are detected by their magic bytes. Returns
    (images (N,rows,cols) f32 scaled to [0,1], labels (N,) i64).
    """
    with _open_maybe_gzip(images_path) as f:
        blob = f.read()
    if len(blob) < 16:
        raise TruncatedError(f"{images_path}: too short for an IDX image header")
    magic, n, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != 0x00000803:
        raise BadMagicError(f"{images_path}: IDX image magic {magic:#010x}")
    need = 16 + n * rows * cols
    if len(blob) != need:
        raise TruncatedError(f"{images_path}: expected {need} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols)

    with _open_maybe_gzip(labels_path) as f:
        lblob = f.read()
    if len(lblob) < 8:
        raise TruncatedError(f"{labels_path}: too short for an IDX label header")
    lmagic, ln = struct.unpack_from(">II", lblob, 0)
    if lmagic != 0x00000801:
        raise BadMagicError(f"{labels_path}: IDX label magic {lmagic:#010x}")
    if len(lblob) != 8 + ln:
        raise TruncatedError(f"{labels_path}: expected {8 + ln} bytes, found {len(lblob)}")
    if ln != n:
        raise CountMismatchError(f"{n} images but {ln} labels")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return images.astype(np.float32) / np.float32(255.0), labels
