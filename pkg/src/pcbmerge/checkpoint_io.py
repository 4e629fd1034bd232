"""Safetensors reading and writing, plus schema validation across checkpoints.

Files are memory mapped on load, so tensors are views into the page cache
until they are converted for arithmetic. bf16 has no numpy dtype; its
payload is carried as ``uint16`` bit patterns and converted explicitly.
"""

from __future__ import annotations

import json
import logging
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DtypeMismatch,
    IoFailure,
    MalformedHeader,
    MissingTensor,
    OverlappingOffsets,
    ShapeMismatch,
    UnsupportedDtype,
)

logger = logging.getLogger(__name__)

MAX_HEADER_BYTES = 100 * 1024 * 1024

# file dtype tag -> numpy storage dtype (little endian)
STORAGE_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
FLOAT_DTYPES = frozenset({"F64", "F32", "F16", "BF16"})

_NUMPY_TO_TAG = {
    np.dtype("float64"): "F64",
    np.dtype("float32"): "F32",
    np.dtype("float16"): "F16",
    np.dtype("int64"): "I64",
    np.dtype("int32"): "I32",
    np.dtype("uint8"): "U8",
    np.dtype("bool"): "BOOL",
}


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    """Widen bf16 bit patterns (uint16) to float32. Exact."""
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Round float32 to bf16 bit patterns with round-to-nearest-even."""
    x = np.ascontiguousarray(values, dtype=np.float32)
    bits = x.view(np.uint32)
    rounding = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = ((bits + rounding) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        # keep NaN a NaN: rounding could carry the mantissa into the exponent
        out[nan] = ((bits[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
    return out


@dataclass(frozen=True)
class Tensor:
    """A shaped array plus its file dtype tag.

    ``data`` holds the storage representation: native numpy for every dtype
    except bf16, which is stored as uint16 bit patterns.
    """

    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in STORAGE_DTYPES:
            raise UnsupportedDtype(f"unsupported dtype {self.dtype!r}")
        if self.data.dtype != STORAGE_DTYPES[self.dtype]:
            object.__setattr__(self, "data", self.data.astype(STORAGE_DTYPES[self.dtype]))

    @classmethod
    def from_array(cls, array, dtype: Optional[str] = None) -> "Tensor":
        """Wrap a numpy array. ``dtype='BF16'`` rounds float input to bf16."""
        array = np.asarray(array)
        if dtype is None:
            try:
                dtype = _NUMPY_TO_TAG[array.dtype]
            except KeyError:
                raise UnsupportedDtype(f"no file dtype for numpy {array.dtype}") from None
        if dtype == "BF16" and array.dtype != np.uint16:
            array = f32_to_bf16(array.astype(np.float32)).reshape(array.shape)
        return cls(dtype, array)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return self.numel * STORAGE_DTYPES[self.dtype].itemsize

    @property
    def is_float(self) -> bool:
        return self.dtype in FLOAT_DTYPES

    def to_f32(self) -> np.ndarray:
        if self.dtype == "BF16":
            return bf16_to_f32(self.data)
        return np.asarray(self.data, dtype=np.float32)

    def to_numpy(self) -> np.ndarray:
        """Values in the closest native numpy dtype (bf16 widens to float32)."""
        if self.dtype == "BF16":
            return bf16_to_f32(self.data)
        return self.data

    def equals(self, other: "Tensor") -> bool:
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and np.array_equal(
                self.data.reshape(-1).view(np.uint8), other.data.reshape(-1).view(np.uint8)
            )
        )


def from_f64(values: np.ndarray, dtype: str) -> Tensor:
    """Round float results to a float storage dtype (round-to-nearest-even).

    bf16 goes through float32 first.
    """
    values = np.asarray(values)
    if dtype == "BF16":
        return Tensor("BF16", f32_to_bf16(values.astype(np.float32)).reshape(values.shape))
    return Tensor(dtype, np.ascontiguousarray(values.astype(STORAGE_DTYPES[dtype], copy=False)))


@dataclass(frozen=True)
class Checkpoint:
    tensors: Mapping[str, Tensor]
    source_path: Optional[Path] = None
    metadata: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise MalformedHeader("tensor names must be non-empty strings")
            if not isinstance(t, Tensor):
                raise TypeError(f"tensor {name!r} is not a Tensor")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], **kwargs) -> "Checkpoint":
        return cls({k: Tensor.from_array(v) for k, v in arrays.items()}, **kwargs)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list:
        return list(self.tensors)

    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())

    def equals(self, other: "Checkpoint") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(t.equals(other.tensors[k]) for k, t in self.tensors.items())


@dataclass(frozen=True)
class SchemaEntry:
    shape: tuple
    dtype: str
    mergeable: bool


@dataclass
class TensorSchema:
    entries: dict
    warnings: list = field(default_factory=list)

    def mergeable_names(self) -> list:
        return [k for k, e in self.entries.items() if e.mergeable]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __eq__(self, other) -> bool:
        return isinstance(other, TensorSchema) and self.entries == other.entries


def _parse_header(raw: bytes, payload_len: int) -> tuple:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop("__metadata__", None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise MalformedHeader("__metadata__ must map strings to strings")

    entries = []
    for name, info in header.items():
        if not name:
            raise MalformedHeader("empty tensor name")
        if not isinstance(info, dict):
            raise MalformedHeader(f"entry {name!r} is not an object")
        dtype = info.get("dtype")
        if dtype not in STORAGE_DTYPES:
            raise UnsupportedDtype(f"tensor {name!r} has unsupported dtype {dtype!r}")
        shape = info.get("shape")
        offsets = info.get("data_offsets")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise MalformedHeader(f"tensor {name!r} has invalid shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
        ):
            raise MalformedHeader(f"tensor {name!r} has invalid data_offsets {offsets!r}")
        begin, end = offsets
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != numel * STORAGE_DTYPES[dtype].itemsize:
            raise MalformedHeader(
                f"tensor {name!r}: byte span {end - begin} does not match shape {shape} x {dtype}"
            )
        entries.append((name, dtype, tuple(shape), begin, end))

    # byte ranges must tile the payload exactly
    cursor = 0
    for name, _, _, begin, end in sorted(entries, key=lambda e: (e[3], e[4])):
        if begin != cursor:
            kind = "overlaps a previous tensor" if begin < cursor else "leaves a gap"
            raise OverlappingOffsets(f"tensor {name!r} at [{begin}, {end}) {kind}")
        cursor = end
    if cursor != payload_len:
        raise OverlappingOffsets(
            f"tensor data covers {cursor} bytes but payload holds {payload_len}"
        )
    return entries, metadata


def load_checkpoint(path) -> Checkpoint:
    """Read a safetensors file; tensor data stays memory mapped."""
    path = Path(path)
    try:
        size = path.stat().st_size
        fh = open(path, "rb")
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from None
    with fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise MalformedHeader(f"{path}: file shorter than the 8-byte length prefix")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > MAX_HEADER_BYTES:
            raise MalformedHeader(f"{path}: header of {header_len} bytes exceeds the 100 MB cap")
        if 8 + header_len > size:
            raise MalformedHeader(f"{path}: header length {header_len} exceeds file size {size}")
        raw = fh.read(header_len)
        payload_start = 8 + header_len
        entries, metadata = _parse_header(raw, size - payload_start)
        buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) if size > 0 else b""

    tensors = {}
    for name, dtype, shape, begin, end in entries:
        storage = STORAGE_DTYPES[dtype]
        count = (end - begin) // storage.itemsize
        arr = np.frombuffer(buf, dtype=storage, count=count, offset=payload_start + begin)
        tensors[name] = Tensor(dtype, arr.reshape(shape))
    return Checkpoint(tensors, source_path=path, metadata=metadata)


def _header_bytes(ckpt: Checkpoint) -> tuple:
    header = {}
    if ckpt.metadata is not None:
        header["__metadata__"] = dict(ckpt.metadata)
    order = sorted(ckpt.tensors)
    offset = 0
    for name in order:
        t = ckpt.tensors[name]
        header[name] = {
            "dtype": t.dtype,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + t.nbytes],
        }
        offset += t.nbytes
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad so the payload starts 8-byte aligned; JSON tolerates trailing spaces
    raw += b" " * (-len(raw) % 8)
    return raw, order


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` in canonical form: names sorted, contiguous offsets.

    The file is written to a sibling temp file and renamed into place.
    """
    path = Path(path)
    raw, order = _header_bytes(ckpt)
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            for name in order:
                data = ckpt.tensors[name].data
                if data.size:
                    fh.write(memoryview(np.ascontiguousarray(data)).cast("B"))
        os.replace(tmp, path)
    except OSError as exc:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(f"cannot write {path}: {exc}") from None


def validate_compatibility(
    ckpts: Sequence[Checkpoint], skip_missing: bool = False
) -> TensorSchema:
    """Return the schema shared by ``ckpts``.

    Entries follow the first checkpoint's order and dtypes. A tensor is
    mergeable when its dtype is floating point in every checkpoint.
    """
    if not ckpts:
        raise ValueError("validate_compatibility needs at least one checkpoint")
    names = list(ckpts[0].tensors)
    seen = set(names)
    for ck in ckpts[1:]:
        for name in ck.tensors:
            if name not in seen:
                names.append(name)
                seen.add(name)

    entries = {}
    warnings = []
    for name in names:
        missing = [i for i, ck in enumerate(ckpts) if name not in ck.tensors]
        if missing:
            if not skip_missing:
                raise MissingTensor(name, missing[0])
            msg = f"dropping tensor {name!r}: missing from checkpoint(s) {missing}"
            logger.warning(msg)
            warnings.append(msg)
            continue
        first = ckpts[0].tensors[name]
        for i, ck in enumerate(ckpts[1:], start=1):
            t = ck.tensors[name]
            if t.shape != first.shape:
                raise ShapeMismatch(name, f"{list(first.shape)} vs {list(t.shape)} (checkpoint #{i})")
            if t.is_float != first.is_float:
                raise DtypeMismatch(name, f"{first.dtype} vs {t.dtype} (checkpoint #{i})")
        entries[name] = SchemaEntry(first.shape, first.dtype, first.is_float)
    return TensorSchema(entries, warnings)
