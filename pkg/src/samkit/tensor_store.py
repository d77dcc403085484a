"""Named tensor collections, the safetensors-style archive format, and task-vector arithmetic."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import FormatError, InvalidValue, IoError, ShapeMismatch, UnsupportedDtype

logger = logging.getLogger(__name__)

METADATA_KEY = "__metadata__"

# on-disk dtype -> (numpy dtype, item size)
_DTYPES = {
    "F32": (np.dtype("<f4"), 4),
    "F16": (np.dtype("<f2"), 2),
    "BF16": (np.dtype("<u2"), 2),
    "F64": (np.dtype("<f8"), 8),
}
_KNOWN_UNSUPPORTED = {"I8", "U8", "I16", "U16", "I32", "U32", "I64", "U64", "BOOL", "F8_E4M3", "F8_E5M2"}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _as_tensor(name: str, value) -> np.ndarray:
    if not isinstance(name, str) or not name:
        raise InvalidValue(f"tensor names must be non-empty strings, got {name!r}")
    arr = np.asarray(value, dtype=np.float32)
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise InvalidValue(f"tensor {name!r} must have >=1 dimension and positive sizes, got {arr.shape}")
    if np.isnan(arr).any():
        raise InvalidValue(f"tensor {name!r} contains NaN")
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, dtype=np.float32, order="C", copy=True)
    return _freeze(arr)


class TensorMap(Mapping[str, np.ndarray]):
    """Immutable mapping of tensor name -> float32 array, plus string metadata.

    Arrays are stored read-only so a map can be shared between threads.
    """

    def __init__(self, tensors: Mapping[str, object] | None = None, metadata: Mapping[str, str] | None = None):
        self._tensors = {name: _as_tensor(name, val) for name, val in (tensors or {}).items()}
        self.metadata = dict(metadata or {})
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise InvalidValue("metadata must map str -> str")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def equals(self, other: "TensorMap") -> bool:
        """Bit-exact comparison of tensors and metadata."""
        if set(self) != set(other) or self.metadata != other.metadata:
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    def __repr__(self) -> str:
        body = ", ".join(f"{k}:{list(v.shape)}" for k, v in sorted(self._tensors.items()))
        return f"{type(self).__name__}({body})"


class DeltaSet(TensorMap):
    """A TensorMap of task vectors (fine-tuned minus base)."""

    def __init__(self, tensors=None, metadata=None, origin: str = ""):
        super().__init__(tensors, metadata)
        self.origin = origin


def check_compatible(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], what: str = "maps") -> None:
    ka, kb = set(a), set(b)
    if ka != kb:
        missing = sorted(ka ^ kb)
        raise ShapeMismatch(f"{what} differ in tensor names: {missing[:5]}")
    for k in ka:
        if a[k].shape != b[k].shape:
            raise ShapeMismatch(f"{what}: tensor {k!r} shape {a[k].shape} != {b[k].shape}")


def compute_delta(sft: TensorMap, base: TensorMap, origin: str = "") -> DeltaSet:
    check_compatible(sft, base, "sft/base")
    return DeltaSet({k: sft[k] - base[k] for k in sft}, origin=origin)


def apply_delta(base: TensorMap, delta: TensorMap, scale: float = 1.0) -> TensorMap:
    if not math.isfinite(scale):
        raise InvalidValue(f"scale must be finite, got {scale}")
    check_compatible(base, delta, "base/delta")
    scale32 = np.float32(scale)
    out = {}
    for k in base:
        if scale == 0:
            out[k] = base[k]
        else:
            out[k] = base[k] + scale32 * delta[k]
    return TensorMap(out, base.metadata)


# --- archive format -------------------------------------------------------


def _build_header(shapes: Mapping[str, tuple[int, ...]], metadata: Mapping[str, str]) -> bytes:
    header: dict[str, object] = {}
    offset = 0
    for name in sorted(shapes):
        nbytes = 4 * math.prod(shapes[name])
        header[name] = {"dtype": "F32", "shape": list(shapes[name]), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    if metadata:
        header[METADATA_KEY] = dict(sorted(metadata.items()))
    raw = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    # pad to 8-byte alignment like the reference writer
    raw += b" " * (-len(raw) % 8)
    return raw


class ArchiveWriter:
    """Streams tensors into an archive whose layout is fixed up front.

    The header is written immediately from the declared shapes; tensors must
    then be written in lexicographic name order.
    """

    def __init__(self, path, shapes: Mapping[str, tuple[int, ...]], metadata: Mapping[str, str] | None = None):
        self.path = Path(path)
        self._shapes = {k: tuple(int(d) for d in v) for k, v in shapes.items()}
        self._order = sorted(self._shapes)
        self._next = 0
        header = _build_header(self._shapes, metadata or {})
        try:
            self._fh = open(self.path, "wb")
            self._fh.write(struct.pack("<Q", len(header)))
            self._fh.write(header)
        except OSError as exc:
            raise IoError(f"cannot write {self.path}: {exc}") from exc

    def write(self, name: str, value) -> None:
        if self._next >= len(self._order) or self._order[self._next] != name:
            raise InvalidValue(f"tensor {name!r} written out of order")
        arr = _as_tensor(name, value)
        if arr.shape != self._shapes[name]:
            raise ShapeMismatch(f"tensor {name!r} shape {arr.shape} != declared {self._shapes[name]}")
        try:
            self._fh.write(arr.astype("<f4", copy=False).tobytes())
        except OSError as exc:
            raise IoError(f"cannot write {self.path}: {exc}") from exc
        self._next += 1

    def close(self) -> None:
        self._fh.close()
        if self._next != len(self._order):
            os.unlink(self.path)
            raise InvalidValue(f"archive {self.path} closed with {len(self._order) - self._next} tensors unwritten")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()
            try:
                os.unlink(self.path)
            except OSError:
                pass


def save_tensor_archive(tmap: TensorMap, path) -> None:
    if not isinstance(tmap, TensorMap):
        tmap = TensorMap(tmap)
    with ArchiveWriter(path, tmap.shapes(), tmap.metadata) as writer:
        for name in sorted(tmap):
            writer.write(name, tmap[name])


def _decode(buf: bytes, dtype: str, shape: tuple[int, ...], name: str) -> np.ndarray:
    np_dtype, _ = _DTYPES[dtype]
    arr = np.frombuffer(buf, dtype=np_dtype).reshape(shape)
    if dtype == "BF16":
        arr = (arr.astype(np.uint32) << 16).view(np.float32)
    if dtype != "F32":
        logger.warning("tensor %r stored as %s; converted to F32", name, dtype)
    return arr.astype(np.float32)


class TensorArchive:
    """Lazy reader: parses and validates the header, reads tensors on demand."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "rb")
            size = os.fstat(self._fh.fileno()).st_size
        except OSError as exc:
            raise IoError(f"cannot open {self.path}: {exc}") from exc
        self.warnings: list[str] = []
        try:
            self._parse(size)
        except Exception:
            self._fh.close()
            raise

    def _parse(self, size: int) -> None:
        prefix = self._fh.read(8)
        if len(prefix) < 8:
            raise FormatError(f"{self.path}: truncated length prefix")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8:
            raise FormatError(f"{self.path}: header length {n} exceeds file size")
        try:
            header = json.loads(self._fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: header is not valid UTF-8 JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise FormatError(f"{self.path}: header must be a JSON object")
        meta = header.pop(METADATA_KEY, {})
        if not isinstance(meta, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
            raise FormatError(f"{self.path}: __metadata__ must be a string map")
        self.metadata = meta
        self._data_start = 8 + n
        data_len = size - self._data_start
        entries = {}
        for name, info in header.items():
            if not name:
                raise FormatError(f"{self.path}: empty tensor name")
            if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
                raise FormatError(f"{self.path}: malformed entry for {name!r}")
            dtype, shape, offs = info["dtype"], info["shape"], info["data_offsets"]
            if not isinstance(dtype, str):
                raise FormatError(f"{self.path}: dtype of {name!r} must be a string")
            if dtype not in _DTYPES:
                if dtype in _KNOWN_UNSUPPORTED:
                    raise UnsupportedDtype(f"{self.path}: tensor {name!r} has unsupported dtype {dtype}")
                raise FormatError(f"{self.path}: tensor {name!r} has unknown dtype {dtype!r}")
            if (
                not isinstance(shape, list)
                or not shape
                or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
            ):
                raise FormatError(f"{self.path}: bad shape for {name!r}: {shape!r}")
            if (
                not isinstance(offs, list)
                or len(offs) != 2
                or not all(isinstance(o, int) and not isinstance(o, bool) for o in offs)
            ):
                raise FormatError(f"{self.path}: bad data_offsets for {name!r}")
            begin, end = offs
            if not 0 <= begin <= end <= data_len:
                raise FormatError(f"{self.path}: offsets of {name!r} out of bounds")
            if end - begin != math.prod(shape) * _DTYPES[dtype][1]:
                raise FormatError(f"{self.path}: offsets of {name!r} inconsistent with shape and dtype")
            if dtype != "F32":
                self.warnings.append(f"{name}: {dtype} converted to F32")
            entries[name] = (dtype, tuple(shape), begin, end)
        # buffers must tile the data section exactly: no overlaps, no holes
        cursor = 0
        for name, (_, _, begin, end) in sorted(entries.items(), key=lambda kv: (kv[1][2], kv[1][3])):
            if begin != cursor:
                kind = "overlap" if begin < cursor else "gap"
                raise FormatError(f"{self.path}: data offsets {kind} at tensor {name!r}")
            cursor = end
        if cursor != data_len:
            raise FormatError(f"{self.path}: {data_len - cursor} trailing bytes after last tensor")
        self._entries = entries

    def keys(self) -> list[str]:
        return sorted(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v[1] for k, v in self._entries.items()}

    def read(self, name: str) -> np.ndarray:
        dtype, shape, begin, end = self._entries[name]
        self._fh.seek(self._data_start + begin)
        buf = self._fh.read(end - begin)
        if len(buf) != end - begin:
            raise FormatError(f"{self.path}: truncated data for {name!r}")
        arr = _decode(buf, dtype, shape, name)
        if np.isnan(arr).any():
            raise InvalidValue(f"{self.path}: tensor {name!r} contains NaN")
        return arr

    def iter_tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        for name in self.keys():
            yield name, self.read(name)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_tensor_archive(path) -> TensorMap:
    with TensorArchive(path) as archive:
        return TensorMap(dict(archive.iter_tensors()), archive.metadata)


def load_delta_archive(path, origin: str = "") -> DeltaSet:
    tmap = load_tensor_archive(path)
    return DeltaSet({k: tmap[k] for k in tmap}, tmap.metadata, origin=origin or str(path))


def apply_delta_archive(base_path, delta_path, out_path, scale: float = 1.0) -> None:
    """Streaming ``apply_delta`` over archives: one tensor pair in memory at a time."""
    if not math.isfinite(scale):
        raise InvalidValue(f"scale must be finite, got {scale}")
    with TensorArchive(base_path) as base, TensorArchive(delta_path) as delta:
        if base.shapes() != delta.shapes():
            raise ShapeMismatch(f"{delta_path} does not match base {base_path}")
        with ArchiveWriter(out_path, base.shapes(), base.metadata) as writer:
            for name in base.keys():
                b = base.read(name)
                writer.write(name, b if scale == 0 else b + np.float32(scale) * delta.read(name))
