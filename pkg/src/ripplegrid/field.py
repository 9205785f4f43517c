"""Dense float fields: validated arrays, seeded Gaussian init, binary round-trip I/O.

Every tensor the rest of the library touches is a contiguous little-endian
float array. Fields serialize to a small self-describing binary format so a
failing run can dump its exact inputs and a later session can replay them
bit for bit.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

MAGIC = b"RPLT"
FORMAT_VERSION = 1
RNG_ALGORITHM = "pcg64"


class Dtype(Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy_dtype(self) -> np.dtype:
        # explicit little-endian so files mean the same thing on every host
        return np.dtype("<f4") if self is Dtype.F32 else np.dtype("<f8")


_DTYPE_TO_CODE = {Dtype.F32: 1, Dtype.F64: 2}
_CODE_TO_DTYPE = {code: d for d, code in _DTYPE_TO_CODE.items()}

# header layout: magic u8[4] | version u32 | dtype code u8 | ndim u8 | dims u64[ndim]
_OFFSET_MAGIC = 0
_OFFSET_VERSION = 4
_OFFSET_DTYPE = 8
_OFFSET_NDIM = 9
_OFFSET_DIMS = 10


class FormatError(ValueError):
    """Malformed tensor file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SeededRng:
    """Named random source; all library randomness flows through one algorithm.

    The algorithm string is stored in serialized run configs, so a replayed
    run can refuse to proceed if it would draw from a different generator.
    """

    seed: int
    algorithm: str = RNG_ALGORITHM

    def __post_init__(self):
        if self.algorithm != RNG_ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}, expected {RNG_ALGORITHM!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))


@dataclass(frozen=True)
class DenseField:
    """Contiguous row-major float array whose entries are all finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if not isinstance(arr, np.ndarray) or arr.ndim == 0:
            raise ValueError("field data must be an array with at least one dimension")
        if arr.dtype not in (np.dtype("<f4"), np.dtype("<f8")):
            raise ValueError(f"field dtype must be little-endian float32/float64, got {arr.dtype}")
        if not arr.flags["C_CONTIGUOUS"]:
            raise ValueError("field data must be C-contiguous")
        if not np.isfinite(arr).all():
            raise ValueError("field data must be finite (no NaN or Inf)")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> Dtype:
        return Dtype.F32 if self.data.dtype == np.dtype("<f4") else Dtype.F64

    @classmethod
    def from_array(cls, arr, dtype: Dtype = Dtype.F64) -> "DenseField":
        data = np.ascontiguousarray(arr, dtype=dtype.numpy_dtype)
        return cls(data)


def gaussian_init(dims, seed: int, mean: float = 0.0, stddev: float = 1.0,
                  dtype: Dtype = Dtype.F64) -> DenseField:
    """Field of independent N(mean, stddev^2) draws, reproducible from the seed."""
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be non-empty and positive, got {dims}")
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    gen = SeededRng(seed).generator()
    values = gen.normal(loc=mean, scale=stddev, size=dims)
    return DenseField(np.ascontiguousarray(values, dtype=dtype.numpy_dtype))


def write_field(path, field: DenseField) -> None:
    """Serialize a field; reading the file back is bit-exact."""
    arr = field.data
    header = struct.pack("<4sIBB", MAGIC, FORMAT_VERSION, _DTYPE_TO_CODE[field.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes(order="C"))


def read_field(path) -> DenseField:
    raw = Path(path).read_bytes()
    if len(raw) < _OFFSET_DIMS:
        raise FormatError("file too short for header", len(raw))
    magic, version, dtype_code, ndim = struct.unpack_from("<4sIBB", raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", _OFFSET_MAGIC)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", _OFFSET_VERSION)
    if dtype_code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {dtype_code}", _OFFSET_DTYPE)
    if ndim < 1:
        raise FormatError("field must have at least one dimension", _OFFSET_NDIM)
    dims_end = _OFFSET_DIMS + 8 * ndim
    if len(raw) < dims_end:
        raise FormatError("file truncated inside dims list", len(raw))
    dims = struct.unpack_from(f"<{ndim}Q", raw, _OFFSET_DIMS)
    dtype = _CODE_TO_DTYPE[dtype_code]
    count = 1
    for d in dims:
        if d < 1:
            raise FormatError(f"dimension of size {d} is not allowed", _OFFSET_DIMS)
        count *= d
    expected = dims_end + count * dtype.numpy_dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"payload length mismatch: file has {len(raw)} bytes, expected {expected}",
                          min(len(raw), dims_end))
    values = np.frombuffer(raw, dtype=dtype.numpy_dtype, offset=dims_end).reshape(dims)
    if not np.isfinite(values).all():
        raise FormatError("payload contains non-finite values", dims_end)
    return DenseField(np.ascontiguousarray(values))
