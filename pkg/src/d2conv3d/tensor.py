"""Dense 5-D tensors, kernel weights and NPY v1.0 file I/O.

Tensors are plain C-contiguous ``numpy.ndarray`` objects laid out as
``(n, c, t, h, w)``; this module only adds the shape rules and a small,
byte-exact NPY reader/writer.
"""

from __future__ import annotations

import ast
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64
_SUPPORTED_DTYPES = {"<f4": np.float32, "<f8": np.float64, ">f4": np.float32, ">f8": np.float64}


class NpyFormatError(ValueError):
    """Raised for malformed or unsupported NPY files."""


class Shape5D(NamedTuple):
    n: int
    c: int
    t: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.t * self.h * self.w

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)


def as_shape5d(shape) -> Shape5D:
    dims = tuple(int(d) for d in shape)
    if len(dims) != 5:
        raise ValueError(f"expected 5 dimensions, got {len(dims)}")
    if any(d < 0 for d in dims):
        raise ValueError(f"negative dimension in shape {dims}")
    return Shape5D(*dims)


def flat_index(shape: Shape5D, n: int, c: int, t: int, y: int, x: int) -> int:
    """Row-major offset of element ``(n, c, t, y, x)``."""
    return (((n * shape.c + c) * shape.t + t) * shape.h + y) * shape.w + x


def tensor_new(
    shape,
    fill: Union[float, str] = 0.0,
    *,
    seed: int = 0,
    mean: float = 0.0,
    stddev: float = 1.0,
    dtype=np.float64,
) -> np.ndarray:
    """Allocate a 5-D tensor filled with a constant or seeded normal noise.

    ``fill="random-normal"`` draws from ``N(mean, stddev**2)`` using a
    ``numpy.random.default_rng(seed)`` stream, so equal seeds give
    bit-identical buffers.
    """
    shp = as_shape5d(shape)
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported scalar type {dtype}")
    try:
        if isinstance(fill, str):
            if fill != "random-normal":
                raise ValueError(f"unknown fill {fill!r}")
            if stddev < 0:
                raise ValueError("stddev must be non-negative")
            rng = np.random.default_rng(seed)
            return rng.normal(mean, stddev, size=shp).astype(dtype)
        return np.full(shp, fill, dtype=dtype)
    except MemoryError as exc:
        raise MemoryError(f"cannot allocate tensor of shape {tuple(shp)}") from exc


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass
class KernelWeights:
    """Convolution kernel ``(c_out, c_in, k_t, k_h, k_w)`` with optional bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 5:
            raise ValueError(f"kernel weights must be 5-D, got shape {self.weight.shape}")
        if any(k < 1 or k % 2 == 0 for k in self.weight.shape[2:]):
            raise ValueError(f"kernel sizes must be odd and >= 1, got {self.weight.shape[2:]}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[2:])

    @property
    def num_points(self) -> int:
        kt, kh, kw = self.kernel_size
        return kt * kh * kw

    def copy(self) -> "KernelWeights":
        return KernelWeights(self.weight.copy(), None if self.bias is None else self.bias.copy())

    @classmethod
    def zeros(cls, c_out, c_in, kernel=(3, 3, 3), bias=True, dtype=np.float64) -> "KernelWeights":
        w = np.zeros((c_out, c_in, *kernel), dtype=dtype)
        return cls(w, np.zeros(c_out, dtype=dtype) if bias else None)

    @classmethod
    def he_normal(cls, c_out, c_in, kernel=(3, 3, 3), bias=True, rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        fan_in = c_in * int(np.prod(kernel))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, *kernel)).astype(dtype)
        return cls(w, np.zeros(c_out, dtype=dtype) if bias else None)


# --------------------------------------------------------------------------- NPY


def _npy_header(arr: np.ndarray) -> bytes:
    descr = np.lib.format.dtype_to_descr(arr.dtype)
    shape = repr(tuple(int(d) for d in arr.shape))
    header = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (descr, shape)
    # magic(6) + version(2) + length(2) + header + newline, padded to alignment
    prefix = len(NPY_MAGIC) + 2 + 2
    total = prefix + len(header) + 1
    pad = (-total) % _HEADER_ALIGN
    header = header + " " * pad + "\n"
    if len(header) > 0xFFFF:
        raise NpyFormatError("header too long for NPY v1.0")
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header.encode("latin1")


def npy_write(arr: np.ndarray, path: Union[str, os.PathLike]) -> None:
    """Write ``arr`` as a little-endian, C-ordered NPY v1.0 file."""
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise NpyFormatError(f"unsupported scalar type {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(_npy_header(arr))
        fh.write(arr.tobytes(order="C"))


def _parse_header(raw: bytes) -> tuple[np.dtype, tuple[int, ...]]:
    try:
        header = ast.literal_eval(raw.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unparseable NPY header: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"NPY header has wrong keys: {header!r}")
    descr = header["descr"]
    if descr not in _SUPPORTED_DTYPES:
        raise NpyFormatError(f"unsupported dtype descriptor {descr!r} (IEEE float32/64 only)")
    if header["fortran_order"]:
        raise NpyFormatError("fortran-ordered arrays are not supported")
    shape = header["shape"]
    if not isinstance(shape, tuple) or any(not isinstance(d, int) or d < 0 for d in shape):
        raise NpyFormatError(f"invalid shape {shape!r}")
    return np.dtype(descr), shape


def npy_read(path: Union[str, os.PathLike], *, finite_only: bool = True, pad_to_5d: bool = True):
    """Read an NPY file written by :func:`npy_write` (or any plain float NPY).

    3-D and 4-D arrays are left-padded with unit dimensions to 5-D. With
    ``pad_to_5d=False`` the stored shape is returned unchanged.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != NPY_MAGIC or len(data) < 10:
        raise NpyFormatError("missing NPY magic string")
    major, minor = data[6], data[7]
    if (major, minor) == (1, 0):
        (hlen,) = struct.unpack("<H", data[8:10])
        start = 10
    elif (major, minor) in ((2, 0), (3, 0)):
        (hlen,) = struct.unpack("<I", data[8:12])
        start = 12
    else:
        raise NpyFormatError(f"unsupported NPY version {major}.{minor}")
    if len(data) < start + hlen:
        raise NpyFormatError("truncated NPY header")
    dtype, shape = _parse_header(data[start : start + hlen])
    payload = data[start + hlen :]
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != count * dtype.itemsize:
        raise NpyFormatError(
            f"payload is {len(payload)} bytes, expected {count * dtype.itemsize} for shape {shape}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    if pad_to_5d:
        if not 3 <= arr.ndim <= 5:
            raise NpyFormatError(f"expected a 3-D, 4-D or 5-D array, got {arr.ndim}-D")
        arr = arr.reshape((1,) * (5 - arr.ndim) + arr.shape)
    if finite_only:
        check_finite(arr, f"array in {os.fspath(path)}")
    return arr
