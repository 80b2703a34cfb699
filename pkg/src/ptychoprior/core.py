"""Array fields, a radix-2 FFT, seeded random streams and the PTYF file format.

Fields are plain numpy arrays: ``complex128`` for object/probe/exit-wave
fields and ``float64`` for intensities and phase images.  The FFT is
orthonormal (each 1D pass is scaled by ``1/sqrt(n)``) so energy is preserved.
"""

from __future__ import annotations

import functools
import struct
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    """Array shape is incompatible with the requested operation."""


class DomainError(ValueError):
    """Argument value lies outside the admissible range."""


class PtyfFormatError(ValueError):
    """Malformed PTYF stream; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def as_complex_field(data) -> np.ndarray:
    """Validate and return ``data`` as a finite 2D complex128 array."""
    arr = np.asarray(data, dtype=np.complex128)
    if arr.ndim != 2 or 0 in arr.shape:
        raise DimensionError(f"expected a non-empty 2D field, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("field contains non-finite values")
    return arr


def as_real_field(data) -> np.ndarray:
    """Validate and return ``data`` as a finite 2D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or 0 in arr.shape:
        raise DimensionError(f"expected a non-empty 2D field, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("field contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@functools.lru_cache(maxsize=None)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    tw = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)
    tw.setflags(write=False)
    return tw


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative decimation-in-time radix-2 FFT along the last axis."""
    n = a.shape[-1]
    lead = a.shape[:-1]
    out = a[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size, inverse)
        out = np.concatenate((even + odd, even - odd), axis=-1).reshape(*lead, n)
        size *= 2
    return out * (1.0 / np.sqrt(n))


def _check_fft_shape(shape) -> None:
    if len(shape) < 2:
        raise DimensionError(f"fft2 needs at least 2 dimensions, got shape {shape}")
    h, w = shape[-2:]
    if h != w or not is_power_of_two(h):
        raise DimensionError(f"fft2 needs a square power-of-two field, got {h}x{w}")


def _fft2(f, inverse: bool) -> np.ndarray:
    arr = np.asarray(f, dtype=np.complex128)
    _check_fft_shape(arr.shape)
    out = _fft_last_axis(arr, inverse)
    out = _fft_last_axis(np.swapaxes(out, -1, -2), inverse)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))


def fft2(f) -> np.ndarray:
    """Orthonormal 2D DFT over the last two axes (leading axes are a batch)."""
    return _fft2(f, inverse=False)


def ifft2(f) -> np.ndarray:
    """Inverse of :func:`fft2`."""
    return _fft2(f, inverse=True)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


class Rng:
    """Seeded counter-based random stream (Philox4x64-10 keyed by the seed).

    Streams are a pure function of the seed and the call sequence.  Parallel
    work never shares an instance; it takes ``child(i)`` streams instead.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def child(self, index: int) -> "Rng":
        """Independent stream derived from ``(seed, index)``."""
        key = np.random.SeedSequence([self.seed, int(index)]).generate_state(1, np.uint64)[0]
        return Rng(int(key))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def poisson(self, lam, size=None):
        return self._gen.poisson(lam, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


# ---------------------------------------------------------------------------
# PTYF binary format
# ---------------------------------------------------------------------------

MAGIC = b"PTYF"
VERSION = 1
_HEADER = struct.Struct("<4sHBB")

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<c8"),
    3: np.dtype("<c16"),
}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


def encode_array(arr) -> bytes:
    """Serialize an array of a supported dtype to PTYF bytes."""
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise DomainError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DimensionError("too many dimensions for PTYF")
    head = _HEADER.pack(MAGIC, VERSION, _CODE_OF[dt], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one PTYF blob starting at ``offset``; return (array, end offset)."""
    if len(buf) - offset < _HEADER.size:
        raise PtyfFormatError("truncated header", offset)
    magic, version, code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise PtyfFormatError(f"bad magic {magic!r}", offset)
    if version != VERSION:
        raise PtyfFormatError(f"unsupported version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise PtyfFormatError(f"unknown dtype code {code}", offset + 6)
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * ndim:
        raise PtyfFormatError("truncated dimension list", pos)
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise PtyfFormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", pos
        )
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(shape).copy(), pos + nbytes


def write_field(path, field) -> None:
    Path(path).write_bytes(encode_array(field))


def read_field(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_array(buf)
    if end != len(buf):
        raise PtyfFormatError("trailing bytes after payload", end)
    return arr
