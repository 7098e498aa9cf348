"""Dense 4-D (N, C, H, W) float32 tensor container and its binary file format.

Storage is always float32, row-major. Reductions and accumulation run through
float64 intermediates so downstream finite-difference comparisons stay quiet.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError, SizeError

MAGIC = b"DCN2TENS"
FILE_EXTENSION = ".dcnt"

# product of extents must stay addressable as a byte count on 64-bit hosts
_MAX_ELEMENTS = 2**61


class Tensor:
    """A dense (N, C, H, W) float32 array. Element (n,c,h,w) lives at flat
    index ((n*C + c)*H + h)*W + w.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensor data must be 4-D (N,C,H,W), got ndim={arr.ndim}")
        self.data = np.ascontiguousarray(arr, dtype=np.float32)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def sum(self) -> float:
        return float(self.data.sum(dtype=np.float64))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def view(self, channels: slice = slice(None), rows: slice = slice(None),
             cols: slice = slice(None)) -> "TensorView":
        return TensorView(self, channels, rows, cols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and self.data.tobytes() == other.data.tobytes()

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


class TensorView:
    """A channel/spatial sub-range of a parent tensor (all batches).

    The sub-range must lie inside the parent's extents; `array()` exposes it
    as a writable numpy view.
    """

    __slots__ = ("parent", "channels", "rows", "cols")

    def __init__(self, parent: Tensor, channels: slice, rows: slice, cols: slice):
        n, c, h, w = parent.dims
        for sl, extent, name in ((channels, c, "channel"), (rows, h, "row"), (cols, w, "col")):
            start, stop, step = sl.indices(extent)
            if step != 1:
                raise ShapeError(f"{name} sub-range must be contiguous")
            if (sl.start is not None and sl.start < 0) or (sl.stop is not None and sl.stop > extent):
                raise ShapeError(f"{name} sub-range [{sl.start}:{sl.stop}] outside extent {extent}")
        self.parent = parent
        self.channels = channels
        self.rows = rows
        self.cols = cols

    def array(self) -> np.ndarray:
        return self.parent.data[:, self.channels, self.rows, self.cols]


def alloc(dims: tuple[int, int, int, int], fill: float = 0.0) -> Tensor:
    """Allocate an (N, C, H, W) tensor with every element set to `fill`."""
    if len(dims) != 4:
        raise ShapeError(f"expected 4 extents, got {len(dims)}")
    if any(d < 0 for d in dims):
        raise ShapeError(f"extents must be non-negative, got {dims}")
    count = 1
    for d in dims:
        count *= int(d)
    if count > _MAX_ELEMENTS:
        raise SizeError(f"element count {count} exceeds addressable size")
    return Tensor(np.full(dims, fill, dtype=np.float32))


def write_tensor(t: Tensor) -> bytes:
    """Serialize: magic, four u32-LE extents, then float32-LE payload row-major."""
    header = MAGIC + struct.pack("<4I", *t.dims)
    return header + np.ascontiguousarray(t.data, dtype="<f4").tobytes()


def read_tensor(buf: bytes) -> Tensor:
    """Parse the `write_tensor` layout. Raises FormatError with the byte
    offset where parsing failed; round-trips are bit-identical (NaN payloads
    included).
    """
    buf = bytes(buf)
    if len(buf) < len(MAGIC):
        raise FormatError("truncated before magic", len(buf))
    if buf[: len(MAGIC)] != MAGIC:
        bad = next(i for i in range(len(MAGIC)) if buf[i] != MAGIC[i])
        raise FormatError(f"bad magic {buf[:len(MAGIC)]!r}", bad)
    if len(buf) < len(MAGIC) + 16:
        raise FormatError("truncated extent header", len(buf))
    dims = struct.unpack_from("<4I", buf, len(MAGIC))
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise FormatError(f"extents {dims} overflow addressable size", len(MAGIC))
    payload_start = len(MAGIC) + 16
    expected_end = payload_start + 4 * count
    if len(buf) < expected_end:
        raise FormatError(
            f"payload needs {4 * count} bytes for extents {dims}, data ends early",
            len(buf),
        )
    if len(buf) > expected_end:
        raise FormatError(f"{len(buf) - expected_end} trailing bytes after payload", expected_end)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=payload_start)
    return Tensor(data.reshape(dims).copy())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh.read())


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_tensor(t))


def axpy_accumulate(dst, src, scale: float) -> None:
    """dst += scale * src elementwise, accumulating in float64.

    `dst`/`src` may be Tensors, TensorViews, or numpy arrays of equal shape.
    """
    d = dst.array() if isinstance(dst, TensorView) else (dst.data if isinstance(dst, Tensor) else dst)
    s = src.array() if isinstance(src, TensorView) else (src.data if isinstance(src, Tensor) else src)
    if d.shape != s.shape:
        raise ShapeError(f"axpy shape mismatch: {d.shape} vs {s.shape}")
    acc = d.astype(np.float64) + float(scale) * s.astype(np.float64)
    d[...] = acc.astype(d.dtype)


def as_array(x) -> np.ndarray:
    """Unwrap a Tensor (or pass through an ndarray) for kernel-level code."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)
