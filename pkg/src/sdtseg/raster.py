"""Raster data model and on-disk formats.

Masks are 8-bit binary PGM (P5) files where 255 marks void pixels.
Real-valued arrays use the SDTF container, and network weights use the
SDTW container, which is a list of named SDTF records. All integers and
reals on disk are little-endian; reals are float32.

Arrays are row-major with the origin at the top-left, indexed (row, column).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

VOID = 255

SDTF_MAGIC = b"SDTF"
SDTW_MAGIC = b"SDTW"
FORMAT_VERSION = 1

# guards against absurd headers before allocating
_MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    """Raised when a file does not follow the expected layout."""


@dataclass(frozen=True)
class LabelMask:
    """Integer class-index raster.

    ``data`` has shape (height, width). Pixels equal to ``void_index`` carry
    no label. The array is made read-only on construction.
    """

    data: np.ndarray
    classes: int
    void_index: int | None = VOID

    def __post_init__(self):
        data = np.array(self.data, dtype=np.int64, copy=True)
        if data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {data.shape}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        valid = (data >= 0) & (data < self.classes)
        if self.void_index is not None:
            if 0 <= self.void_index < self.classes:
                raise ValueError("void_index collides with a class index")
            valid |= data == self.void_index
        if not valid.all():
            bad = int(data[~valid][0])
            raise ValueError(f"pixel value {bad} outside 0..{self.classes - 1}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def void(self) -> np.ndarray:
        """Boolean array, True where the pixel is void."""
        if self.void_index is None:
            return np.zeros(self.data.shape, dtype=bool)
        return self.data == self.void_index


@dataclass(frozen=True)
class FieldStack:
    """C real-valued fields of identical size, stored as a (C, H, W) array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise ValueError(f"field stack must be 3-D, got shape {data.shape}")
        if data.shape[0] == 0:
            raise ValueError("field stack needs at least one channel")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# --------------------------------------------------------------------- PGM


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed header")
        tokens.append(buf[start:pos])
    if pos >= n:
        raise FormatError("malformed header")
    return tokens, pos


def decode_mask(buf: bytes, classes: int | None = None) -> LabelMask:
    tokens, pos = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError("malformed header: not a binary PGM (P5)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed header") from exc
    if width <= 0 or height <= 0:
        raise FormatError("malformed header: non-positive dimensions")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    payload = buf[pos + 1 :]
    if len(payload) < width * height:
        raise FormatError("truncated payload")
    data = np.frombuffer(payload, dtype=np.uint8, count=width * height)
    data = data.reshape(height, width)
    labelled = data[data != VOID]
    top = int(labelled.max()) if labelled.size else -1
    if classes is None:
        classes = max(top + 1, 2)
    elif top >= classes:
        raise FormatError(f"pixel value {top} >= class count {classes}")
    return LabelMask(data, classes=classes, void_index=VOID)


def encode_mask(mask: LabelMask) -> bytes:
    if mask.classes > VOID:
        raise ValueError("PGM masks hold at most 255 classes")
    data = mask.data.copy()
    data[mask.void] = VOID
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + data.astype(np.uint8).tobytes()


def read_mask(path: str | Path, classes: int | None = None) -> LabelMask:
    """Read a P5 PGM mask. Byte v is class v, byte 255 is void.

    The class count defaults to one more than the largest non-void value.
    """
    return decode_mask(Path(path).read_bytes(), classes)


def write_mask(mask: LabelMask, path: str | Path) -> None:
    Path(path).write_bytes(encode_mask(mask))


# -------------------------------------------------------------------- SDTF


def _write_sdtf(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim == 0 or array.size == 0:
        raise ValueError("cannot serialize an empty array")
    stream.write(SDTF_MAGIC)
    stream.write(struct.pack("<II", FORMAT_VERSION, array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}")
    return buf


def _read_sdtf(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4, "header") != SDTF_MAGIC:
        raise FormatError("bad magic")
    version, ndim = struct.unpack("<II", _read_exact(stream, 8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if not 1 <= ndim <= 8:
        raise FormatError(f"unsupported ndim {ndim}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim, "header"))
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError("dimension overflow")
    if count == 0:
        raise FormatError("empty array")
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def encode_array(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _write_sdtf(buf, array)
    return buf.getvalue()


def decode_array(buf: bytes) -> np.ndarray:
    stream = io.BytesIO(buf)
    array = _read_sdtf(stream)
    if stream.read(1):
        raise FormatError("payload length mismatch: trailing bytes")
    return array


def write_array(array: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_array(array))


def read_array(path: str | Path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def write_field_stack(stack: FieldStack, path: str | Path) -> None:
    write_array(stack.data, path)


def read_field_stack(path: str | Path) -> FieldStack:
    array = read_array(path)
    if array.ndim != 3:
        raise FormatError(f"expected 3 dims (channels, height, width), got {array.ndim}")
    return FieldStack(array)


# -------------------------------------------------------------------- SDTW


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(SDTW_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        _write_sdtf(buf, array)
    return buf.getvalue()


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    stream = io.BytesIO(buf)
    if _read_exact(stream, 4, "header") != SDTW_MAGIC:
        raise FormatError("bad magic")
    version, count = struct.unpack("<II", _read_exact(stream, 8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(stream, 4, "tensor name"))
        name = _read_exact(stream, length, "tensor name").decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = _read_sdtf(stream)
    if stream.read(1):
        raise FormatError("payload length mismatch: trailing bytes")
    return tensors


def write_weights(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())
