"""SNFL binary array container.

Layout (little-endian):

    magic      4 bytes  b"SNFL"
    version    u16
    dtype      u8       0 = float64, 1 = complex128
    rank       u8
    dims       rank × u64
    payload    row-major raw values
"""

from __future__ import annotations

import logging
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DtypeMismatchError, TruncatedPayloadError
from .models import ComplexField, DeformationField, DeformationSequence, GridSpec, Image

logger = logging.getLogger(__name__)

MAGIC = b"SNFL"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1}
_HEADER = struct.Struct("<4sHBB")


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype.kind == "c":
        array = array.astype(np.complex128, copy=False)
    else:
        array = array.astype(np.float64, copy=False)
    code = _CODES[array.dtype]
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array).astype(_DTYPES[code], copy=False).tobytes(order="C")
    return header + dims + payload


def decode(blob: bytes, expect: np.dtype | None = None) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, got {len(blob)}")
    magic, version, code, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    if code not in _DTYPES:
        raise DtypeMismatchError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    if expect is not None and np.dtype(expect) != dtype.newbyteorder("="):
        raise DtypeMismatchError(f"expected {np.dtype(expect)}, file holds {dtype}")
    offset = _HEADER.size
    if len(blob) < offset + 8 * rank:
        raise TruncatedPayloadError("dimension block is truncated")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    needed = count * dtype.itemsize
    if len(blob) - offset < needed:
        raise TruncatedPayloadError(
            f"payload holds {len(blob) - offset} bytes, dims {shape} need {needed}"
        )
    logger.debug("decoded SNFL v%d array %s %s", version, dtype, shape)
    values = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return values.reshape(shape).astype(dtype.newbyteorder("="))


def save_array(path: Path, array: Image | ComplexField | DeformationField | np.ndarray) -> None:
    """Write an array (or an array-bearing model) atomically to ``path``."""
    if isinstance(array, (Image, ComplexField)):
        raw = array.values
    elif isinstance(array, DeformationField):
        raw = array.stack()
    else:
        raw = array
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = tempfile.NamedTemporaryFile(mode="wb", dir=path.parent, suffix=".tmp", delete=False)
    tmp_path = Path(fd.name)
    try:
        fd.write(encode(raw))
        fd.flush()
        fd.close()
        tmp_path.rename(path)
    except OSError:
        fd.close()
        tmp_path.unlink(missing_ok=True)
        raise


def load_array(path: Path, expect: np.dtype | None = None) -> np.ndarray:
    return decode(Path(path).read_bytes(), expect)


def load_image(path: Path) -> Image:
    values = load_array(path, np.float64)
    return Image(GridSpec(values.shape[0]), values)


def save_sequence(path: Path, sequence: DeformationSequence) -> None:
    save_array(path, sequence.stack())


def load_sequence(path: Path) -> DeformationSequence:
    stacked = load_array(path, np.float64)
    if stacked.ndim != 4 or stacked.shape[1] != 2:
        raise DtypeMismatchError(f"deformation sequence must be (n_exc, 2, N, N), got {stacked.shape}")
    return DeformationSequence.from_stack(GridSpec(stacked.shape[-1]), stacked)
