"""Binary tensor files.

Layout (all little-endian)::

    b"TNSR" | u32 version | u32 rank | u64 dim * rank | u8 width | data

``width`` is 4 or 8 (float32 / float64); data is row-major.
"""

from __future__ import annotations

import os
import shutil
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def dumps(array: np.ndarray, width: int = 8) -> bytes:
    if width not in (4, 8):
        raise ValueError("width must be 4 or 8")
    arr = np.asarray(array)
    dtype = "<f4" if width == 4 else "<f8"
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", width)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, not a TNSR file")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported TNSR version {version}")
    off = 12
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    (width,) = struct.unpack_from("<B", buf, off)
    off += 1
    if width not in (4, 8):
        raise TensorFormatError(f"bad float width {width}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * width:
        raise TensorFormatError(
            f"payload has {len(buf) - off} bytes, expected {count * width} for shape {dims}"
        )
    dtype = "<f4" if width == 4 else "<f8"
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims).copy()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def atomic_directory(path: str | os.PathLike) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``path`` on success.

    On error the scratch directory is removed and ``path`` is untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        yield tmp
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path: str | os.PathLike, array: np.ndarray, width: int = 8) -> None:
    atomic_write_bytes(path, dumps(array, width))


def load(path: str | os.PathLike) -> np.ndarray:
    return loads(Path(path).read_bytes())
