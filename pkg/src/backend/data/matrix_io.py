"""
matrix_io.py

Bit-exact binary matrix files and manifest entries.

Layout of a ``.3tmx`` file:

    b"3TMX" | u32 version | u32 rows | u32 cols | rows*cols float64

All integers and floats are little-endian; values are row-major.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.backend.config import MATRIX_MAGIC, MATRIX_SUFFIX, MATRIX_VERSION
from src.backend.errors import BadMagic, BadVersion, MatrixIoError, ShapeMismatch, TruncatedFile
from src.backend.numerics import Matrix

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIII")
_VALUE = np.dtype("<f8")


@dataclass(frozen=True)
class ManifestEntry:
    """One tensor listed in a manifest: name, relative path, shape, payload hash."""

    name: str
    path: str
    rows: int
    cols: int
    sha256: str

    def as_dict(self) -> dict:
        return {"name": self.name, "path": self.path, "rows": self.rows, "cols": self.cols, "sha256": self.sha256}

    @classmethod
    def from_dict(cls, data: dict) -> "ManifestEntry":
        try:
            return cls(
                name=str(data["name"]),
                path=str(data["path"]),
                rows=int(data["rows"]),
                cols=int(data["cols"]),
                sha256=str(data["sha256"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MatrixIoError(f"malformed manifest entry {data!r}: {exc}") from None


def encode_matrix(M: Matrix) -> tuple[bytes, bytes]:
    """(header, payload) bytes for ``M``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeMismatch(f"only 2-D matrices can be stored, got shape {M.shape}")
    rows, cols = M.shape
    header = _HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, rows, cols)
    payload = np.ascontiguousarray(M, dtype=_VALUE).tobytes(order="C")
    return header, payload


def payload_sha256(M: Matrix) -> str:
    return hashlib.sha256(encode_matrix(M)[1]).hexdigest()


def write_matrix(path: str | Path, M: Matrix) -> str:
    """Write ``M`` and return the sha256 of its payload."""
    target = Path(path)
    header, payload = encode_matrix(M)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(header + payload)
    except OSError as exc:
        raise MatrixIoError(f"could not write {target}: {exc}") from exc
    digest = hashlib.sha256(payload).hexdigest()
    logger.debug("Wrote %s (%d bytes, sha256 %s)", target, len(header) + len(payload), digest[:12])
    return digest


def decode_matrix(blob: bytes, source: str = "<bytes>") -> Matrix:
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{source}: {len(blob)} bytes is shorter than the {_HEADER.size}-byte header")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != MATRIX_MAGIC:
        raise BadMagic(f"{source}: expected magic {MATRIX_MAGIC!r}, got {magic!r}")
    if version != MATRIX_VERSION:
        raise BadVersion(f"{source}: unsupported version {version}, expected {MATRIX_VERSION}")
    expected = rows * cols * _VALUE.itemsize
    payload = blob[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFile(f"{source}: payload holds {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise MatrixIoError(f"{source}: {len(payload) - expected} trailing bytes after the payload")
    values = np.frombuffer(payload, dtype=_VALUE, count=rows * cols)
    return values.astype(np.float64).reshape(rows, cols)


def read_matrix(path: str | Path) -> Matrix:
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as exc:
        raise MatrixIoError(f"could not read {source}: {exc}") from exc
    return decode_matrix(blob, str(source))


def write_entry(directory: str | Path, name: str, M: Matrix) -> ManifestEntry:
    """Write ``<directory>/<name>.3tmx`` and describe it for a manifest."""
    relative = f"{name}{MATRIX_SUFFIX}"
    digest = write_matrix(Path(directory) / relative, M)
    rows, cols = np.shape(M)
    return ManifestEntry(name=name, path=relative, rows=int(rows), cols=int(cols), sha256=digest)


def read_entry(directory: str | Path, entry: ManifestEntry, *, verify: bool = True) -> Matrix:
    M = read_matrix(Path(directory) / entry.path)
    if M.shape != (entry.rows, entry.cols):
        raise MatrixIoError(f"{entry.path}: shape {M.shape} does not match manifest {(entry.rows, entry.cols)}")
    if verify:
        digest = payload_sha256(M)
        if digest != entry.sha256:
            raise MatrixIoError(f"{entry.path}: sha256 {digest} does not match manifest {entry.sha256}")
    return M
