"""``PODECM1`` array container.

Layout (all integers little-endian)::

    0   8   magic   b"PODECM1\\0"
    8   4   version (uint32, currently 1)
    12  4   endianness marker 0x01020304 (uint32)
    16  8   header length H in bytes (uint64)
    24  32  SHA-256 of the payload
    56  H   UTF-8 JSON header: {"arrays": [...], "attrs": {...}}
    ... zero padding to a multiple of 8
    payload: arrays back to back, each starting at an 8-byte aligned offset

Every directory entry holds ``name``, ``dtype`` (``"<f8"`` or ``"<i8"``),
``shape``, ``offset`` (relative to the payload start) and ``nbytes``.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .exceptions import ContainerError

MAGIC = b"PODECM1\0"
VERSION = 1
ENDIAN_MARKER = 0x01020304
_PREFIX = struct.Struct("<8sIIQ32s")


def _pad8(n):
    return (-n) % 8


def _as_array(name, value):
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return np.asarray(arr, dtype="<f8", order="C")
    if arr.dtype.kind in "iub":
        return np.asarray(arr, dtype="<i8", order="C")
    raise ContainerError(f"array {name!r} has unsupported dtype {arr.dtype}")


def encode_container(arrays, attrs=None):
    """Serialize ``arrays`` (a mapping or a sequence of (name, array) pairs) to bytes."""
    items = list(arrays.items()) if hasattr(arrays, "items") else list(arrays)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ContainerError(f"duplicate array names {dup}")
    directory, chunks, offset = [], [], 0
    for name, value in items:
        if not isinstance(name, str) or not name:
            raise ContainerError(f"array names must be non-empty strings, got {name!r}")
        arr = _as_array(name, value)
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw + b"\0" * _pad8(len(raw)))
        offset += len(raw) + _pad8(len(raw))
    payload = b"".join(chunks)
    header = json.dumps({"arrays": directory, "attrs": attrs or {}}, sort_keys=True,
                        separators=(",", ":")).encode()
    header += b" " * _pad8(_PREFIX.size + len(header))
    prefix = _PREFIX.pack(MAGIC, VERSION, ENDIAN_MARKER, len(header), hashlib.sha256(payload).digest())
    return prefix + header + payload


def decode_container(blob, verify=True):
    """Inverse of :func:`encode_container`; returns ``(arrays, attrs)``."""
    if len(blob) < _PREFIX.size:
        raise ContainerError(f"file too short for a PODECM1 header ({len(blob)} bytes)")
    magic, version, marker, hlen, digest = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}: not a PODECM1 container or unsupported version")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    if marker != ENDIAN_MARKER:
        raise ContainerError(f"bad endianness marker {marker:#x}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise ContainerError("header truncated")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    payload = blob[start:]
    arrays = {}
    for entry in header["arrays"]:
        name, off, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        dtype = np.dtype(entry["dtype"])
        if dtype.str not in ("<f8", "<i8"):
            raise ContainerError(f"array {name!r} has unsupported dtype {dtype.str}")
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 8 != nbytes:
            raise ContainerError(f"array {name!r}: shape {shape} does not match {nbytes} bytes")
        if off + nbytes > len(payload):
            raise ContainerError(f"payload truncated: array {name!r} needs bytes {off}..{off + nbytes} "
                                 f"but the payload has {len(payload)}")
        flat = np.frombuffer(payload, dtype=dtype, count=nbytes // 8, offset=off)
        arrays[name] = flat.reshape(shape).copy()
    if verify and hashlib.sha256(payload).digest() != digest:
        raise ContainerError("payload checksum mismatch (file corrupted)")
    return arrays, header.get("attrs", {})


def write_container(path, arrays, attrs=None):
    """Atomically write a container (temporary file in the target directory, then rename)."""
    blob = encode_container(arrays, attrs)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".podecm-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(blob).hexdigest()


def read_container(path, verify=True):
    """Read a container written by :func:`write_container`; returns ``(arrays, attrs)``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ContainerError(f"cannot read container {path}: {exc}") from exc
    return decode_container(blob, verify)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
