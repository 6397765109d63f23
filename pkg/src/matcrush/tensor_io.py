"""Named matrix bundles on disk.

File layout::

    8 bytes   magic  b"MCRSH\\x00\\x01\\x00"
    8 bytes   header length (little-endian u64)
    N bytes   UTF-8 JSON header {"manifest": {...}, "entries": [{name, rows, cols, offset}, ...]}
    ...       raw little-endian float64 payloads, row-major, at the absolute offsets listed

Entries are always written and iterated in lexicographic name order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

MAGIC = b"MCRSH\x00\x01\x00"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


class BundleError(Exception):
    """Base class for bundle read/write failures."""


class EmptyTensorError(BundleError):
    pass


class BadMagicError(BundleError):
    pass


class TruncatedPayloadError(BundleError):
    pass


class NonFiniteError(BundleError):
    pass


class BundleIOError(BundleError):
    pass


@dataclass
class TensorBundle:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean = {}
        for name, arr in self.entries.items():
            if not isinstance(name, str) or not name:
                raise ValueError("bundle entry names must be non-empty strings")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"entry {name!r} must be 2-D, got shape {arr.shape}")
            clean[name] = arr
        self.entries = {k: clean[k] for k in sorted(clean)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def equals(self, other: "TensorBundle") -> bool:
        """Bit-exact comparison of entries and manifest."""
        if self.names() != other.names() or self.manifest != other.manifest:
            return False
        for name in self.entries:
            a, b = self.entries[name], other.entries[name]
            if a.shape != b.shape:
                return False
            if a.astype(_DTYPE).tobytes() != b.astype(_DTYPE).tobytes():
                return False
        return True


def _header_bytes(bundle: TensorBundle, manifest: dict[str, Any]) -> tuple[bytes, list[dict]]:
    # offsets depend on the header length, which depends on the offsets' digits
    start = len(MAGIC) + _LEN.size
    header_len = 0
    while True:
        offset = start + header_len
        rows = []
        for name, arr in bundle.entries.items():
            rows.append({"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "offset": offset})
            offset += arr.size * 8
        blob = json.dumps({"manifest": manifest, "entries": rows}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        if len(blob) == header_len:
            return blob, rows
        header_len = len(blob)


def save_bundle(bundle: TensorBundle, path: str | os.PathLike) -> None:
    path = Path(path)
    for name, arr in bundle.entries.items():
        if arr.size == 0:
            raise EmptyTensorError(f"empty tensor: {name!r} has shape {arr.shape}")
    manifest = {"format_version": FORMAT_VERSION, **bundle.manifest}
    header, _ = _header_bytes(bundle, manifest)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_LEN.pack(len(header)))
            fh.write(header)
            for arr in bundle.entries.values():
                fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise BundleIOError(f"cannot write bundle {path}: {exc}") from exc


def load_bundle(path: str | os.PathLike) -> TensorBundle:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise BundleIOError(f"cannot read bundle {path}: {exc}") from exc
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise TruncatedPayloadError(f"truncated payload: {path} ends inside the header length")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + hlen:
        raise TruncatedPayloadError(f"truncated payload: {path} ends inside the header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"corrupt header in {path}: {exc}") from exc

    entries = {}
    for row in header["entries"]:
        name, r, c, off = row["name"], int(row["rows"]), int(row["cols"]), int(row["offset"])
        if name in entries:
            raise BundleError(f"duplicate entry {name!r} in {path}")
        end = off + r * c * 8
        if end > len(data):
            raise TruncatedPayloadError(f"truncated payload: entry {name!r} in {path}")
        arr = np.frombuffer(data, dtype=_DTYPE, count=r * c, offset=off).reshape(r, c)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in entry {name!r} of {path}")
        entries[name] = arr.astype(np.float64)
    manifest = dict(header.get("manifest", {}))
    version = manifest.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported format version {version!r} in {path}")
    return TensorBundle(entries, manifest)
