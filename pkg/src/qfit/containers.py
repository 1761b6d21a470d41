"""Binary container for parameter maps and PNG export.

One file holds any number of named arrays: a magic prefix, a canonical
JSON header describing the entries, a two-byte delimiter, then the raw
payloads concatenated in header order (little-endian, row-major). The
encoding has no timestamps and the header is serialized canonically, so
writing the same data twice produces byte-identical files. Writes go to
a temporary sibling and are renamed into place, so a crash never leaves
a half-written container at the target path.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, ContainerFormatError, ShapeError

MAGIC = b"QFIT1"
HEADER_DELIMITER = b"\n\x00"

# dtype name -> on-disk (endian-explicit) dtype
_DTYPES = {
    "float64": np.dtype("<f8"),
    "complex128": np.dtype("<c16"),
    "int64": np.dtype("<i8"),
    "bool": np.dtype("|b1"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _canonical_dtype(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("<") if arr.dtype.byteorder in ("=", ">") else arr.dtype
    name = _DTYPE_NAMES.get(np.dtype(key))
    if name is None:
        raise ConfigError(
            f"dtype {arr.dtype} is not storable; use one of {sorted(_DTYPES)}")
    return name


@dataclass(eq=False)
class Container:
    entries: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]


def write_container(path, entries: dict[str, np.ndarray],
                    meta: dict | None = None,
                    units: dict[str, str] | None = None) -> None:
    """Atomically write named arrays with metadata to one file."""
    if not entries:
        raise ConfigError("container needs at least one entry")
    meta = meta or {}
    units = units or {}
    unknown = set(units) - set(entries)
    if unknown:
        raise ConfigError(f"units given for unknown entries: {sorted(unknown)}")

    header_entries = []
    payloads = []
    for name, arr in entries.items():
        if not isinstance(name, str) or not name:
            raise ConfigError(f"entry names must be non-empty strings, got {name!r}")
        a = np.asarray(arr)
        dtype_name = _canonical_dtype(a)
        ent = {"name": name, "dtype": dtype_name, "shape": list(a.shape)}
        if name in units:
            ent["units"] = str(units[name])
        header_entries.append(ent)
        payloads.append(np.ascontiguousarray(a, dtype=_DTYPES[dtype_name]).tobytes())

    header = {"format": MAGIC.decode(), "version": 1,
              "entries": header_entries, "meta": meta}
    try:
        header_bytes = json.dumps(header, sort_keys=True,
                                  separators=(",", ":"),
                                  ensure_ascii=True).encode()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"metadata is not JSON-serializable: {e}") from e

    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header_bytes)
            fh.write(HEADER_DELIMITER)
            for blob in payloads:
                fh.write(blob)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_container(path) -> Container:
    """Read a container back; every byte of the payload is accounted for."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ContainerFormatError(f"{path}: bad magic, not a map container")
    delim = blob.find(HEADER_DELIMITER, len(MAGIC))
    if delim < 0:
        raise ContainerFormatError(f"{path}: header delimiter not found")
    try:
        header = json.loads(blob[len(MAGIC):delim].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"{path}: header is not valid JSON: {e}") from e
    if header.get("format") != MAGIC.decode() or header.get("version") != 1:
        raise ContainerFormatError(f"{path}: unsupported container version")
    if not isinstance(header.get("entries"), list):
        raise ContainerFormatError(f"{path}: header lists no entries")

    offset = delim + len(HEADER_DELIMITER)
    entries: dict[str, np.ndarray] = {}
    units: dict[str, str] = {}
    for ent in header["entries"]:
        try:
            name = ent["name"]
            dtype = _DTYPES[ent["dtype"]]
            shape = tuple(int(s) for s in ent["shape"])
        except (KeyError, TypeError) as e:
            raise ContainerFormatError(f"{path}: malformed entry {ent!r}") from e
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ContainerFormatError(
                f"{path}: entry {name!r} truncated "
                f"({len(chunk)} of {nbytes} bytes)")
        entries[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        if "units" in ent:
            units[name] = ent["units"]
        offset += nbytes
    if offset != len(blob):
        raise ContainerFormatError(
            f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return Container(entries=entries, meta=header.get("meta", {}), units=units)


def export_map_png(path, array: np.ndarray,
                   window: tuple[float, float] | None = None) -> None:
    """Save a 2-D map as an 8-bit grayscale PNG.

    ``window`` gives the (low, high) display range; values outside are
    clipped. By default the finite min/max of the map is used. Non-finite
    voxels render black.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"png export needs a 2-D map, got shape {a.shape}")
    finite = np.isfinite(a)
    if window is None:
        if not finite.any():
            raise ConfigError("map has no finite values to scale by")
        lo, hi = float(a[finite].min()), float(a[finite].max())
    else:
        lo, hi = float(window[0]), float(window[1])
    if not (hi > lo):
        # a constant map still exports: mid-gray
        if window is None:
            img = np.full(a.shape, 128, dtype=np.uint8)
            img[~finite] = 0
            Image.fromarray(img, mode="L").save(os.fspath(path), format="PNG")
            return
        raise ConfigError(f"window high must exceed low, got ({lo}, {hi})")
    scaled = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    scaled[~finite] = 0.0
    img = np.round(scaled * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(os.fspath(path), format="PNG")
