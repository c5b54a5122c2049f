"""Self-describing binary container used for checkpoints and datasets.

Layout: 8-byte magic, little-endian uint32 format version, uint64 header
length, a UTF-8 JSON header, then raw little-endian array payloads in
header order. Round trips are bit exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PATCHAR\x00"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "bool": "|b1"}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, payloads, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
    ).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)[0]


def _read_header(fh) -> tuple[dict, int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError("not a patchar container")
    version, n = struct.unpack("<IQ", fh.read(12))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = json.loads(fh.read(n).decode())
    return header, len(MAGIC) + 12 + n


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header, start = _read_header(fh)
        body = fh.read()
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"expected a {kind} file, found {header['kind']}")
    arrays = {}
    for e in header["arrays"]:
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"], copy=True)
    return arrays, header["meta"]
