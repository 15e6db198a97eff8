"""Versioned binary container for model parameters.

A bundle is a zip archive with a ``meta.json`` descriptor and one ``.npy``
member per array. Member timestamps are pinned so the same content always
produces the same bytes.
"""
from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np

FORMAT = "regcomp-bundle"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class BundleError(ValueError):
    pass


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_bundle(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` plus a JSON-serialisable ``meta`` dict to ``path``."""
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta,
              "arrays": sorted(arrays)}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_member("meta.json"), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.ascontiguousarray(arrays[name]),
                                      allow_pickle=False)
            zf.writestr(_member(f"arrays/{name}.npy"), arr.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_bundle(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; checks format, version and optionally kind."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as err:
        raise BundleError(f"{path}: not a readable bundle ({err})") from None
    with zf:
        header = json.loads(zf.read("meta.json"))
        if header.get("format") != FORMAT:
            raise BundleError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version") != VERSION:
            raise BundleError(f"{path}: unsupported bundle version {header.get('version')}")
        if kind is not None and header.get("kind") != kind:
            raise BundleError(f"{path}: expected a {kind!r} bundle, found {header.get('kind')!r}")
        arrays = {}
        for name in header["arrays"]:
            with zf.open(f"arrays/{name}.npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return header["meta"], arrays
