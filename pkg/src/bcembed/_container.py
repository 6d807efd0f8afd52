"""Versioned on-disk container shared by graphs, checkpoints, registries and tables.

A container is a zip archive holding ``meta.json`` plus one ``.npy`` member per
array. Member timestamps are pinned so identical content gives identical bytes.
"""
import io
import json
import zipfile

import numpy as np

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class ContainerError(ValueError):
    pass


def save(path, magic, meta, arrays):
    header = {"magic": magic, "format_version": FORMAT_VERSION, "meta": meta,
              "arrays": sorted(arrays)}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE),
                        buf.getvalue())


def load(path, magic):
    """Return ``(meta, arrays)``; raise :class:`ContainerError` on a foreign file."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except zipfile.BadZipFile as exc:
        raise ContainerError(f"{path}: not a container file") from exc
    with zf:
        try:
            header = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise ContainerError(f"{path}: missing meta.json") from exc
        if header.get("magic") != magic:
            raise ContainerError(
                f"{path}: expected magic {magic!r}, found {header.get('magic')!r}")
        if header.get("format_version") != FORMAT_VERSION:
            raise ContainerError(
                f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for name in header["arrays"]:
            arrays[name] = np.lib.format.read_array(
                io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
    return header["meta"], arrays
