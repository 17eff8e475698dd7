"""ROM archive: one binary container per cell plus a JSON manifest.

Container layout (all integers little-endian)::

    magic     8 bytes   b"SFROMAR1"
    count     uint32    number of arrays
    per array:
      name_len  uint16
      name      utf-8 bytes
      ndim      uint32
      shape     ndim x uint64
      data      prod(shape) x float64 (little-endian, C order)

Arrays round-trip bit-exactly.  The manifest ``manifest.json`` records the
scalars (m, shift, omega_max), interface layouts and file names.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .romgen import BoundaryBasis, SubdomainROM

__all__ = ["MAGIC", "write_container", "read_container", "save_archive", "load_archive", "vector_to_list"]

MAGIC = b"SFROMAR1"
MANIFEST = "manifest.json"


def write_container(path, arrays):
    """Write ``{name: array}`` (insertion order kept) to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_container(path):
    """Read a container written by :func:`write_container`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an sfrom archive container")
    (count,) = struct.unpack_from("<I", data, 8)
    pos, out = 12, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def _key_name(key):
    return f"{key[0]},{key[1]}"


def _parse_key(text):
    a, b = text.split(",")
    return int(a), int(b)


def vector_to_list(v):
    return [float(x) for x in np.asarray(v, float)]


def save_archive(directory, roms, basis, *, source=None, receiver=None, extra=None):
    """Write ``roms`` and their interface bases to ``directory``.

    ``source`` / ``receiver`` are optional dicts ``{key: projected vector}``
    stored with the cells that own the interface.
    """
    os.makedirs(directory, exist_ok=True)
    cells = []
    for rom in roms:
        arrays = {name: getattr(rom, name) for name in ("Am", "Bm", "Sm", "T", "R", "Lhat", "L")}
        for key, _ in rom.interfaces:
            arrays[f"S:{_key_name(key)}"] = basis.S[key]
            for tag, io in (("g", source), ("q", receiver)):
                if io is not None and key in io:
                    arrays[f"{tag}:{_key_name(key)}"] = io[key]
        fname = f"cell_{rom.cell:04d}.bin"
        write_container(os.path.join(directory, fname), arrays)
        cells.append({
            "cell": int(rom.cell),
            "file": fname,
            "m": int(rom.m),
            "K": int(rom.K),
            "shift": float(rom.shift),
            "interfaces": [[key[0], key[1], sl.start, sl.stop] for key, sl in rom.interfaces],
        })
    manifest = {
        "format": "sfrom-rom-archive",
        "version": 1,
        "omega_max": float(basis.omega_max),
        "epsilon": None if basis.epsilon is None else float(basis.epsilon),
        "basis": {
            _key_name(k): {"size": int(basis.size(k)), "kept": vector_to_list(basis.kept.get(k, [])), "tail": float(basis.tail.get(k, 0.0))}
            for k in sorted(basis.S)
        },
        "cells": cells,
        "extra": extra or {},
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_archive(directory):
    """Return ``(roms, basis, manifest, io)``; ``io`` maps ``"g"``/``"q"`` to ``{key: vector}``."""
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "sfrom-rom-archive":
        raise ValueError(f"{directory}: not an sfrom ROM archive")
    S, io, roms = {}, {"g": {}, "q": {}}, []
    for entry in manifest["cells"]:
        arrays = read_container(os.path.join(directory, entry["file"]))
        for name, arr in arrays.items():
            if ":" in name:
                tag, key = name.split(":")
                if tag == "S":
                    S[_parse_key(key)] = arr
                else:
                    io[tag][_parse_key(key)] = arr
        interfaces = [((a, b), slice(lo, hi)) for a, b, lo, hi in entry["interfaces"]]
        roms.append(SubdomainROM(
            entry["cell"], entry["m"], entry["shift"],
            arrays["Am"], arrays["Bm"], arrays["Sm"], arrays["T"], arrays["R"], arrays["Lhat"], arrays["L"],
            interfaces,
        ))
    info = manifest["basis"]
    basis = BoundaryBasis(
        S, manifest["omega_max"], manifest["epsilon"],
        {_parse_key(k): np.asarray(v["kept"]) for k, v in info.items()},
        {_parse_key(k): v["tail"] for k, v in info.items()},
    )
    return roms, basis, manifest, io
