"""WIDP1 checkpoint format.

Layout::

    b"WIDP"                      magic
    u32 little-endian            format version (1)
    u32 little-endian            manifest length in bytes
    manifest                     UTF-8 text, one line per entry
    payload                      little-endian float32 values

Manifest lines are ``name<TAB>d0,d1,...<TAB>offset`` where offset counts
float32 elements into the payload. Lines starting with ``@`` carry
``key=value`` metadata (model dimensions and the like). Entries are written
in sorted name order, so saving a loaded checkpoint reproduces it byte for
byte.
"""
import struct

import numpy as np

MAGIC = b"WIDP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params, meta=None):
    lines = []
    for k, v in sorted((meta or {}).items()):
        lines.append(f"@{k}={v}")
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"bad parameter name {name!r}")
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}\t{offset}")
        chunks.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    manifest = "\n".join(lines).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(manifest)) + manifest + b"".join(chunks)


def loads(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError("not a WIDP checkpoint")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = blob[12:12 + mlen].decode("utf-8")
    payload = np.frombuffer(blob[12 + mlen:], dtype="<f4")
    params, meta = {}, {}
    for line in manifest.split("\n") if manifest else []:
        if line.startswith("@"):
            k, _, v = line[1:].partition("=")
            meta[k] = v
            continue
        name, shape_s, off_s = line.split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        off = int(off_s)
        size = int(np.prod(shape)) if shape else 1
        if off + size > payload.size:
            raise CheckpointError(f"{name}: payload truncated")
        params[name] = payload[off:off + size].reshape(shape).astype(np.float32)
    return params, meta


def save(path, params, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
