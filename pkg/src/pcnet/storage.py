"""On-disk formats: PCTN tensor containers, checkpoints, PGM, manifests.

PCTN layout: magic "PCTN", version u16 LE, dtype code u8 (0=f32, 1=f64,
2=u8), rank u8, extents as u64 LE, then raw little-endian data.

A checkpoint is a text manifest (ordered tensor names and shapes plus the
model identity) terminated by a "---" line, followed by the concatenated
PCTN records in manifest order; writing is canonical so round-trips are
byte-exact.
"""

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"PCTN"
VERSION = 1
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "u1"}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                  np.dtype(np.uint8): 2}


class FormatError(ValueError):
    """Corrupt or unsupported container content."""


def write_tensor(f, tensor):
    arr = tensor.data if isinstance(tensor, Tensor) else np.ascontiguousarray(tensor)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise FormatError(f"dtype {arr.dtype} not storable")
    f.write(MAGIC)
    f.write(struct.pack("<HBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def read_tensor(f):
    head = f.read(8)
    if len(head) != 8 or head[:4] != MAGIC:
        raise FormatError("not a PCTN record")
    version, code, rank = struct.unpack("<HBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported PCTN version {version}")
    if code not in _CODE_TO_DTYPE or not 1 <= rank <= 5:
        raise FormatError(f"bad dtype code {code} or rank {rank}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    dt = np.dtype(_CODE_TO_DTYPE[code])
    n = int(np.prod(shape))
    buf = f.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise FormatError("truncated PCTN record")
    arr = np.frombuffer(buf, dtype=dt).reshape(shape)
    return Tensor(arr.astype(arr.dtype.newbyteorder("="), copy=True))


def save_tensor(path, tensor):
    with open(path, "wb") as f:
        write_tensor(f, tensor)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, variant, spatial_rank, base_channels, tensors):
    """tensors: ordered {name: Tensor}; names must be whitespace-free."""
    with open(path, "wb") as f:
        lines = [f"PCKPT {VERSION}",
                 f"variant={variant}",
                 f"spatial_rank={spatial_rank}",
                 f"base_channels={base_channels}",
                 f"tensors={len(tensors)}"]
        for name, t in tensors.items():
            if any(ch.isspace() for ch in name):
                raise FormatError(f"tensor name {name!r} contains whitespace")
            lines.append(f"{name} {','.join(str(e) for e in t.shape)}")
        lines.append("---")
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for t in tensors.values():
            write_tensor(f, t)


def load_checkpoint(path):
    """Returns (meta dict, {name: Tensor}) in manifest order."""
    with open(path, "rb") as f:
        header = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError("checkpoint manifest not terminated")
            line = line.decode("ascii").rstrip("\n")
            if line == "---":
                break
            header.append(line)
        if not header or not header[0].startswith("PCKPT"):
            raise FormatError("not a checkpoint file")
        meta = {}
        names = []
        for line in header[1:]:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
            else:
                names.append(line.split(" ", 1)[0])
        if len(names) != int(meta.get("tensors", -1)):
            raise FormatError("tensor count does not match manifest")
        meta["spatial_rank"] = int(meta["spatial_rank"])
        meta["base_channels"] = int(meta["base_channels"])
        tensors = {name: read_tensor(f) for name in names}
    return meta, tensors


# ---------------------------------------------------------------------------
# PGM import


def load_pgm(path):
    """Binary PGM (P5, maxval 255) as a [1,H,W] float32 tensor in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"PGM maxval {maxval} not supported (expected 255)")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    img = raw.reshape(h, w).astype(np.float32) / 255.0
    return Tensor(img[None])


# ---------------------------------------------------------------------------
# dataset manifests


def write_manifest(path, rows):
    """rows: iterable of (record id, pixels path, mask path or None)."""
    with open(path, "w") as f:
        for rid, px, mask in rows:
            f.write(f"{rid}\t{px}\t{mask if mask else '-'}\n")


def read_manifest(path):
    rows = []
    base = Path(path).parent
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{ln}: expected 3 tab-separated fields")
            rid, px, mask = parts
            px_path = base / px if not Path(px).is_absolute() else Path(px)
            mask_path = None if mask == "-" else (
                base / mask if not Path(mask).is_absolute() else Path(mask))
            rows.append((rid, px_path, mask_path))
    return rows
