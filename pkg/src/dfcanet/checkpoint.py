"""Binary checkpoint format for named tensors.

Layout: magic ``DFCA``, u32 version, u32 entry count, then per entry a
length-prefixed UTF-8 name, u32 rank, u32 extents, a one-byte dtype tag
(0 = float32, 1 = float64) and the raw little-endian values.  Feature-map
dump files reuse the same encoding with a single entry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"DFCA"
VERSION = 1

_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FOR = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

OPTIM_PREFIX = "optim."


def _write_entry(f, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    tag = _TAG_FOR.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
    f.write(struct.pack("<B", tag))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_entry(f):
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", _read_exact(f, 1))
    if tag not in _DTYPE_FOR:
        raise CheckpointError(f"unknown dtype tag {tag} for entry {name!r}")
    dt = _DTYPE_FOR[tag]
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def save_entries(path, entries):
    """Write (name, array) pairs; iteration order is preserved on load."""
    items = list(entries)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            _write_entry(f, name, np.asarray(arr))


def load_entries(path) -> dict:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out = {}
        for _ in range(count):
            name, arr = _read_entry(f)
            out[name] = arr
        return out


def save_checkpoint(path, model, optimizer=None):
    entries = list(model.named_state())
    if optimizer is not None:
        entries.extend(optimizer.state_entries())
    save_entries(path, entries)


def write_tensor_file(path, name: str, arr: np.ndarray):
    save_entries(path, [(name, arr)])


def read_tensor_file(path):
    entries = load_entries(path)
    if len(entries) != 1:
        raise CheckpointError(f"{path}: expected a single tensor, found {len(entries)}")
    return next(iter(entries.items()))


@dataclass
class TransferReport:
    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    reinitialized: list = field(default_factory=list)


def apply_entries(model, entries: dict, mode: str = "strict") -> TransferReport:
    """Copy checkpoint arrays into a built model.

    ``strict`` demands an exact name/shape/dtype correspondence with the
    model state; ``transfer`` copies every matching tensor and reports what
    was skipped (source-only) and what stays at its fresh init.
    """
    if mode not in ("strict", "transfer"):
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    params = dict(model.named_parameters())
    buffers = {name: (owner, attr) for name, owner, attr in model.named_buffer_slots()}
    report = TransferReport()
    model_entries = {k: v for k, v in entries.items() if not k.startswith(OPTIM_PREFIX)}

    def compatible(name, arr):
        if name in params:
            t = params[name]
            return arr.shape == t.data.shape and arr.dtype == t.data.dtype
        if name in buffers:
            owner, attr = buffers[name]
            cur = getattr(owner, attr)
            return arr.shape == cur.shape and arr.dtype == cur.dtype
        return False

    if mode == "strict":
        targets = set(params) | set(buffers)
        missing = targets - set(model_entries)
        extra = set(model_entries) - targets
        if missing or extra:
            raise CheckpointError(
                f"strict load mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, arr in model_entries.items():
            if not compatible(name, arr):
                raise CheckpointError(f"strict load: shape/dtype mismatch for {name!r}")

    for name, arr in model_entries.items():
        if compatible(name, arr):
            if name in params:
                params[name].data = arr.copy()
            else:
                owner, attr = buffers[name]
                owner.set_buffer(attr, arr.copy())
            report.loaded.append(name)
        else:
            report.skipped.append(name)
    covered = set(report.loaded)
    report.reinitialized = sorted((set(params) | set(buffers)) - covered)
    return report
