"""Reader for the channel-dataset interchange format.

The file layout (independently implemented here so the benchmark only
couples to the wire format): magic ``MSERCHAN``, format version u32, user
count u32, per-user ``(n_rx u32, n_tx u32)``, record count u32, then each
record's per-user matrices row-major as little-endian (real f64, imag f64)
pairs.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MSERCHAN"
SUPPORTED_VERSION = 1


class DatasetFormatError(RuntimeError):
    pass


def load_channels(path) -> list[list[np.ndarray]]:
    """Return one list of per-user complex matrices per record."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DatasetFormatError("bad magic bytes; not a channel dataset")
        version, = struct.unpack("<I", f.read(4))
        if version != SUPPORTED_VERSION:
            raise DatasetFormatError(f"unsupported format version {version}")
        n_users, = struct.unpack("<I", f.read(4))
        dims = []
        for _ in range(n_users):
            n_rx, n_tx = struct.unpack("<II", f.read(8))
            dims.append((n_rx, n_tx))
        count, = struct.unpack("<I", f.read(4))
        records = []
        for idx in range(count):
            mats = []
            for (n_rx, n_tx) in dims:
                need = n_rx * n_tx * 16
                raw = f.read(need)
                if len(raw) != need:
                    raise DatasetFormatError(f"truncated in record {idx}")
                flat = np.frombuffer(raw, dtype="<f8").reshape(n_rx, n_tx, 2)
                mats.append((flat[..., 0] + 1j * flat[..., 1]).copy())
            records.append(mats)
        if f.read(1):
            raise DatasetFormatError("trailing bytes after last record")
    return records


def channel_tensor(mats: list[np.ndarray]) -> np.ndarray:
    """Stack per-user matrices as a (2*K, n_rx, n_tx) real tensor."""
    parts = []
    for m in mats:
        parts.append(m.real)
        parts.append(m.imag)
    return np.stack(parts).astype(np.float32)
