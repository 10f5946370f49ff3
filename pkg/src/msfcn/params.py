"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (little-endian): magic ``MSFC``, version u32, entry
count u32, then per entry: name length u16, UTF-8 name, dtype u8
(0 = float32, 1 = float64), rank u8, dims u32 each, raw values.
Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CheckpointError, InvalidArgument
from .tensor import Tensor

MAGIC = b"MSFC"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


@dataclass
class Entry:
    tensor: Tensor
    decayed: bool
    trainable: bool


class ParamStore:
    """Insertion-ordered map of parameter name -> tensor plus flags.

    ``decayed`` marks weights that participate in L2 regularization;
    ``trainable`` distinguishes learnable parameters from persistent
    buffers (batch-norm running statistics).
    """

    def __init__(self):
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, tensor: Tensor, decayed: bool = False, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise InvalidArgument(f"parameter {name!r} already registered")
        self._entries[name] = Entry(tensor, decayed, trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Tensor]:
        return (e.tensor for e in self._entries.values())

    def names(self) -> list[str]:
        return list(self._entries)

    def entry(self, name: str) -> Entry:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, Entry]]:
        return iter(self._entries.items())

    def trainable(self) -> Iterator[tuple[str, Entry]]:
        return ((n, e) for n, e in self._entries.items() if e.trainable)

    def total_size(self) -> int:
        return sum(e.tensor.size for e in self._entries.values())

    def save(self, path) -> None:
        save_checkpoint({n: e.tensor.data for n, e in self._entries.items()}, path)

    def load(self, path) -> None:
        """Load a checkpoint into this store; names and shapes must match."""
        arrays = load_checkpoint(path)
        missing = [n for n in self._entries if n not in arrays]
        extra = [n for n in arrays if n not in self._entries]
        if missing or extra:
            raise CheckpointError(
                f"checkpoint does not match model: missing={missing[:3]} extra={extra[:3]}"
            )
        for name, arr in arrays.items():
            t = self._entries[name].tensor
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"checkpoint entry {name!r} has shape {arr.shape}, model expects {t.data.shape}"
                )
            t.data = arr.astype(t.dtype, copy=False)


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        code = _DTYPE_CODES.get(np.dtype(arr.dtype))
        if code is None:
            raise CheckpointError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", raw, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"entry {name!r} has unknown dtype code {code}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            blob = raw[off : off + nbytes]
            if len(blob) != nbytes:
                raise CheckpointError(f"truncated data for entry {name!r} at byte {off}")
            off += nbytes
            arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
            if name in out:
                raise CheckpointError(f"duplicate entry {name!r}")
            out[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {off}: {exc}") from exc
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after last entry")
    return out
