"""Compression operators and the sparse chunk representation.

Selection operators take a dense 1-D array and return a ``SparseChunk``
holding (index, value) pairs. Magnitude-based selectors never store
zero-valued entries; reconstructing a chunk and adding the residual
recovers the input bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import StructureError
from .layered import LayerShape

INDEX_BYTES = 4
VALUE_BYTES_F64 = 8
CHUNK_HEADER_BYTES = 8


@dataclass(frozen=True)
class SparseChunk:
    """Selected entries of one layer: strictly increasing indices plus values.

    ``k_target`` is the selection budget the producer was asked for; the
    stored entry count never exceeds it.
    """

    layer_id: int
    dim: int
    indices: np.ndarray
    values: np.ndarray
    k_target: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise StructureError("indices and values must be 1-D arrays of equal length")
        if idx.size > self.k_target:
            raise StructureError(f"{idx.size} entries exceed k_target={self.k_target}")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise StructureError("indices out of range for layer dim")
            if np.any(np.diff(idx) <= 0):
                raise StructureError("indices must be strictly increasing")

    def __len__(self) -> int:
        return int(self.indices.size)

    def nbytes(self, value_width: int = VALUE_BYTES_F64) -> int:
        """Accounting size used by the fusion buffer."""
        return CHUNK_HEADER_BYTES + len(self) * (INDEX_BYTES + value_width)


def decompress(chunk: SparseChunk) -> np.ndarray:
    """Dense array with chunk values at their indices and zeros elsewhere."""
    out = np.zeros(chunk.dim, dtype=chunk.values.dtype if len(chunk) else np.float64)
    if len(chunk):
        out[chunk.indices] = chunk.values
    return out


def top_k(x: np.ndarray, k: int, layer_id: int = 0) -> SparseChunk:
    """Select the k largest-magnitude entries.

    Ties in magnitude go to the lower index; zero entries are never stored,
    so the chunk holds min(k, #nonzeros) entries. The reconstruction error
    is the minimum over all selections of k stored entries.
    """
    x = np.asarray(x)
    d = x.size
    if x.ndim != 1 or d == 0:
        raise ValueError("input must be a non-empty 1-D array")
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside 1..{d}")
    mag = np.abs(x)
    # Stable sort on descending magnitude keeps the original order among
    # equal magnitudes, which is exactly the lowest-index tie rule.
    order = np.argsort(-mag, kind="stable")[:k]
    order = order[mag[order] > 0]
    idx = np.sort(order)
    return SparseChunk(layer_id, d, idx, x[idx].copy(), k_target=k)


def rand_k(x: np.ndarray, k: int, rng: np.random.Generator, layer_id: int = 0) -> SparseChunk:
    """Select k indices uniformly without replacement (deterministic per rng state).

    Zero-valued draws are omitted from storage; reconstruction is unchanged.
    """
    x = np.asarray(x)
    d = x.size
    if x.ndim != 1 or d == 0:
        raise ValueError("input must be a non-empty 1-D array")
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside 1..{d}")
    drawn = rng.choice(d, size=k, replace=False)
    drawn = drawn[x[drawn] != 0]
    idx = np.sort(drawn)
    return SparseChunk(layer_id, d, idx.astype(np.int64), x[idx].copy(), k_target=k)


def sampled_top_k(
    x: np.ndarray,
    k: int,
    sample_fraction: float,
    rng: np.random.Generator,
    layer_id: int = 0,
) -> SparseChunk:
    """Approximate top-k via a sampled magnitude threshold.

    A uniform sample of ceil(sample_fraction * d) elements estimates the
    selection threshold; every entry at or above it is kept. If the
    estimate selects more than 2k or fewer than k/2 entries the routine
    falls back to the exact selector, so message size stays bounded and
    the selection never degenerates.
    """
    x = np.asarray(x)
    d = x.size
    if x.ndim != 1 or d == 0:
        raise ValueError("input must be a non-empty 1-D array")
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside 1..{d}")
    if not 0 < sample_fraction <= 1:
        raise ValueError(f"sample_fraction={sample_fraction} outside (0, 1]")
    if sample_fraction >= 1.0:
        return top_k(x, k, layer_id)
    sample_size = int(math.ceil(sample_fraction * d))
    if sample_size < 1:
        raise ValueError("sample_fraction selects an empty sample")
    sample = rng.choice(d, size=sample_size, replace=False)
    sample_mag = np.abs(x[sample])
    k_sample = max(1, int(round(k * sample_fraction)))
    k_sample = min(k_sample, sample_size)
    threshold = np.partition(sample_mag, sample_size - k_sample)[sample_size - k_sample]
    mag = np.abs(x)
    selected = np.flatnonzero((mag >= threshold) & (mag > 0))
    count = selected.size
    if count > 2 * k or count < k / 2:
        return top_k(x, k, layer_id)
    return SparseChunk(layer_id, d, selected.astype(np.int64), x[selected].copy(), k_target=count)


@dataclass(frozen=True)
class CompressionPolicy:
    """Per-layer compression ratios c >= 1 plus the configured cap.

    The selection count for a layer is max(1, floor(dim / ratio)), so every
    layer transmits at least one entry. ``effective_max_ratio`` reports the
    realized max of dim/k, which can exceed the configured ratio on layers
    where flooring bites.
    """

    per_layer_ratio: Mapping[int, float]
    ratio_cap: float

    def __post_init__(self):
        ratios = dict(self.per_layer_ratio)
        object.__setattr__(self, "per_layer_ratio", ratios)
        if self.ratio_cap < 1:
            raise ValueError(f"ratio_cap must be >= 1, got {self.ratio_cap}")
        for layer_id, c in ratios.items():
            if c < 1:
                raise ValueError(f"layer {layer_id}: ratio {c} < 1")
            if c > self.ratio_cap:
                raise ValueError(f"layer {layer_id}: ratio {c} exceeds cap {self.ratio_cap}")

    @classmethod
    def uniform(cls, ratio: float, shape: Sequence[LayerShape], cap: float | None = None) -> "CompressionPolicy":
        return cls({ls.layer_id: float(ratio) for ls in shape}, cap if cap is not None else float(ratio))

    def ratio_for(self, layer_id: int) -> float:
        return self.per_layer_ratio[layer_id]

    def k_for(self, layer: LayerShape) -> int:
        k = max(1, int(layer.dim // self.ratio_for(layer.layer_id)))
        return min(k, layer.dim)

    def selection_counts(self, shape: Sequence[LayerShape]) -> dict[int, int]:
        return {ls.layer_id: self.k_for(ls) for ls in shape}

    def effective_max_ratio(self, shape: Sequence[LayerShape]) -> float:
        return max(ls.dim / self.k_for(ls) for ls in shape)

    def is_lossless(self, shape: Sequence[LayerShape]) -> bool:
        return all(self.k_for(ls) == ls.dim for ls in shape)


# --- tensor fusion -----------------------------------------------------------


@dataclass(frozen=True)
class FusionMessage:
    """Chunks merged into one network message, per-layer identity retained."""

    chunks: tuple[SparseChunk, ...]

    def nbytes(self, value_width: int = VALUE_BYTES_F64) -> int:
        return sum(c.nbytes(value_width) for c in self.chunks)


def fusion_flush(
    buffer: Sequence[SparseChunk],
    capacity_bytes: int,
    first_layer_done: bool,
    value_width: int = VALUE_BYTES_F64,
) -> FusionMessage | None:
    """Decide whether the buffered chunks should go out as one message.

    Flushes when the buffered bytes reach capacity or when the final layer
    of the backward pass has produced its chunk. Chunks are never split or
    reordered.
    """
    if capacity_bytes <= 0:
        raise ValueError("capacity_bytes must be positive")
    chunks = tuple(buffer)
    seen = set()
    for c in chunks:
        if c.layer_id in seen:
            raise StructureError(f"duplicate layer {c.layer_id} in fusion buffer")
        seen.add(c.layer_id)
        if c.nbytes(value_width) >= capacity_bytes:
            raise ValueError(
                f"capacity {capacity_bytes} does not exceed chunk of {c.nbytes(value_width)} bytes"
            )
    if not chunks:
        return None
    total = sum(c.nbytes(value_width) for c in chunks)
    if total >= capacity_bytes or first_layer_done:
        return FusionMessage(chunks)
    return None


class FusionBuffer:
    """Stateful wrapper around ``fusion_flush`` for streaming use."""

    def __init__(self, capacity_bytes: int, value_width: int = VALUE_BYTES_F64):
        self.capacity_bytes = capacity_bytes
        self.value_width = value_width
        self._pending: list[SparseChunk] = []

    def push(self, chunk: SparseChunk, first_layer_done: bool = False) -> FusionMessage | None:
        self._pending.append(chunk)
        msg = fusion_flush(self._pending, self.capacity_bytes, first_layer_done, self.value_width)
        if msg is not None:
            self._pending.clear()
        return msg

    def pending_bytes(self) -> int:
        return sum(c.nbytes(self.value_width) for c in self._pending)


# --- wire format --------------------------------------------------------------
#
# Chunk: layer_id u32, dim u32, count u32, then count x (index u32, value f64),
# all little-endian. Merged message: count u32 then the chunks back to back.


_ENTRY_DTYPE = np.dtype([("index", "<u4"), ("value", "<f8")])  # packed, 12 bytes


def encode_chunk(chunk: SparseChunk) -> bytes:
    head = struct.pack("<III", chunk.layer_id, chunk.dim, len(chunk))
    entries = np.empty(len(chunk), dtype=_ENTRY_DTYPE)
    entries["index"] = chunk.indices
    entries["value"] = chunk.values
    return head + entries.tobytes()


def decode_chunk(buf: bytes, offset: int = 0) -> tuple[SparseChunk, int]:
    if offset + 12 > len(buf):
        raise StructureError("truncated chunk header")
    layer_id, dim, count = struct.unpack_from("<III", buf, offset)
    offset += 12
    need = count * _ENTRY_DTYPE.itemsize
    if offset + need > len(buf):
        raise StructureError("truncated chunk payload")
    entries = np.frombuffer(buf, dtype=_ENTRY_DTYPE, count=count, offset=offset)
    offset += need
    indices = entries["index"].astype(np.int64)
    values = entries["value"].astype(np.float64)
    return SparseChunk(layer_id, dim, indices, values, k_target=count), offset


def encode_message(message: FusionMessage) -> bytes:
    out = bytearray(struct.pack("<I", len(message.chunks)))
    for chunk in message.chunks:
        out += encode_chunk(chunk)
    return bytes(out)


def decode_message(buf: bytes) -> FusionMessage:
    if len(buf) < 4:
        raise StructureError("truncated message header")
    (count,) = struct.unpack_from("<I", buf, 0)
    offset = 4
    chunks = []
    for _ in range(count):
        chunk, offset = decode_chunk(buf, offset)
        chunks.append(chunk)
    if offset != len(buf):
        raise StructureError(f"{len(buf) - offset} trailing bytes after message payload")
    return FusionMessage(tuple(chunks))
