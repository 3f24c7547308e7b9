"""Dense vectors partitioned into consecutively numbered layers.

A layered vector is a flat float array plus a list of (layer_id, dim)
records describing how the array splits into per-layer segments. Parameter
vectors, gradients, and residuals all share this representation; layer ids
run 1..L and backpropagation-style consumers visit them L..1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import IntegrityError, StructureError

SNAPSHOT_MAGIC = b"LAGS"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class LayerShape:
    """One layer's position (1-based) and element count."""

    layer_id: int
    dim: int

    def __post_init__(self):
        if self.dim <= 0:
            raise StructureError(f"layer {self.layer_id}: dim must be positive, got {self.dim}")


def validate_shape(shape: Sequence[LayerShape]) -> tuple[LayerShape, ...]:
    """Check that layer ids are 1..L consecutive and return them as a tuple."""
    shape = tuple(shape)
    if not shape:
        raise StructureError("shape must contain at least one layer")
    for pos, ls in enumerate(shape, start=1):
        if ls.layer_id != pos:
            raise StructureError(f"layer ids must be consecutive from 1; position {pos} has id {ls.layer_id}")
    return shape


class LayeredVector:
    """Flat array of model-dimension length together with its layer split.

    ``layer_slice`` returns views, so in-place edits through a slice are
    visible in the flat data. Values default to 64-bit floats; a 32-bit
    mode exists for timing-realism experiments only.
    """

    __slots__ = ("shape", "data", "_offsets")

    def __init__(self, shape: Sequence[LayerShape], data: np.ndarray, *, copy: bool = False):
        shape = validate_shape(shape)
        data = np.array(data, copy=copy) if copy else np.asarray(data)
        if data.ndim != 1:
            raise StructureError(f"data must be 1-D, got ndim={data.ndim}")
        total = sum(ls.dim for ls in shape)
        if data.shape[0] != total:
            raise StructureError(f"data length {data.shape[0]} does not match layer dims summing to {total}")
        offsets = np.zeros(len(shape) + 1, dtype=np.int64)
        np.cumsum([ls.dim for ls in shape], out=offsets[1:])
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_offsets", offsets)

    # Slots plus object.__setattr__ keep construction cheap while leaving
    # the fields reassignable only through this module.
    def __setattr__(self, name, value):
        raise AttributeError("LayeredVector fields are fixed after construction; mutate .data in place instead")

    @property
    def dim(self) -> int:
        return int(self._offsets[-1])

    @property
    def num_layers(self) -> int:
        return len(self.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @classmethod
    def zeros(cls, shape: Sequence[LayerShape], dtype=np.float64) -> "LayeredVector":
        shape = validate_shape(shape)
        return cls(shape, np.zeros(sum(ls.dim for ls in shape), dtype=dtype))

    @classmethod
    def zeros_like(cls, other: "LayeredVector") -> "LayeredVector":
        return cls(other.shape, np.zeros(other.dim, dtype=other.dtype))

    def copy(self) -> "LayeredVector":
        return LayeredVector(self.shape, self.data.copy())

    def astype(self, dtype) -> "LayeredVector":
        return LayeredVector(self.shape, self.data.astype(dtype))

    def layer_slice(self, layer_id: int) -> np.ndarray:
        """View of layer ``layer_id`` (1-based); writes through the view."""
        if not 1 <= layer_id <= self.num_layers:
            raise IndexError(f"layer_id {layer_id} outside 1..{self.num_layers}")
        lo, hi = self._offsets[layer_id - 1], self._offsets[layer_id]
        return self.data[lo:hi]

    def split(self) -> list[np.ndarray]:
        """Per-layer views in layer order; concatenating them recovers the data."""
        return [self.layer_slice(ls.layer_id) for ls in self.shape]

    def norm_sq(self) -> float:
        return float(np.dot(self.data, self.data))

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))

    def layer_norm_sq(self, layer_id: int) -> float:
        seg = self.layer_slice(layer_id)
        return float(np.dot(seg, seg))

    def __repr__(self):
        dims = ",".join(str(ls.dim) for ls in self.shape)
        return f"LayeredVector(layers=[{dims}], dtype={self.data.dtype})"


def concat(parts: Iterable[np.ndarray], dtype=np.float64) -> LayeredVector:
    """Stack per-layer arrays into one layered vector (layer ids 1..L in order)."""
    parts = [np.asarray(p, dtype=dtype) for p in parts]
    if not parts:
        raise StructureError("cannot concatenate an empty list of parts")
    for i, p in enumerate(parts, start=1):
        if p.ndim != 1 or p.size == 0:
            raise StructureError(f"part {i} must be a non-empty 1-D array")
    shape = [LayerShape(i, p.size) for i, p in enumerate(parts, start=1)]
    return LayeredVector(shape, np.concatenate(parts))


def same_layout(a: LayeredVector, b: LayeredVector) -> bool:
    return a.shape == b.shape


def axpy(alpha: float, x: LayeredVector, y: LayeredVector) -> LayeredVector:
    """Return y + alpha * x; layouts must match exactly."""
    if not same_layout(x, y):
        raise StructureError("axpy operands have different layer layouts")
    return LayeredVector(y.shape, y.data + alpha * x.data)


def save_snapshot(vec: LayeredVector, path) -> None:
    """Write the binary snapshot: magic, version, L, (layer_id, dim) pairs, f64 data.

    All integers are little-endian u32; values are little-endian 64-bit floats
    regardless of the in-memory dtype.
    """
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, vec.num_layers))
        for ls in vec.shape:
            fh.write(struct.pack("<II", ls.layer_id, ls.dim))
        fh.write(np.ascontiguousarray(vec.data, dtype="<f8").tobytes())


def load_snapshot(path) -> LayeredVector:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != SNAPSHOT_MAGIC:
        raise IntegrityError(f"{path}: not a layered-vector snapshot")
    version, layers = struct.unpack_from("<II", raw, 4)
    if version != SNAPSHOT_VERSION:
        raise IntegrityError(f"{path}: unsupported snapshot version {version}")
    offset = 12
    shape = []
    for _ in range(layers):
        if offset + 8 > len(raw):
            raise IntegrityError(f"{path}: truncated snapshot header")
        layer_id, dim = struct.unpack_from("<II", raw, offset)
        shape.append(LayerShape(layer_id, dim))
        offset += 8
    total = sum(ls.dim for ls in shape)
    expected = offset + 8 * total
    if len(raw) != expected:
        raise IntegrityError(f"{path}: snapshot payload is {len(raw) - offset} bytes, expected {8 * total}")
    data = np.frombuffer(raw, dtype="<f8", count=total, offset=offset).astype(np.float64)
    try:
        return LayeredVector(shape, data)
    except StructureError as exc:
        raise IntegrityError(f"{path}: {exc}") from exc
