"""Dense 3D containers, preprocessing, and prediction-mask utilities.

Voxel order convention: a volume with dims (W, H, D) is stored as a C-order
array of shape (D, H, W), so the flat index of voxel (x, y, z) is
i = x + W * (y + H * z), with x varying fastest. All flat payloads (files,
wire frames) use this order.

All container types are immutable after construction: the backing arrays are
copied in and marked read-only, so instances are safe to share across
concurrent readers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

Dims = tuple[int, int, int]


class DimsMismatchError(ValueError):
    """Two grids that must share dims do not."""


class NonFiniteDataError(ValueError):
    """Input data contains NaN or infinity; message carries the voxel index."""


def _validate_dims(dims: Sequence[int]) -> Dims:
    if len(dims) != 3 or any(int(d) != d or d < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims!r}")
    return (int(dims[0]), int(dims[1]), int(dims[2]))


def _grid_shape(dims: Dims) -> tuple[int, int, int]:
    w, h, d = dims
    return (d, h, w)


def _as_grid(data: np.ndarray | Sequence, dims: Dims, dtype=None) -> np.ndarray:
    """Accept a flat (p,) or grid (D,H,W) array and return an owned, locked grid."""
    arr = np.asarray(data, dtype=dtype)
    shape = _grid_shape(dims)
    p = shape[0] * shape[1] * shape[2]
    if arr.ndim == 1:
        if arr.size != p:
            raise ValueError(f"flat data has {arr.size} values, dims imply {p}")
        arr = arr.reshape(shape)
    elif arr.shape != shape:
        raise ValueError(f"grid data has shape {arr.shape}, dims imply {shape}")
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _check_finite(arr: np.ndarray) -> None:
    finite = np.isfinite(arr)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.reshape(-1))[0])
        raise NonFiniteDataError(f"non-finite value at voxel {idx}")


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar field; ``data`` has grid shape (D, H, W)."""

    dims: Dims
    data: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        dims = _validate_dims(self.dims)
        data = _as_grid(self.data, dims)
        _check_finite(data)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @classmethod
    def from_flat(cls, flat, dims, spacing=None, dtype=None) -> "Volume":
        return cls(dims=_validate_dims(dims), data=np.asarray(flat, dtype=dtype), spacing=spacing)

    @property
    def num_voxels(self) -> int:
        w, h, d = self.dims
        return w * h * d

    def flat(self) -> np.ndarray:
        """Flat view in x-fastest order."""
        return self.data.reshape(-1)

    def with_data(self, data) -> "Volume":
        return Volume(dims=self.dims, data=data, spacing=self.spacing)


@dataclass(frozen=True)
class LogitField:
    """Per-voxel, per-class model output; ``data`` has shape (D, H, W, l)."""

    dims: Dims
    num_classes: int
    data: np.ndarray

    def __post_init__(self):
        dims = _validate_dims(self.dims)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        shape = _grid_shape(dims) + (self.num_classes,)
        arr = np.asarray(self.data)
        if arr.ndim == 1:
            if arr.size != int(np.prod(shape)):
                raise ValueError(f"flat data has {arr.size} values, expected {int(np.prod(shape))}")
            arr = arr.reshape(shape)
        elif arr.shape != shape:
            raise ValueError(f"logit data has shape {arr.shape}, expected {shape}")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        _check_finite(arr)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", arr)

    @property
    def num_voxels(self) -> int:
        w, h, d = self.dims
        return w * h * d

    def class_plane(self, c: int) -> np.ndarray:
        """Logits of class c as a (D, H, W) grid."""
        return self.data[..., c]

    def flat(self) -> np.ndarray:
        """Flat view, voxel-major then class: value(i, c) at index i*l + c."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class ClassMask:
    """Binary voxel mask; ``data`` has grid shape (D, H, W), dtype uint8."""

    dims: Dims
    data: np.ndarray

    def __post_init__(self):
        dims = _validate_dims(self.dims)
        data = _as_grid(self.data, dims, dtype=np.uint8)
        bad = (data > 1)
        if bad.any():
            idx = int(np.flatnonzero(bad.reshape(-1))[0])
            raise ValueError(f"mask value not in {{0,1}} at voxel {idx}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    def count(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return self.count() == 0

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


class RoISource(Enum):
    PREDICTED = "predicted"
    EXTERNAL = "external"


@dataclass
class RoISet:
    """Ordered, uniquely named collection of same-dims binary masks."""

    entries: list[tuple[str, ClassMask]] = field(default_factory=list)
    source: RoISource = RoISource.PREDICTED

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("RoI names must be unique")
        dims = {mask.dims for _, mask in self.entries}
        if len(dims) > 1:
            raise DimsMismatchError(f"RoI masks carry mixed dims: {sorted(dims)}")

    @classmethod
    def from_predicted(cls, masks: Iterable[ClassMask], names: Sequence[str] | None = None) -> "RoISet":
        masks = list(masks)
        if names is None:
            names = [f"class_{c}" for c in range(len(masks))]
        return cls(entries=list(zip(names, masks)), source=RoISource.PREDICTED)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    @property
    def masks(self) -> list[ClassMask]:
        return [mask for _, mask in self.entries]

    def add(self, name: str, mask: ClassMask) -> None:
        if name in self.names:
            raise ValueError(f"duplicate RoI name {name!r}")
        if self.entries and mask.dims != self.entries[0][1].dims:
            raise DimsMismatchError(f"RoI {name!r} dims {mask.dims} != {self.entries[0][1].dims}")
        self.entries.append((name, mask))

    def __len__(self) -> int:
        return len(self.entries)


def preprocess(raw: Volume, clip_lo: float, clip_hi: float) -> Volume:
    """Clamp values into [clip_lo, clip_hi] and rescale linearly to [0, 1]."""
    if not clip_lo < clip_hi:
        raise ValueError(f"clip_lo must be < clip_hi, got [{clip_lo}, {clip_hi}]")
    clipped = np.clip(raw.data, clip_lo, clip_hi)
    scaled = (clipped - clip_lo) / (clip_hi - clip_lo)
    return Volume(dims=raw.dims, data=scaled.astype(np.float32), spacing=raw.spacing)


def argmax_masks(logits: LogitField) -> list[ClassMask]:
    """One binary mask per class marking voxels where that class wins the argmax.

    Ties go to the lowest class index, so the masks always partition the
    voxel set exactly.
    """
    winner = np.argmax(logits.data, axis=-1)
    return [
        ClassMask(dims=logits.dims, data=(winner == c).astype(np.uint8))
        for c in range(logits.num_classes)
    ]


class MaskOp(Enum):
    INTERSECT = "intersect"
    UNION = "union"
    COMPLEMENT = "complement"


def mask_algebra(a: ClassMask, b: ClassMask | None, op: MaskOp) -> ClassMask:
    """Element-wise mask combination; ``b`` is ignored for COMPLEMENT."""
    if op is MaskOp.COMPLEMENT:
        return ClassMask(dims=a.dims, data=(1 - a.data).astype(np.uint8))
    if b is None:
        raise ValueError(f"{op.value} requires a second mask")
    if a.dims != b.dims:
        raise DimsMismatchError(f"mask dims differ: {a.dims} vs {b.dims}")
    if op is MaskOp.INTERSECT:
        out = a.data & b.data
    elif op is MaskOp.UNION:
        out = a.data | b.data
    else:  # pragma: no cover
        raise ValueError(f"unknown op {op!r}")
    return ClassMask(dims=a.dims, data=out)
