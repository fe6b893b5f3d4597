"""Volumetric data model: grids, plane slicing, normalization, augmentation, VVOL I/O.

Arrays are indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``. The canonical
serialized layout is row-major with x fastest, i.e. ``data.ravel(order="F")``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConstantVolume,
    DimsMismatch,
    FormatError,
    InconsistentStack,
    InvalidVolume,
)

AXES = ("xy", "xz", "yz")
AUGMENT_OPS = ("rot90", "rot180", "rot270", "flip_x", "flip_y")

# axis name -> the volume axis the slices are stacked along
_STACK_AXIS = {"xy": 2, "xz": 1, "yz": 0}


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise InvalidVolume(f"dims must be three positive extents, got {dims}")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise InvalidVolume(f"spacing must be three positive values, got {spacing}")
    return dims, spacing


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise InvalidVolume(f"volume data must be 3D, got shape {data.shape}")
        _, spacing = _check_geometry(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise InvalidVolume("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape

    @classmethod
    def from_flat(cls, dims, spacing, values) -> "Volume":
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(dims)):
            raise InvalidVolume(f"{values.size} values for dims {tuple(dims)}")
        return cls(values.reshape(tuple(dims), order="F"), spacing)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    labels: np.ndarray
    num_classes: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 3:
            raise InvalidVolume(f"label data must be 3D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidVolume(f"labels outside [0, {self.num_classes})")
        if self.num_classes < 2:
            raise InvalidVolume("num_classes must be >= 2")
        _, spacing = _check_geometry(labels.shape, self.spacing)
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.labels.shape

    def mask(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def __eq__(self, other):
        return (
            isinstance(other, LabelVolume)
            and self.num_classes == other.num_classes
            and self.spacing == other.spacing
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel class probabilities, array shape ``(C, nx, ny, nz)``."""

    probs: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    SIMPLEX_TOL = 1e-6

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 4 or probs.shape[0] < 2:
            raise InvalidVolume(f"probabilities must have shape (C>=2, nx, ny, nz), got {probs.shape}")
        _, spacing = _check_geometry(probs.shape[1:], self.spacing)
        if not np.all(np.isfinite(probs)) or probs.min() < 0:
            raise InvalidVolume("probabilities must be finite and nonnegative")
        if np.abs(probs.sum(axis=0) - 1.0).max() > self.SIMPLEX_TOL:
            raise InvalidVolume("per-voxel probabilities do not sum to 1")
        object.__setattr__(self, "probs", _frozen(probs))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.probs.shape[1:]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, ProbVolume)
            and self.spacing == other.spacing
            and np.array_equal(self.probs, other.probs)
        )


@dataclass(frozen=True)
class PlaneStack:
    axis: str
    slices: tuple
    source_dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)


def normalize(v: Volume) -> Volume:
    """Zero-mean, unit-variance rescaling using this volume's own statistics."""
    if v.data.size < 2:
        raise ConstantVolume("normalization needs at least two voxels")
    mean = v.data.mean()
    centered = v.data - mean
    std = np.sqrt(np.mean(centered * centered))
    if std == 0 or np.max(np.abs(centered)) == 0:
        raise ConstantVolume("volume has zero variance")
    out = centered / std
    # one refinement pass removes the rounding residue of the first pass
    out = out - out.mean()
    out = out / np.sqrt(np.mean(out * out))
    return Volume(out, v.spacing)


def plane_array(data: np.ndarray, axis: str) -> np.ndarray:
    """View ``data`` (spatial axes last three) as a stack of 2D planes, stack axis first.

    Leading axes (e.g. a class axis) are kept in front of the stack axis.
    """
    if axis not in _STACK_AXIS:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    lead = data.ndim - 3
    return np.moveaxis(data, lead + _STACK_AXIS[axis], lead)


def unplane_array(stacked: np.ndarray, axis: str) -> np.ndarray:
    lead = stacked.ndim - 3
    return np.moveaxis(stacked, lead, lead + _STACK_AXIS[axis])


def slice_volume(v: Volume, axis: str) -> PlaneStack:
    planes = plane_array(v.data, axis)
    slices = tuple(np.array(planes[k]) for k in range(planes.shape[0]))
    return PlaneStack(axis, slices, v.dims, v.spacing)


def reassemble(s: PlaneStack) -> Volume:
    if s.axis not in _STACK_AXIS:
        raise InconsistentStack(f"unknown axis {s.axis!r}")
    dims = tuple(s.source_dims)
    stack_axis = _STACK_AXIS[s.axis]
    plane_dims = tuple(d for i, d in enumerate(dims) if i != stack_axis)
    if len(s.slices) != dims[stack_axis]:
        raise InconsistentStack(f"{len(s.slices)} slices, expected {dims[stack_axis]}")
    for k, sl in enumerate(s.slices):
        if np.shape(sl) != plane_dims:
            raise InconsistentStack(f"slice {k} has dims {np.shape(sl)}, expected {plane_dims}")
    return Volume(unplane_array(np.stack(s.slices), s.axis), s.spacing)


def augment_array(a: np.ndarray, op: str) -> np.ndarray:
    """Apply an augmentation to the last three (x, y, z) axes of ``a``."""
    ax, ay = a.ndim - 3, a.ndim - 2
    if op == "identity":
        return a
    if op in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
        return np.ascontiguousarray(np.rot90(a, k, axes=(ax, ay)))
    if op == "flip_x":
        return np.ascontiguousarray(np.flip(a, ax))
    if op == "flip_y":
        return np.ascontiguousarray(np.flip(a, ay))
    raise ValueError(f"unknown augmentation {op!r}")


def _rotated_spacing(spacing, op):
    if op in ("rot90", "rot270"):
        return (spacing[1], spacing[0], spacing[2])
    return spacing


def augment(v: Volume, l: LabelVolume, op: str):
    if v.dims != l.dims:
        raise DimsMismatch(f"image {v.dims} vs labels {l.dims}")
    if op not in AUGMENT_OPS:
        raise ValueError(f"op must be one of {AUGMENT_OPS}, got {op!r}")
    sp = _rotated_spacing(v.spacing, op)
    return (
        Volume(augment_array(v.data, op), sp),
        LabelVolume(augment_array(l.labels, op), l.num_classes, _rotated_spacing(l.spacing, op)),
    )


def argmax_labels(p: ProbVolume) -> LabelVolume:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return LabelVolume(np.argmax(p.probs, axis=0), p.num_classes, p.spacing)


def one_hot(l: LabelVolume) -> ProbVolume:
    probs = np.zeros((l.num_classes,) + l.dims)
    np.put_along_axis(probs, l.labels[None], 1.0, axis=0)
    return ProbVolume(probs, l.spacing)


# --- VVOL file format -------------------------------------------------------

_MAGIC = "VVOL1"


def write_vvol(path, obj) -> None:
    """Write a Volume (f32), LabelVolume (u8) or ProbVolume (probC) to ``path``."""
    if isinstance(obj, Volume):
        dtype, payload = "f32", obj.flat().astype("<f4").tobytes()
    elif isinstance(obj, LabelVolume):
        if obj.num_classes > 256:
            raise FormatError("u8 payload holds at most 256 classes")
        dtype, payload = "u8", obj.labels.ravel(order="F").astype("u1").tobytes()
    elif isinstance(obj, ProbVolume):
        dtype = f"prob{obj.num_classes}"
        payload = b"".join(obj.probs[c].ravel(order="F").astype("<f4").tobytes() for c in range(obj.num_classes))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    nx, ny, nz = obj.dims
    header = f"{_MAGIC} {nx} {ny} {nz} {obj.spacing[0]!r} {obj.spacing[1]!r} {obj.spacing[2]!r} {dtype}\n"
    Path(path).write_bytes(header.encode("ascii") + payload)


def read_vvol(path, num_classes: int | None = None):
    """Read a VVOL file. ``num_classes`` is required context for u8 label files
    (inferred from the data when omitted)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    fields = raw[:nl].decode("ascii").split()
    if len(fields) != 8 or fields[0] != _MAGIC:
        raise FormatError(f"{path}: malformed header {raw[:nl]!r}")
    dims = tuple(int(f) for f in fields[1:4])
    spacing = tuple(float(f) for f in fields[4:7])
    dtype = fields[7]
    body = raw[nl + 1:]
    nvox = int(np.prod(dims))
    if dtype == "f32":
        vals = np.frombuffer(body, dtype="<f4")
        if vals.size != nvox:
            raise FormatError(f"{path}: payload has {vals.size} values, expected {nvox}")
        return Volume.from_flat(dims, spacing, vals)
    if dtype == "u8":
        vals = np.frombuffer(body, dtype="u1")
        if vals.size != nvox:
            raise FormatError(f"{path}: payload has {vals.size} values, expected {nvox}")
        c = num_classes if num_classes is not None else max(2, int(vals.max()) + 1)
        return LabelVolume(vals.reshape(dims, order="F"), c, spacing)
    if dtype.startswith("prob"):
        c = int(dtype[4:])
        vals = np.frombuffer(body, dtype="<f4").astype(np.float64)
        if vals.size != c * nvox:
            raise FormatError(f"{path}: payload has {vals.size} values, expected {c * nvox}")
        probs = vals.reshape((c,) + dims[::-1]).transpose(0, 3, 2, 1)
        # f32 storage perturbs the simplex by ~1e-7; renormalize on load
        probs = probs / probs.sum(axis=0, keepdims=True)
        return ProbVolume(probs, spacing)
    raise FormatError(f"{path}: unknown dtype {dtype!r}")
