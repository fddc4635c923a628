"""Volumes and volumetric preprocessing.

A :class:`Volume` stores its voxels in a numpy array indexed ``[z, y, x]``
(x fastest, matching MetaImage files) while ``dims`` and ``spacing`` are
reported in ``(x, y, z)`` order.

Resampling uses a corner-aligned grid: voxel ``i`` along an axis has its
centre at ``(i + 0.5) * spacing``. Samples falling outside the source grid
are clamped to the nearest border voxel.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ShapeError

KINDS = ("intensity", "label", "probability")
ISOTROPIC_SPACING = 0.65
AXES = ("x", "y", "z")
# array axis holding each spatial axis
ARRAY_AXIS = {"x": 2, "y": 1, "z": 0}


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3-D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"volume has an empty axis: {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")

    @property
    def dims(self):
        """Extents as ``(nx, ny, nz)``."""
        return tuple(int(n) for n in self.data.shape[::-1])

    @property
    def array_spacing(self):
        """Spacing in array-axis order ``(sz, sy, sx)``."""
        return self.spacing[::-1]

    def with_data(self, data, kind=None, spacing=None):
        return Volume(data, self.spacing if spacing is None else spacing, kind or self.kind)


def _as_xyz(value):
    if np.ndim(value) == 0:
        return (float(value),) * 3
    value = tuple(float(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"expected three per-axis values, got {value}")
    return value


def normalize_intensity(v: Volume) -> Volume:
    """Zero mean, unit population standard deviation."""
    data = v.data.astype(np.float64)
    std = data.std()
    if not std > 0:
        raise ValueError("cannot normalise a constant volume")
    return v.with_data(((data - data.mean()) / std).astype(np.float32))


def resampled_dims(v: Volume, target_spacing):
    """Output ``(nx, ny, nz)`` for resampling ``v`` to ``target_spacing``."""
    t = _as_xyz(target_spacing)
    return tuple(max(1, int(np.floor(n * s / ts + 0.5))) for n, s, ts in zip(v.dims, v.spacing, t))


def _source_coords(n_src, n_out, s_src, s_out):
    i = np.arange(n_out, dtype=np.float64)
    u = (i + 0.5) * (s_out / s_src) - 0.5
    return np.clip(u, 0.0, n_src - 1)


def _linear_along(a, axis, n_out, s_src, s_out):
    n = a.shape[axis]
    u = _source_coords(n, n_out, s_src, s_out)
    if n == 1:
        return np.repeat(a, n_out, axis=axis)
    i0 = np.minimum(np.floor(u).astype(np.intp), n - 2)
    frac = u - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape).astype(a.dtype)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    return lo * (1 - frac) + hi * frac


def resample_trilinear(v: Volume, target_spacing, dims=None) -> Volume:
    """Trilinear resampling of an intensity or probability volume.

    ``dims`` (``(nx, ny, nz)``) overrides the extent derived from the physical
    size; pass the original spacing and dims to map back onto an original grid.
    """
    if v.kind == "label":
        raise ValueError("label volumes must use resample_labels_nearest")
    t = _as_xyz(target_spacing)
    out_dims = resampled_dims(v, t) if dims is None else tuple(int(d) for d in dims)
    dtype = v.data.dtype if v.data.dtype.kind == "f" else np.float64
    a = v.data.astype(dtype, copy=False)
    for ax_name in AXES:
        k = ARRAY_AXIS[ax_name]
        i = AXES.index(ax_name)
        if out_dims[i] == a.shape[k] and t[i] == v.spacing[i]:
            continue
        a = _linear_along(a, k, out_dims[i], v.spacing[i], t[i])
    return Volume(np.ascontiguousarray(a), t, v.kind)


def resample_labels_nearest(v: Volume, target_spacing, dims=None) -> Volume:
    """Nearest-neighbour resampling under the trilinear geometry (ties round up)."""
    t = _as_xyz(target_spacing)
    out_dims = resampled_dims(v, t) if dims is None else tuple(int(d) for d in dims)
    a = v.data
    for ax_name in AXES:
        k = ARRAY_AXIS[ax_name]
        i = AXES.index(ax_name)
        n = a.shape[k]
        u = _source_coords(n, out_dims[i], v.spacing[i], t[i])
        idx = np.minimum(np.floor(u + 0.5).astype(np.intp), n - 1)
        a = np.take(a, idx, axis=k)
    return Volume(np.ascontiguousarray(a), t, v.kind)


# rotation plane (from, to) in array axes for a positive quarter turn
_ROT_PLANE = {"z": (2, 1), "x": (1, 0), "y": (0, 2)}


def rotate90(v: Volume, axis, quarter_turns=1) -> Volume:
    """Exact right-angle rotation about ``axis`` (``'x'``, ``'y'`` or ``'z'``).

    The returned data is a view of the input.
    """
    if axis not in _ROT_PLANE:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    k = int(quarter_turns) % 4
    data = np.rot90(v.data, k, axes=_ROT_PLANE[axis])
    spacing = list(v.array_spacing)
    if k % 2:
        a, b = _ROT_PLANE[axis]
        spacing[a], spacing[b] = spacing[b], spacing[a]
    return Volume(data, tuple(spacing[::-1]), v.kind)


ROTATIONS = [(None, 0)] + [(a, k) for a in AXES for k in (1, 2, 3)]


def augment_rotations(v: Volume):
    """The input followed by its nine rotations (3 axes x 90/180/270 degrees)."""
    return [v if a is None else rotate90(v, a, k) for a, k in ROTATIONS]


def isotropic_spacing(volumes, default=ISOTROPIC_SPACING):
    """Smallest voxel dimension over a collection of volumes."""
    spacings = [s for v in volumes for s in v.spacing]
    return min(spacings) if spacings else default


def preprocess(image: Volume, target_spacing=ISOTROPIC_SPACING, normalize_first=True) -> Volume:
    """Normalise and resample an intensity volume onto an isotropic grid."""
    if normalize_first:
        return resample_trilinear(normalize_intensity(image), target_spacing)
    return normalize_intensity(resample_trilinear(image, target_spacing))
