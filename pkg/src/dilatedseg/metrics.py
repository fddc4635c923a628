"""Overlap and boundary-distance scores for label volumes.

Boundary voxels are mask voxels with at least one 6-neighbour outside the
mask (voxels on the volume border always count). Distances are Euclidean in
millimetres between voxel centres. The average distance to boundaries (ADB)
is the symmetric mean over both boundary sets::

    (sum_{p in dA} d(p, dB) + sum_{q in dB} d(q, dA)) / (|dA| + |dB|)

Nearest-boundary distances come from a k-d tree, which is exact.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError
from .network import CLASS_NAMES
from .volume import Volume

FOREGROUND = (1, 2)


def _array(a):
    return a.data if isinstance(a, Volume) else np.asarray(a)


def dice(a, b):
    """Dice overlap of two binary masks; 1.0 when both are empty."""
    a = _array(a).astype(bool)
    b = _array(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask dims {a.shape} != {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_mask(mask):
    m = _array(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def boundary_voxels(mask, spacing=(1.0, 1.0, 1.0)):
    """Physical ``(x, y, z)`` coordinates (mm) of the boundary voxels, shape ``(n, 3)``.

    ``spacing`` is ``(sx, sy, sz)``; taken from the volume when ``mask`` is one.
    """
    if isinstance(mask, Volume):
        spacing = mask.spacing
    zyx = np.argwhere(boundary_mask(mask))
    return zyx[:, ::-1] * np.asarray(spacing, dtype=np.float64)


def _directed(a_pts, b_pts):
    return cKDTree(b_pts).query(a_pts, k=1)[0]


def _both_directions(a, b, spacing):
    pa = boundary_voxels(a, spacing)
    pb = boundary_voxels(b, spacing)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("boundary distance is undefined for an empty mask")
    return _directed(pa, pb), _directed(pb, pa)


def avg_boundary_distance(a, b, spacing=(1.0, 1.0, 1.0)):
    dab, dba = _both_directions(a, b, spacing)
    return float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)):
    dab, dba = _both_directions(a, b, spacing)
    return float(max(dab.max(), dba.max()))


@dataclass
class ClassMetrics:
    dice: float
    adb: Optional[float] = None
    hausdorff: Optional[float] = None
    empty_prediction: bool = False
    empty_reference: bool = False


@dataclass
class MetricsReport:
    classes: Dict[str, ClassMetrics] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.classes[name]

    def rows(self):
        """Machine-readable ``(class, metric, value)`` triples."""
        out = []
        for name, m in self.classes.items():
            out.append((name, "dice", m.dice))
            if m.adb is not None:
                out.append((name, "adb_mm", m.adb))
                out.append((name, "hausdorff_mm", m.hausdorff))
            if m.empty_prediction:
                out.append((name, "emptyPrediction", 1))
            if m.empty_reference:
                out.append((name, "emptyReference", 1))
        return out

    def machine_lines(self):
        return [f"{c}\t{k}\t{v!r}" if isinstance(v, float) else f"{c}\t{k}\t{v}"
                for c, k, v in self.rows()]

    def table(self):
        lines = [f"{'class':<12} {'Dice':>8} {'ADB (mm)':>10} {'HD (mm)':>10}  flags"]
        for name, m in self.classes.items():
            adb = "-" if m.adb is None else f"{m.adb:.2f}"
            hd = "-" if m.hausdorff is None else f"{m.hausdorff:.2f}"
            flags = ",".join(f for f, on in (("emptyPrediction", m.empty_prediction),
                                             ("emptyReference", m.empty_reference)) if on)
            lines.append(f"{name:<12} {m.dice:>8.4f} {adb:>10} {hd:>10}  {flags}")
        return "\n".join(lines)


def evaluate(pred: Volume, ref: Volume, classes=FOREGROUND):
    """Dice, ADB and Hausdorff distance for each foreground class."""
    if pred.dims != ref.dims:
        raise ShapeError(f"prediction dims {pred.dims} != reference dims {ref.dims}")
    if not np.allclose(pred.spacing, ref.spacing, rtol=1e-6, atol=0):
        raise ShapeError(f"prediction spacing {pred.spacing} != reference spacing {ref.spacing}")
    report = MetricsReport()
    for c in classes:
        a = pred.data == c
        b = ref.data == c
        m = ClassMetrics(dice=dice(a, b), empty_prediction=not a.any(), empty_reference=not b.any())
        if not (m.empty_prediction or m.empty_reference):
            dab, dba = _both_directions(a, b, ref.spacing)
            m.adb = float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))
            m.hausdorff = float(max(dab.max(), dba.max()))
        report.classes[CLASS_NAMES[c]] = m
    return report
