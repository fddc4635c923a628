"""Whole-volume segmentation from axial, coronal and sagittal slices."""
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from . import network as net
from .errors import ShapeError
from .volume import ARRAY_AXIS, ISOTROPIC_SPACING, Volume, preprocess, resample_trilinear

PLANE_AXES = ("z", "y", "x")
# bytes of activations allowed per inference batch
BATCH_MEMORY = 256 * 2 ** 20


@dataclass
class SegmentationResult:
    labels: Volume
    class_probs: List[Volume]
    plane_probs: Optional[Dict[str, np.ndarray]] = None
    timing_seconds: float = 0.0


def _auto_batch(config, h, w, pad):
    widest = max([config.in_channels] + [l.out_channels for l in config.layers])
    per_slice = 4 * 3 * widest * (h + 2 * pad) * (w + 2 * pad)
    return max(1, int(BATCH_MEMORY // per_slice))


def predict_plane_array(config, weights, iso: Volume, axis, batch_size=None):
    """Class probabilities ``(K, nz, ny, nx)`` from slices orthogonal to ``axis``.

    Every slice is zero-padded by half the receptive field so the network
    output covers the full slice.
    """
    if config.field % 2 == 0:
        raise ShapeError(f"an even receptive field ({config.field}) cannot be centred by padding")
    pad = config.padding
    k = ARRAY_AXIS[axis]
    slices = np.moveaxis(iso.data, k, 0)
    n, h, w = slices.shape
    if batch_size is None:
        batch_size = _auto_batch(config, h, w, pad)
    out = np.empty((n, config.num_classes, h, w), dtype=np.float32)
    buf = np.zeros((min(batch_size, n), 1, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for s in range(0, n, batch_size):
        e = min(n, s + batch_size)
        xb = buf[:e - s]
        xb[:, 0, pad:pad + h, pad:pad + w] = slices[s:e]
        probs, _ = net.forward(config, weights, xb, train=False)
        out[s:e] = probs
    # (n, K, h, w) -> (K, ...) with the slice axis restored
    return np.moveaxis(out, 0, k + 1)


def predict_plane(config, weights, iso: Volume, axis, batch_size=None):
    probs = predict_plane_array(config, weights, iso, axis, batch_size)
    return [Volume(p, iso.spacing, "probability") for p in probs]


def largest_component(mask):
    """Keep the largest 6-connected component of a binary mask.

    Equal-sized components are resolved in favour of the one whose first
    voxel comes first in ``[z, y, x]`` raster order.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    if n <= 1:
        return mask.copy()
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    # ndimage.label numbers components in raster order of their first voxel
    return labels == int(np.argmax(counts))


def fuse_and_segment(config, weights, original: Volume, target_spacing=ISOTROPIC_SPACING,
                     normalize_first=True, batch_size=None, keep_planes=False):
    if original.kind != "intensity":
        raise ValueError(f"expected an intensity volume, got kind {original.kind!r}")
    start = time.perf_counter()
    iso = preprocess(original, target_spacing, normalize_first)
    planes = {a: predict_plane_array(config, weights, iso, a, batch_size) for a in PLANE_AXES}
    mean = sum(planes.values()) / np.float32(len(planes))

    class_probs = [
        resample_trilinear(Volume(mean[c], iso.spacing, "probability"),
                           original.spacing, dims=original.dims)
        for c in range(config.num_classes)
    ]
    stacked = np.stack([v.data for v in class_probs])
    labels = np.argmax(stacked, axis=0).astype(np.uint8)
    for c in range(1, config.num_classes):
        cls = labels == c
        if cls.any():
            labels[cls & ~largest_component(cls)] = 0
    elapsed = time.perf_counter() - start
    return SegmentationResult(
        labels=Volume(labels, original.spacing, "label"),
        class_probs=class_probs,
        plane_probs=planes if keep_planes else None,
        timing_seconds=elapsed,
    )


def _class_array(item, cls):
    if isinstance(item, Volume):
        return item.data
    if isinstance(item, np.ndarray):
        return item[cls] if item.ndim == 4 else item
    member = item[cls]
    return member.data if isinstance(member, Volume) else np.asarray(member)


def ensemble_std(prob_maps, cls, spacing=None) -> Volume:
    """Voxelwise population standard deviation of one class across models.

    Each entry of ``prob_maps`` is a per-class sequence of probability
    volumes (for example ``SegmentationResult.class_probs``), a ``(K, z, y, x)``
    array, or a single-class volume.
    """
    if len(prob_maps) < 2:
        raise ValueError("ensemble_std needs at least two probability maps")
    arrays = [np.asarray(_class_array(m, cls), dtype=np.float64) for m in prob_maps]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"probability map dims {a.shape} != {shape}")
    if spacing is None:
        first = prob_maps[0]
        if isinstance(first, Volume):
            spacing = first.spacing
        elif not isinstance(first, np.ndarray) and isinstance(first[cls], Volume):
            spacing = first[cls].spacing
        else:
            spacing = (1.0, 1.0, 1.0)
    std = np.stack(arrays).std(axis=0)
    return Volume(std.astype(np.float32), spacing, "probability")
