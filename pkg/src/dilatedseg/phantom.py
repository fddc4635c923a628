"""Synthetic cardiac-like phantoms with known labels.

The blood pool is a union of overlapping random ellipsoids plus tube-shaped
branches; the myocardium is a shell of fixed thickness wrapped around some
of the ellipsoids. Intensities are class means plus Gaussian noise, scaled by
a smooth multiplicative bias field.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .volume import Volume

BACKGROUND, MYOCARDIUM, BLOOD_POOL = 0, 1, 2


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 96
    seed: int = 0
    spacing: Tuple[float, float, float] = (1.15, 1.15, 1.15)
    class_means: Tuple[float, float, float] = (0.2, 0.5, 0.8)
    noise_sigma: float = 0.05
    bias_amplitude: float = 0.1
    intensity_range: float = 1000.0
    radius_range: Tuple[float, float] = (0.2, 0.3)
    wrap_all: bool = True


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(grid, center, axes, rot):
    d = np.tensordot(rot.T, grid - center[:, None, None, None], axes=1)
    return ((d / axes[:, None, None, None]) ** 2).sum(axis=0) <= 1.0


def _tube(grid, start, direction, length, radius):
    d = grid - start[:, None, None, None]
    along = np.tensordot(direction, d, axes=1)
    perp2 = (d ** 2).sum(axis=0) - along ** 2
    return (along >= 0) & (along <= length) & (perp2 <= radius ** 2)


def _bias_field(grid, n, rng, amplitude):
    field = np.zeros(grid.shape[1:])
    for _ in range(3):
        freq = rng.uniform(0.5, 1.5, size=3) * np.pi / n
        phase = rng.uniform(0, 2 * np.pi, size=3)
        field += np.prod(np.cos(freq[:, None, None, None] * grid + phase[:, None, None, None]), axis=0)
    field /= 3.0
    return 1.0 + amplitude * field


def make_phantom(spec: PhantomSpec = PhantomSpec(), index=0):
    """Returns ``(image, labels)`` volumes for phantom number ``index``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64),) * 3, indexing="ij"))

    ellipsoids = []
    pool = np.zeros((n, n, n), dtype=bool)
    anchor = rng.uniform(0.4, 0.6, size=3) * n
    for _ in range(int(rng.integers(2, 5))):
        center = anchor + rng.uniform(-0.17, 0.17, size=3) * n
        axes = rng.uniform(*spec.radius_range, size=3) * n
        e = _ellipsoid(grid, center, axes, _random_rotation(rng))
        ellipsoids.append(e)
        pool |= e
    for _ in range(int(rng.integers(1, 3))):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        start = anchor + rng.uniform(-0.05, 0.05, size=3) * n
        pool |= _tube(grid, start, direction, rng.uniform(0.3, 0.42) * n, rng.uniform(0.03, 0.05) * n)

    wrapped = np.zeros_like(pool)
    for e in ellipsoids[:len(ellipsoids) if spec.wrap_all else int(rng.integers(2, len(ellipsoids) + 1))]:
        wrapped |= e
    thickness = int(rng.integers(2, 5))
    distance = ndimage.distance_transform_edt(~wrapped)
    myo = (distance <= thickness) & ~pool

    labels = np.zeros((n, n, n), dtype=np.uint8)
    labels[myo] = MYOCARDIUM
    labels[pool] = BLOOD_POOL

    means = np.asarray(spec.class_means)[labels]
    image = means * _bias_field(grid, n, rng, spec.bias_amplitude)
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = (image * spec.intensity_range).astype(np.float32)
    return Volume(image, spec.spacing, "intensity"), Volume(labels, spec.spacing, "label")
