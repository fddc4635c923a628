"""Dice, average boundary distance and Hausdorff distance on toy masks."""
import numpy as np

from dilatedseg import metrics
from dilatedseg.volume import Volume

ref = np.zeros((12, 12, 12), np.uint8)
ref[3:9, 3:9, 3:9] = 2          # a 6-voxel cube of blood pool
pred = np.roll(ref, 1, axis=2)  # the same cube shifted one voxel along x

spacing = (0.65, 0.65, 0.65)
report = metrics.evaluate(Volume(pred, spacing, "label"), Volume(ref, spacing, "label"))
print(report.table())
print()
for line in report.machine_lines():
    print(line)

# A cube's boundary is its surface: 6^3 - 4^3 = 152 voxels.
print("\nboundary voxels:", int(metrics.boundary_mask(ref == 2).sum()))
