"""Train a small network on synthetic phantoms, then segment and score a new one.

Takes a couple of minutes on one CPU core. Pass a step count to shorten or
lengthen training, e.g. ``python3 demos/phantom_pipeline.py 100``.
"""
import sys
import time

from dilatedseg import inference, metrics, network as net, optim
from dilatedseg.phantom import PhantomSpec, make_phantom
from dilatedseg.volume import preprocess, resample_labels_nearest

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
spec = PhantomSpec()

dataset = []
for i in range(4):
    image, labels = make_phantom(spec, i)
    dataset.append((preprocess(image), resample_labels_nearest(labels, 0.65)))
print(f"{len(dataset)} phantoms, isotropic dims {dataset[0][0].dims}")

config = net.default_config(width=8)
plan = optim.TrainPlan(steps=steps, batch_size=4, crop_size=151, seed=0)
print(plan.banner())
t0 = time.perf_counter()
weights, log = optim.train(config, dataset, plan,
                           progress=lambda s, l: s % 50 == 0 and print(f"  step {s:4d}  loss {l:.4f}"))
print(f"trained in {time.perf_counter() - t0:.0f} s")

image, labels = make_phantom(spec, 4)
result = inference.fuse_and_segment(config, weights, image)
print(f"segmented {image.dims} in {result.timing_seconds:.1f} s")
print(metrics.evaluate(result.labels, labels).table())
