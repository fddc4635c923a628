"""Tour of the dilated architecture: receptive fields and parameter budget.

Dilation doubles the receptive field of layers 2-7 while each layer keeps the
same 9248 parameters. Setting every dilation to 1 keeps the budget but the
field stalls at 17 pixels.
"""
import sys

import numpy as np

from dilatedseg import cli, network as net

print("Default network")
cli.cmd_inspect(net.default_config(), sys.stdout)

print("\nSame layers without dilation")
cli.cmd_inspect(net.default_config(dilated=False), sys.stdout)

# A 201x201 crop shrinks by the field minus one: 201 - 130 = 71.
config = net.default_config(width=8)
weights = net.init_weights(config, np.random.default_rng(0))
probs, _ = net.forward(config, weights, np.zeros((2, 1, 201, 201), np.float32))
print(f"\nforward on 2x1x201x201 -> {probs.shape}")
