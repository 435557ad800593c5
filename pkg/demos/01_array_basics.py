"""
The pixel processor array in a few lines
=========================================

Every pixel holds a tiny processor. Instructions run on all of them at once,
optionally masked by a per-pixel flag. Run from the repository root:

    python3 demos/01_array_basics.py
"""
import numpy as np

from ppacnn.array import NoiseModel, PEArray
from ppacnn.cost import CostModel

#%% a small array, noiseless
pe = PEArray(8, 8)
ramp = np.tile(np.arange(8.0), (8, 1))
pe.load("R0", ramp)
pe.shift("R0", "E", 2)          # everything moves two pixels east, zeros flow in
print(pe.read("R0")[0])

#%% flagged execution: only negative pixels get overwritten (this is ReLU)
pe.load("R1", ramp - 4)
pe.set_flag("negative", "R1")
pe.write("R1", 0.0)
pe.set_flag("all")
print(pe.read("R1")[0])

#%% digital registers are bit planes; shifts and logic are exact
pe.load("D0", ramp > 5)
pe.shift_bits("D0", "W", 1)
print(pe.read("D0")[0].astype(int))

#%% every instruction lands in a trace, which the cost model prices
print(pe.trace.kind_counts(pe.trace.entries))
print(f"{CostModel().time(pe.trace.entries):.2f} us modeled")

#%% with noise, analog values pick up a little error at every step
noisy = PEArray(8, 8, noise=NoiseModel(sigma_op=0.01, sigma_shift=0.01, rng_seed=1))
noisy.load("R0", ramp)
for _ in range(10):
    noisy.shift("R0", "E", 1)
    noisy.shift("R0", "W", 1)
print(np.round(noisy.read("R0")[0] - ramp[0], 3))   # the eastmost column fell off the edge
