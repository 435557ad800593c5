"""
Counting set pixels without an adder
====================================

Set bits fall down their column like sand until every column is a solid
stack. The top of each stack is then the only pixel whose southern
neighbour is empty-or-edge, and reading out the tops gives the count.
"""
import numpy as np

from ppacnn import kernels as K
from ppacnn.array import PEArray
from ppacnn.cost import CostModel

rng = np.random.default_rng(3)
plane = rng.random((8, 8)) < 0.4
print(plane.astype(int))

pe = PEArray(8, 8)
pe.load(K.COUNT, plane)
n = K.stack_count(pe, K.COUNT)
print("stack count", n, "popcount", plane.sum())

#%% the settled stacks (S3 holds them once counting is done)
print(pe.read(K.S3).astype(int))

#%% a full 256 x 256 plane needs 255 fall steps whatever its content
pe = PEArray()
pe.load(K.COUNT, rng.random(pe.shape) < 0.5)
m = pe.trace.mark()
n = K.stack_count(pe, K.COUNT)
print(n, "pixels,", K.fall_iterations(pe), "fall steps,",
      f"{CostModel().time(pe.trace.since(m)):.0f} us modeled")
