"""
Classifying one digit on the simulated array
=============================================

Needs the MNIST IDX files (PPA_MNIST_DIR or ~/data/mnist). Writes every
register plane as a PGM image into ./dump_two_layer.
"""
import numpy as np

from ppacnn.cli import shipped_weights
from ppacnn.mnist import load_split, preprocess
from ppacnn.netplan import NetworkSpec, compile_plan, infer
from ppacnn.oracle import dense_forward
from ppacnn.pgm import dump_state

test = load_split("test")
spec = NetworkSpec.two_layer()
weights = shipped_weights(spec.preset)
plan = compile_plan(spec, weights)
print(plan.stage_names)

#%% the 28 x 28 digit becomes a 32 x 32 binary image
img = preprocess(test.images[0], spec.input_side)
print("\n".join("".join("#" if v else "." for v in row) for row in img[::2]))

#%% run it; isolation keeps convolution shifts inside each 32 x 32 block
res = infer(plan, img, isolation=True)
print("label", test.labels[0], "predicted", res.label)
print(np.round(res.activations, 1))
print(res.report.table())

#%% the dense reference gives exactly the same neuron sums
ref, stages = dense_forward(weights, img)
print("max difference", np.abs(ref - res.activations).max())

#%% without isolation, convolutions near block edges read the neighbouring block;
# that block holds the same digit, whose blank border usually makes this harmless
leaky = infer(plan, img, isolation=False)
print("leakage changes the sums by up to", np.abs(leaky.activations - ref).max())
edge = img.copy()
edge[:, 0] = 1                      # ink on the left border leaks into the block to the west
leaky = infer(plan, edge, isolation=False)
print("with ink on the border:", np.abs(leaky.activations - dense_forward(weights, edge)[0]).max())

#%% look at the planes (R1 holds the pooled feature maps, one per block)
manifest = dump_state(res.state, "dump_two_layer")
print(sorted(manifest["planes"]))
