"""
Noise and timing
================

How accuracy responds to the analog noise model, and where modeled time
goes. Uses 200 test images so it finishes in a few minutes.
"""
from dataclasses import replace

import numpy as np

from ppacnn.array import DEFAULT_NOISE, NoiseModel
from ppacnn.cli import shipped_weights
from ppacnn.mnist import load_split, preprocess
from ppacnn.netplan import NetworkSpec, QuantizedWeights, compile_plan, evaluate, infer

test = load_split("test").subset(200)
spec = NetworkSpec.two_layer()
plan = compile_plan(spec, shipped_weights(spec.preset))
x = preprocess(test.images, spec.input_side)

#%% noiseless, default noise, and stronger noise
for name, nz in [("none", NoiseModel.ideal()), ("default", DEFAULT_NOISE), ("2x", DEFAULT_NOISE.scaled(2))]:
    acc = evaluate(plan, x, test.labels, nz, isolation=True)["accuracy"][0]
    print(f"{name:8s} {acc:.3f}")

#%% readout noise alone, replayed from one pass for several sigmas
g = DEFAULT_NOISE.sigma_gsum
res = evaluate(plan, x, test.labels, replace(DEFAULT_NOISE, sigma_gsum=0.0), isolation=True,
               gsum_sigmas=[0, g, 4 * g, 16 * g])
print(dict(zip(["0", "1x", "4x", "16x"], np.round(res["accuracy"], 3))))

#%% modeled component times for both networks
for preset in ("TWO_LAYER", "THREE_LAYER"):
    s = NetworkSpec.for_preset(preset)
    w = QuantizedWeights.random(s, np.random.default_rng(0))
    r = infer(compile_plan(s, w), np.zeros((s.input_side,) * 2)).report
    print(preset)
    print(r.table())
