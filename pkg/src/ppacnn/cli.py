"""Command line entry points: train, eval, infer, count, cost-report."""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels as K
from .array import DEFAULT_NOISE, NoiseModel, PEArray
from .calibration import THREE_LAYER_FC_US, TWO_LAYER_TOTAL_US
from .cost import CostModel
from .netplan import (NetworkSpec, Preset, PlanError, QuantizedWeights, WeightFileError,
                      compile_plan, evaluate, infer, load_weights, save_weights)

SHIPPED = {Preset.TWO_LAYER: "two_layer.ppanet", Preset.THREE_LAYER: "three_layer.ppanet"}


def shipped_weights(preset) -> QuantizedWeights:
    """Trained weights bundled with the package."""
    name = SHIPPED[Preset(preset)]
    with resources.as_file(resources.files("ppacnn") / "data" / name) as p:
        return load_weights(p)


def _preset(s: str) -> Preset:
    s = s.upper().replace("-", "_")
    aliases = {"2": "TWO_LAYER", "TWO": "TWO_LAYER", "3": "THREE_LAYER", "THREE": "THREE_LAYER"}
    try:
        return Preset(aliases.get(s, s))
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown network {s!r} (TWO_LAYER or THREE_LAYER)")


def _weights(args, preset=None) -> QuantizedWeights:
    if args.weights:
        return load_weights(args.weights)
    return shipped_weights(preset or Preset.TWO_LAYER)


def _noise(args) -> NoiseModel:
    noise = NoiseModel.ideal() if args.noise_sigma == 0 else DEFAULT_NOISE.scaled(args.noise_sigma)
    if args.sigma_gsum is not None:
        noise = replace(noise, sigma_gsum=args.sigma_gsum)
    return replace(noise, rng_seed=args.seed)


def _spec(weights: QuantizedWeights, repeats=None) -> NetworkSpec:
    spec = NetworkSpec.for_preset(weights.preset)
    if repeats is not None and weights.preset is Preset.TWO_LAYER:
        spec = replace(spec, summation=replace(spec.summation, repeats=repeats))
    return spec


def _fc_note(preset: Preset) -> dict:
    if preset is Preset.THREE_LAYER:
        return {"fc": f"reference {THREE_LAYER_FC_US:.0f} us; this schedule runs one stack count "
                      "per neuron, sign and bit (see README)"}
    return {}


# -- subcommands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    import torch
    from .mnist import load_split, preprocess
    from .oracle import score
    from .trainer import RealValuedNet, TrainConfig, export_quantized, fit

    torch.set_num_threads(1)
    spec = NetworkSpec.for_preset(args.net)
    train = load_split("train", args.mnist_dir).subset(args.limit)
    test = load_split("test", args.mnist_dir)
    xtr = preprocess(train.images, spec.input_side)
    xte = preprocess(test.images, spec.input_side)
    defaults = TRAIN_DEFAULTS[spec.preset]
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, lr=args.lr or defaults["lr"])
    net = RealValuedNet(spec, seed=args.seed, init_scale=defaults["init_scale"])
    fit(net, xtr, train.labels, cfg, eval_set=(xte[:2000], test.labels[:2000]))
    w = export_quantized(net)
    save_weights(w, args.out)
    print(f"wrote {args.out}; dense reference test accuracy {score(w, xte, test.labels):.4f}")
    return 0


# Learning rate and initial logit scale per preset (see README, training notes).
TRAIN_DEFAULTS = {
    Preset.TWO_LAYER: {"lr": 3.0, "init_scale": 0.02},
    Preset.THREE_LAYER: {"lr": 3.0, "init_scale": 0.002},
}


def cmd_eval(args) -> int:
    from .mnist import load_split, preprocess
    from .oracle import score

    w = _weights(args, args.net)
    spec = _spec(w, args.repeats)
    test = load_split("test", args.mnist_dir).subset(args.limit)
    x = preprocess(test.images, spec.input_side)
    plan = compile_plan(spec, w)
    noise = _noise(args)
    t0 = time.time()
    step = max(len(x) // 20, 1)

    def progress(i):
        if args.verbose and (i + 1) % step == 0:
            print(f"  {i + 1}/{len(x)} ({time.time() - t0:.0f}s)", file=sys.stderr)

    res = evaluate(plan, x, test.labels, noise, isolation=args.isolation == "on", progress=progress)
    ref = score(w, x, test.labels)
    print(f"network            {w.preset.value}")
    print(f"images             {len(x)}")
    print(f"noise              op={noise.sigma_op:g} shift={noise.sigma_shift:g} gsum={noise.sigma_gsum:g}")
    print(f"isolation          {args.isolation}")
    print(f"simulated accuracy {res['accuracy'][0]:.4f}")
    print(f"dense reference    {ref:.4f}")
    return 0


def cmd_infer(args) -> int:
    from .mnist import load_split, preprocess
    from .pgm import dump_state

    w = _weights(args, args.net)
    spec = _spec(w)
    test = load_split("test", args.mnist_dir)
    if not 0 <= args.index < len(test):
        raise ValueError(f"index {args.index} outside the test set (0..{len(test) - 1})")
    img = preprocess(test.images[args.index], spec.input_side)
    pe = PEArray(noise=_noise(args))
    res = infer(compile_plan(spec, w), img, pe, isolation=args.isolation == "on")
    print(f"test image {args.index}: label {test.labels[args.index]}, predicted {res.label}")
    print("neuron activations: " + " ".join(f"{a:.2f}" for a in res.activations))
    print(res.report.table(_fc_note(w.preset)))
    if args.dump_dir:
        dump_state(res.state, args.dump_dir)
        print(f"state planes written to {args.dump_dir}")
    return 0


def cmd_count(args) -> int:
    rng = np.random.default_rng(args.seed)
    bad = 0
    for i in range(args.random):
        density = args.density if args.density is not None else rng.random()
        plane = rng.random((args.size, args.size)) < density
        pe = PEArray(args.size, args.size)
        pe.load(K.COUNT, plane)
        got = K.stack_count(pe, K.COUNT)
        want = int(plane.sum())
        if got != want:
            bad += 1
            print(f"plane {i}: stack count {got}, popcount {want}")
    us = CostModel().time(pe.trace.entries) if args.random else 0.0
    print(f"{args.random - bad}/{args.random} planes counted exactly; "
          f"{K.fall_iterations(pe) if args.random else 0} fall iterations, modeled {us:.1f} us per count")
    return 1 if bad else 0


def cmd_cost_report(args) -> int:
    if args.weights:
        w = load_weights(args.weights)
        if args.net and w.preset is not args.net:
            raise ValueError(f"weights are {w.preset.value} but --net is {args.net.value}")
    else:
        w = QuantizedWeights.random(NetworkSpec.for_preset(args.net or Preset.TWO_LAYER),
                                    np.random.default_rng(args.seed))
    spec = _spec(w)
    img = (np.random.default_rng(args.seed).random((spec.input_side,) * 2) < 0.2).astype(float)
    res = infer(compile_plan(spec, w), img)
    print(res.report.table(_fc_note(w.preset)))
    if w.preset is Preset.TWO_LAYER:
        print(f"reference total {TWO_LAYER_TOTAL_US:.0f} us")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppacnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=True, noise=False):
        if weights:
            sp.add_argument("--weights", help="PPANET weight file (default: bundled trained weights)")
            sp.add_argument("--net", type=_preset, default=None, help="TWO_LAYER or THREE_LAYER")
        sp.add_argument("--mnist-dir", default=None, help="directory with the MNIST IDX files")
        sp.add_argument("--seed", type=int, default=0)
        if noise:
            sp.add_argument("--noise-sigma", type=float, default=0.0,
                            help="multiplier of the default noise model (0: noiseless)")
            sp.add_argument("--sigma-gsum", type=float, default=None, help="override the global-sum sigma")
            sp.add_argument("--isolation", choices=("on", "off"), default="off")

    t = sub.add_parser("train", help="train a network and write its quantized weights")
    t.add_argument("--net", type=_preset, default=Preset.TWO_LAYER)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--limit", type=int, default=None, help="use only the first N training images")
    t.add_argument("--out", required=True)
    common(t, weights=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="simulated accuracy on the MNIST test set")
    common(e, noise=True)
    e.add_argument("--repeats", type=int, default=None, help="analog summation repeats")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("-v", "--verbose", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="classify one test image and report modeled timings")
    common(i, noise=True)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--dump-dir", default=None, help="write every register plane as PGM")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("count", help="check stack counting against popcount on random planes")
    c.add_argument("--random", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--size", type=int, default=256)
    c.add_argument("--density", type=float, default=None)
    c.set_defaults(func=cmd_count)

    r = sub.add_parser("cost-report", help="modeled time per network component")
    r.add_argument("--weights", default=None)
    r.add_argument("--net", type=_preset, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_cost_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (WeightFileError, PlanError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
