"""Network descriptions, the PPANET weight format, layout compilation and inference."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import kernels as K
from .array import PEArray, NoiseModel
from .cost import CostModel, TraceReport
from .kernels import BlockGrid, FCLayout, FCMode

ARRAY_SIDE = 256


class Preset(enum.Enum):
    TWO_LAYER = "TWO_LAYER"
    THREE_LAYER = "THREE_LAYER"


@dataclass(frozen=True)
class AnalogSum:
    repeats: int = 16


@dataclass(frozen=True)
class DigitalSum:
    bits: int = 4
    # Odd multiple of 15 * (16 / 7): digitization thresholds then never
    # coincide with values reachable from 3-bit layer-one activations.
    range_max: float = 15 * (16 / 7) * 3


@dataclass(frozen=True)
class NetworkSpec:
    preset: Preset
    input_side: int
    conv_filters: tuple[int, ...]
    k: int = 4
    pool: int = 4
    n_neurons: int = 10
    summation: AnalogSum | DigitalSum = AnalogSum()
    # 3-bit digitization used between conv layers
    interlayer_bits: int = 3
    interlayer_range: float = 16.0

    @classmethod
    def two_layer(cls, **kw) -> "NetworkSpec":
        base = dict(preset=Preset.TWO_LAYER, input_side=32, conv_filters=(64,), summation=AnalogSum(16))
        base.update(kw)
        return cls(**base)

    @classmethod
    def three_layer(cls, **kw) -> "NetworkSpec":
        base = dict(preset=Preset.THREE_LAYER, input_side=64, conv_filters=(16, 16), summation=DigitalSum())
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_preset(cls, preset: Preset | str, **kw) -> "NetworkSpec":
        preset = Preset(preset)
        return cls.two_layer(**kw) if preset is Preset.TWO_LAYER else cls.three_layer(**kw)

    @property
    def pooled_side(self):
        return self.input_side // self.pool

    @property
    def n_maps(self):
        return self.conv_filters[-1]

    @property
    def fc_inputs(self) -> int:
        return self.n_maps * self.pooled_side ** 2

    def filter_counts(self) -> tuple[int, ...]:
        """Number of stored filters per conv layer (layer 2 holds one per input/output pair)."""
        if self.preset is Preset.TWO_LAYER:
            return (self.conv_filters[0],)
        return (self.conv_filters[0], self.conv_filters[0] * self.conv_filters[1])


@dataclass
class QuantizedWeights:
    """Binary conv filters (bit 1 => +1) and a ternary FC matrix.

    ``conv[l]`` has shape (n_filters, k, k) in block raster order. For the
    second layer of THREE_LAYER, filter index ``i * n_out + o`` connects
    input map ``i`` to output map ``o``. ``fc`` is (10, n_inputs) with
    inputs in map-major, row, column order.
    """

    preset: Preset
    conv: list
    fc: np.ndarray

    def __post_init__(self):
        self.preset = Preset(self.preset)
        self.conv = [np.asarray(c, dtype=np.uint8) for c in self.conv]
        self.fc = np.asarray(self.fc, dtype=np.int8)
        for c in self.conv:
            if c.ndim != 3 or c.shape[1] != c.shape[2] or not np.isin(c, (0, 1)).all():
                raise ValueError("conv filters must be (n, k, k) arrays of bits")
        if self.fc.ndim != 2 or not np.isin(self.fc, (-1, 0, 1)).all():
            raise ValueError("fc must be a 2-D ternary matrix")

    def conv2_filter(self, out_map: int, in_map: int) -> np.ndarray:
        n_out = self.conv2_outputs
        return self.conv[1][in_map * n_out + out_map]

    @property
    def conv2_outputs(self) -> int:
        n_in = len(self.conv[0])
        return len(self.conv[1]) // n_in

    def __eq__(self, other):
        if not isinstance(other, QuantizedWeights):
            return NotImplemented
        return (self.preset is other.preset and len(self.conv) == len(other.conv)
                and all(np.array_equal(a, b) for a, b in zip(self.conv, other.conv))
                and np.array_equal(self.fc, other.fc))

    @classmethod
    def random(cls, spec: NetworkSpec, rng: np.random.Generator, p_zero: float = 1 / 3) -> "QuantizedWeights":
        conv = [rng.integers(0, 2, size=(n, spec.k, spec.k)) for n in spec.filter_counts()]
        fc = rng.choice([-1, 0, 1], size=(spec.n_neurons, spec.fc_inputs),
                        p=[(1 - p_zero) / 2, p_zero, (1 - p_zero) / 2])
        return cls(spec.preset, conv, fc)


# -- PPANET text format ---------------------------------------------------------------

class WeightFileError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def serialize(weights: QuantizedWeights) -> str:
    out = ["PPANET 1", f"net {weights.preset.value}"]
    for li, conv in enumerate(weights.conv):
        n, k, _ = conv.shape
        out.append(f"conv {li} {n} {k}")
        for f in conv:
            out.extend(" ".join(str(int(b)) for b in row) for row in f)
    n_out, n_in = weights.fc.shape
    out.append(f"fc {n_out} {n_in}")
    out.extend(" ".join(str(int(v)) for v in row) for row in weights.fc)
    out.append("end")
    return "\n".join(out) + "\n"


def parse(text: str) -> QuantizedWeights:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise WeightFileError(1, "empty weight file")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise WeightFileError(pos + 1, "unexpected end of file")
        pos += 1
        return pos, lines[pos - 1].rstrip("\r").split()

    def ints(lineno, toks, allowed, what):
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            raise WeightFileError(lineno, f"non-integer {what} entry") from None
        if allowed is None:
            bad = [v for v in vals if v < 0]
            if bad:
                raise WeightFileError(lineno, f"negative {what} value {bad[0]}")
        else:
            bad = [v for v in vals if v not in allowed]
            if bad:
                raise WeightFileError(lineno, f"{what} entry {bad[0]} not in {sorted(allowed)}")
        return vals

    ln, toks = take()
    if toks != ["PPANET", "1"]:
        raise WeightFileError(ln, "expected header 'PPANET 1'")
    ln, toks = take()
    if len(toks) != 2 or toks[0] != "net" or toks[1] not in Preset.__members__:
        raise WeightFileError(ln, "expected 'net TWO_LAYER|THREE_LAYER'")
    preset = Preset(toks[1])
    conv, fc = [], None
    while True:
        ln, toks = take()
        if not toks:
            raise WeightFileError(ln, "blank line")
        if toks[0] == "conv":
            if fc is not None:
                raise WeightFileError(ln, "conv section after fc")
            if len(toks) != 4:
                raise WeightFileError(ln, "expected 'conv <index> <num_filters> <k>'")
            idx, n, k = ints(ln, toks[1:], None, "conv header")
            if idx != len(conv):
                raise WeightFileError(ln, f"conv index {idx}, expected {len(conv)}")
            if n < 1 or k < 1:
                raise WeightFileError(ln, "conv layer needs at least one filter of size >= 1")
            rows = []
            for _ in range(n * k):
                rl, rt = take()
                if len(rt) != k:
                    raise WeightFileError(rl, f"expected {k} bits")
                rows.append(ints(rl, rt, {0, 1}, "conv"))
            conv.append(np.array(rows, dtype=np.uint8).reshape(n, k, k))
        elif toks[0] == "fc":
            if fc is not None:
                raise WeightFileError(ln, "duplicate fc section")
            if len(toks) != 3:
                raise WeightFileError(ln, "expected 'fc <num_neurons> <num_inputs>'")
            n_out, n_in = ints(ln, toks[1:], None, "fc header")
            if n_out < 1 or n_in < 1:
                raise WeightFileError(ln, "fc layer needs at least one neuron and one input")
            rows = []
            for _ in range(n_out):
                rl, rt = take()
                if len(rt) != n_in:
                    raise WeightFileError(rl, f"expected {n_in} fc entries, got {len(rt)}")
                rows.append(ints(rl, rt, {-1, 0, 1}, "fc"))
            fc = np.array(rows, dtype=np.int8)
        elif toks[0] == "end":
            if len(toks) != 1:
                raise WeightFileError(ln, "trailing tokens after 'end'")
            break
        else:
            raise WeightFileError(ln, f"unknown section {toks[0]!r}")
    if pos != len(lines):
        raise WeightFileError(pos + 1, "content after 'end'")
    if fc is None:
        raise WeightFileError(pos, "missing fc section")
    if not conv:
        raise WeightFileError(pos, "no conv layers")
    return QuantizedWeights(preset, conv, fc)


def save_weights(weights: QuantizedWeights, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(serialize(weights))


def load_weights(path) -> QuantizedWeights:
    with open(path) as f:
        return parse(f.read())


# -- validation and compilation -------------------------------------------------------

class PlanError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


def grids_for(spec: NetworkSpec, width=ARRAY_SIDE, height=ARRAY_SIDE) -> list[BlockGrid]:
    """Conv-layer grids: input-side blocks, then pooled-side blocks for layer 2."""
    grids = [BlockGrid(spec.input_side, spec.input_side, width // spec.input_side,
                       height // spec.input_side)]
    if spec.preset is Preset.THREE_LAYER:
        side = spec.pooled_side
        grids.append(BlockGrid(side, side, width // side, height // side))
    return grids


def validate(spec: NetworkSpec, width=ARRAY_SIDE, height=ARRAY_SIDE) -> list[str]:
    """Structural checks; returns a list of diagnostics (empty when ok)."""
    diags = []
    two = spec.preset is Preset.TWO_LAYER
    if len(spec.conv_filters) != (1 if two else 2):
        diags.append(f"{spec.preset.value} needs {1 if two else 2} conv layers, got {len(spec.conv_filters)}")
        return diags
    if any(n < 1 for n in spec.conv_filters):
        diags.append("every conv layer needs at least one filter")
    if spec.k < 1:
        diags.append("filter size must be >= 1")
        return diags
    blocks = [spec.input_side] + ([] if two else [spec.pooled_side])
    for li, b in enumerate(blocks):
        if b < 1 or width % b or height % b:
            diags.append(f"layer {li} block {b} does not divide the {width}x{height} array")
        elif b % spec.k:
            diags.append(f"filter size {spec.k} does not divide layer {li} block {b}")
        elif spec.k > b:
            diags.append(f"filter size {spec.k} exceeds block {b}")
    if spec.input_side % spec.pool:
        diags.append(f"pool size {spec.pool} does not divide block {spec.input_side}")
    if diags:
        return diags
    grids = grids_for(spec, width, height)
    if spec.conv_filters[0] > grids[0].n_blocks:
        diags.append(f"{spec.conv_filters[0]} filters exceed grid capacity {grids[0].n_blocks}")
    if not two:
        n_in, n_out = spec.conv_filters
        g2 = grids[1]
        if n_in > g2.blocks_y:
            diags.append(f"{n_in} input maps exceed {g2.blocks_y} block rows")
        if n_out > g2.blocks_x:
            diags.append(f"{n_out} output maps exceed {g2.blocks_x} block columns")
        if g2.blocks_y < spec.n_neurons:
            diags.append(f"{spec.n_neurons} neurons need as many block rows, grid has {g2.blocks_y}")
    else:
        if spec.pool * spec.pool < spec.n_neurons:
            diags.append(f"{spec.pool}x{spec.pool} pooled patches cannot host {spec.n_neurons} neurons")
    if spec.n_neurons != K.N_NEURONS:
        diags.append(f"neuron count must be {K.N_NEURONS}")
    if isinstance(spec.summation, DigitalSum) and not 1 <= spec.summation.bits <= len(K.DIGIT_BITS):
        diags.append(f"digital summation supports 1..{len(K.DIGIT_BITS)} bits")
    return diags


@dataclass(frozen=True)
class Stage:
    name: str
    label: str
    run: Callable = field(repr=False, compare=False)


@dataclass(frozen=True)
class InferencePlan:
    spec: NetworkSpec
    weights: QuantizedWeights
    grids: tuple
    conv_planes: tuple
    fc_layout: FCLayout = field(repr=False)
    stages: tuple

    @property
    def stage_names(self):
        return [s.name for s in self.stages]


def _check_shapes(spec: NetworkSpec, weights: QuantizedWeights):
    diags = []
    if weights.preset is not spec.preset:
        diags.append(f"weights are for {weights.preset.value}, spec is {spec.preset.value}")
    counts = spec.filter_counts()
    if len(weights.conv) != len(counts):
        diags.append(f"expected {len(counts)} conv layers, weights have {len(weights.conv)}")
    else:
        for li, (c, n) in enumerate(zip(weights.conv, counts)):
            if c.shape != (n, spec.k, spec.k):
                diags.append(f"conv {li} has shape {c.shape}, expected {(n, spec.k, spec.k)}")
    if weights.fc.shape != (spec.n_neurons, spec.fc_inputs):
        diags.append(f"fc has shape {weights.fc.shape}, expected {(spec.n_neurons, spec.fc_inputs)}")
    return diags


def compile_plan(spec: NetworkSpec, weights: QuantizedWeights) -> InferencePlan:
    """Lower a network and its weights to planes plus an ordered stage list."""
    diags = validate(spec) or _check_shapes(spec, weights)
    if diags:
        raise PlanError(diags)
    grids = tuple(grids_for(spec))
    conv_planes = [K.embed_conv_weights(weights.conv[0], grids[0], spec.k)]
    two = spec.preset is Preset.TWO_LAYER
    if two:
        fc_layout = K.embed_fc_weights(weights.fc, FCMode.POOLED_CHECKERBOARD, grids[0], spec.pool)
    else:
        conv_planes.append(K.embed_conv_weights(weights.conv[1], grids[1], spec.k))
        # layer-2 maps leave the accumulation in block columns, one per map
        fc_grid = grids[1]
        fc_layout = K.embed_fc_weights(weights.fc, FCMode.DUPLICATED_MAPS, fc_grid, spec.pool)

    stages = [Stage("load_input", "load", _stage_load), Stage("duplicate", "duplication", _stage_duplicate),
              Stage("conv1", "conv", _stage_conv(0)), Stage("relu1", "relu", _stage_relu),
              Stage("maxpool", "maxpool", _stage_maxpool)]
    if not two:
        stages += [Stage("shrink_duplicate", "shrink_duplicate", _stage_shrink),
                   Stage("conv2", "conv", _stage_conv(1)),
                   Stage("accumulate", "feature_map_creation", _stage_accumulate)]
    stages += [Stage("fc_multiply", "fc", _stage_fc_multiply), Stage("neuron_sums", "fc", _stage_sums)]
    return InferencePlan(spec, weights, grids, tuple(conv_planes), fc_layout, tuple(stages))


# Stage bodies: (pe, plan, ctx) -> None; ctx carries isolation and results.

def _stage_load(pe, plan, ctx):
    with pe.component("load"):
        side = plan.spec.input_side
        full = np.zeros(pe.shape)
        full[:side, :side] = ctx["image"]
        pe.load(K.ACT, full)
        pe.load("D0", plan.conv_planes[0])
        if len(plan.conv_planes) > 1:
            pe.load("D1", plan.conv_planes[1])
        pe.load(K.FC_W, plan.fc_layout.weights)


def _stage_duplicate(pe, plan, ctx):
    K.duplicate_input(pe, K.ACT, plan.grids[0])


def _stage_conv(layer):
    def run(pe, plan, ctx):
        K.conv_layer(pe, K.ACT, K.CONV_OUT, f"D{layer}", plan.grids[layer], plan.spec.k,
                     isolation=ctx["isolation"])
    return run


def _stage_relu(pe, plan, ctx):
    K.relu(pe, K.CONV_OUT)


def _stage_maxpool(pe, plan, ctx):
    K.maxpool4(pe, K.CONV_OUT, plan.spec.pool)


def _stage_shrink(pe, plan, ctx):
    spec = plan.spec
    K.shrink_and_duplicate(pe, K.CONV_OUT, K.ACT, plan.grids[0], spec.pool, plan.grids[1],
                           bits=spec.interlayer_bits, range_max=spec.interlayer_range)


def _stage_accumulate(pe, plan, ctx):
    K.accumulate_feature_maps(pe, K.CONV_OUT, plan.grids[1])


def _stage_fc_multiply(pe, plan, ctx):
    # activations sit in the conv register; products go to R0
    K.fc_multiply(pe, K.CONV_OUT, K.ACT)


def _stage_sums(pe, plan, ctx):
    s = plan.spec.summation
    if isinstance(s, AnalogSum):
        ctx["activations"] = K.analog_neuron_sums(pe, plan.fc_layout, K.ACT, s.repeats)
    else:
        ctx["activations"] = K.digital_neuron_sums(pe, plan.fc_layout, K.ACT, s.bits, s.range_max)


# -- inference --------------------------------------------------------------------------

@dataclass
class InferenceResult:
    label: int
    activations: np.ndarray
    report: TraceReport
    state: PEArray = field(repr=False)


def new_state(noise: NoiseModel | None = None, costs: CostModel | None = None, **kw) -> PEArray:
    return PEArray(ARRAY_SIDE, ARRAY_SIDE, noise=noise, costs=costs, **kw)


def run_stages(plan: InferencePlan, image, pe: PEArray, stages=None, isolation: bool = False) -> dict:
    image = np.asarray(image, dtype=float)
    side = plan.spec.input_side
    if image.shape != (side, side):
        raise ValueError(f"{plan.spec.preset.value} expects a {side}x{side} image, got {image.shape}")
    if not np.isin(image, (0, 1)).all():
        raise ValueError("input image must be binary")
    ctx = {"image": image, "isolation": isolation}
    for st in plan.stages if stages is None else stages:
        st.run(pe, plan, ctx)
    return ctx


def infer(plan: InferencePlan, image, pe: PEArray | None = None, isolation: bool = False) -> InferenceResult:
    """Run every stage on a fresh (or given) array and classify.

    ``isolation=True`` keeps convolution shifts inside their blocks, which
    is the exact per-block semantics of the dense reference.
    """
    pe = pe if pe is not None else new_state()
    ctx = run_stages(plan, image, pe, isolation=isolation)
    acts = ctx["activations"]
    return InferenceResult(K.argmax_lowest(acts), acts, pe.costs.report(pe.trace), pe)


def evaluate(plan: InferencePlan, images, labels, noise: NoiseModel | None = None, isolation=False,
             costs: CostModel | None = None, gsum_sigmas=None, progress=None) -> dict:
    """Simulated accuracy over a dataset of preprocessed binary images.

    Image ``i`` runs on its own array seeded ``noise.rng_seed + i``. When
    ``gsum_sigmas`` is given, the final summation stage is replayed from a
    snapshot for each value; since global-sum noise has its own random
    stream this equals separate full runs at each sigma.
    """
    noise = noise or NoiseModel.ideal()
    sigmas = [noise.sigma_gsum] if gsum_sigmas is None else list(gsum_sigmas)
    correct = np.zeros(len(sigmas), int)
    preds = np.zeros((len(sigmas), len(images)), int)
    head, tail = plan.stages[:-1], plan.stages[-1:]
    for i, (img, lab) in enumerate(zip(images, labels)):
        pe = new_state(replace(noise, rng_seed=noise.rng_seed + i), costs)
        run_stages(plan, img, pe, head, isolation)
        for si, sg in enumerate(sigmas):
            st = pe.snapshot() if len(sigmas) > 1 else pe
            st.noise = replace(st.noise, sigma_gsum=sg)
            ctx = run_stages(plan, img, st, tail, isolation)
            preds[si, i] = K.argmax_lowest(ctx["activations"])
            correct[si] += preds[si, i] == lab
        if progress:
            progress(i)
    n = max(len(images), 1)
    return {"accuracy": (correct / n).tolist(), "sigma_gsum": sigmas, "predictions": preds}
