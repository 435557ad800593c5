"""End-to-end acceptance checks, one test per criterion.

The MNIST-based checks need the IDX files (see README) and take about an
hour together on one core; everything else runs in a few minutes.
"""
import numpy as np
import pytest

from ppacnn import kernels as K
from ppacnn.array import DEFAULT_NOISE, NoiseModel, PEArray, drift_bound
from ppacnn.calibration import THREE_LAYER_FC_US, TWO_LAYER_TIMINGS, TWO_LAYER_TOTAL_US
from ppacnn.cli import shipped_weights
from ppacnn.cost import DEFAULT_COSTS, CostModel
from ppacnn.kernels import BlockGrid, FCMode
from ppacnn.mnist import preprocess
from ppacnn.netplan import NetworkSpec, Preset, QuantizedWeights, compile_plan, evaluate, infer
from ppacnn.oracle import OracleConfig, dense_forward, score

pytestmark = pytest.mark.slow


# 1 -----------------------------------------------------------------------------------

@pytest.mark.parametrize("preset", [Preset.TWO_LAYER, Preset.THREE_LAYER], ids=["two", "three"])
def test_c1_oracle_equivalence(preset, mnist_test, criterion):
    spec = NetworkSpec.for_preset(preset)
    rng = np.random.default_rng(2024 if preset is Preset.TWO_LAYER else 2025)
    images = preprocess(mnist_test.images[:100], spec.input_side)
    worst, mismatched = 0.0, 0
    for i in range(100):
        w = QuantizedWeights.random(spec, rng)
        res = infer(compile_plan(spec, w), images[i], isolation=True)
        want, _ = dense_forward(w, images[i])
        worst = max(worst, float(np.abs(res.activations - want).max()))
        mismatched += res.label != K.argmax_lowest(want)
    ok = worst <= 1e-9 and mismatched == 0
    criterion(1, f"oracle equivalence ({preset.value}, 100 weight sets x 100 images)", ok,
              f"max |sim - oracle| = {worst:.2e}, class mismatches {mismatched}")
    assert ok


# 2 -----------------------------------------------------------------------------------

def test_c2_popcount(criterion):
    rng = np.random.default_rng(7)
    densities = [0.0, 0.5, 1.0] + list(rng.random(997))
    pe = PEArray()
    wrong, iters = 0, set()
    for d in densities:
        plane = rng.random(pe.shape) < d
        pe.load(K.COUNT, plane)
        m = pe.trace.mark()
        got = K.stack_count(pe, K.COUNT)
        wrong += got != int(plane.sum())
        shifts = pe.trace.kind_counts(pe.trace.since(m))["bit_shift"]
        iters.add((shifts - 1) // 2)     # two row shifts per fall step, one for the tops
        pe.trace.entries.clear()
    ok = wrong == 0 and iters == {255}
    criterion(2, "stack count = popcount on 1000 planes", ok,
              f"{1000 - wrong}/1000 exact, fall iterations per count {sorted(iters)}")
    assert ok


# 3 -----------------------------------------------------------------------------------

def _window_max(a, p=4):
    out = np.full(a.shape, -np.inf)
    ty, tx = np.indices(a.shape)
    y0, x0 = ty - ty % p, tx - tx % p
    for i in range(p):
        for j in range(p):
            out = np.maximum(out, a[y0 + i, x0 + j])
    return out


def test_c3_maxpool_relu(criterion):
    rng = np.random.default_rng(8)
    pe = PEArray()
    bad_pool = bad_relu = 0
    for _ in range(1000):
        v = rng.normal(size=pe.shape) * rng.uniform(0.1, 20)
        pe.load("R0", v)
        K.maxpool4(pe, "R0")
        bad_pool += not np.array_equal(pe.read("R0"), _window_max(v))
        pe.load("R1", v)
        K.relu(pe, "R1")
        once = pe.read("R1")
        K.relu(pe, "R1")
        bad_relu += not (np.array_equal(once, np.maximum(v, 0)) and np.array_equal(pe.read("R1"), once))
        pe.trace.entries.clear()
    ok = bad_pool == 0 and bad_relu == 0
    criterion(3, "max-pool window max and ReLU idempotence on 1000 planes", ok,
              f"max-pool mismatches {bad_pool}, ReLU mismatches {bad_relu}")
    assert ok


# 4 -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_layer_eval(mnist_test):
    spec = NetworkSpec.two_layer()
    w = shipped_weights(Preset.TWO_LAYER)
    x = preprocess(mnist_test.images, spec.input_side)
    return spec, w, x, mnist_test.labels


@pytest.fixture(scope="module")
def noiseless_two_layer(two_layer_eval):
    spec, w, x, y = two_layer_eval
    oracle = score(w, x, y)
    sim = evaluate(compile_plan(spec, w), x, y, NoiseModel.ideal(), isolation=True)
    return oracle, sim


def test_c4_two_layer_training(noiseless_two_layer, criterion):
    oracle, sim = noiseless_two_layer
    sim_acc = sim["accuracy"][0]
    ok = oracle >= 0.94 and sim_acc == oracle
    criterion(4, "2-layer trained accuracy", ok,
              f"oracle {oracle:.4f} (need >= 0.94), noiseless simulator {sim_acc:.4f}")
    assert ok


# 5 -----------------------------------------------------------------------------------

def test_c5_three_layer_training(mnist_test, criterion):
    spec = NetworkSpec.three_layer()
    w = shipped_weights(Preset.THREE_LAYER)
    x = preprocess(mnist_test.images, spec.input_side)
    acc = score(w, x, mnist_test.labels, OracleConfig(Preset.THREE_LAYER, model_interlayer_quantization=True))
    ok = acc >= 0.96
    criterion(5, "3-layer trained accuracy (3-bit inter-layer stage on)", ok, f"oracle {acc:.4f} (need >= 0.96)")
    assert ok


# 6 -----------------------------------------------------------------------------------

def test_c6_noise_band(two_layer_eval, noiseless_two_layer, criterion):
    spec, w, x, y = two_layer_eval
    noiseless = noiseless_two_layer[0]
    g = DEFAULT_NOISE.sigma_gsum
    res = evaluate(compile_plan(spec, w), x, y, DEFAULT_NOISE, isolation=True, gsum_sigmas=[0.0, g, 4 * g])
    a0, a1, a4 = res["accuracy"]
    ok = a1 >= 0.91 and a1 < noiseless and a0 >= a1 >= a4
    criterion(6, "noisy 2-layer accuracy with default sigmas", ok,
              f"{a1:.4f} (band 0.92-0.94 {'met' if 0.92 <= a1 <= 0.94 else 'missed'}; noiseless {noiseless:.4f}); "
              f"sigma_gsum 0/1x/4x: {a0:.4f} / {a1:.4f} / {a4:.4f}")
    assert ok


# 7 -----------------------------------------------------------------------------------

def test_c7_cost_model(criterion):
    rng = np.random.default_rng(0)
    reports = {}
    for preset in Preset:
        spec = NetworkSpec.for_preset(preset)
        w = QuantizedWeights.random(spec, rng)
        img = (rng.random((spec.input_side,) * 2) < 0.2).astype(float)
        reports[preset] = infer(compile_plan(spec, w), img, isolation=False).report
    two, three = reports[Preset.TWO_LAYER], reports[Preset.THREE_LAYER]
    rows_ok = []
    for row, ref in TWO_LAYER_TIMINGS.items():
        # the table gives the ReLU only as "< 1 us"
        rows_ok.append(two[row] < 1.0 if row == "relu" else abs(two[row] / ref - 1) <= 0.2)
    total_ok = abs(two.total_us / TWO_LAYER_TOTAL_US - 1) <= 0.2
    fps_ok = two.fps == 1e6 / two.total_us
    conv_ok = three["conv"] == pytest.approx(2 * two["conv"], rel=1e-12)
    ok = all(rows_ok) and total_ok and fps_ok and conv_ok
    rows = ", ".join(f"{r} {two[r]:.1f}" for r in TWO_LAYER_TIMINGS)
    criterion(7, "cost model", ok,
              f"{rows}; total {two.total_us:.1f} us ({two.fps:.0f} fps) vs {TWO_LAYER_TOTAL_US:.0f}; "
              f"3-layer conv {three['conv']:.2f} = 2 x {two['conv']:.2f}; "
              f"3-layer fc {three['fc']:.0f} us (reference {THREE_LAYER_FC_US:.0f}, reported only)")
    assert ok


# 8 -----------------------------------------------------------------------------------

def test_c8_analog_averaging(criterion):
    spec = NetworkSpec.two_layer()
    rng = np.random.default_rng(11)
    grid = BlockGrid.square(spec.input_side)
    lay = K.embed_fc_weights(QuantizedWeights.random(spec, rng).fc, FCMode.POOLED_CHECKERBOARD, grid)
    pe = PEArray(noise=NoiseModel(sigma_gsum=DEFAULT_NOISE.sigma_gsum, rng_seed=3))
    pe.load("R0", rng.uniform(0, 10, pe.shape) * lay.weights)
    single = np.array([K.analog_neuron_sums(pe, lay, "R0", 1) for _ in range(200)])
    avg = np.array([K.analog_neuron_sums(pe, lay, "R0", 16) for _ in range(200)])
    s1 = single.std(axis=0).mean()
    s16 = avg.std(axis=0).mean()
    ratio = s16 / (s1 / 4)
    ok = abs(ratio - 1) <= 0.15
    criterion(8, "16-repeat averaging", ok, f"std single {s1:.4f}, averaged {s16:.4f}, ratio to 1/4 {ratio:.3f}")
    assert ok


# 9 -----------------------------------------------------------------------------------

def test_c9_refresh_decay(criterion):
    rate = 0.01
    levels = (-1.0, 0.0, 1.0)
    bound = drift_bound(levels, rate)
    spec = NetworkSpec.two_layer()
    rng = np.random.default_rng(12)
    w = K.embed_fc_weights(QuantizedWeights.random(spec, rng).fc, FCMode.POOLED_CHECKERBOARD,
                           BlockGrid.square(spec.input_side)).weights

    def survives(dt, cycles=10):
        pe = PEArray(noise=NoiseModel(decay_rate=rate))
        pe.load(K.FC_W, w)
        for _ in range(cycles):
            pe.apply_decay(dt)
            pe.refresh(K.FC_W, levels)
        return np.array_equal(pe.read(K.FC_W), w)

    below = [bound * f for f in (0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999)]
    below_ok = all(survives(dt) for dt in below)
    above_corrupts = not survives(bound * 1.05, cycles=1)
    ok = below_ok and above_corrupts
    criterion(9, "refresh keeps ternary weights below the drift bound", ok,
              f"bound {bound:.2f} us at rate {rate}; {len(below)} sub-bound intervals exact: {below_ok}; "
              f"1.05 x bound corrupts: {above_corrupts}")
    assert ok
