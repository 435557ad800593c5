import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppacnn import kernels as K
from ppacnn.array import NoiseModel
from ppacnn.netplan import (DigitalSum, NetworkSpec, Preset, PlanError, QuantizedWeights,
                            WeightFileError, compile_plan, evaluate, infer, load_weights, parse,
                            save_weights, serialize, validate)
from ppacnn.oracle import dense_forward


@pytest.fixture(scope="module")
def two():
    spec = NetworkSpec.two_layer()
    return spec, QuantizedWeights.random(spec, np.random.default_rng(1))


@pytest.fixture(scope="module")
def three():
    spec = NetworkSpec.three_layer()
    return spec, QuantizedWeights.random(spec, np.random.default_rng(2))


# -- specs and validation ------------------------------------------------------------

def test_presets():
    t = NetworkSpec.two_layer()
    assert (t.input_side, t.conv_filters, t.fc_inputs) == (32, (64,), 4096)
    h = NetworkSpec.three_layer()
    assert (h.input_side, h.conv_filters, h.fc_inputs) == (64, (16, 16), 4096)
    assert h.filter_counts() == (16, 256)
    assert isinstance(h.summation, DigitalSum)
    assert NetworkSpec.for_preset("THREE_LAYER") == h


def test_validate_ok():
    assert validate(NetworkSpec.two_layer()) == []
    assert validate(NetworkSpec.three_layer()) == []


def test_validate_capacity():
    d = validate(NetworkSpec.two_layer(conv_filters=(65,)))
    assert len(d) == 1 and "capacity" in d[0]


def test_validate_divisibility():
    d = validate(NetworkSpec.two_layer(k=5))
    assert any("does not divide" in m for m in d)
    assert validate(NetworkSpec.two_layer(input_side=48))


def test_validate_structure():
    assert validate(NetworkSpec.two_layer(conv_filters=(0,)))
    assert validate(NetworkSpec.three_layer(conv_filters=(16,)))
    assert validate(NetworkSpec.three_layer(conv_filters=(17, 16)))
    assert validate(NetworkSpec.two_layer(n_neurons=12))


def test_compile_two_layer(two):
    plan = compile_plan(*two)
    assert plan.stage_names == ["load_input", "duplicate", "conv1", "relu1", "maxpool",
                                "fc_multiply", "neuron_sums"]
    assert len(plan.stages) == 7
    assert plan.grids[0].n_blocks == 64 and plan.grids[0].block_w == 32


def test_compile_three_layer(three):
    plan = compile_plan(*three)
    assert [g.n_blocks for g in plan.grids] == [16, 256]
    assert [g.block_w for g in plan.grids] == [64, 16]
    assert plan.stage_names.index("shrink_duplicate") < plan.stage_names.index("conv2") \
        < plan.stage_names.index("accumulate") < plan.stage_names.index("fc_multiply")


def test_compile_errors(two):
    spec, w = two
    with pytest.raises(PlanError):
        compile_plan(NetworkSpec.two_layer(conv_filters=(0,)), w)
    with pytest.raises(PlanError) as e:
        compile_plan(spec, QuantizedWeights(Preset.TWO_LAYER, [w.conv[0][:10]], w.fc))
    assert "conv 0" in str(e.value)
    with pytest.raises(PlanError):
        compile_plan(spec, QuantizedWeights(Preset.TWO_LAYER, w.conv, w.fc[:, :10]))
    with pytest.raises(PlanError):
        compile_plan(NetworkSpec.three_layer(), w)


def test_compile_deterministic(two):
    a, b = compile_plan(*two), compile_plan(*two)
    assert all(np.array_equal(x, y) for x, y in zip(a.conv_planes, b.conv_planes))
    assert np.array_equal(a.fc_layout.weights, b.fc_layout.weights)


# -- weight files ------------------------------------------------------------------------

def test_roundtrip(two, three, tmp_path):
    for spec, w in (two, three):
        assert parse(serialize(w)) == w
        p = tmp_path / f"{spec.preset.value}.ppanet"
        save_weights(w, p)
        assert load_weights(p) == w


def test_serialize_layout():
    w = QuantizedWeights(Preset.TWO_LAYER, [np.eye(4, dtype=np.uint8)[None]],
                         np.array([[1, 0, -1]] * 10))
    lines = serialize(w).split("\n")
    assert lines[:4] == ["PPANET 1", "net TWO_LAYER", "conv 0 1 4", "1 0 0 0"]
    assert lines[7:9] == ["fc 10 3", "1 0 -1"]
    assert lines[-2:] == ["end", ""]


def test_compile_after_roundtrip(three):
    spec, w = three
    a, b = compile_plan(spec, w), compile_plan(spec, parse(serialize(w)))
    assert all(np.array_equal(x, y) for x, y in zip(a.conv_planes, b.conv_planes))
    assert np.array_equal(a.fc_layout.weights, b.fc_layout.weights)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_roundtrip_property(layers, nf, nin, seed):
    r = np.random.default_rng(seed)
    conv = [r.integers(0, 2, (nf, 4, 4)) for _ in range(layers)]
    w = QuantizedWeights(Preset.THREE_LAYER, conv, r.integers(-1, 2, (10, nin)))
    assert parse(serialize(w)) == w


def _bad(text, line, fragment):
    with pytest.raises(WeightFileError) as e:
        parse(text)
    assert e.value.line == line and fragment in str(e.value)


def test_parse_errors(two):
    good = serialize(QuantizedWeights(Preset.TWO_LAYER, [np.zeros((1, 4, 4))], np.zeros((10, 2))))
    lines = good.split("\n")
    _bad("", 1, "empty")
    _bad("PPANET 2\n", 1, "header")
    _bad("PPANET 1\nnet FOUR\n", 2, "net")
    fc_row = lines.index("fc 10 2") + 1
    bad = lines.copy()
    bad[fc_row] = "2 0"
    _bad("\n".join(bad), fc_row + 1, "entry 2")
    bad = lines.copy()
    bad[3] = "0 1 x 0"
    _bad("\n".join(bad), 4, "non-integer")
    bad = lines.copy()
    bad[3] = "0 1 0"
    _bad("\n".join(bad), 4, "expected 4 bits")
    bad = lines.copy()
    bad[3] = "0 2 0 0"
    _bad("\n".join(bad), 4, "not in")
    _bad("\n".join(lines[:-3]), len(lines) - 2, "end of file")
    _bad(good + "junk\n", len(lines), "after 'end'")
    _bad(good.replace("conv 0 1 4", "conv 1 1 4"), 3, "conv index")
    _bad(good.replace("fc 10 2", "fc 10 3"), fc_row + 1, "expected 3")


def test_weights_validation():
    with pytest.raises(ValueError):
        QuantizedWeights(Preset.TWO_LAYER, [np.full((1, 4, 4), 2)], np.zeros((10, 1)))
    with pytest.raises(ValueError):
        QuantizedWeights(Preset.TWO_LAYER, [np.zeros((1, 4, 4))], np.full((10, 1), 3))


# -- inference ---------------------------------------------------------------------------

def test_zero_image_class_zero(two, three):
    for spec, w in (two, three):
        res = infer(compile_plan(spec, w), np.zeros((spec.input_side,) * 2))
        assert res.label == 0 and not res.activations.any()


def test_input_checks(two):
    plan = compile_plan(*two)
    with pytest.raises(ValueError):
        infer(plan, np.zeros((28, 28)))
    with pytest.raises(ValueError):
        infer(plan, np.full((32, 32), 0.5))


def _digit_like(side, rng):
    img = np.zeros((side, side))
    m = side // 8
    img[m:-m, m:-m] = rng.random((side - 2 * m, side - 2 * m)) < 0.3
    return img


def test_two_layer_matches_oracle(two, rng):
    spec, w = two
    plan = compile_plan(spec, w)
    for _ in range(5):
        img = (rng.random((32, 32)) < 0.4).astype(float)
        res = infer(plan, img, isolation=True)
        want, _ = dense_forward(w, img)
        assert np.array_equal(res.activations, want)


@pytest.mark.slow
def test_three_layer_matches_oracle(three, rng):
    spec, w = three
    img = _digit_like(64, rng)
    res = infer(compile_plan(spec, w), img, isolation=True)
    want, _ = dense_forward(w, img)
    assert np.allclose(res.activations, want, rtol=0, atol=1e-9)


def test_deterministic_given_seed(two, rng):
    plan = compile_plan(*two)
    img = _digit_like(32, rng)
    noise = NoiseModel(0.01, 0.01, 1.0, rng_seed=7)
    a = evaluate(plan, [img] * 3, [0] * 3, noise)
    b = evaluate(plan, [img] * 3, [0] * 3, noise)
    assert a["predictions"].tolist() == b["predictions"].tolist()
    from ppacnn.netplan import new_state
    r1 = infer(plan, img, new_state(noise))
    r2 = infer(plan, img, new_state(noise))
    assert np.array_equal(r1.activations, r2.activations)


def test_report_totals(two, rng):
    res = infer(compile_plan(*two), _digit_like(32, rng))
    rep = res.report
    assert rep.total_us == sum(rep.rows.values())
    assert rep.fps == 1e6 / rep.total_us
    names = [r for r in rep.rows if r != "load"]
    assert names == ["duplication", "conv", "relu", "maxpool", "fc"]


def test_gsum_replay_equals_separate_runs(two, rng):
    spec, w = two
    plan = compile_plan(spec, w)
    imgs = [_digit_like(32, rng) for _ in range(3)]
    base = NoiseModel(0.01, 0.005, 0.0, rng_seed=3)
    multi = evaluate(plan, imgs, [0, 1, 2], base, gsum_sigmas=[0.0, 50.0])
    from dataclasses import replace
    for i, s in enumerate([0.0, 50.0]):
        single = evaluate(plan, imgs, [0, 1, 2], replace(base, sigma_gsum=s))
        assert multi["predictions"][i].tolist() == single["predictions"][0].tolist()


def test_mnist_seven(mnist_test):
    from ppacnn.cli import shipped_weights
    from ppacnn.mnist import preprocess
    w = shipped_weights(Preset.TWO_LAYER)
    img = preprocess(mnist_test.images[0], 32)
    assert mnist_test.labels[0] == 7
    want, _ = dense_forward(w, img)
    assert int(np.argmax(want)) == 7
    res = infer(compile_plan(NetworkSpec.two_layer(), w), img, isolation=True)
    assert res.label == 7
