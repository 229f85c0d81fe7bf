import numpy as np
import pytest

from bioslim.errors import CalibrationError, EmptyTensor, GraphInvalid, MissingParams
from bioslim.executor import run_single
from bioslim.graph import Node, OpKind, deserialize_model, serialize_model, weight_bytes
from bioslim.metrics import pearson
from bioslim.quantizer import (
    MINMAX,
    ObserverKind,
    ObserverState,
    ObserverTag,
    QuantParams,
    calibrate,
    convert_int8,
    dequantize_tensor,
    finalize_params,
    input_site,
    observe,
    quantize_tensor,
    weight_site,
)
from bioslim.tensor import DType
from bioslim.zoo import build_identity, build_unet

from conftest import conv_node, f32, graph


def _feed(kind, *batches):
    state = ObserverState(kind)
    for batch in batches:
        state = observe(state, f32(batch))
    return state


def test_minmax_keeps_running_max():
    assert _feed(MINMAX, [1.0, -0.5], [-2.0]).running_max_abs == 2.0


def test_ema_minmax_blends_after_first_batch():
    state = _feed(ObserverKind(ObserverTag.EMA_MINMAX, ema_momentum=0.9), [1.0], [2.0])
    assert state.running_max_abs == pytest.approx(1.1)
    assert state.batches_seen == 2


def test_quantile_interpolates_order_statistics():
    state = _feed(ObserverKind(ObserverTag.QUANTILE, quantile=0.5), [0.0, -1.0, 2.0, -3.0])
    assert state.running_max_abs == pytest.approx(1.5)


def test_observer_rejects_bad_constants_and_empty_batches():
    with pytest.raises(ValueError):
        ObserverKind(ObserverTag.QUANTILE, quantile=0.0)
    with pytest.raises(ValueError):
        ObserverKind(ObserverTag.EMA_MINMAX, ema_momentum=1.0)
    with pytest.raises(EmptyTensor):
        observe(ObserverState(MINMAX), np.zeros(0, dtype=np.float32))


@pytest.mark.parametrize("running, scale", [(2.54, 0.02), (127.0, 1.0)])
def test_finalize_scale(running, scale):
    p = finalize_params(ObserverState(MINMAX, running, 1))
    assert p.scale == pytest.approx(scale)
    assert p.zero_point == 0
    assert not p.degenerate


def test_finalize_degenerate_and_unseen():
    p = finalize_params(ObserverState(MINMAX, 0.0, 3))
    assert p.degenerate and p.scale == 1.0
    with pytest.raises(CalibrationError):
        finalize_params(ObserverState(MINMAX))


def test_quantize_and_dequantize_examples():
    p = QuantParams(scale=0.02)
    q = quantize_tensor(f32([1.0, -300 * 0.02, 0.0]), p)
    assert q.dtype is DType.I8
    assert q.data() == [50, -127, 0]
    np.testing.assert_allclose(dequantize_tensor(q, p).data()[0], 1.0, rtol=1e-6)


def test_quantization_error_bounded_by_half_scale(rng):
    x = rng.uniform(-2.54, 2.54, 1_000_000)
    p = QuantParams(scale=0.02)
    restored = dequantize_tensor(quantize_tensor(f32(x), p), p).array
    assert np.abs(restored - x.astype(np.float32)).max() <= 0.01 + 1e-6


def test_calibrate_identity_graph_minmax():
    g = build_identity(1, (4, 4))
    sample = np.zeros((1, 1, 4, 4), dtype=np.float32)
    sample[0, 0, 1, 2] = -2.54
    params = calibrate(g, [f32(sample)], MINMAX)
    conv_id = g.outputs[0]
    assert params["x"].scale == pytest.approx(0.02)
    assert params[input_site(conv_id)].scale == pytest.approx(0.02)
    assert params[weight_site(conv_id)].scale == pytest.approx(1 / 127)


def test_ema_calibration_of_repeated_sample_matches_single(rng):
    g = build_unet(spatial=(8, 8), base=2, depth=1, seed=5)
    sample = f32(rng.normal(0, 1, (1, 1, 8, 8)))
    for tag in (ObserverTag.EMA_MINMAX, ObserverTag.EMA_QUANTILE):
        kind = ObserverKind(tag)
        once = calibrate(g, [sample], kind)
        five = calibrate(g, [sample] * 5, kind)
        assert once.keys() == five.keys()
        for site in once:
            assert five[site].scale == pytest.approx(once[site].scale, rel=1e-12)


def test_zero_samples_flag_degenerate_sites():
    g = build_identity(1, (4, 4))
    params = calibrate(g, [f32(np.zeros((1, 1, 4, 4)))], MINMAX)
    assert params["x"].degenerate
    assert params[input_site(g.outputs[0])].degenerate


def test_calibrate_requires_samples_and_folded_graph(rng):
    g = build_identity(1, (4, 4))
    with pytest.raises(CalibrationError):
        calibrate(g, [])
    with_bn = build_unet(spatial=(8, 8), base=2, depth=1, batchnorm=True)
    with pytest.raises(GraphInvalid):
        calibrate(with_bn, [f32(rng.normal(0, 1, (1, 1, 8, 8)))])


def test_convert_single_conv_weights():
    g = graph([conv_node("c", "x", [[[[2.0]]]], [0.5])], [1, 2, 2], ["c"])
    converted = convert_int8(g, {input_site("c"): QuantParams(scale=0.1)})
    conv = converted.node("c")
    assert conv.weights["w"].data() == [127]
    assert conv.attrs["w_scale"] == pytest.approx(2 / 127)
    assert conv.weights["b"].dtype is DType.I32
    assert conv.inputs == ["c_quant"]
    assert converted.node("c_quant").kind is OpKind.QUANTIZE
    assert set(converted.quant) == {input_site("c"), weight_site("c")}


def test_convert_leaves_activation_only_graph_alone():
    g = graph([Node("r", OpKind.RELU, ["x"])], [1, 2, 2], ["r"])
    converted = convert_int8(g, {})
    assert [(n.id, n.kind) for n in converted.nodes] == [("r", OpKind.RELU)]
    assert converted.quant == {}


def test_convert_needs_activation_params(two_layer):
    with pytest.raises(MissingParams):
        convert_int8(two_layer, {})


def test_int8_unet_tracks_float_and_survives_serialization(rng):
    g = build_unet(spatial=(16, 16), base=4, depth=2, seed=7)
    samples = [f32(rng.normal(0, 1, (1, 1, 16, 16))) for _ in range(4)]
    quantized = convert_int8(g, calibrate(g, samples, MINMAX))

    x = f32(rng.normal(0, 1, (1, 1, 16, 16)))
    reference = run_single(g, x)
    approx = run_single(quantized, x)
    assert approx.dtype is DType.F32
    assert pearson(approx, reference) > 0.98

    restored = deserialize_model(serialize_model(quantized))
    assert restored.quant == quantized.quant
    assert run_single(restored, x) == approx


def test_minmax_ignores_batch_order(rng):
    batches = [rng.normal(0, s, 50) for s in (0.5, 3.0, 1.0, 2.0)]
    expected = _feed(MINMAX, *batches)
    for _ in range(10):
        order = rng.permutation(len(batches))
        state = _feed(MINMAX, *[batches[i] for i in order])
        assert state.running_max_abs == expected.running_max_abs
        assert finalize_params(state) == finalize_params(expected)


def test_quantization_is_monotone(rng):
    p = QuantParams(scale=float(rng.uniform(0.001, 0.1)))
    x = np.sort(rng.uniform(-20, 20, 10_000)).astype(np.float32)
    q = quantize_tensor(f32(x), p).array.astype(np.int64)
    assert (np.diff(q) >= 0).all()
    assert q.min() >= -127 and q.max() <= 127


def test_each_quantized_site_carries_one_scale(rng):
    g = build_unet(spatial=(16, 16), base=4, depth=2, seed=2)
    quantized = convert_int8(g, calibrate(g, [f32(rng.normal(0, 1, (1, 1, 16, 16)))], MINMAX))
    restored = deserialize_model(serialize_model(quantized))
    convs = [node for node in restored.nodes if node.kind is OpKind.CONV]
    assert convs and all(node.is_quantized for node in convs)
    assert len(restored.quant) == 2 * len(convs)
    for node in convs:
        for site in (input_site(node.id), weight_site(node.id)):
            assert isinstance(restored.quant[site]["scale"], float)
            assert restored.quant[site]["scale"] > 0
        assert restored.quant[input_site(node.id)]["scale"] == node.attrs["x_scale"]
        assert restored.quant[weight_site(node.id)]["scale"] == node.attrs["w_scale"]


def test_int8_weight_blob_is_under_a_third_of_float(rng):
    g = build_unet(spatial=(16, 16), base=8, depth=2, seed=1)
    quantized = convert_int8(g, calibrate(g, [f32(rng.normal(0, 1, (1, 1, 16, 16)))], MINMAX))
    assert weight_bytes(quantized) <= 0.30 * weight_bytes(g)
    assert weight_bytes(deserialize_model(serialize_model(quantized))) == weight_bytes(quantized)
    assert len(serialize_model(quantized)) < len(serialize_model(g))
