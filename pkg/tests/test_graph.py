import struct
import zlib

import numpy as np
import pytest

from bioslim.errors import BadMagic, ChecksumMismatch, CycleDetected, ShapeConflict, UnfoldableBatchNorm, UnknownOpKind
from bioslim.executor import run_single
from bioslim.graph import (
    Node,
    OpKind,
    deserialize_model,
    flop_count,
    fold_batchnorm,
    infer_shapes,
    load_model,
    param_count,
    save_model,
    serialize_model,
    topo_order,
    validate_static,
    with_input_extents,
)
from bioslim.tensor import Tensor
from bioslim.zoo import build_unet

from conftest import conv_node, f32, graph, random_conv


def _bn(node_id, src, gamma, beta, mean, var):
    weights = {"gamma": f32(gamma), "beta": f32(beta), "mean": f32(mean), "var": f32(var)}
    return Node(node_id, OpKind.BATCHNORM, [src], {"eps": 1e-5}, weights)


def test_conv_relu_chain_is_valid(two_layer):
    assert validate_static(two_layer) == []


def test_unknown_input_reported():
    g = graph([Node("r", OpKind.RELU, ["x9"])], [1, 4, 4], ["r"])
    assert "r: unknown input x9" in validate_static(g)


def test_weight_rank_mismatch_reported():
    node = conv_node("c", "x", np.ones((1, 1, 3)))
    node.attrs["kernel"] = [3, 3]
    problems = validate_static(graph([node], [1, 4, 4], ["c"]))
    assert any("weight rank mismatch" in p for p in problems)


@pytest.mark.parametrize("size, k, pad, stride, expected", [(5, 3, 0, 1, 3), (8, 3, 1, 2, 4)])
def test_conv_output_extent(size, k, pad, stride, expected):
    node = conv_node("c", "x", np.ones((1, 1, k, k)), stride=[stride, stride], pad=[pad, pad])
    shapes = infer_shapes(graph([node], [1, size, size], ["c"]))
    assert shapes["c"] == (1, 1, expected, expected)


def test_add_of_mismatched_channels_names_node(rng):
    nodes = [
        random_conv(rng, "a", "x", 1, 4),
        random_conv(rng, "b", "x", 1, 3),
        Node("sum", OpKind.ADD, ["a", "b"]),
    ]
    with pytest.raises(ShapeConflict) as info:
        infer_shapes(graph(nodes, [1, 8, 8], ["sum"]))
    assert info.value.node_id == "sum"


def test_unet_shapes_round_trip_through_skips():
    g = build_unet(spatial=(16, 16), base=2, depth=2)
    shapes = infer_shapes(g, {"x": (3, 1, 16, 16)})
    assert shapes[g.outputs[0]] == (3, 1, 16, 16)
    concat_channels = [shapes[n.id][1] for n in g.nodes if n.kind is OpKind.CONCAT]
    assert concat_channels == [8 + 4, 4 + 2]


def test_topo_order_chain_and_diamond():
    chain = graph([Node("a", OpKind.RELU, ["x"]), Node("b", OpKind.RELU, ["a"]), Node("c", OpKind.RELU, ["b"])], [1, 2, 2], ["c"])
    assert topo_order(chain) == ["a", "b", "c"]

    diamond = graph(
        [
            Node("d", OpKind.ADD, ["b", "c"]),
            Node("a", OpKind.RELU, ["x"]),
            Node("b", OpKind.RELU, ["a"]),
            Node("c", OpKind.SIGMOID, ["a"]),
        ],
        [1, 2, 2],
        ["d"],
    )
    assert topo_order(diamond) == ["a", "b", "c", "d"]


def test_cycle_detected():
    g = graph([Node("a", OpKind.RELU, ["b"]), Node("b", OpKind.RELU, ["a"])], [1, 2, 2], ["b"])
    with pytest.raises(CycleDetected):
        topo_order(g)
    assert any("cycle" in p for p in validate_static(g))


@pytest.mark.parametrize(
    "gamma, beta, mean, w, b, w_expected, b_expected",
    [
        (1.0, 0.0, 0.0, 1.5, 0.25, 1.5, 0.25),
        (2.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0),
        (1.0, 3.0, 5.0, 1.0, 0.0, 1.0, -2.0),
    ],
)
def test_fold_batchnorm_hand_cases(gamma, beta, mean, w, b, w_expected, b_expected):
    var = 1.0 - 1e-5
    nodes = [conv_node("c", "x", [[[[w]]]], [b]), _bn("bn", "c", [gamma], [beta], [mean], [var])]
    folded = fold_batchnorm(graph(nodes, [1, 2, 2], ["bn"]))
    assert [n.id for n in folded.nodes] == ["c"]
    assert folded.outputs == ["c"]
    np.testing.assert_allclose(folded.node("c").weights["w"].array.ravel(), [w_expected], rtol=1e-6)
    np.testing.assert_allclose(folded.node("c").weights["b"].array, [b_expected], atol=1e-6)


def test_fold_batchnorm_preserves_outputs(rng):
    for _ in range(10):
        c = 3
        nodes = [
            random_conv(rng, "c1", "x", 2, c),
            _bn("bn1", "c1", rng.uniform(0.5, 2, c), rng.normal(0, 1, c), rng.normal(0, 1, c), rng.uniform(0.5, 2, c)),
            Node("r", OpKind.RELU, ["bn1"]),
            random_conv(rng, "c2", "r", c, 2),
        ]
        g = graph(nodes, [2, 6, 6], ["c2"])
        x = f32(rng.normal(0, 1, (2, 2, 6, 6)))
        folded = fold_batchnorm(g)
        assert all(n.kind is not OpKind.BATCHNORM for n in folded.nodes)
        np.testing.assert_allclose(run_single(folded, x).array, run_single(g, x).array, atol=1e-5, rtol=1e-5)


def test_unfoldable_batchnorm_left_in_place_or_raised(rng):
    c = 2
    nodes = [
        random_conv(rng, "c1", "x", 1, c),
        Node("r", OpKind.RELU, ["c1"]),
        _bn("bn", "r", np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)),
    ]
    g = graph(nodes, [1, 4, 4], ["bn"])
    assert any(n.kind is OpKind.BATCHNORM for n in fold_batchnorm(g).nodes)
    with pytest.raises(UnfoldableBatchNorm):
        fold_batchnorm(g, strict=True)


def test_model_round_trip_is_byte_stable(tmp_path, two_layer):
    save_model(two_layer, tmp_path / "m.ebm")
    loaded = load_model(tmp_path / "m.ebm")
    assert [(n.id, n.kind, n.inputs, n.attrs) for n in loaded.nodes] == [
        (n.id, n.kind, n.inputs, n.attrs) for n in two_layer.nodes
    ]
    for a, b in zip(loaded.nodes, two_layer.nodes):
        assert a.weights.keys() == b.weights.keys()
        assert all(a.weights[k] == b.weights[k] for k in a.weights)
    assert serialize_model(loaded) == (tmp_path / "m.ebm").read_bytes()


def test_truncated_model_fails_checksum(two_layer):
    raw = serialize_model(two_layer)
    with pytest.raises(ChecksumMismatch):
        deserialize_model(raw[:-7])


def test_foreign_magic_rejected(two_layer):
    with pytest.raises(BadMagic):
        deserialize_model(b"ONNX" + serialize_model(two_layer)[4:])


def test_unknown_op_tag_rejected(two_layer):
    body = serialize_model(two_layer)[:-4]
    (header_len,) = struct.unpack_from("<I", body, 4)
    header = body[8:8 + header_len].replace(b'"kind":"ReLU"', b'"kind":"FancyLayer"')
    body = body[:4] + struct.pack("<I", len(header)) + header + body[8 + header_len:]
    raw = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with pytest.raises(UnknownOpKind):
        deserialize_model(raw)


def test_param_and_flop_counts():
    node = conv_node("c", "x", np.ones((4, 2, 3, 3)), np.zeros(4), pad=[1, 1])
    g = graph([node], [2, 8, 8], ["c"])
    assert param_count(g) == 4 * 2 * 9 + 4
    assert flop_count(g) == 2 * (4 * 8 * 8) * (2 * 9)


def test_with_input_extents_redeclares_tile():
    g = build_unet(spatial=(16, 16), base=2, depth=1)
    bigger = with_input_extents(g, [32, 24])
    assert bigger.inputs["x"] == ["N", 1, 32, 24]
    assert g.inputs["x"] == ["N", 1, 16, 16]
    out = run_single(bigger, Tensor(np.zeros((1, 1, 32, 24), dtype=np.float32)))
    assert out.shape == (1, 1, 32, 24)
    with pytest.raises(ShapeConflict):
        with_input_extents(g, [15, 16])
