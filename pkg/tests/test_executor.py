import numpy as np
import pytest

from bioslim.errors import AccumulatorOverflow, BadOverlap, MissingInput, NonPreservingGraph, ShapeMismatch
from bioslim.executor import apply_simple, conv_nd_f32, conv_nd_i8, plan_tiles, run, run_single, run_tiled
from bioslim.graph import Node, OpKind, with_input_extents
from bioslim.tensor import Tensor
from bioslim.zoo import build_identity, build_unet

from conftest import conv_node, f32, graph


def i8(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.int8))


def test_conv_f32_hand_cases():
    ones = f32(np.ones((1, 1, 3, 3)))
    assert conv_nd_f32(ones, ones, None, [1, 1], [0, 0]).array.ravel().tolist() == [9]

    x = f32([[[1, 2, 3]]])
    w = f32([[[1, 0, -1]]])
    assert conv_nd_f32(x, w, None, [1], [0]).data() == [-2]


def test_conv_f32_identity_kernel(rng):
    x = f32(rng.normal(0, 1, (2, 3, 5, 5)))
    eye = f32(np.eye(3).reshape(3, 3, 1, 1))
    assert conv_nd_f32(x, eye, None, [1, 1], [0, 0]) == x


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        conv_nd_f32(f32(np.ones((1, 2, 4, 4))), f32(np.ones((1, 3, 3, 3))), None, [1, 1], [0, 0])


def test_conv_i8_hand_case():
    out = conv_nd_i8(i8([[[3, 4]]]), i8([[[1, 2]]]), None, [1], [0], 0.5, 0.1)
    np.testing.assert_allclose(out.data(), [0.55], rtol=1e-6)


def test_conv_i8_zero_weights():
    out = conv_nd_i8(i8(np.full((1, 2, 4, 4), 100)), i8(np.zeros((3, 2, 3, 3))), None, [1, 1], [1, 1], 0.1, 0.1)
    assert not out.array.any()


def test_conv_i8_overflow_detected():
    n = 134_000
    with pytest.raises(AccumulatorOverflow):
        conv_nd_i8(i8(np.full((1, 1, n), 127)), i8(np.full((1, 1, n), 127)), None, [1], [0], 1.0, 1.0)


def test_conv_i8_matches_dequantized_oracle(rng):
    for _ in range(200):
        spatial = int(rng.integers(1, 4))
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        size = [int(rng.integers(k, 8)) for _ in range(spatial)]
        stride = [int(rng.integers(1, 3)) for _ in range(spatial)]
        pad = [int(rng.integers(0, 2)) for _ in range(spatial)]
        sx, sw = rng.uniform(0.005, 0.02, 2)

        xq = rng.integers(-127, 128, (1, c_in, *size)).astype(np.int8)
        wq = rng.integers(-127, 128, (c_out, c_in, *[k] * spatial)).astype(np.int8)
        bias = rng.integers(-5000, 5000, c_out).astype(np.int32)

        got = conv_nd_i8(Tensor(xq), Tensor(wq), Tensor(bias), stride, pad, sx, sw)
        expected = conv_nd_f32(
            f32(xq * sx), f32(wq * sw), f32(bias * (sx * sw)), stride, pad
        )
        np.testing.assert_allclose(got.array, expected.array, atol=1e-5, rtol=1e-5)


def test_apply_simple_examples():
    assert apply_simple(OpKind.RELU, [f32([-1, 2])], {}).data() == [0, 2]
    pooled = apply_simple(OpKind.MAXPOOL, [f32([[[1, 3, 2, 4]]])], {"window": [2], "stride": [2]})
    assert pooled.data() == [3, 4]
    up = apply_simple(OpKind.UPSAMPLE, [f32([[[1, 2]]])], {"factor": [2]})
    assert up.data() == [1, 1, 2, 2]
    leaky = apply_simple(OpKind.LEAKY_RELU, [f32([-2, 3])], {"slope": 0.5})
    assert leaky.data() == [-1, 3]


def test_apply_simple_rejects_run_dispatched_kinds():
    with pytest.raises(ShapeMismatch):
        apply_simple(OpKind.CONV, [f32([1.0])], {})


def test_run_single_relu():
    g = graph([Node("r", OpKind.RELU, ["x"])], [2], ["r"])
    assert run(g, {"x": f32([[-1, 1]])})["r"].data() == [0, 1]


def test_run_identity_skip_doubles_input(rng):
    nodes = [conv_node("c", "x", np.eye(2).reshape(2, 2, 1, 1)), Node("sum", OpKind.ADD, ["c", "x"])]
    g = graph(nodes, [2, 4, 4], ["sum"])
    x = f32(rng.normal(0, 1, (1, 2, 4, 4)))
    np.testing.assert_array_equal(run_single(g, x).array, 2 * x.array)


def test_run_missing_input_and_shape_mismatch(two_layer):
    with pytest.raises(MissingInput):
        run(two_layer, {})
    with pytest.raises(ShapeMismatch):
        run(two_layer, {"x": f32(np.zeros((1, 2, 8, 9)))})


def test_batch_consistency_and_determinism(rng):
    g = build_unet(spatial=(8, 8), base=2, depth=1, seed=3)
    x = rng.normal(0, 1, (1, 1, 8, 8)).astype(np.float32)
    single = run_single(g, Tensor(x))
    batched = run_single(g, Tensor(np.concatenate([x, x, x])))
    for i in range(3):
        np.testing.assert_allclose(batched.array[i], single.array[0], atol=1e-6)
    assert run_single(g, Tensor(x)) == single


def test_run_reads_only_written_values(rng):
    g = build_unet(spatial=(8, 8), base=2, depth=2, seed=1)
    seen = set(g.inputs)

    def check(node, args, result):
        assert all(name in seen for name in node.inputs)
        seen.add(node.id)

    run(g, {"x": f32(rng.normal(0, 1, (1, 1, 8, 8)))}, on_node=check)
    assert seen >= {n.id for n in g.nodes}


@pytest.mark.parametrize(
    "size, window, overlap, starts",
    [
        ([4], [4], 0.0, [(0,)]),
        ([8], [4], 0.5, [(0,), (2,), (4,)]),
        ([7], [4], 0.0, [(0,), (3,)]),
        ([5, 3], [4, 8], 0.0, [(0, 0), (1, 0)]),
    ],
)
def test_plan_tiles_enumeration(size, window, overlap, starts):
    assert plan_tiles(size, window, overlap).starts == starts


def test_plan_tiles_rejects_bad_overlap():
    with pytest.raises(BadOverlap):
        plan_tiles([8], [4], 1.0)


def test_plan_tiles_cover_image(rng):
    for _ in range(50):
        size = [int(n) for n in rng.integers(1, 20, 2)]
        window = [int(n) for n in rng.integers(1, 20, 2)]
        plan = plan_tiles(size, window, float(rng.uniform(0, 0.9)))
        counts = np.zeros(size, dtype=int)
        for start in plan.starts:
            region = tuple(slice(s, s + w) for s, w in zip(start, plan.window))
            counts[region] += 1
            assert all(s + w <= n for s, w, n in zip(start, plan.window, size))
        assert counts.min() >= 1


def test_run_tiled_single_tile_matches_run(rng):
    g = build_unet(spatial=(16, 16), base=2, depth=2, seed=2)
    image = f32(rng.normal(0, 1, (1, 1, 16, 16)))
    assert run_tiled(g, image, [32, 32], 0.1) == run_single(g, image)


def test_run_tiled_identity_and_constant(rng):
    image = f32(rng.normal(0, 1, (1, 1, 13, 11)))
    identity = build_identity(1, (5, 4))
    np.testing.assert_array_equal(run_tiled(identity, image, [5, 4], 0.3).array, image.array)

    constant = build_identity(1, (5, 4))
    constant.node(constant.outputs[0]).weights["w"] = f32(np.zeros((1, 1, 1, 1)))
    constant.node(constant.outputs[0]).weights["b"] = f32([2.5])
    np.testing.assert_array_equal(run_tiled(constant, image, [5, 4], 0.5).array, np.full((1, 1, 13, 11), 2.5))


@pytest.mark.parametrize("size, window, overlap", [((50, 50), [8, 8], 0.7), ((37, 23), [6, 9], 0.9), ((16, 16), [3, 3], 0.5)])
def test_run_tiled_identity_is_exact_under_heavy_overlap(rng, size, window, overlap):
    image = f32(rng.normal(0, 1, (1, 1, *size)))
    out = run_tiled(build_identity(1, size), image, window, overlap)
    np.testing.assert_array_equal(out.array, image.array)


def test_run_tiled_redeclares_input_for_smaller_window(rng):
    g = build_unet(spatial=(16, 16), base=2, depth=2, seed=3)
    image = f32(rng.normal(0, 1, (1, 1, 32, 32)))
    out = run_tiled(g, image, [8, 8], 0.0)
    assert out.shape == (1, 1, 32, 32)

    tile_graph = with_input_extents(g, [8, 8])
    for top in range(0, 32, 8):
        for left in range(0, 32, 8):
            tile = f32(image.array[:, :, top:top + 8, left:left + 8])
            expected = run_single(tile_graph, tile).array
            np.testing.assert_array_equal(out.array[:, :, top:top + 8, left:left + 8], expected)

    assert run_tiled(g, image, [8, 8], 0.25).shape == (1, 1, 32, 32)
    assert g.inputs["x"][2:] == [16, 16]


def test_run_tiled_parallel_is_bit_identical(rng):
    g = build_unet(spatial=(8, 8), base=2, depth=1, seed=4)
    image = f32(rng.normal(0, 1, (1, 1, 20, 20)))
    assert run_tiled(g, image, [8, 8], 0.25, max_workers=4) == run_tiled(g, image, [8, 8], 0.25)


def test_run_tiled_rejects_shape_changing_graph():
    pool = graph([Node("p", OpKind.MAXPOOL, ["x"], {"window": [2, 2]})], [1, 4, 4], ["p"])
    with pytest.raises(NonPreservingGraph):
        run_tiled(pool, f32(np.zeros((1, 1, 8, 8))), [4, 4], 0.0)
