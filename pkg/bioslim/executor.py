"""Reference fp32 kernels, int8 kernels with int32 accumulation, graph execution and tiled inference."""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import floor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bioslim.config import logger
from bioslim.errors import (
    AccumulatorOverflow,
    BadOverlap,
    MissingInput,
    NonPreservingGraph,
    ShapeMismatch,
)
from bioslim.graph import (
    BATCH,
    Graph,
    Node,
    OpKind,
    conv_geometry,
    infer_shapes,
    pool_geometry,
    spatial_attrs,
    topo_order,
    with_input_extents,
)
from bioslim.tensor import (
    I32_MAX,
    I32_MIN,
    DType,
    Tensor,
    accumulate_patch,
    as_array,
    extract_patch,
    saturate,
)

NodeHook = Callable[[Node, List[np.ndarray], np.ndarray], None]


@dataclass(frozen=True)
class TilePlan:
    starts: List[Tuple[int, ...]]
    window: Tuple[int, ...]
    blend: str = "mean"

    def __len__(self) -> int:
        return len(self.starts)


def conv_columns(x: np.ndarray, kernel: Sequence[int], stride: Sequence[int], pad: Sequence[int], fill=0.0):
    """Strided view of every receptive field: [N, C, *out_spatial, *kernel]."""
    spatial = len(kernel)
    if any(pad):
        x = np.pad(x, [(0, 0), (0, 0), *[(p, p) for p in pad]], constant_values=fill)
    windows = sliding_window_view(x, tuple(kernel), axis=tuple(range(2, 2 + spatial)))
    steps = (slice(None), slice(None), *[slice(None, None, s) for s in stride])
    return windows[steps]


def _as_matrix(columns: np.ndarray) -> np.ndarray:
    # [N, C, *out, *k] -> [N, *out, C, *k] -> [N * prod(out), C * prod(k)]
    n, c = columns.shape[:2]
    spatial = (columns.ndim - 2) // 2
    out = columns.shape[2:2 + spatial]
    moved = np.moveaxis(columns, 1, 1 + spatial)
    return moved.reshape(n * int(np.prod(out)), -1), out


def _check_conv(x: np.ndarray, w: np.ndarray, stride, pad):
    spatial = w.ndim - 2
    if spatial not in (1, 2, 3) or x.ndim != w.ndim:
        raise ShapeMismatch(f"conv of input rank {x.ndim} with weight rank {w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if len(stride) != spatial or len(pad) != spatial:
        raise ShapeMismatch(f"stride/pad must have {spatial} entries")


def conv_f32_array(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride, pad) -> np.ndarray:
    _check_conv(x, w, stride, pad)
    matrix, out = _as_matrix(conv_columns(x, w.shape[2:], stride, pad))
    result = matrix @ w.reshape(w.shape[0], -1).T
    if b is not None:
        result = result + b
    result = result.reshape(x.shape[0], *out, w.shape[0])
    return np.ascontiguousarray(np.moveaxis(result, -1, 1))


def conv_nd_f32(x: Tensor, w: Tensor, b: Optional[Tensor], stride: Sequence[int], pad: Sequence[int]) -> Tensor:
    result = conv_f32_array(
        x.array.astype(np.float32),
        w.array.astype(np.float32),
        None if b is None else b.array.astype(np.float32),
        list(stride),
        list(pad),
    )
    return Tensor(result.astype(np.float32))


def _exact_int_accumulate(matrix: np.ndarray, wq: np.ndarray) -> np.ndarray:
    # int8 products stay below 2**14 and every partial sum below 2**53,
    # so the float64 GEMM is exact and bit-identical to integer accumulation
    acc = matrix.astype(np.float64) @ wq.reshape(wq.shape[0], -1).astype(np.float64).T
    return np.rint(acc).astype(np.int64)


def _check_overflow(acc: np.ndarray, where: str) -> None:
    if acc.size and (acc.max() > I32_MAX or acc.min() < I32_MIN):
        raise AccumulatorOverflow(f"{where}: int32 accumulator overflow (range {acc.min()}..{acc.max()})")


def conv_i8_array(xq, wq, bias_i32, stride, pad, sx: float, sw: float) -> np.ndarray:
    _check_conv(xq, wq, stride, pad)
    if not (sx > 0 and sw > 0):
        raise ShapeMismatch("quantized conv needs positive scales")
    matrix, out = _as_matrix(conv_columns(xq.astype(np.int8), wq.shape[2:], stride, pad, fill=0))
    acc = _exact_int_accumulate(matrix, wq)
    _check_overflow(acc, "conv")
    if bias_i32 is not None:
        acc = acc + bias_i32.astype(np.int64)
        _check_overflow(acc, "conv bias")
    result = (acc.astype(np.float64) * (float(sx) * float(sw))).astype(np.float32)
    result = result.reshape(xq.shape[0], *out, wq.shape[0])
    return np.ascontiguousarray(np.moveaxis(result, -1, 1))


def conv_nd_i8(
    xq: Tensor,
    wq: Tensor,
    bias_i32: Optional[Tensor],
    stride: Sequence[int],
    pad: Sequence[int],
    sx: float,
    sw: float,
) -> Tensor:
    if xq.dtype is not DType.I8 or wq.dtype is not DType.I8:
        raise ShapeMismatch("integer conv expects int8 activations and weights")
    bias = None if bias_i32 is None else bias_i32.array
    return Tensor(conv_i8_array(xq.array, wq.array, bias, list(stride), list(pad), sx, sw))


def linear_f32_array(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"last axis {x.shape[-1]} != linear in_features {w.shape[1]}")
    result = x @ w.T
    return result + b if b is not None else result


def linear_i8_array(xq, wq, bias_i32, sx: float, sw: float) -> np.ndarray:
    if xq.shape[-1] != wq.shape[1]:
        raise ShapeMismatch(f"last axis {xq.shape[-1]} != linear in_features {wq.shape[1]}")
    flat = xq.reshape(-1, xq.shape[-1])
    acc = _exact_int_accumulate(flat, wq)
    _check_overflow(acc, "linear")
    if bias_i32 is not None:
        acc = acc + bias_i32.astype(np.int64)
        _check_overflow(acc, "linear bias")
    result = (acc.astype(np.float64) * (float(sx) * float(sw))).astype(np.float32)
    return result.reshape(*xq.shape[:-1], wq.shape[0])


def maxpool_array(x: np.ndarray, window, stride, pad) -> np.ndarray:
    columns = conv_columns(x, window, stride, pad, fill=-np.inf)
    spatial = len(window)
    return columns.max(axis=tuple(range(-spatial, 0)))


def upsample_array(x: np.ndarray, factor: Sequence[int]) -> np.ndarray:
    for axis, f in enumerate(factor, start=2):
        x = np.repeat(x, int(f), axis=axis)
    return x


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)


def _simple_array(kind: OpKind, arrays: List[np.ndarray], attrs: dict, weights: Dict[str, Tensor]) -> np.ndarray:
    x = arrays[0]
    if kind is OpKind.RELU:
        return np.maximum(x, 0).astype(x.dtype)
    if kind is OpKind.LEAKY_RELU:
        slope = float(attrs.get("slope", 0.01))
        return np.where(x > 0, x, x * slope).astype(x.dtype)
    if kind is OpKind.SIGMOID:
        return sigmoid_array(x)
    if kind is OpKind.MAXPOOL:
        stub = Node("pool", OpKind.MAXPOOL, ["x"], attrs)
        window, stride, pad = pool_geometry(stub, x.ndim - 2)
        return maxpool_array(x, window, stride, pad)
    if kind is OpKind.UPSAMPLE:
        stub = Node("up", OpKind.UPSAMPLE, ["x"], attrs)
        return upsample_array(x, spatial_attrs(stub, "factor", 2, x.ndim - 2))
    if kind is OpKind.CONCAT:
        rest = {(a.shape[0], *a.shape[2:]) for a in arrays}
        if len(rest) != 1:
            raise ShapeMismatch(f"concat of incompatible shapes {[a.shape for a in arrays]}")
        return np.concatenate(arrays, axis=1)
    if kind is OpKind.ADD:
        if arrays[0].shape != arrays[1].shape:
            raise ShapeMismatch(f"add of {arrays[0].shape} and {arrays[1].shape}")
        return arrays[0] + arrays[1]
    if kind is OpKind.LINEAR:
        w = weights["w"].array
        b = weights["b"].array if "b" in weights else None
        return linear_f32_array(x, w, b).astype(np.float32)
    raise ShapeMismatch(f"{kind.value} is not a simple op")


def apply_simple(kind: OpKind, inputs: List[Tensor], attrs: dict, weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
    if kind in (OpKind.CONV, OpKind.BATCHNORM, OpKind.QUANTIZE, OpKind.DEQUANTIZE):
        raise ShapeMismatch(f"{kind.value} is dispatched by run, not apply_simple")
    return Tensor(_simple_array(OpKind(kind), [t.array for t in inputs], attrs, weights or {}))


def batchnorm_array(x: np.ndarray, node: Node) -> np.ndarray:
    eps = float(node.attrs.get("eps", 1e-5))
    gamma, beta, mean, var = (node.weights[k].array.astype(np.float64) for k in ("gamma", "beta", "mean", "var"))
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    broadcast = (1, -1, *([1] * (x.ndim - 2)))
    return (x * scale.reshape(broadcast) + shift.reshape(broadcast)).astype(np.float32)


def execute_node(node: Node, arrays: List[np.ndarray]) -> np.ndarray:
    kind = node.kind
    weights = node.weights

    if kind is OpKind.CONV:
        _, stride, pad = conv_geometry(node)
        bias = weights.get("b")
        if node.is_quantized:
            return conv_i8_array(
                arrays[0], weights["w"].array, None if bias is None else bias.array,
                stride, pad, node.attrs["x_scale"], node.attrs["w_scale"],
            )
        return conv_f32_array(
            arrays[0].astype(np.float32), weights["w"].array,
            None if bias is None else bias.array, stride, pad,
        ).astype(np.float32)

    if kind is OpKind.LINEAR and node.is_quantized:
        bias = weights.get("b")
        return linear_i8_array(
            arrays[0], weights["w"].array, None if bias is None else bias.array,
            node.attrs["x_scale"], node.attrs["w_scale"],
        )

    if kind is OpKind.BATCHNORM:
        return batchnorm_array(arrays[0], node)

    if kind is OpKind.QUANTIZE:
        scaled = arrays[0].astype(np.float64) / float(node.attrs["scale"])
        return saturate(scaled, DType.I8)

    if kind is OpKind.DEQUANTIZE:
        return (arrays[0].astype(np.float64) * float(node.attrs["scale"])).astype(np.float32)

    return _simple_array(kind, arrays, node.attrs, weights)


def _check_inputs(g: Graph, inputs: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, declared in g.inputs.items():
        if name not in inputs:
            raise MissingInput(f"graph input {name!r} not provided")
        array = as_array(inputs[name])
        fixed_ok = len(array.shape) == len(declared) and all(
            extent == BATCH or int(extent) == actual for extent, actual in zip(declared, array.shape)
        )
        if not fixed_ok:
            raise ShapeMismatch(f"input {name!r} has shape {list(array.shape)}, declared {declared}")
        arrays[name] = array
    return arrays


def run(g: Graph, inputs: Dict[str, Tensor], on_node: Optional[NodeHook] = None) -> Dict[str, Tensor]:
    values = _check_inputs(g, inputs)
    nodes = g.node_map()
    remaining = {name: 0 for name in values}
    for node in g.nodes:
        remaining.setdefault(node.id, 0)
        for name in node.inputs:
            remaining[name] = remaining.get(name, 0) + 1

    for node_id in topo_order(g):
        node = nodes[node_id]
        args = [values[name] for name in node.inputs]
        result = execute_node(node, args)
        if on_node is not None:
            on_node(node, args, result)
        values[node_id] = result
        # drop intermediates nobody else reads
        for name in node.inputs:
            remaining[name] -= 1
            if remaining[name] == 0 and name not in g.outputs:
                values.pop(name, None)

    return {name: Tensor(values[name]) for name in g.outputs}


def run_single(g: Graph, x: Tensor) -> Tensor:
    (name,) = g.inputs
    outputs = run(g, {name: x})
    return outputs[g.outputs[0]]


def plan_tiles(image_shape: Sequence[int], window: Sequence[int], overlap: float) -> TilePlan:
    if not 0 <= overlap < 1:
        raise BadOverlap(f"overlap {overlap} outside [0, 1)")
    if len(window) != len(image_shape):
        raise BadOverlap(f"window rank {len(window)} does not match image rank {len(image_shape)}")

    window = tuple(min(int(w), int(size)) for w, size in zip(window, image_shape))
    per_axis = []
    for size, w in zip(image_shape, window):
        stride = max(1, floor(w * (1 - overlap)))
        starts = list(range(0, max(size - w, 0), stride))
        starts.append(size - w)
        per_axis.append(sorted(set(starts)))
    return TilePlan(starts=list(itertools.product(*per_axis)), window=window)


def _tile_output_shape(g: Graph, tile_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    (name,) = g.inputs
    shapes = infer_shapes(g, {name: tile_shape})
    out_shape = shapes[g.outputs[0]]
    if tuple(out_shape[2:]) != tuple(tile_shape[2:]) or out_shape[0] != tile_shape[0]:
        raise NonPreservingGraph(
            f"tile {list(tile_shape)} maps to {list(out_shape)}; spatial extents must be preserved"
        )
    return out_shape


def fit_window(g: Graph, spatial: Sequence[int], window: Optional[Sequence[int]] = None) -> Tuple[Graph, Tuple[int, ...]]:
    """Clamp the window (default: the declared extents) to the image and re-declare the input to match."""
    (name,) = g.inputs
    declared = tuple(int(n) for n in g.inputs[name][2:])
    window = declared if window is None else tuple(int(w) for w in window)
    if len(window) != len(spatial):
        raise BadOverlap(f"window rank {len(window)} does not match image rank {len(spatial)}")
    effective = tuple(min(w, int(n)) for w, n in zip(window, spatial))
    if effective != declared:
        g = with_input_extents(g, effective)
    return g, effective


def run_tiled(
    g: Graph, image: Tensor, window: Optional[Sequence[int]], overlap: float, max_workers: int = 1
) -> Tensor:
    spatial = image.shape[2:]
    g, window = fit_window(g, spatial, window)
    plan = plan_tiles(spatial, window, overlap)
    tile_shape = (*image.shape[:2], *plan.window)
    out_channels = _tile_output_shape(g, tile_shape)[1]

    # float64 sums keep the mean of identical overlaps exact
    canvas = np.zeros((image.shape[0], out_channels, *spatial), dtype=np.float64)
    counts = np.zeros(canvas.shape, dtype=np.int64)

    def run_tile(start):
        return run_single(g, extract_patch(image, (0, 0, *start), tile_shape))

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outputs = pool.map(run_tile, plan.starts)
            # map yields in tile order, so blending order is fixed
            for start, out in zip(plan.starts, outputs):
                accumulate_patch(canvas, counts, out, (0, 0, *start))
    else:
        for start in plan.starts:
            accumulate_patch(canvas, counts, run_tile(start), (0, 0, *start))

    logger.debug("tiled inference", tiles=len(plan), window=list(plan.window), overlap=overlap)
    return Tensor((canvas / counts).astype(np.float32))
