"""Static graph IR for U-Net style convolutional networks and the ".ebm" model file."""

import enum
import heapq
import json
import struct
import zlib
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from bioslim.config import logger
from bioslim.errors import (
    BadMagic,
    ChecksumMismatch,
    CycleDetected,
    GraphInvalid,
    ModelFileError,
    ShapeConflict,
    UnfoldableBatchNorm,
    UnknownOpKind,
)
from bioslim.tensor import DType, Tensor

MODEL_MAGIC = b"EBM1"
MODEL_VERSION = 1
BATCH = "N"

Shape = Tuple[int, ...]


class OpKind(str, enum.Enum):
    CONV = "Conv"
    LINEAR = "Linear"
    RELU = "ReLU"
    LEAKY_RELU = "LeakyReLU"
    SIGMOID = "Sigmoid"
    BATCHNORM = "BatchNorm"
    MAXPOOL = "MaxPool"
    UPSAMPLE = "UpsampleNearest"
    CONCAT = "Concat"
    ADD = "Add"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"

    @classmethod
    def parse(cls, tag: str) -> "OpKind":
        try:
            return cls(tag)
        except ValueError:
            raise UnknownOpKind(f"unknown op kind {tag!r}") from None


ELEMENTWISE = {
    OpKind.RELU,
    OpKind.LEAKY_RELU,
    OpKind.SIGMOID,
    OpKind.QUANTIZE,
    OpKind.DEQUANTIZE,
}
BATCHNORM_PARAMS = ("gamma", "beta", "mean", "var")


@dataclass
class Node:
    id: str
    kind: OpKind
    inputs: List[str]
    attrs: Dict[str, Any] = field(default_factory=dict)
    weights: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.kind, OpKind):
            self.kind = OpKind.parse(self.kind)
        self.inputs = list(self.inputs)

    @property
    def is_quantized(self) -> bool:
        weight = self.weights.get("w")
        return weight is not None and weight.dtype is DType.I8

    def copy(self, **changes) -> "Node":
        fields = {
            "id": self.id,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "attrs": dict(self.attrs),
            "weights": dict(self.weights),
        }
        fields.update(changes)
        return Node(**fields)


@dataclass
class Graph:
    nodes: List[Node]
    inputs: Dict[str, List[Union[int, str]]]
    outputs: List[str]
    quant: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def node(self, node_id: str) -> Node:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def node_map(self) -> Dict[str, Node]:
        return {node.id: node for node in self.nodes}

    def consumers(self, name: str) -> List[Node]:
        return [node for node in self.nodes if name in node.inputs]

    def copy(self) -> "Graph":
        return Graph(
            nodes=[node.copy() for node in self.nodes],
            inputs={name: list(shape) for name, shape in self.inputs.items()},
            outputs=list(self.outputs),
            quant={site: dict(params) for site, params in self.quant.items()},
        )

    def convs(self) -> List[Node]:
        return [node for node in self.nodes if node.kind is OpKind.CONV]


def spatial_attrs(node: Node, key: str, default: int, spatial: int) -> List[int]:
    value = node.attrs.get(key)
    if value is None:
        return [default] * spatial
    value = [int(v) for v in (value if isinstance(value, (list, tuple)) else [value])]
    return value * spatial if len(value) == 1 and spatial > 1 else value


def conv_geometry(node: Node) -> Tuple[List[int], List[int], List[int]]:
    kernel = [int(k) for k in node.attrs["kernel"]]
    spatial = len(kernel)
    return kernel, spatial_attrs(node, "stride", 1, spatial), spatial_attrs(node, "pad", 0, spatial)


def pool_geometry(node: Node, spatial: int) -> Tuple[List[int], List[int], List[int]]:
    window = spatial_attrs(node, "window", 2, spatial)
    stride = spatial_attrs(node, "stride", 0, spatial)
    stride = [s or w for s, w in zip(stride, window)]
    return window, stride, spatial_attrs(node, "pad", 0, spatial)


def sliding_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _arity_ok(node: Node) -> bool:
    if node.kind is OpKind.ADD:
        return len(node.inputs) == 2
    if node.kind is OpKind.CONCAT:
        return len(node.inputs) >= 2
    return len(node.inputs) == 1


def _validate_weights(node: Node) -> List[str]:
    problems = []
    weights = node.weights

    if node.kind is OpKind.CONV:
        w = weights.get("w")
        kernel = node.attrs.get("kernel")
        if w is None or kernel is None:
            return [f"{node.id}: conv needs weight 'w' and attribute 'kernel'"]
        if len(kernel) not in (1, 2, 3):
            problems.append(f"{node.id}: conv spatial rank {len(kernel)} not in 1..3")
        if w.rank != 2 + len(kernel):
            problems.append(f"{node.id}: weight rank mismatch ({w.rank} for {len(kernel)}-D conv)")
        elif list(w.shape[2:]) != [int(k) for k in kernel]:
            problems.append(f"{node.id}: weight kernel extents {list(w.shape[2:])} != kernel {kernel}")
        for key in ("stride", "pad"):
            value = node.attrs.get(key)
            if value is not None and len(value) not in (1, len(kernel)):
                problems.append(f"{node.id}: {key} has {len(value)} entries for {len(kernel)}-D conv")
        if any(s < 1 for s in node.attrs.get("stride", [1])):
            problems.append(f"{node.id}: stride must be >= 1")
    elif node.kind is OpKind.LINEAR:
        w = weights.get("w")
        if w is None or w.rank != 2:
            return [f"{node.id}: linear needs a rank-2 weight 'w'"]
    elif node.kind is OpKind.BATCHNORM:
        missing = [name for name in BATCHNORM_PARAMS if name not in weights]
        if missing:
            return [f"{node.id}: batchnorm missing {', '.join(missing)}"]
        shapes = {weights[name].shape for name in BATCHNORM_PARAMS}
        if len(shapes) != 1 or len(next(iter(shapes))) != 1:
            problems.append(f"{node.id}: batchnorm parameters must share one [channels] shape")
        if not float(node.attrs.get("eps", 0.0)) > 0:
            problems.append(f"{node.id}: batchnorm eps must be > 0")

    if node.kind in (OpKind.CONV, OpKind.LINEAR):
        w = weights["w"]
        b = weights.get("b")
        if b is not None and b.shape != (w.shape[0],):
            problems.append(f"{node.id}: bias shape {list(b.shape)} != [{w.shape[0]}]")
        expected_bias = DType.I32 if node.is_quantized else DType.F32
        if w.dtype not in (DType.F32, DType.I8):
            problems.append(f"{node.id}: weight dtype {w.dtype.name} not supported")
        if b is not None and b.dtype is not expected_bias:
            problems.append(f"{node.id}: bias dtype {b.dtype.name}, expected {expected_bias.name}")
        if node.is_quantized and not {"x_scale", "w_scale"} <= set(node.attrs):
            problems.append(f"{node.id}: quantized weights without x_scale/w_scale")
    return problems


def _validate_attrs(node: Node) -> List[str]:
    attrs = node.attrs
    if node.kind is OpKind.CONCAT and list(attrs.get("axis", [1])) != [1]:
        return [f"{node.id}: concat axis must be 1 (channel axis)"]
    if node.kind is OpKind.UPSAMPLE:
        factor = attrs.get("factor", [2])
        if any(int(f) < 1 for f in factor):
            return [f"{node.id}: upsample factor must be >= 1"]
    if node.kind in (OpKind.QUANTIZE, OpKind.DEQUANTIZE) and not float(attrs.get("scale", 0)) > 0:
        return [f"{node.id}: {node.kind.value} needs a positive scale"]
    if node.kind is OpKind.MAXPOOL and any(w < 1 for w in attrs.get("window", [2])):
        return [f"{node.id}: pool window must be >= 1"]
    return []


def validate_static(g: Graph) -> List[str]:
    problems = []
    seen = set(g.inputs)
    for node in g.nodes:
        if node.id in seen:
            problems.append(f"duplicate node id {node.id}")
        seen.add(node.id)

    known = set(g.inputs) | {node.id for node in g.nodes}
    for node in g.nodes:
        for name in node.inputs:
            if name not in known:
                problems.append(f"{node.id}: unknown input {name}")
        if not _arity_ok(node):
            problems.append(f"{node.id}: {node.kind.value} cannot take {len(node.inputs)} inputs")
        problems.extend(_validate_weights(node))
        problems.extend(_validate_attrs(node))

    for name in g.outputs:
        if name not in known:
            problems.append(f"unknown output {name}")
    for name, shape in g.inputs.items():
        if not shape or any(extent != BATCH and int(extent) < 1 for extent in shape):
            problems.append(f"input {name}: bad declared shape {shape}")
        if BATCH in shape[1:]:
            problems.append(f"input {name}: only the batch extent may be symbolic")

    try:
        topo_order(g)
    except CycleDetected as e:
        problems.extend(e.problems)
    return problems


def ensure_valid(g: Graph) -> Graph:
    problems = validate_static(g)
    if problems:
        raise GraphInvalid(problems)
    return g


def topo_order(g: Graph) -> List[str]:
    position = {node.id: index for index, node in enumerate(g.nodes)}
    pending = {node.id: {name for name in node.inputs if name in position} for node in g.nodes}
    users: Dict[str, List[str]] = {node.id: [] for node in g.nodes}
    for node in g.nodes:
        for name in pending[node.id]:
            users[name].append(node.id)

    ready = [position[node_id] for node_id, deps in pending.items() if not deps]
    heapq.heapify(ready)
    order = []
    while ready:
        node_id = g.nodes[heapq.heappop(ready)].id
        order.append(node_id)
        for user in users[node_id]:
            pending[user].discard(node_id)
            if not pending[user]:
                heapq.heappush(ready, position[user])

    if len(order) != len(g.nodes):
        raise CycleDetected(sorted(set(position) - set(order), key=position.get))
    return order


def concrete_input_shapes(g: Graph, batch: int = 1) -> Dict[str, Shape]:
    return {
        name: tuple(batch if extent == BATCH else int(extent) for extent in shape)
        for name, shape in g.inputs.items()
    }


def _node_shape(node: Node, shapes: List[Shape]) -> Shape:
    x = shapes[0]
    kind = node.kind

    if kind in ELEMENTWISE:
        return x

    if kind is OpKind.CONV:
        kernel, stride, pad = conv_geometry(node)
        w = node.weights["w"]
        if len(x) != 2 + len(kernel):
            raise ShapeConflict(node.id, f"input rank {len(x)} for {len(kernel)}-D conv")
        if x[1] != w.shape[1]:
            raise ShapeConflict(node.id, f"input has {x[1]} channels, weight expects {w.shape[1]}")
        spatial = [sliding_extent(*args) for args in zip(x[2:], kernel, stride, pad)]
        if any(extent < 1 for extent in spatial):
            raise ShapeConflict(node.id, f"kernel {kernel} larger than padded input {list(x[2:])}")
        return (x[0], w.shape[0], *spatial)

    if kind is OpKind.LINEAR:
        w = node.weights["w"]
        if x[-1] != w.shape[1]:
            raise ShapeConflict(node.id, f"last axis {x[-1]} != linear in_features {w.shape[1]}")
        return (*x[:-1], w.shape[0])

    if kind is OpKind.BATCHNORM:
        channels = node.weights["gamma"].shape[0]
        if len(x) < 2 or x[1] != channels:
            raise ShapeConflict(node.id, f"batchnorm over {channels} channels got {list(x)}")
        return x

    if kind is OpKind.MAXPOOL:
        window, stride, pad = pool_geometry(node, len(x) - 2)
        spatial = [sliding_extent(*args) for args in zip(x[2:], window, stride, pad)]
        if any(extent < 1 for extent in spatial):
            raise ShapeConflict(node.id, f"pool window {window} larger than input {list(x[2:])}")
        return (x[0], x[1], *spatial)

    if kind is OpKind.UPSAMPLE:
        factor = spatial_attrs(node, "factor", 2, len(x) - 2)
        return (x[0], x[1], *(extent * f for extent, f in zip(x[2:], factor)))

    if kind is OpKind.CONCAT:
        rest = {(s[0], *s[2:]) for s in shapes}
        if len(rest) != 1 or len({len(s) for s in shapes}) != 1:
            raise ShapeConflict(node.id, f"concat of incompatible shapes {[list(s) for s in shapes]}")
        return (x[0], sum(s[1] for s in shapes), *x[2:])

    if kind is OpKind.ADD:
        if shapes[0] != shapes[1]:
            raise ShapeConflict(node.id, f"add of {list(shapes[0])} and {list(shapes[1])}")
        return x

    raise ShapeConflict(node.id, f"no shape rule for {kind.value}")


def infer_shapes(g: Graph, input_shapes: Optional[Dict[str, Sequence[int]]] = None) -> Dict[str, Shape]:
    shapes: Dict[str, Shape] = {}
    declared = concrete_input_shapes(g)
    for name, shape in g.inputs.items():
        given = tuple(int(e) for e in (input_shapes or {}).get(name, declared[name]))
        fixed = [(i, int(e)) for i, e in enumerate(shape) if e != BATCH]
        if len(given) != len(shape) or any(given[i] != e for i, e in fixed):
            raise ShapeConflict(name, f"input shape {list(given)} does not match declared {shape}")
        shapes[name] = given

    nodes = g.node_map()
    for node_id in topo_order(g):
        node = nodes[node_id]
        shapes[node_id] = _node_shape(node, [shapes[name] for name in node.inputs])
    return shapes


def fold_batchnorm(g: Graph, strict: bool = False) -> Graph:
    folded = g.copy()
    nodes = folded.node_map()
    rename: Dict[str, str] = {}
    unfoldable = []

    for node in list(folded.nodes):
        if node.kind is not OpKind.BATCHNORM:
            continue
        producer = nodes.get(node.inputs[0])
        if (
            producer is None
            or producer.kind is not OpKind.CONV
            or producer.is_quantized
            or len(folded.consumers(producer.id)) != 1
            or producer.id in folded.outputs
        ):
            unfoldable.append(node.id)
            continue

        eps = float(node.attrs.get("eps", 1e-5))
        gamma, beta, mean, var = (node.weights[name].array.astype(np.float64) for name in BATCHNORM_PARAMS)
        scale = gamma / np.sqrt(var + eps)
        w = producer.weights["w"].array.astype(np.float64)
        b = producer.weights["b"].array.astype(np.float64) if "b" in producer.weights else np.zeros(w.shape[0])
        producer.weights["w"] = Tensor((w * scale.reshape(-1, *([1] * (w.ndim - 1)))).astype(np.float32))
        producer.weights["b"] = Tensor(((b - mean) * scale + beta).astype(np.float32))

        folded.nodes.remove(node)
        rename[node.id] = producer.id

    for node in folded.nodes:
        node.inputs = [rename.get(name, name) for name in node.inputs]
    folded.outputs = [rename.get(name, name) for name in folded.outputs]

    if unfoldable:
        if strict:
            raise UnfoldableBatchNorm([f"{node_id}: batchnorm not directly after an exclusive conv" for node_id in unfoldable])
        logger.warning("⚠️ batchnorm left in place", nodes=unfoldable)
    logger.debug("folded batchnorm", folded=len(rename))
    return folded


def with_input_extents(g: Graph, spatial: Sequence[int]) -> Graph:
    """Re-declare the single input for a new tile size; the topology is untouched."""
    (name,) = g.inputs
    declared = g.inputs[name]
    if len(spatial) != len(declared) - 2:
        raise ShapeConflict(name, f"{len(spatial)} spatial extents for a rank-{len(declared)} input")
    rebuilt = g.copy()
    rebuilt.inputs[name] = [*declared[:2], *(int(n) for n in spatial)]
    infer_shapes(rebuilt)
    return rebuilt


def param_count(g: Graph) -> int:
    return sum(t.numel for node in g.nodes for t in node.weights.values())


def weight_bytes(g: Graph) -> int:
    return sum(t.nbytes for node in g.nodes for t in node.weights.values())


def flop_count(g: Graph, input_shapes: Optional[Dict[str, Sequence[int]]] = None) -> int:
    shapes = infer_shapes(g, input_shapes)
    flops = 0
    for node in g.nodes:
        if node.kind is OpKind.CONV:
            w = node.weights["w"]
            flops += 2 * prod(shapes[node.id]) * prod(w.shape[1:])
        elif node.kind is OpKind.LINEAR:
            flops += 2 * prod(shapes[node.id]) * node.weights["w"].shape[1]
    return flops


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    return value


def serialize_model(g: Graph) -> bytes:
    ensure_valid(g)
    blob = bytearray()
    nodes = []
    for node in g.nodes:
        entries = []
        for name, t in node.weights.items():
            payload = t.array.astype(t.dtype.numpy).tobytes(order="C")
            entries.append({
                "name": name,
                "dtype": t.dtype.name,
                "shape": list(t.shape),
                "offset": len(blob),
                "length": len(payload),
            })
            blob.extend(payload)
        nodes.append({
            "id": node.id,
            "kind": node.kind.value,
            "inputs": list(node.inputs),
            "attrs": {key: _plain(value) for key, value in node.attrs.items()},
            "weights": entries,
        })

    header = {
        "version": MODEL_VERSION,
        "inputs": [{"name": name, "shape": list(shape)} for name, shape in g.inputs.items()],
        "outputs": list(g.outputs),
        "nodes": nodes,
        "quant": {site: {k: _plain(v) for k, v in params.items()} for site, params in g.quant.items()},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    body = MODEL_MAGIC + struct.pack("<I", len(text)) + text + bytes(blob)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize_model(raw: bytes, source: str = "<bytes>") -> Graph:
    if raw[:4] != MODEL_MAGIC:
        raise BadMagic(f"{source}: not a model file")
    if len(raw) < 12 or zlib.crc32(raw[:-4]) & 0xFFFFFFFF != struct.unpack("<I", raw[-4:])[0]:
        raise ChecksumMismatch(f"{source}: checksum mismatch (truncated or corrupted)")

    (header_len,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFileError(f"{source}: unreadable header ({e})") from e
    if header.get("version") != MODEL_VERSION:
        raise ModelFileError(f"{source}: unsupported model version {header.get('version')}")
    blob = raw[8 + header_len:-4]

    nodes = []
    for entry in header["nodes"]:
        kind = OpKind.parse(entry["kind"])
        weights = {}
        for spec in entry["weights"]:
            dtype = DType[spec["dtype"]]
            start, length = spec["offset"], spec["length"]
            if start + length > len(blob) or length != prod(spec["shape"]) * dtype.itemsize:
                raise ModelFileError(f"{source}: weight {entry['id']}.{spec['name']} outside blob")
            array = np.frombuffer(blob[start:start + length], dtype=dtype.numpy)
            weights[spec["name"]] = Tensor(array.reshape(spec["shape"]).copy())
        nodes.append(Node(entry["id"], kind, entry["inputs"], entry["attrs"], weights))

    return Graph(
        nodes=nodes,
        inputs={item["name"]: item["shape"] for item in header["inputs"]},
        outputs=header["outputs"],
        quant=header.get("quant", {}),
    )


def save_model(g: Graph, path: Union[str, Path]) -> int:
    raw = serialize_model(g)
    Path(path).write_bytes(raw)
    logger.info("✅ model saved", path=str(path), bytes=len(raw), nodes=len(g.nodes))
    return len(raw)


def load_model(path: Union[str, Path]) -> Graph:
    g = deserialize_model(Path(path).read_bytes(), str(path))
    logger.debug("model loaded", path=str(path), nodes=len(g.nodes))
    return g
