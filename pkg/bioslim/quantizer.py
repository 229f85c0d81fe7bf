"""Post-training int8 quantization: observers, symmetric per-tensor params, graph conversion."""

import enum
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List

import numpy as np

from bioslim.config import logger
from bioslim.errors import CalibrationError, EmptyTensor, GraphInvalid, MissingParams
from bioslim.executor import run
from bioslim.graph import Graph, Node, OpKind, ensure_valid
from bioslim.tensor import I8_QMAX, DType, Tensor, as_array, saturate

QUANTIZED_KINDS = (OpKind.CONV, OpKind.LINEAR)


class ObserverTag(str, enum.Enum):
    MINMAX = "MinMax"
    EMA_MINMAX = "EMAMinMax"
    QUANTILE = "Quantile"
    EMA_QUANTILE = "EMAQuantile"

    @property
    def uses_quantile(self) -> bool:
        return self in (ObserverTag.QUANTILE, ObserverTag.EMA_QUANTILE)

    @property
    def uses_ema(self) -> bool:
        return self in (ObserverTag.EMA_MINMAX, ObserverTag.EMA_QUANTILE)


@dataclass(frozen=True)
class ObserverKind:
    tag: ObserverTag = ObserverTag.EMA_QUANTILE
    quantile: float = 0.9999
    ema_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "tag", ObserverTag(self.tag))
        if not 0 < self.quantile <= 1:
            raise ValueError(f"quantile {self.quantile} outside (0, 1]")
        if not 0 <= self.ema_momentum < 1:
            raise ValueError(f"ema momentum {self.ema_momentum} outside [0, 1)")


MINMAX = ObserverKind(ObserverTag.MINMAX)


@dataclass(frozen=True)
class ObserverState:
    kind: ObserverKind
    running_max_abs: float = 0.0
    batches_seen: int = 0


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    qmin: int = -I8_QMAX
    qmax: int = I8_QMAX
    bits: int = 8
    degenerate: bool = False

    def to_header(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point, "bits": self.bits}


def observe(state: ObserverState, t) -> ObserverState:
    magnitude = np.abs(as_array(t).astype(np.float64)).reshape(-1)
    if magnitude.size == 0:
        raise EmptyTensor("cannot observe an empty tensor")

    kind = state.kind
    if kind.tag.uses_quantile:
        statistic = float(np.quantile(magnitude, kind.quantile, method="linear"))
    else:
        statistic = float(magnitude.max())

    if state.batches_seen == 0:
        running = statistic
    elif kind.tag.uses_ema:
        running = kind.ema_momentum * state.running_max_abs + (1 - kind.ema_momentum) * statistic
    else:
        running = max(state.running_max_abs, statistic)
    return replace(state, running_max_abs=running, batches_seen=state.batches_seen + 1)


def finalize_params(state: ObserverState, site: str = "") -> QuantParams:
    if state.batches_seen < 1:
        raise CalibrationError(f"observer {site or '<anonymous>'} saw no batches")
    if state.running_max_abs <= 0:
        logger.warning("⚠️ degenerate quantization range, falling back to scale 1.0", site=site)
        return QuantParams(scale=1.0, degenerate=True)
    return QuantParams(scale=state.running_max_abs / I8_QMAX)


def quantize_tensor(t: Tensor, p: QuantParams) -> Tensor:
    return Tensor(saturate(t.array.astype(np.float64) / p.scale, DType.I8))


def dequantize_tensor(q: Tensor, p: QuantParams) -> Tensor:
    return Tensor((q.array.astype(np.float64) * p.scale).astype(np.float32))


def weight_params(w: Tensor, site: str = "") -> QuantParams:
    return finalize_params(observe(ObserverState(MINMAX), w), site)


def input_site(node_id: str) -> str:
    return f"{node_id}/x"


def weight_site(node_id: str) -> str:
    return f"{node_id}/w"


def calibrate(g: Graph, samples: Iterable[Tensor], kind: ObserverKind = ObserverKind()) -> Dict[str, QuantParams]:
    ensure_valid(g)
    if any(node.kind is OpKind.BATCHNORM for node in g.nodes):
        raise GraphInvalid(["calibration expects batchnorm folded into its conv"])
    samples = list(samples)
    if not samples:
        raise CalibrationError("calibration needs at least one sample")
    if len(g.inputs) != 1:
        raise CalibrationError("calibration supports single-input graphs")

    (input_name,) = g.inputs
    states: Dict[str, ObserverState] = {input_name: ObserverState(kind)}
    for node in g.nodes:
        if node.kind in QUANTIZED_KINDS:
            states[input_site(node.id)] = ObserverState(kind)

    def record(node: Node, args: List[np.ndarray], _result: np.ndarray) -> None:
        if node.kind in QUANTIZED_KINDS:
            site = input_site(node.id)
            states[site] = observe(states[site], args[0])

    for sample in samples:
        states[input_name] = observe(states[input_name], sample)
        run(g, {input_name: sample}, on_node=record)

    params = {site: finalize_params(state, site) for site, state in states.items()}
    for node in g.nodes:
        if node.kind in QUANTIZED_KINDS:
            params[weight_site(node.id)] = weight_params(node.weights["w"], weight_site(node.id))

    degenerate = sorted(site for site, p in params.items() if p.degenerate)
    logger.info(
        "✅ calibration finished",
        samples=len(samples),
        observer=kind.tag.value,
        sites=len(params),
        degenerate=len(degenerate),
    )
    return params


def quantize_bias(b: Tensor, sx: float, sw: float) -> Tensor:
    return Tensor(saturate(b.array.astype(np.float64) / (sx * sw), DType.I32))


def convert_int8(g: Graph, act_params: Dict[str, QuantParams]) -> Graph:
    ensure_valid(g)
    if any(node.kind is OpKind.BATCHNORM for node in g.nodes):
        raise GraphInvalid(["convert_int8 expects a batchnorm-free graph"])

    converted = g.copy()
    taken = {node.id for node in converted.nodes} | set(converted.inputs)
    nodes: List[Node] = []
    for node in converted.nodes:
        if node.kind not in QUANTIZED_KINDS or node.is_quantized:
            nodes.append(node)
            continue

        x_site = input_site(node.id)
        if x_site not in act_params:
            raise MissingParams(f"no activation params for {node.id}")
        px = act_params[x_site]
        pw = act_params.get(weight_site(node.id)) or weight_params(node.weights["w"], weight_site(node.id))

        quant_id = f"{node.id}_quant"
        while quant_id in taken:
            quant_id += "_"
        taken.add(quant_id)
        nodes.append(Node(quant_id, OpKind.QUANTIZE, [node.inputs[0]], {"scale": px.scale}))

        weights = {"w": quantize_tensor(node.weights["w"], pw)}
        if "b" in node.weights:
            weights["b"] = quantize_bias(node.weights["b"], px.scale, pw.scale)
        attrs = dict(node.attrs, x_scale=px.scale, w_scale=pw.scale)
        nodes.append(node.copy(inputs=[quant_id], attrs=attrs, weights=weights))

        converted.quant[x_site] = px.to_header()
        converted.quant[weight_site(node.id)] = pw.to_header()

    converted.nodes = nodes
    quantized = sum(1 for node in nodes if node.is_quantized)
    logger.info("✅ int8 conversion finished", quantized_layers=quantized)
    return converted
