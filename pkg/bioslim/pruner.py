"""Structured filter pruning with channel-dependency groups and physical graph rewrite."""

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor, prod
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bioslim.config import logger
from bioslim.errors import PlanViolatesGroups, ShapeMismatch, WouldEmptyLayer
from bioslim.executor import run_single
from bioslim.graph import (
    ELEMENTWISE,
    Graph,
    OpKind,
    ensure_valid,
    flop_count,
    infer_shapes,
    param_count,
    topo_order,
)
from bioslim.metrics import pearson
from bioslim.tensor import Tensor, as_array
from bioslim.trainer import LossKind, SGDConfig, finetune

SWEEP_COLUMNS = ["criterion", "ratio", "accuracy", "params", "flops"]

PASSTHROUGH = ELEMENTWISE | {OpKind.BATCHNORM, OpKind.MAXPOOL, OpKind.UPSAMPLE}


class Criterion(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    FPGM = "FPGM"


@dataclass(frozen=True)
class Segment:
    """Channels [offset, offset + length) of a tensor come from all channels of ``source``."""

    source: str
    offset: int
    length: int


@dataclass
class DependencyGroup:
    members: Tuple[str, ...]
    couplers: Tuple[str, ...] = ()
    prunable: bool = True


@dataclass
class PrunePlan:
    keep: Dict[str, List[int]]
    sparsity: float = 0.0
    criterion: Optional[Criterion] = None
    groups: List[DependencyGroup] = field(default_factory=list)


def importance(w, c: Criterion) -> np.ndarray:
    w = as_array(w).astype(np.float64)
    if w.ndim < 2:
        raise ShapeMismatch(f"filter weights need rank >= 2, got shape {list(w.shape)}")
    filters = w.reshape(w.shape[0], -1)
    c = Criterion(c)
    if c is Criterion.L1:
        return np.abs(filters).sum(axis=1)
    if c is Criterion.L2:
        return np.sqrt((filters ** 2).sum(axis=1))
    # FPGM: summed distance to every other filter; small means close to the geometric median
    diffs = filters[:, None, :] - filters[None, :, :]
    return np.sqrt((diffs ** 2).sum(axis=2)).sum(axis=1)


def prune_count(n: int, sparsity: float) -> int:
    # read the ratio as the short fraction it was written as: 0.57 -> 57/100, 1/3 -> 1/3
    exact = Fraction(sparsity).limit_denominator(1_000_000)
    return min(floor(exact * n), n - 1)


def select_filters(scores: Sequence[float], sparsity: float) -> List[int]:
    if not 0 <= sparsity < 1:
        raise ValueError(f"sparsity {sparsity} outside [0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    n_prune = prune_count(len(scores), sparsity)
    order = np.argsort(scores, kind="stable")
    pruned = set(order[:n_prune].tolist())
    return [i for i in range(len(scores)) if i not in pruned]


def channel_segments(g: Graph) -> Dict[str, List[Segment]]:
    shapes = infer_shapes(g)
    nodes = g.node_map()
    segments: Dict[str, List[Segment]] = {
        name: [Segment(name, 0, shape[1] if len(shape) > 1 else shape[0])]
        for name, shape in ((n, shapes[n]) for n in g.inputs)
    }
    for node_id in topo_order(g):
        node = nodes[node_id]
        source = segments[node.inputs[0]]
        if node.kind is OpKind.CONV:
            segments[node_id] = [Segment(node_id, 0, shapes[node_id][1])]
        elif node.kind in PASSTHROUGH or node.kind is OpKind.ADD:
            segments[node_id] = list(source)
        elif node.kind is OpKind.LINEAR:
            if len(shapes[node.inputs[0]]) > 2:
                segments[node_id] = list(source)
            else:
                segments[node_id] = [Segment(node_id, 0, shapes[node_id][1])]
        elif node.kind is OpKind.CONCAT:
            merged, offset = [], 0
            for name in node.inputs:
                for seg in segments[name]:
                    merged.append(Segment(seg.source, offset, seg.length))
                    offset += seg.length
            segments[node_id] = merged
    return segments


class _UnionFind:
    def __init__(self, items):
        self.parent = {item: item for item in items}

    def find(self, item):
        while self.parent[item] != item:
            self.parent[item] = self.parent[self.parent[item]]
            item = self.parent[item]
        return item

    def union(self, a, b):
        self.parent[self.find(b)] = self.find(a)


def build_groups(g: Graph) -> List[DependencyGroup]:
    ensure_valid(g)
    prunable_convs = [node.id for node in g.convs() if not node.is_quantized]
    convs = set(prunable_convs)
    segments = channel_segments(g)
    groups = _UnionFind(prunable_convs)
    fixed = set()
    couplers: Dict[str, List[str]] = {conv: [] for conv in prunable_convs}

    def pin(segs):
        fixed.update(seg.source for seg in segs if seg.source in convs)

    for node in g.nodes:
        if node.kind is not OpKind.ADD:
            continue
        left, right = (segments[name] for name in node.inputs)
        aligned = len(left) == len(right) and all(
            a.offset == b.offset and a.length == b.length for a, b in zip(left, right)
        )
        if not aligned:
            pin(left)
            pin(right)
            continue
        for a, b in zip(left, right):
            if a.source in convs and b.source in convs:
                groups.union(a.source, b.source)
                couplers[a.source].append(node.id)
            elif a.source != b.source:
                pin([a, b])

    for name in g.outputs:
        pin(segments[name])

    members: Dict[str, List[str]] = {}
    for conv in prunable_convs:
        members.setdefault(groups.find(conv), []).append(conv)

    result = []
    for group in members.values():
        group_couplers = sorted({c for conv in group for c in couplers[conv]})
        result.append(
            DependencyGroup(
                members=tuple(group),
                couplers=tuple(group_couplers),
                prunable=not any(conv in fixed for conv in group),
            )
        )
    return result


def make_plan(g: Graph, criterion: Criterion, sparsity: float) -> PrunePlan:
    groups = build_groups(g)
    nodes = g.node_map()
    keep: Dict[str, List[int]] = {}
    for group in groups:
        filters = nodes[group.members[0]].weights["w"].shape[0]
        if group.prunable:
            scores = sum(importance(nodes[m].weights["w"], criterion) for m in group.members)
            kept = select_filters(scores, sparsity)
        else:
            kept = list(range(filters))
        for member in group.members:
            keep[member] = list(kept)
    return PrunePlan(keep=keep, sparsity=sparsity, criterion=Criterion(criterion), groups=groups)


def _check_plan(g: Graph, plan: PrunePlan, groups: List[DependencyGroup]) -> Dict[str, List[int]]:
    nodes = g.node_map()
    keep = {}
    for conv in g.convs():
        filters = conv.weights["w"].shape[0]
        kept = list(plan.keep.get(conv.id, range(filters)))
        if not kept:
            raise WouldEmptyLayer(f"{conv.id}: plan keeps no filters")
        if any(b <= a for a, b in zip(kept, kept[1:])) or kept[0] < 0 or kept[-1] >= filters:
            raise PlanViolatesGroups(f"{conv.id}: kept indices must be strictly increasing within [0, {filters})")
        keep[conv.id] = kept

    unknown = set(plan.keep) - set(keep)
    if unknown:
        raise PlanViolatesGroups(f"plan names non-conv nodes {sorted(unknown)}")

    for group in groups:
        reference = keep[group.members[0]]
        if any(keep[m] != reference for m in group.members):
            raise PlanViolatesGroups(f"group {list(group.members)} must share one keep set")
        full = list(range(nodes[group.members[0]].weights["w"].shape[0]))
        if not group.prunable and reference != full:
            raise PlanViolatesGroups(f"group {list(group.members)} produces graph outputs and must be kept whole")
    return keep


def _kept_channels(segments: List[Segment], keep: Dict[str, List[int]]) -> List[int]:
    kept = []
    for seg in segments:
        kept.extend(seg.offset + i for i in keep.get(seg.source, range(seg.length)))
    return kept


def _input_keeps(g: Graph, keep: Dict[str, List[int]]) -> Dict[str, List[int]]:
    segments = channel_segments(g)
    return {
        node.id: _kept_channels(segments[node.inputs[0]], keep)
        for node in g.nodes
        if node.kind in (OpKind.CONV, OpKind.BATCHNORM)
    }


def apply_prune(g: Graph, plan: PrunePlan) -> Graph:
    groups = plan.groups or build_groups(g)
    keep = _check_plan(g, plan, groups)
    in_keep = _input_keeps(g, keep)

    pruned = g.copy()
    for node in pruned.nodes:
        if node.kind is OpKind.CONV:
            out_idx = np.asarray(keep[node.id])
            in_idx = np.asarray(in_keep[node.id])
            w = node.weights["w"].array[out_idx][:, in_idx]
            node.weights["w"] = Tensor(w)
            if "b" in node.weights:
                node.weights["b"] = Tensor(node.weights["b"].array[out_idx])
        elif node.kind is OpKind.BATCHNORM:
            idx = np.asarray(in_keep[node.id])
            for name in ("gamma", "beta", "mean", "var"):
                node.weights[name] = Tensor(node.weights[name].array[idx])

    before, after = param_count(g), param_count(pruned)
    logger.info("✅ structural prune applied", params_before=before, params_after=after)
    return pruned


def zero_mask(g: Graph, plan: PrunePlan) -> Graph:
    groups = plan.groups or build_groups(g)
    keep = _check_plan(g, plan, groups)
    in_keep = _input_keeps(g, keep)

    masked = g.copy()
    for node in masked.nodes:
        if node.kind is not OpKind.CONV:
            continue
        w = node.weights["w"].array.copy()
        out_mask = np.ones(w.shape[0], dtype=bool)
        out_mask[keep[node.id]] = False
        in_mask = np.ones(w.shape[1], dtype=bool)
        in_mask[in_keep[node.id]] = False
        w[out_mask] = 0
        w[:, in_mask] = 0
        node.weights["w"] = Tensor(w)
        if "b" in node.weights:
            b = node.weights["b"].array.copy()
            b[out_mask] = 0
            node.weights["b"] = Tensor(b)
    return masked


def predict_param_count(g: Graph, plan: PrunePlan) -> int:
    groups = plan.groups or build_groups(g)
    keep = _check_plan(g, plan, groups)
    in_keep = _input_keeps(g, keep)

    total = 0
    for node in g.nodes:
        if node.kind is OpKind.CONV:
            w = node.weights["w"]
            total += len(keep[node.id]) * len(in_keep[node.id]) * prod(w.shape[2:])
            total += len(keep[node.id]) if "b" in node.weights else 0
        elif node.kind is OpKind.BATCHNORM:
            total += len(node.weights) * len(in_keep[node.id])
        else:
            total += sum(t.numel for t in node.weights.values())
    return total


Metric = Callable[[Tensor, Tensor], float]


def evaluate(g: Graph, data: Sequence[Tuple[Tensor, Tensor]], metric: Metric = pearson) -> float:
    scores = [metric(run_single(g, x), target) for x, target in data]
    return float(np.mean(scores))


def sweep(
    g: Graph,
    eval_data: Sequence[Tuple[Tensor, Tensor]],
    criteria: Sequence[Criterion],
    ratios: Sequence[float],
    finetune_cfg: Optional[SGDConfig] = None,
    train_data: Optional[Sequence[Tuple[Tensor, Tensor]]] = None,
    metric: Metric = pearson,
    loss: LossKind = LossKind.MSE,
) -> pd.DataFrame:
    if any(not 0 <= r < 1 for r in ratios):
        raise ValueError(f"ratios must lie in [0, 1), got {list(ratios)}")

    (input_name,) = g.inputs
    shape = {input_name: eval_data[0][0].shape}
    rows = []
    baseline = evaluate(g, eval_data, metric)

    for criterion in criteria:
        for ratio in ratios:
            plan = make_plan(g, Criterion(criterion), ratio)
            pruned = apply_prune(g, plan)
            if finetune_cfg is not None and ratio > 0:
                pruned = finetune(pruned, train_data or eval_data, loss, finetune_cfg).graph
            accuracy = evaluate(pruned, eval_data, metric)
            rows.append({
                "criterion": Criterion(criterion).value,
                "ratio": float(ratio),
                "accuracy": accuracy,
                "params": param_count(pruned),
                "flops": flop_count(pruned, shape),
            })
            logger.info("sweep cell", criterion=Criterion(criterion).value, ratio=ratio, accuracy=round(accuracy, 4))

    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    table.attrs["baseline"] = {
        "accuracy": baseline,
        "params": param_count(g),
        "flops": flop_count(g, shape),
    }
    return table
