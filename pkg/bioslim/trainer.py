"""Fine-tuning: reverse-mode gradients over the graph IR, SGD with momentum, gradient checks."""

import enum
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from bioslim.config import logger
from bioslim.errors import ShapeMismatch, UnsupportedForTraining
from bioslim.executor import _as_matrix, conv_columns, sigmoid_array, upsample_array
from bioslim.graph import Graph, OpKind, conv_geometry, pool_geometry, spatial_attrs, topo_order
from bioslim.tensor import Tensor, as_array

ParamKey = Tuple[str, str]
Params = Dict[ParamKey, np.ndarray]

BCE_EPS = 1e-7


class LossKind(str, enum.Enum):
    MSE = "MSE"
    BCE = "BCE"


class SGDConfig(BaseModel):
    lr: float = Field(default=1e-3, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=1000, ge=1)
    batch_size: int = Field(default=4, ge=1)
    seed: int = 0


@dataclass
class FinetuneResult:
    graph: Graph
    losses: List[float]

    def curve(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": np.arange(1, len(self.losses) + 1), "loss": self.losses})


def trainable_params(g: Graph) -> Params:
    params = {}
    for node in g.nodes:
        if node.kind in (OpKind.CONV, OpKind.LINEAR):
            for name in ("w", "b"):
                if name in node.weights:
                    params[(node.id, name)] = node.weights[name].array.astype(np.float64)
    return params


def with_params(g: Graph, params: Params) -> Graph:
    updated = g.copy()
    for node in updated.nodes:
        for name in list(node.weights):
            if (node.id, name) in params:
                node.weights[name] = Tensor(params[(node.id, name)].astype(np.float32))
    return updated


def _check_trainable(g: Graph) -> None:
    quantized = [n.id for n in g.nodes if n.kind in (OpKind.QUANTIZE, OpKind.DEQUANTIZE) or n.is_quantized]
    if quantized:
        raise UnsupportedForTraining(f"quantized graphs are not trainable ({', '.join(quantized)})")


class _Tape:
    """Forward values plus what each node's backward rule needs."""

    def __init__(self):
        self.values: Dict[str, np.ndarray] = {}
        self.saved: Dict[str, object] = {}
        self.patterns: List[np.ndarray] = []


def _forward(g: Graph, x: np.ndarray, params: Params) -> _Tape:
    tape = _Tape()
    (input_name,) = g.inputs
    tape.values[input_name] = x
    nodes = g.node_map()

    for node_id in topo_order(g):
        node = nodes[node_id]
        args = [tape.values[name] for name in node.inputs]
        a = args[0]
        kind = node.kind

        if kind is OpKind.CONV:
            kernel, stride, pad = conv_geometry(node)
            w = params[(node_id, "w")]
            matrix, out = _as_matrix(conv_columns(a, kernel, stride, pad))
            y = matrix @ w.reshape(w.shape[0], -1).T
            if (node_id, "b") in params:
                y = y + params[(node_id, "b")]
            y = np.moveaxis(y.reshape(a.shape[0], *out, w.shape[0]), -1, 1)
            tape.saved[node_id] = matrix
        elif kind is OpKind.LINEAR:
            y = a @ params[(node_id, "w")].T
            if (node_id, "b") in params:
                y = y + params[(node_id, "b")]
        elif kind is OpKind.RELU:
            y = np.maximum(a, 0)
            tape.patterns.append(a > 0)
        elif kind is OpKind.LEAKY_RELU:
            y = np.where(a > 0, a, a * float(node.attrs.get("slope", 0.01)))
            tape.patterns.append(a > 0)
        elif kind is OpKind.SIGMOID:
            y = sigmoid_array(a)
        elif kind is OpKind.BATCHNORM:
            eps = float(node.attrs.get("eps", 1e-5))
            gamma, beta, mean, var = (node.weights[k].array.astype(np.float64) for k in ("gamma", "beta", "mean", "var"))
            scale = gamma / np.sqrt(var + eps)
            shape = (1, -1, *([1] * (a.ndim - 2)))
            y = a * scale.reshape(shape) + (beta - mean * scale).reshape(shape)
            tape.saved[node_id] = scale.reshape(shape)
        elif kind is OpKind.MAXPOOL:
            window, stride, pad = pool_geometry(node, a.ndim - 2)
            columns = conv_columns(a, window, stride, pad, fill=-np.inf)
            flat = columns.reshape(*columns.shape[: a.ndim], -1)
            # argmax returns the first maximum in scan order
            winner = flat.argmax(axis=-1)
            y = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
            tape.saved[node_id] = winner
            tape.patterns.append(winner)
        elif kind is OpKind.UPSAMPLE:
            y = upsample_array(a, spatial_attrs(node, "factor", 2, a.ndim - 2))
        elif kind is OpKind.CONCAT:
            y = np.concatenate(args, axis=1)
        elif kind is OpKind.ADD:
            y = args[0] + args[1]
        else:
            raise UnsupportedForTraining(f"{kind.value} has no gradient rule")
        tape.values[node_id] = y
    return tape


def _scatter_windows(grad_cols: np.ndarray, padded_shape, kernel, stride) -> np.ndarray:
    # grad_cols: [N, C, *out, *kernel] -> summed back onto the padded input
    spatial = len(kernel)
    out = grad_cols.shape[2:2 + spatial]
    dx = np.zeros(padded_shape, dtype=grad_cols.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        region = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out))
        dx[(slice(None), slice(None), *region)] += grad_cols[(Ellipsis, *offset)]
    return dx


def _crop(dx: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return dx
    return dx[(slice(None), slice(None), *[slice(p, dx.shape[2 + i] - p) for i, p in enumerate(pad)])]


def _backward(g: Graph, tape: _Tape, params: Params, grad_out: np.ndarray) -> Dict[ParamKey, np.ndarray]:
    nodes = g.node_map()
    grads: Dict[str, np.ndarray] = {g.outputs[0]: grad_out}
    param_grads: Dict[ParamKey, np.ndarray] = {key: np.zeros_like(value) for key, value in params.items()}

    def push(name: str, grad: np.ndarray) -> None:
        grads[name] = grads[name] + grad if name in grads else grad

    for node_id in reversed(topo_order(g)):
        if node_id not in grads:
            continue
        node = nodes[node_id]
        dy = grads.pop(node_id)
        a = tape.values[node.inputs[0]]
        kind = node.kind

        if kind is OpKind.CONV:
            kernel, stride, pad = conv_geometry(node)
            w = params[(node_id, "w")]
            dy_mat = np.moveaxis(dy, 1, -1).reshape(-1, w.shape[0])
            param_grads[(node_id, "w")] += (dy_mat.T @ tape.saved[node_id]).reshape(w.shape)
            if (node_id, "b") in params:
                param_grads[(node_id, "b")] += dy_mat.sum(axis=0)
            spatial = len(kernel)
            out = dy.shape[2:]
            d_cols = (dy_mat @ w.reshape(w.shape[0], -1)).reshape(a.shape[0], *out, a.shape[1], *kernel)
            d_cols = np.moveaxis(d_cols, 1 + spatial, 1)
            padded = (*a.shape[:2], *(n + 2 * p for n, p in zip(a.shape[2:], pad)))
            push(node.inputs[0], _crop(_scatter_windows(d_cols, padded, kernel, stride), pad))
        elif kind is OpKind.LINEAR:
            w = params[(node_id, "w")]
            x2 = a.reshape(-1, a.shape[-1])
            dy2 = dy.reshape(-1, dy.shape[-1])
            param_grads[(node_id, "w")] += dy2.T @ x2
            if (node_id, "b") in params:
                param_grads[(node_id, "b")] += dy2.sum(axis=0)
            push(node.inputs[0], (dy2 @ w).reshape(a.shape))
        elif kind is OpKind.RELU:
            push(node.inputs[0], dy * (a > 0))
        elif kind is OpKind.LEAKY_RELU:
            push(node.inputs[0], np.where(a > 0, dy, dy * float(node.attrs.get("slope", 0.01))))
        elif kind is OpKind.SIGMOID:
            y = tape.values[node_id]
            push(node.inputs[0], dy * y * (1 - y))
        elif kind is OpKind.BATCHNORM:
            push(node.inputs[0], dy * tape.saved[node_id])
        elif kind is OpKind.MAXPOOL:
            window, stride, pad = pool_geometry(node, a.ndim - 2)
            winner = tape.saved[node_id]
            d_cols = np.zeros((*dy.shape, *window), dtype=dy.dtype)
            for index, offset in enumerate(itertools.product(*(range(k) for k in window))):
                d_cols[(Ellipsis, *offset)] = dy * (winner == index)
            padded = (*a.shape[:2], *(n + 2 * p for n, p in zip(a.shape[2:], pad)))
            push(node.inputs[0], _crop(_scatter_windows(d_cols, padded, window, stride), pad))
        elif kind is OpKind.UPSAMPLE:
            factor = spatial_attrs(node, "factor", 2, a.ndim - 2)
            for axis, f in enumerate(factor, start=2):
                shape = dy.shape
                dy = dy.reshape(*shape[:axis], shape[axis] // f, f, *shape[axis + 1:]).sum(axis=axis + 1)
            push(node.inputs[0], dy)
        elif kind is OpKind.CONCAT:
            bounds = np.cumsum([tape.values[name].shape[1] for name in node.inputs])[:-1]
            for name, part in zip(node.inputs, np.split(dy, bounds, axis=1)):
                push(name, part)
        elif kind is OpKind.ADD:
            push(node.inputs[0], dy)
            push(node.inputs[1], dy)
    return param_grads


def _loss(kind: LossKind, y: np.ndarray, target: np.ndarray, logits: bool) -> Tuple[float, np.ndarray]:
    if y.shape != target.shape:
        raise ShapeMismatch(f"output {list(y.shape)} vs target {list(target.shape)}")
    n = y.size
    if LossKind(kind) is LossKind.MSE:
        diff = y - target
        return float((diff * diff).mean()), 2.0 * diff / n

    if target.min() < 0 or target.max() > 1:
        raise ShapeMismatch("BCE targets must lie in [0, 1]")
    if logits:
        p = sigmoid_array(y)
        value = -(target * np.log(np.clip(p, BCE_EPS, 1)) + (1 - target) * np.log(np.clip(1 - p, BCE_EPS, 1)))
        return float(value.mean()), (p - target) / n
    p = np.clip(y, BCE_EPS, 1 - BCE_EPS)
    value = -(target * np.log(p) + (1 - target) * np.log(1 - p))
    return float(value.mean()), (p - target) / (p * (1 - p)) / n


def _check_bce_head(g: Graph, loss: LossKind, logits: bool) -> None:
    if LossKind(loss) is LossKind.BCE and not logits and g.node(g.outputs[0]).kind is not OpKind.SIGMOID:
        raise UnsupportedForTraining("BCE needs a Sigmoid-terminated graph or logits=True")


def _loss_and_grads(g: Graph, params: Params, x, target, loss: LossKind, logits: bool):
    tape = _forward(g, as_array(x).astype(np.float64), params)
    value, grad_out = _loss(loss, tape.values[g.outputs[0]], as_array(target).astype(np.float64), logits)
    return value, _backward(g, tape, params, grad_out)


def forward_backward(g: Graph, x, target, loss: LossKind = LossKind.MSE, logits: bool = False):
    _check_trainable(g)
    _check_bce_head(g, loss, logits)
    return _loss_and_grads(g, trainable_params(g), x, target, loss, logits)


def sgd_step(weights: Params, grads: Params, cfg: SGDConfig, velocity: Optional[Params] = None):
    velocity = velocity or {}
    new_weights, new_velocity = {}, {}
    for key, w in weights.items():
        grad = grads.get(key)
        if grad is None:
            new_weights[key] = w
            continue
        if grad.shape != w.shape:
            raise ShapeMismatch(f"{key}: gradient {list(grad.shape)} vs weight {list(w.shape)}")
        v = cfg.momentum * velocity.get(key, np.zeros_like(w)) + grad
        new_velocity[key] = v
        new_weights[key] = w - cfg.lr * v
    return new_weights, new_velocity


def _stack(samples: Sequence) -> np.ndarray:
    return np.concatenate([as_array(s).astype(np.float64) for s in samples], axis=0)


def finetune(
    g: Graph,
    dataset: Sequence[Tuple],
    loss: LossKind,
    cfg: SGDConfig,
    logits: bool = False,
) -> FinetuneResult:
    _check_trainable(g)
    _check_bce_head(g, loss, logits)
    if not dataset:
        raise ValueError("fine-tuning needs a nonempty dataset")

    rng = np.random.default_rng(cfg.seed)
    params = trainable_params(g)
    velocity: Params = {}
    losses = []
    report_every = max(1, cfg.epochs // 10)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            x = _stack([sample[0] for sample in batch])
            target = _stack([sample[1] for sample in batch])
            value, grads = _loss_and_grads(g, params, x, target, loss, logits)
            params, velocity = sgd_step(params, grads, cfg, velocity)
            batch_losses.append(value)
        losses.append(float(np.mean(batch_losses)))
        if epoch % report_every == 0:
            logger.debug("fine-tune epoch", epoch=epoch, loss=losses[-1])

    logger.info("✅ fine-tuning finished", epochs=cfg.epochs, first_loss=losses[0], last_loss=losses[-1])
    return FinetuneResult(graph=with_params(g, params), losses=losses)


def _loss_with(g: Graph, params: Params, x, target, loss, logits):
    tape = _forward(g, as_array(x).astype(np.float64), params)
    value, _ = _loss(loss, tape.values[g.outputs[0]], as_array(target).astype(np.float64), logits)
    return value, tape.patterns


def _same_pattern(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def grad_check(
    g: Graph,
    x,
    target,
    loss: LossKind = LossKind.MSE,
    eps: float = 1e-3,
    max_elements: int = 200,
    seed: int = 0,
    logits: bool = False,
) -> float:
    if eps <= 0:
        raise ValueError("finite-difference step must be positive")
    _check_trainable(g)
    _check_bce_head(g, loss, logits)
    params = trainable_params(g)
    _, analytic = _loss_and_grads(g, params, x, target, loss, logits)

    elements = [(key, i) for key, value in params.items() for i in range(value.size)]
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(elements), size=min(max_elements, len(elements)), replace=False)

    worst, skipped = 0.0, 0
    for index in sorted(picked):
        key, flat = elements[index]
        results = []
        for sign in (1.0, -1.0):
            shifted = dict(params)
            shifted[key] = params[key].copy()
            shifted[key].reshape(-1)[flat] += sign * eps
            results.append(_loss_with(g, shifted, x, target, loss, logits))
        (plus, plus_pattern), (minus, minus_pattern) = results
        if not _same_pattern(plus_pattern, minus_pattern):
            # perturbation crosses an activation kink
            skipped += 1
            continue
        numeric = (plus - minus) / (2 * eps)
        exact = float(analytic[key].reshape(-1)[flat])
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8))

    logger.debug("gradient check", checked=len(picked) - skipped, skipped=skipped, max_rel_err=worst)
    return worst
