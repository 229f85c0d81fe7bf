"""Seeded builders for the desk-scale model families: U-Net with concat skips, residual block, plain chain."""

from typing import List, Optional, Sequence

import numpy as np

from bioslim.graph import BATCH, Graph, Node, OpKind, ensure_valid
from bioslim.tensor import Tensor

INPUT = "x"


class GraphBuilder:
    """Appends nodes in declaration order and names them by layer kind."""

    def __init__(self, in_channels: int, spatial: Sequence[int], seed: int = 0):
        self.spatial = [int(n) for n in spatial]
        self.rng = np.random.default_rng(seed)
        self.nodes: List[Node] = []
        self.channels = {INPUT: in_channels}
        self._counts = {}

    def _name(self, prefix: str) -> str:
        index = self._counts.get(prefix, 0)
        self._counts[prefix] = index + 1
        return f"{prefix}{index}"

    def _add(self, prefix: str, kind: OpKind, inputs, channels: int, attrs=None, weights=None) -> str:
        node_id = self._name(prefix)
        self.nodes.append(Node(node_id, kind, list(inputs), attrs or {}, weights or {}))
        self.channels[node_id] = channels
        return node_id

    def conv(self, x: str, out_channels: int, kernel: int = 3, bias: bool = True) -> str:
        dims = len(self.spatial)
        in_channels = self.channels[x]
        fan_in = in_channels * kernel ** dims
        # He initialization
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, *[kernel] * dims))
        weights = {"w": Tensor(w.astype(np.float32))}
        if bias:
            weights["b"] = Tensor(np.zeros(out_channels, dtype=np.float32))
        attrs = {"kernel": [kernel] * dims, "stride": [1] * dims, "pad": [kernel // 2] * dims}
        return self._add("conv", OpKind.CONV, [x], out_channels, attrs, weights)

    def batchnorm(self, x: str) -> str:
        c = self.channels[x]
        weights = {
            "gamma": Tensor(self.rng.uniform(0.5, 1.5, c).astype(np.float32)),
            "beta": Tensor(self.rng.normal(0.0, 0.1, c).astype(np.float32)),
            "mean": Tensor(self.rng.normal(0.0, 0.1, c).astype(np.float32)),
            "var": Tensor(self.rng.uniform(0.5, 1.5, c).astype(np.float32)),
        }
        return self._add("bn", OpKind.BATCHNORM, [x], c, {"eps": 1e-5}, weights)

    def act(self, x: str, leaky: bool = False) -> str:
        if leaky:
            return self._add("lrelu", OpKind.LEAKY_RELU, [x], self.channels[x], {"slope": 0.01})
        return self._add("relu", OpKind.RELU, [x], self.channels[x])

    def sigmoid(self, x: str) -> str:
        return self._add("sigmoid", OpKind.SIGMOID, [x], self.channels[x])

    def pool(self, x: str) -> str:
        return self._add("pool", OpKind.MAXPOOL, [x], self.channels[x], {"window": [2] * len(self.spatial)})

    def upsample(self, x: str) -> str:
        return self._add("up", OpKind.UPSAMPLE, [x], self.channels[x], {"factor": [2] * len(self.spatial)})

    def concat(self, *xs: str) -> str:
        return self._add("cat", OpKind.CONCAT, xs, sum(self.channels[x] for x in xs), {"axis": [1]})

    def add(self, a: str, b: str) -> str:
        return self._add("add", OpKind.ADD, [a, b], self.channels[a])

    def build(self, output: str) -> Graph:
        g = Graph(
            nodes=self.nodes,
            inputs={INPUT: [BATCH, self.channels[INPUT], *self.spatial]},
            outputs=[output],
        )
        return ensure_valid(g)


def _head(b: GraphBuilder, x: str, out_channels: int, final_activation: Optional[str]) -> str:
    out = b.conv(x, out_channels, kernel=1)
    if final_activation == "sigmoid":
        out = b.sigmoid(out)
    elif final_activation is not None:
        raise ValueError(f"unknown final activation {final_activation!r}")
    return out


def build_unet(
    spatial: Sequence[int] = (32, 32),
    in_channels: int = 1,
    out_channels: int = 1,
    base: int = 4,
    depth: int = 2,
    batchnorm: bool = False,
    final_activation: Optional[str] = None,
    leaky: bool = False,
    seed: int = 0,
) -> Graph:
    if any(n % (2 ** depth) for n in spatial):
        raise ValueError(f"spatial extents {list(spatial)} must be divisible by 2**{depth}")
    b = GraphBuilder(in_channels, spatial, seed)

    def block(x: str, channels: int) -> str:
        for _ in range(2):
            x = b.conv(x, channels)
            if batchnorm:
                x = b.batchnorm(x)
            x = b.act(x, leaky)
        return x

    x, skips = INPUT, []
    for level in range(depth):
        x = block(x, base * 2 ** level)
        skips.append(x)
        x = b.pool(x)
    x = block(x, base * 2 ** depth)
    for level in reversed(range(depth)):
        x = b.concat(b.upsample(x), skips[level])
        x = block(x, base * 2 ** level)
    return b.build(_head(b, x, out_channels, final_activation))


def build_residual_block(
    spatial: Sequence[int] = (16, 16),
    in_channels: int = 1,
    channels: int = 4,
    out_channels: int = 1,
    seed: int = 0,
) -> Graph:
    b = GraphBuilder(in_channels, spatial, seed)
    stem = b.conv(INPUT, channels)
    x = b.conv(b.act(stem), channels)
    x = b.conv(b.act(x), channels)
    x = b.act(b.add(x, stem))
    return b.build(b.conv(x, out_channels, kernel=1))


def build_chain(
    channels: Sequence[int] = (1, 4, 4, 1),
    spatial: Sequence[int] = (16, 16),
    kernel: int = 3,
    final_activation: Optional[str] = None,
    seed: int = 0,
) -> Graph:
    b = GraphBuilder(channels[0], spatial, seed)
    x = INPUT
    for i, c in enumerate(channels[1:]):
        x = b.conv(x, c, kernel=kernel)
        if i < len(channels) - 2:
            x = b.act(x)
    if final_activation == "sigmoid":
        x = b.sigmoid(x)
    return b.build(x)


def build_identity(channels: int = 1, spatial: Sequence[int] = (16, 16)) -> Graph:
    b = GraphBuilder(channels, spatial)
    out = b.conv(INPUT, channels, kernel=1)
    w = np.eye(channels, dtype=np.float32).reshape(channels, channels, *[1] * len(spatial))
    b.nodes[-1].weights["w"] = Tensor(w)
    return b.build(out)


ARCHITECTURES = ("unet", "residual", "chain")


def build_model(
    arch: str,
    spatial: Sequence[int],
    in_channels: int = 1,
    out_channels: int = 1,
    base: int = 4,
    depth: int = 2,
    batchnorm: bool = False,
    final_activation: Optional[str] = None,
    seed: int = 0,
) -> Graph:
    """Build a named family with shared settings; ``depth`` and ``batchnorm`` only shape the U-Net."""
    if arch == "unet":
        return build_unet(spatial, in_channels, out_channels, base, depth, batchnorm, final_activation, seed=seed)
    if arch == "residual":
        return build_residual_block(spatial, in_channels, base, out_channels, seed=seed)
    if arch == "chain":
        return build_chain((in_channels, base, base, out_channels), spatial, final_activation=final_activation, seed=seed)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {', '.join(ARCHITECTURES)}")
