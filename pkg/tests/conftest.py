import os

import numpy as np
import pytest

from bioslim.graph import BATCH, Graph, Node, OpKind
from bioslim.tensor import Tensor


def f32(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float32))


def conv_node(node_id, src, w, b=None, stride=None, pad=None) -> Node:
    w = np.asarray(w, dtype=np.float32)
    spatial = w.ndim - 2
    weights = {"w": Tensor(w)}
    if b is not None:
        weights["b"] = f32(b)
    attrs = {
        "kernel": list(w.shape[2:]),
        "stride": list(stride or [1] * spatial),
        "pad": list(pad or [0] * spatial),
    }
    return Node(node_id, OpKind.CONV, [src], attrs, weights)


def random_conv(rng, node_id, src, c_in, c_out, k=3, spatial=2, bias=True) -> Node:
    w = rng.normal(0, 0.5, (c_out, c_in, *[k] * spatial))
    b = rng.normal(0, 0.1, c_out) if bias else None
    return conv_node(node_id, src, w, b, pad=[k // 2] * spatial)


def graph(nodes, shape, outputs, name="x") -> Graph:
    return Graph(nodes=list(nodes), inputs={name: [BATCH, *shape]}, outputs=list(outputs))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def two_layer(rng):
    """conv -> relu -> conv on [N, 2, 8, 8]."""
    nodes = [
        random_conv(rng, "c1", "x", 2, 4),
        Node("r1", OpKind.RELU, ["c1"]),
        random_conv(rng, "c2", "r1", 4, 2),
    ]
    return graph(nodes, [2, 8, 8], ["c2"])


@pytest.fixture
def counter_tree(tmp_path):
    """Fake powercap tree; returns (root, add(domain, value, max_range), write(domain, value))."""
    root = tmp_path / "powercap"
    root.mkdir()

    def add(domain, value=0, max_range=262143328850):
        path = root / domain
        path.mkdir(exist_ok=True)
        (path / "energy_uj").write_text(f"{value}\n")
        (path / "max_energy_range_uj").write_text(f"{max_range}\n")

    def write(domain, value):
        # atomic replace; the sampler thread reads concurrently
        staged = root / domain / "energy_uj.tmp"
        staged.write_text(f"{value}\n")
        os.replace(staged, root / domain / "energy_uj")

    return root, add, write
