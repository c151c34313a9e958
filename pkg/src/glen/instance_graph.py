"""Per-instance window graphs and the two-layer graph attention network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    leaky_relu,
    matmul,
    mul,
    segment_softmax,
    segment_sum,
    slice_rows,
)


@dataclass
class InstanceGraph:
    """Unweighted graph over the unique tokens of one instance.

    Nodes are unique token ids in first-occurrence order; `edges` are
    undirected node-index pairs (u < v) without self-loops — every node
    additionally attends to itself. `position_map` sends each instance
    position to its node index. The directed arrays (grouped by
    destination, self-loop included) are derived once for attention.
    """

    nodes: list[int]
    edges: list[tuple[int, int]]
    position_map: list[int]
    edge_src: np.ndarray = field(init=False, repr=False)
    edge_dst: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.nodes)
        if not n:
            raise ValueError("instance graph needs at least one node")
        if any(p < 0 or p >= n for p in self.position_map):
            raise ValueError("position map points outside the node list")
        neighbors = [set() for _ in range(n)]
        for u, v in self.edges:
            if u == v or not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"invalid edge ({u}, {v})")
            neighbors[u].add(v)
            neighbors[v].add(u)
        src, dst = [], []
        for i in range(n):
            for j in sorted(neighbors[i] | {i}):
                src.append(j)
                dst.append(i)
        self.edge_src = np.array(src, dtype=np.int64)
        self.edge_dst = np.array(dst, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def build_instance_graph(token_ids: list[int], radius: int = 1) -> InstanceGraph:
    """Connect unique tokens whose positions fall within `radius`."""
    if not token_ids:
        raise ValueError("cannot build a graph for an empty instance")
    if radius < 1:
        raise ValueError(f"window radius must be >= 1, got {radius}")
    node_index: dict[int, int] = {}
    position_map = []
    for tok in token_ids:
        if tok not in node_index:
            node_index[tok] = len(node_index)
        position_map.append(node_index[tok])
    edges = set()
    for i in range(len(position_map)):
        for j in range(i + 1, min(i + radius, len(position_map) - 1) + 1):
            u, v = position_map[i], position_map[j]
            if u != v:
                edges.add((min(u, v), max(u, v)))
    return InstanceGraph(list(node_index), sorted(edges), position_map)


@dataclass
class GatLayerParams:
    """Per-head projection and attention vector, plus an optional
    bias-free residual projection added after head aggregation."""

    head_w: list[Tensor]
    head_a: list[Tensor]
    residual: Tensor | None = None


@dataclass
class GatParams:
    layers: list[GatLayerParams]


def gat_layer(
    graph: InstanceGraph,
    h: Tensor,
    params: GatLayerParams,
    heads: int | None = None,
    concat_heads: bool = True,
) -> Tensor:
    """One attention layer.

    Scores are leaky-ReLU(a . [W h_dst || W h_src]), normalized per
    destination neighborhood (self included); each head emits the
    attention-weighted sum of projected neighbors.
    """
    if heads is not None and heads != len(params.head_w):
        raise ValueError(f"expected {heads} heads, got {len(params.head_w)}")
    if h.shape[0] != graph.n_nodes:
        raise ValueError(
            f"feature rows {h.shape[0]} do not match node count {graph.n_nodes}"
        )
    assert graph.edge_dst.size >= graph.n_nodes, "self-loops guarantee nonempty neighborhoods"
    outs = []
    for w, a in zip(params.head_w, params.head_a):
        proj = matmul(h, w)
        src_p = slice_rows(proj, graph.edge_src)
        dst_p = slice_rows(proj, graph.edge_dst)
        scores = leaky_relu(matmul(concat([dst_p, src_p]), a), 0.2)
        alpha = segment_softmax(scores, graph.edge_dst)
        outs.append(segment_sum(mul(alpha, src_p), graph.edge_dst, graph.n_nodes))
    out = concat(outs) if concat_heads or len(outs) > 1 else outs[0]
    if params.residual is not None:
        out = add(out, matmul(h, params.residual))
    return out


def gat_forward(graph: InstanceGraph, h0: Tensor, params: GatParams) -> Tensor:
    """Two layers: multi-head concat, then a single head, no activation
    between the layers beyond the leaky-ReLU inside attention."""
    h = gat_layer(graph, h0, params.layers[0], concat_heads=True)
    return gat_layer(graph, h, params.layers[1], concat_heads=False)
