"""Cross-domain token graph: co-occurrence counting, edge weights, GCN."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, relu, spmm
from .corpus import Instance, Vocabulary
from .sparse import SparseMatrix

SCOPES = ("s_only", "sl_plus_tu", "all")


@dataclass
class CooccurrenceCounts:
    """Symmetric per-domain pair counts keyed by unordered token-id pairs."""

    pairs_source: dict[tuple[int, int], int]
    pairs_target: dict[tuple[int, int], int]
    radius: int

    def count(self, t: int, u: int, domain: str) -> int:
        key = (t, u) if t <= u else (u, t)
        pairs = self.pairs_source if domain == "source" else self.pairs_target
        return pairs.get(key, 0)


def count_cooccurrences(instances: list[Instance], radius: int) -> CooccurrenceCounts:
    """Count unordered position pairs within `radius` of each other.

    Every pair of positions (i, j), i < j <= i + radius contributes one
    count to its domain, including pairs where both positions hold the
    same token id.
    """
    if radius < 1:
        raise ValueError(f"window radius must be >= 1, got {radius}")
    pairs = {"source": {}, "target": {}}
    for inst in instances:
        if inst.token_ids is None:
            raise ValueError(f"instance {inst.id} is not encoded")
        bucket = pairs[inst.domain]
        ids = inst.token_ids
        for i, t in enumerate(ids):
            for j in range(i + 1, min(i + radius, len(ids) - 1) + 1):
                u = ids[j]
                key = (t, u) if t <= u else (u, t)
                bucket[key] = bucket.get(key, 0) + 1
    return CooccurrenceCounts(pairs["source"], pairs["target"], radius)


def edge_weight(t: int, u: int, counts: CooccurrenceCounts, vocab: Vocabulary) -> float:
    """Average of the two per-domain co-occurrence ratios.

    Each domain contributes pair_count / (occurrences of t + occurrences
    of u); a domain where the denominator is zero contributes zero.
    """
    if t == u:
        raise ValueError("edge weights are defined for distinct tokens only")
    weight = 0.0
    ns = vocab.n_source[t] + vocab.n_source[u]
    if ns > 0:
        weight += counts.count(t, u, "source") / ns
    nt = vocab.n_target[t] + vocab.n_target[u]
    if nt > 0:
        weight += counts.count(t, u, "target") / nt
    return 0.5 * weight


@dataclass
class TokenGraph:
    """Weighted symmetric token graph with its cached normalized adjacency."""

    n_nodes: int
    adjacency: SparseMatrix
    normalized: SparseMatrix
    scope: str
    radius: int

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2


def _normalize_with_self_loops(n: int, edges: dict[tuple[int, int], float]) -> SparseMatrix:
    """D^{-1/2} (A + I) D^{-1/2} with D the weighted degree of A + I."""
    degree = np.ones(n)
    for (a, b), w in edges.items():
        degree[a] += w
        degree[b] += w
    inv_sqrt = 1.0 / np.sqrt(degree)
    entries = [(i, i, inv_sqrt[i] * inv_sqrt[i]) for i in range(n)]
    for (a, b), w in edges.items():
        v = w * inv_sqrt[a] * inv_sqrt[b]
        entries.append((a, b, v))
        entries.append((b, a, v))
    return SparseMatrix.from_entries(n, n, entries)


def build_token_graph(
    counts: CooccurrenceCounts, vocab: Vocabulary, scope: str = "all"
) -> TokenGraph:
    """Materialize every positive-weight edge and the normalized adjacency.

    Isolated tokens (including OOV) keep a self-loop only, so their
    normalized row is the identity row.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    n = len(vocab)
    edges: dict[tuple[int, int], float] = {}
    keys = set(counts.pairs_source) | set(counts.pairs_target)
    for t, u in sorted(keys):
        if t == u:
            continue
        w = edge_weight(t, u, counts, vocab)
        if w > 0.0:
            edges[(t, u)] = w
    entries = []
    for (a, b), w in edges.items():
        entries.append((a, b, w))
        entries.append((b, a, w))
    adjacency = SparseMatrix.from_entries(n, n, entries)
    normalized = _normalize_with_self_loops(n, edges)
    return TokenGraph(n, adjacency, normalized, scope, counts.radius)


@dataclass
class GcnParams:
    """Two propagation layers: input projection and hidden projection."""

    w0: Tensor
    w1: Tensor


def gcn_forward(graph: TokenGraph, features, params: GcnParams) -> Tensor:
    """Two-layer propagation: ReLU after the first layer, linear output."""
    x = features if isinstance(features, Tensor) else Tensor(features.matrix)
    if x.shape[0] != graph.n_nodes:
        raise ValueError(
            f"feature rows {x.shape[0]} do not match graph size {graph.n_nodes}"
        )
    h1 = relu(spmm(graph.normalized, matmul(x, params.w0)))
    return spmm(graph.normalized, matmul(h1, params.w1))


# ---------------------------------------------------------------------------
# text export format: header "|V| |E| scope radius", one "t u rho" per edge


def save_token_graph(path, graph: TokenGraph) -> None:
    lines = [f"{graph.n_nodes} {graph.n_edges} {graph.scope} {graph.radius}"]
    seen = []
    row_ids = graph.adjacency.row_ids
    cols = graph.adjacency.col_indices
    vals = graph.adjacency.edge_values
    for a, b, w in zip(row_ids, cols, vals):
        if a < b:
            seen.append(f"{a} {b} {w:.10g}")
    lines.extend(seen)
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_token_graph(path) -> TokenGraph:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise ValueError(f"{path}: malformed graph header")
        n, n_edges, scope, radius = int(header[0]), int(header[1]), header[2], int(header[3])
        edges: dict[tuple[int, int], float] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: malformed edge line")
            a, b, w = int(parts[0]), int(parts[1]), float(parts[2])
            edges[(a, b)] = w
    if len(edges) != n_edges:
        raise ValueError(f"{path}: header claims {n_edges} edges, found {len(edges)}")
    entries = []
    for (a, b), w in edges.items():
        entries.append((a, b, w))
        entries.append((b, a, w))
    adjacency = SparseMatrix.from_entries(n, n, entries)
    normalized = _normalize_with_self_loops(n, edges)
    return TokenGraph(n, adjacency, normalized, scope, radius)
