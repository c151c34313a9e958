"""Qualitative analysis: token similarity heatmaps before and after the
global propagation stage."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .corpus import EmbeddingTable, Vocabulary
from .global_graph import GcnParams, TokenGraph, gcn_forward

STAGES = ("before", "after")


def cosine_similarity_matrix(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = rows / safe[:, None]
    return unit @ unit.T


def zscore_off_diagonal(sim: np.ndarray) -> np.ndarray:
    """Normalize by the population mean/std of the off-diagonal entries.

    The diagonal is rescaled with the same statistics; an all-equal
    off-diagonal population (zero variance) maps everything to 0.
    """
    n = sim.shape[0]
    if n < 2 or sim.shape != (n, n):
        raise ValueError(f"need a square matrix over >= 2 tokens, got {sim.shape}")
    off = ~np.eye(n, dtype=bool)
    mu = sim[off].mean()
    sigma = sim[off].std()
    if sigma == 0.0:
        return np.zeros_like(sim)
    return (sim - mu) / sigma


def representation_rows(
    stage: str,
    token_ids: list[int],
    embeddings: EmbeddingTable,
    graph: TokenGraph | None,
    params: GcnParams | None,
) -> np.ndarray:
    """Rows for the chosen stage: raw input embeddings, or the trained
    global-propagation output."""
    if stage == "before":
        return embeddings.matrix[token_ids]
    if stage == "after":
        if graph is None or params is None:
            raise ValueError("the after-stage needs a token graph and trained weights")
        out = gcn_forward(graph, Tensor(embeddings.matrix), params)
        return out.values[token_ids]
    raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")


def heatmap_matrix(
    stage: str,
    tokens: list[str],
    vocab: Vocabulary,
    embeddings: EmbeddingTable,
    graph: TokenGraph | None = None,
    params: GcnParams | None = None,
) -> np.ndarray:
    """Z-scored pairwise cosine similarities for an explicit token subset."""
    if len(tokens) < 2:
        raise ValueError("token subset must have at least 2 tokens")
    missing = [t for t in tokens if t not in vocab]
    if missing:
        raise ValueError(f"tokens not in vocabulary: {', '.join(missing)}")
    ids = [vocab.id_of(t) for t in tokens]
    rows = representation_rows(stage, ids, embeddings, graph, params)
    return zscore_off_diagonal(cosine_similarity_matrix(rows))


def save_heatmap(path, tokens: list[str], matrix: np.ndarray) -> None:
    lines = [" ".join(tokens)]
    for row in matrix:
        lines.append(" ".join(f"{v:.10g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_heatmap(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        tokens = fh.readline().split()
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    return tokens, np.array(rows)


def render_heatmap(path, tokens: list[str], matrix: np.ndarray) -> None:
    """Optional SVG rendering; requires matplotlib."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(tokens), 1.0 + 0.6 * len(tokens)))
    im = ax.imshow(matrix, cmap="coolwarm")
    ax.set_xticks(range(len(tokens)), tokens, rotation=90)
    ax.set_yticks(range(len(tokens)), tokens)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
