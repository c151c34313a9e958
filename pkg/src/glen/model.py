"""Full model assembly: global + local token features, BiLSTM, classifier."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    classification_loss,
    concat,
    dropout,
    matmul,
    mul,
    scale,
    sigmoid,
    slice_cols,
    slice_rows,
    tanh,
)
from .corpus import EmbeddingTable, Instance
from .global_graph import GcnParams, TokenGraph, gcn_forward
from .instance_graph import GatLayerParams, GatParams, build_instance_graph, gat_forward

ABLATIONS = ("len", "s-glen", "t-glen", "glen")
LOSS_MODES = ("softmax_ce", "per_label_bce")

# token-graph scope required by each ablation; None means no global graph
ABLATION_SCOPE = {"len": None, "s-glen": "s_only", "t-glen": "sl_plus_tu", "glen": "all"}

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    classes: int
    d_in: int = 300
    d_h: int = 100
    window: int = 1
    ablation: str = "glen"
    loss_mode: str = "per_label_bce"
    lstm_layers: int = 2
    lstm_dropout: float = 0.2
    threshold: float = 0.5
    gat_heads: tuple[int, int] = (2, 1)
    gat_residual: tuple[bool, bool] = (True, False)

    def __post_init__(self):
        self.gat_heads = tuple(self.gat_heads)
        self.gat_residual = tuple(self.gat_residual)
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    @property
    def lstm_input(self) -> int:
        # local half only under the local-only ablation, local + global otherwise
        return self.d_h if self.ablation == "len" else 2 * self.d_h


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Seeded Glorot-uniform weights, zero biases, in a flat named dict."""
    p: dict[str, Tensor] = {}
    if config.ablation != "len":
        p["gcn.w0"] = Tensor(_glorot(rng, (config.d_in, config.d_h)), requires_grad=True)
        p["gcn.w1"] = Tensor(_glorot(rng, (config.d_h, config.d_h)), requires_grad=True)
    layer_in = config.d_in
    for layer, heads in enumerate(config.gat_heads):
        for head in range(heads):
            p[f"gat.l{layer}.h{head}.w"] = Tensor(
                _glorot(rng, (layer_in, config.d_h)), requires_grad=True
            )
            p[f"gat.l{layer}.h{head}.a"] = Tensor(
                _glorot(rng, (2 * config.d_h, 1)), requires_grad=True
            )
        if config.gat_residual[layer]:
            p[f"gat.l{layer}.res"] = Tensor(
                _glorot(rng, (layer_in, heads * config.d_h)), requires_grad=True
            )
        layer_in = heads * config.d_h
    lstm_in = config.lstm_input
    for layer in range(config.lstm_layers):
        for direction in ("fwd", "bwd"):
            base = f"lstm.l{layer}.{direction}"
            p[f"{base}.w_ih"] = Tensor(
                _glorot(rng, (lstm_in, 4 * config.d_h)), requires_grad=True
            )
            p[f"{base}.w_hh"] = Tensor(
                _glorot(rng, (config.d_h, 4 * config.d_h)), requires_grad=True
            )
            p[f"{base}.b_ih"] = Tensor(np.zeros((1, 4 * config.d_h)), requires_grad=True)
            p[f"{base}.b_hh"] = Tensor(np.zeros((1, 4 * config.d_h)), requires_grad=True)
        lstm_in = 2 * config.d_h
    p["fc.w"] = Tensor(_glorot(rng, (2 * config.d_h, config.classes)), requires_grad=True)
    p["fc.b"] = Tensor(np.zeros((1, config.classes)), requires_grad=True)
    return p


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(int(t.size) for t in params.values())


def gcn_params(params: dict[str, Tensor]) -> GcnParams:
    return GcnParams(w0=params["gcn.w0"], w1=params["gcn.w1"])


def gat_params(params: dict[str, Tensor], config: ModelConfig) -> GatParams:
    layers = []
    for layer, heads in enumerate(config.gat_heads):
        layers.append(
            GatLayerParams(
                head_w=[params[f"gat.l{layer}.h{h}.w"] for h in range(heads)],
                head_a=[params[f"gat.l{layer}.h{h}.a"] for h in range(heads)],
                residual=params.get(f"gat.l{layer}.res"),
            )
        )
    return GatParams(layers)


# ---------------------------------------------------------------------------
# forward pieces


def combine(
    token_ids: list[int],
    gcn_out: Tensor | None,
    gat_out: Tensor,
    position_map: list[int],
    config: ModelConfig,
) -> Tensor:
    """Per position: local node representation, then the global token row."""
    if len(position_map) != len(token_ids):
        raise ValueError(
            f"position map covers {len(position_map)} positions for "
            f"{len(token_ids)} tokens"
        )
    local = slice_rows(gat_out, position_map)
    if config.ablation == "len":
        return local
    if gcn_out is None:
        raise ValueError(f"ablation {config.ablation!r} needs global representations")
    return concat([local, slice_rows(gcn_out, token_ids)])


def _lstm_direction(steps, params: dict[str, Tensor], base: str, d_h: int):
    """Run one direction over the given step order; returns (final h, all h)."""
    w_ih, w_hh = params[f"{base}.w_ih"], params[f"{base}.w_hh"]
    bias = add(params[f"{base}.b_ih"], params[f"{base}.b_hh"])
    h = Tensor(np.zeros((1, d_h)))
    c = Tensor(np.zeros((1, d_h)))
    states = []
    for x in steps:
        z = add(add(matmul(x, w_ih), matmul(h, w_hh)), bias)
        i = sigmoid(slice_cols(z, 0, d_h))
        f = sigmoid(slice_cols(z, d_h, 2 * d_h))
        g = tanh(slice_cols(z, 2 * d_h, 3 * d_h))
        o = sigmoid(slice_cols(z, 3 * d_h, 4 * d_h))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        states.append(h)
    return h, states


def bilstm_classify(
    seq: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Stacked bidirectional pass; logits from the concatenated final states."""
    n_steps = seq.shape[0]
    if n_steps < 1:
        raise ValueError("sequence must have at least one step")
    steps = [slice_rows(seq, [t]) for t in range(n_steps)]
    fwd_h = bwd_h = None
    for layer in range(config.lstm_layers):
        fwd_h, fwd_states = _lstm_direction(steps, params, f"lstm.l{layer}.fwd", config.d_h)
        bwd_h, bwd_states = _lstm_direction(
            steps[::-1], params, f"lstm.l{layer}.bwd", config.d_h
        )
        if layer + 1 < config.lstm_layers:
            steps = [
                concat([fwd_states[t], bwd_states[n_steps - 1 - t]])
                for t in range(n_steps)
            ]
            if train and config.lstm_dropout > 0.0:
                if rng is None:
                    raise ValueError("training-mode dropout needs a generator")
                steps = [dropout(s, config.lstm_dropout, rng) for s in steps]
    rep = concat([fwd_h, bwd_h])
    return add(matmul(rep, params["fc.w"]), params["fc.b"])


def instance_logits(
    inst: Instance,
    gcn_out: Tensor | None,
    embeddings: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if inst.token_ids is None:
        raise ValueError(f"instance {inst.id} is not encoded")
    graph = build_instance_graph(inst.token_ids, config.window)
    h0 = slice_rows(embeddings, graph.nodes)
    local = gat_forward(graph, h0, gat_params(params, config))
    seq = combine(inst.token_ids, gcn_out, local, graph.position_map, config)
    return bilstm_classify(seq, params, config, train=train, rng=rng)


def forward_loss(
    batch: list[Instance],
    graph: TokenGraph | None,
    embeddings: EmbeddingTable | Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Mean classification loss over a labeled batch.

    Returns (scalar loss tensor, per-instance logit rows). The global
    pass runs once per batch; every instance shares its output.
    """
    if not batch:
        raise ValueError("empty batch")
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings.matrix)
    gcn_out = None
    if config.ablation != "len":
        if graph is None:
            raise ValueError(f"ablation {config.ablation!r} needs a token graph")
        gcn_out = gcn_forward(graph, emb, gcn_params(params))
    total = None
    logits_out = []
    for inst in batch:
        if inst.labels is None:
            raise ValueError(f"unlabeled instance {inst.id} in a supervised batch")
        logits = instance_logits(inst, gcn_out, emb, params, config, train, rng)
        logits_out.append(logits.values[0].copy())
        if config.loss_mode == "softmax_ce":
            target = [int(np.flatnonzero(inst.labels)[0])]
            li = classification_loss(logits, target, "softmax_ce")
        else:
            li = classification_loss(logits, inst.labels[None, :], "per_label_bce")
        total = li if total is None else add(total, li)
    return scale(total, 1.0 / len(batch)), logits_out


def batch_logits(
    instances: list[Instance],
    graph: TokenGraph | None,
    embeddings: EmbeddingTable | Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> list[np.ndarray]:
    """Evaluation-mode logits (no recording, no dropout)."""
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings.matrix)
    gcn_out = None
    if config.ablation != "len":
        gcn_out = gcn_forward(graph, emb, gcn_params(params))
    return [
        instance_logits(inst, gcn_out, emb, params, config).values[0].copy()
        for inst in instances
    ]


def predict(logits: np.ndarray, config: ModelConfig):
    """Per-label threshold rule for BCE mode, argmax (lowest index wins
    ties) for softmax mode."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.shape[0] != config.classes:
        raise ValueError(f"expected {config.classes} logits, got {z.shape[0]}")
    if config.loss_mode == "softmax_ce":
        return int(np.argmax(z))
    probs = 1.0 / (1.0 + np.exp(-z))
    return (probs >= config.threshold).astype(np.int64)


def predict_vector(logits: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Prediction as a 0/1 vector regardless of loss mode."""
    out = predict(logits, config)
    if isinstance(out, np.ndarray):
        return out
    vec = np.zeros(config.classes, dtype=np.int64)
    vec[out] = 1
    return vec


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab_hash: str,
    experiment: dict | None = None,
) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "vocab_hash": vocab_hash,
        "experiment": experiment or {},
    }
    arrays = {f"param/{name}": t.values for name, t in params.items()}
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (params, ModelConfig, vocab_hash, experiment dict)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {meta.get('version')}"
            )
        params = {
            key[len("param/") :]: Tensor(data[key], requires_grad=True)
            for key in data.files
            if key.startswith("param/")
        }
    cfg_dict = meta["config"]
    cfg_dict["gat_heads"] = tuple(cfg_dict["gat_heads"])
    cfg_dict["gat_residual"] = tuple(cfg_dict["gat_residual"])
    config = ModelConfig(**cfg_dict)
    return params, config, meta["vocab_hash"], meta.get("experiment", {})
