"""Training loop, early stopping, learning-rate grid, experiment runner."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .corpus import (
    DomainData,
    EmbeddingTable,
    Instance,
    build_vocab,
    collect_classes,
    embeddings_from_mapping,
    encode_instances,
    finalize_labels,
    load_embeddings,
    subsample_train,
)
from .global_graph import TokenGraph, build_token_graph, count_cooccurrences
from .metrics import f1_suite
from .model import (
    ABLATION_SCOPE,
    ModelConfig,
    batch_logits,
    forward_loss,
    init_params,
    predict_vector,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when a training run produces a non-finite loss."""


@dataclass
class TrainConfig:
    lr_grid: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    patience: int = 4
    max_epochs: int = 100
    batch_size: int = 32
    seeds: int = 3
    data_seed: int = 0
    eval_source_test: bool = False

    def __post_init__(self):
        self.lr_grid = tuple(sorted(float(lr) for lr in self.lr_grid))
        if not self.lr_grid:
            raise ValueError("learning-rate grid must be nonempty")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


class EarlyStopper:
    """Stops after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record one epoch; returns True when it set a new best."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainResult:
    lr: float
    seed: int
    best_epoch: int
    epochs_run: int
    best_val: tuple[float, float, float]
    state: dict[str, np.ndarray]
    val_history: list[float] = field(default_factory=list)


def evaluate(
    instances: list[Instance],
    graph: TokenGraph | None,
    embeddings,
    params,
    config: ModelConfig,
) -> tuple[float, float, float]:
    """(weighted, micro, macro) F1 of thresholded/argmax predictions."""
    logits = batch_logits(instances, graph, embeddings, params, config)
    preds = np.stack([predict_vector(z, config) for z in logits])
    truths = np.stack([inst.labels for inst in instances])
    return f1_suite(preds, truths, config.classes)


def train(
    train_instances: list[Instance],
    val_instances: list[Instance],
    graph: TokenGraph | None,
    embeddings: EmbeddingTable,
    model_config: ModelConfig,
    train_config: TrainConfig,
    lr: float,
    seed: int,
) -> TrainResult:
    """One run: shuffled mini-batches, validation-weighted-F1 early stopping.

    Keeps the parameter snapshot of the best epoch and returns it with the
    run record. Raises DivergenceError on a non-finite loss.
    """
    if not val_instances:
        raise ValueError("validation set must be nonempty")
    rng = np.random.default_rng(seed)
    params = init_params(model_config, rng)
    adam = AdamState(lr=lr)
    stopper = EarlyStopper(train_config.patience)
    best_state = {name: t.values.copy() for name, t in params.items()}
    best_val = (0.0, 0.0, 0.0)
    history = []
    epochs_run = 0
    for epoch in range(1, train_config.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(train_instances))
        for start in range(0, len(order), train_config.batch_size):
            batch = [train_instances[i] for i in order[start : start + train_config.batch_size]]
            with Tape() as tape:
                loss, _ = forward_loss(
                    batch, graph, embeddings, params, model_config, train=True, rng=rng
                )
                if not np.isfinite(loss.values):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} (lr={lr:g}, seed={seed})"
                    )
                grads = backward(loss, tape)
            adam_step(params, grads, adam)
        val = evaluate(val_instances, graph, embeddings, params, model_config)
        history.append(val[0])
        if stopper.update(epoch, val[0]):
            best_state = {name: t.values.copy() for name, t in params.items()}
            best_val = val
        log.debug("epoch %d: val weighted F1 %.4f", epoch, val[0])
        if stopper.should_stop:
            break
    return TrainResult(
        lr=lr,
        seed=seed,
        best_epoch=stopper.best_epoch,
        epochs_run=epochs_run,
        best_val=best_val,
        state=best_state,
        val_history=history,
    )


@dataclass
class GridResult:
    best_lr: float
    runs: list[TrainResult]

    def runs_for(self, lr: float) -> list[TrainResult]:
        return [r for r in self.runs if r.lr == lr]


def grid_search(
    train_instances,
    val_instances,
    graph,
    embeddings,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> GridResult:
    """One run per (lr, seed); the lr with the best mean validation
    weighted F1 wins, ties going to the smaller lr."""
    runs = []
    means = {}
    for lr in train_config.lr_grid:
        scores = []
        for seed in range(train_config.seeds):
            try:
                result = train(
                    train_instances, val_instances, graph, embeddings,
                    model_config, train_config, lr, seed,
                )
            except DivergenceError as exc:
                log.warning("run diverged: %s", exc)
                continue
            runs.append(result)
            scores.append(result.best_val[0])
        if scores:
            means[lr] = float(np.mean(scores))
    if not means:
        raise DivergenceError("every run in the grid diverged")
    best_lr = min(means, key=lambda lr: (-means[lr], lr))
    return GridResult(best_lr=best_lr, runs=runs)


# ---------------------------------------------------------------------------
# experiment orchestration


@dataclass
class RunRow:
    experiment: str
    source: str
    target: str
    ablation: str
    fraction: float
    lr: float
    seed: int
    epoch: int
    split: str
    f1_weighted: float
    f1_micro: float
    f1_macro: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class ExperimentReport:
    experiment: str
    source: str
    target: str
    ablation: str
    fraction: float
    best_lr: float
    rows: list[RunRow]
    aggregates: dict[str, tuple[float, float, float]]
    model_config: ModelConfig
    vocab_hash: str
    best_state: dict[str, np.ndarray]
    parameter_count: int


@dataclass
class ExperimentInputs:
    """Everything a grid search needs, assembled once per experiment."""

    train: list[Instance]
    val: list[Instance]
    source_test: list[Instance]
    target_test: list[Instance]
    graph: TokenGraph | None
    embeddings: EmbeddingTable
    vocab_hash: str
    model_config: ModelConfig


def prepare_experiment(
    source: DomainData,
    target: DomainData,
    ablation: str,
    fraction: float,
    train_config: TrainConfig,
    embedding_source,
    window: int = 1,
    loss_mode: str = "auto",
    model_overrides: dict | None = None,
    embedding_seed: int = 0,
    embedding_dim: int = 300,
) -> ExperimentInputs:
    """Subsample, build vocabulary and scope graph, encode and vectorize.

    The vocabulary always covers the subsampled labeled source, the source
    unlabeled pool and the target unlabeled pool; target test tokens fall
    back to OOV. `embedding_source` is an EmbeddingTable, a token->vector
    mapping, or a path to a text embedding file.
    """
    if ablation not in ABLATION_SCOPE:
        raise ValueError(f"unknown ablation {ablation!r}")
    train_subset = subsample_train(source.train, fraction, train_config.data_seed)
    source_avail = train_subset + source.val + source.test + source.unlabeled
    corpus = source_avail + target.unlabeled
    vocab = build_vocab(corpus)
    encode_instances(corpus, vocab)
    encode_instances(target.test, vocab)

    labeled = train_subset + source.val + source.test + target.test
    class_list = collect_classes(labeled)
    if len(class_list) < 2:
        raise ValueError(f"need at least 2 classes, found {class_list}")
    finalize_labels(labeled, class_list)

    scope = ABLATION_SCOPE[ablation]
    graph = None
    if scope is not None:
        if scope == "s_only":
            scoped = train_subset + source.val + source.test + source.unlabeled
        elif scope == "sl_plus_tu":
            scoped = train_subset + source.val + source.test + target.unlabeled
        else:
            scoped = corpus
        counts = count_cooccurrences(scoped, window)
        graph = build_token_graph(counts, vocab, scope)

    if isinstance(embedding_source, EmbeddingTable):
        table = embedding_source
    elif isinstance(embedding_source, dict):
        if embedding_source:
            embedding_dim = len(next(iter(embedding_source.values())))
        table = embeddings_from_mapping(embedding_source, vocab, embedding_seed, embedding_dim)
    else:
        table = load_embeddings(embedding_source, vocab, embedding_seed, embedding_dim)
    if len(vocab) != table.matrix.shape[0]:
        raise ValueError("embedding table does not cover the vocabulary")

    if loss_mode == "auto":
        multi = any(inst.labels.sum() != 1 for inst in labeled)
        loss_mode = "per_label_bce" if multi else "softmax_ce"
    config = ModelConfig(
        classes=len(class_list),
        d_in=table.dim,
        window=window,
        ablation=ablation,
        loss_mode=loss_mode,
        **(model_overrides or {}),
    )
    return ExperimentInputs(
        train=train_subset,
        val=source.val,
        source_test=source.test,
        target_test=target.test,
        graph=graph,
        embeddings=table,
        vocab_hash=vocab.content_hash(),
        model_config=config,
    )


def run_experiment(
    source: DomainData,
    target: DomainData,
    ablation: str,
    fraction: float,
    train_config: TrainConfig,
    embedding_source,
    window: int = 1,
    loss_mode: str = "auto",
    model_overrides: dict | None = None,
    prepared: ExperimentInputs | None = None,
) -> ExperimentReport:
    """Grid search on source validation data, then score the target test
    split (and optionally the source test split) for every best-lr run."""
    inputs = prepared or prepare_experiment(
        source, target, ablation, fraction, train_config, embedding_source,
        window, loss_mode, model_overrides,
    )
    exp_id = f"{source.name}->{target.name}:{ablation}:f{fraction:g}"
    grid = grid_search(
        inputs.train, inputs.val, inputs.graph, inputs.embeddings,
        inputs.model_config, train_config,
    )
    rows = []
    common = dict(
        experiment=exp_id, source=source.name, target=target.name,
        ablation=ablation, fraction=fraction,
    )
    for run in grid.runs:
        rows.append(RunRow(
            **common, lr=run.lr, seed=run.seed, epoch=run.best_epoch,
            split="val", f1_weighted=run.best_val[0], f1_micro=run.best_val[1],
            f1_macro=run.best_val[2],
        ))
    eval_splits = {"target_test": inputs.target_test}
    if train_config.eval_source_test and inputs.source_test:
        eval_splits["source_test"] = inputs.source_test
    best_runs = grid.runs_for(grid.best_lr)
    per_split: dict[str, list[tuple[float, float, float]]] = {k: [] for k in eval_splits}
    best_state = None
    best_val = -np.inf
    for run in best_runs:
        params = {name: Tensor(values, requires_grad=True) for name, values in run.state.items()}
        for split_name, instances in eval_splits.items():
            triple = evaluate(instances, inputs.graph, inputs.embeddings, params,
                              inputs.model_config)
            per_split[split_name].append(triple)
            rows.append(RunRow(
                **common, lr=run.lr, seed=run.seed, epoch=run.best_epoch,
                split=split_name, f1_weighted=triple[0], f1_micro=triple[1],
                f1_macro=triple[2],
            ))
        if run.best_val[0] > best_val:
            best_val = run.best_val[0]
            best_state = run.state
    aggregates = {
        split: tuple(float(v) for v in np.mean(triples, axis=0))
        for split, triples in per_split.items()
    }
    aggregates["val"] = tuple(
        float(v) for v in np.mean([r.best_val for r in best_runs], axis=0)
    )
    n_params = sum(int(v.size) for v in best_state.values())
    return ExperimentReport(
        experiment=exp_id, source=source.name, target=target.name,
        ablation=ablation, fraction=fraction, best_lr=grid.best_lr,
        rows=rows, aggregates=aggregates, model_config=inputs.model_config,
        vocab_hash=inputs.vocab_hash, best_state=best_state,
        parameter_count=n_params,
    )


# ---------------------------------------------------------------------------
# report files


def write_report_rows(path, rows: list[RunRow]) -> None:
    ordered = sorted(rows, key=lambda r: (r.experiment, r.lr, r.seed, r.split))
    with open(path, "w", encoding="utf-8") as fh:
        for row in ordered:
            fh.write(row.to_json() + "\n")


def summary_table(reports: list[ExperimentReport]) -> str:
    """Plain-text table: one line per experiment and split, mean over seeds."""
    header = (
        f"{'source':<12} {'target':<12} {'ablation':<8} {'frac':>5} {'lr':>8} "
        f"{'split':<12} {'weighted':>9} {'micro':>9} {'macro':>9}"
    )
    lines = [header, "-" * len(header)]
    for rep in reports:
        for split in sorted(rep.aggregates):
            w, mi, ma = rep.aggregates[split]
            lines.append(
                f"{rep.source:<12} {rep.target:<12} {rep.ablation:<8} "
                f"{rep.fraction:>5g} {rep.best_lr:>8g} {split:<12} "
                f"{w:>9.4f} {mi:>9.4f} {ma:>9.4f}"
            )
    return "\n".join(lines) + "\n"
