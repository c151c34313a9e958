"""Command-line entry point: fixtures, graph caching, training, heatmaps.

Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 usage or
input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import heatmap_matrix, render_heatmap, save_heatmap
from .autodiff import Tensor
from .corpus import (
    DomainData,
    SyntheticSpec,
    build_vocab,
    generate_synthetic_pair,
    load_dataset,
    load_label_map,
    subsample_train,
)
from .global_graph import GcnParams, load_token_graph, save_token_graph
from .model import ABLATION_SCOPE, ABLATIONS, load_checkpoint, save_checkpoint
from .training import (
    DivergenceError,
    TrainConfig,
    prepare_experiment,
    run_experiment,
    summary_table,
    write_report_rows,
)

log = logging.getLogger("glen")

FRACTION_CHOICES = (1.0, 0.5, 0.25, 0.1)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file: one `key = value` per line, '#' comments; flags override


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def apply_config_file(parser: argparse.ArgumentParser, args: list[str]) -> list[str]:
    """Pull --config out of argv and install its values as parser defaults."""
    if "--config" not in args:
        return args
    at = args.index("--config")
    if at + 1 >= len(args):
        raise UsageError("--config needs a file path")
    values = read_config_file(Path(args[at + 1]))
    known = {a.dest for a in parser._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    defaults = {}
    for key, value in values.items():
        action = next(a for a in parser._actions if a.dest == key)
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            defaults[key] = action.type(value)
        else:
            defaults[key] = value
    parser.set_defaults(**defaults)
    return args[:at] + args[at + 2 :]


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: list[Path],
                   outputs: list[Path], started: float) -> None:
    snapshot = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in config.items()
        if k != "func" and (v is None or isinstance(v, (str, int, float, bool, tuple, list, Path)))
    }
    manifest = {
        "command": command,
        "version": __version__,
        "config": snapshot,
        "inputs": {str(p): sha256_file(p) for p in sorted(set(inputs))},
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_s": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# shared data loading


def add_data_flags(parser: argparse.ArgumentParser, embeddings_required=True):
    parser.add_argument("--source-train", required=True, type=Path,
                        help="labeled source records (train/val/test splits)")
    parser.add_argument("--source-unlabeled", type=Path)
    parser.add_argument("--target-unlabeled", type=Path)
    parser.add_argument("--target-test", type=Path)
    parser.add_argument("--embeddings", required=embeddings_required, type=Path)
    parser.add_argument("--embedding-dim", type=int, default=300)
    parser.add_argument("--label-map", type=Path,
                        help="JSON file with a source->unified class map")
    parser.add_argument("--source-name", default="source")
    parser.add_argument("--target-name", default="target")
    parser.add_argument("--config", type=Path, help="key = value defaults file")


def check_inputs_exist(paths: list[Path | None]) -> list[Path]:
    present = [p for p in paths if p is not None]
    missing = [str(p) for p in present if not p.exists()]
    if missing:
        raise UsageError(f"missing input file(s): {', '.join(missing)}")
    return present


def load_domains(args) -> tuple[DomainData, DomainData]:
    label_map = load_label_map(args.label_map) if args.label_map else None
    source_instances = load_dataset(args.source_train, label_map)
    if args.source_unlabeled:
        source_instances += load_dataset(args.source_unlabeled)
    target_instances = []
    if args.target_unlabeled:
        target_instances += load_dataset(args.target_unlabeled)
    if args.target_test:
        target_instances += load_dataset(args.target_test)
    source = DomainData.from_instances(args.source_name, source_instances)
    target = DomainData.from_instances(args.target_name, target_instances)
    if any(i.domain != "source" for i in source_instances):
        raise UsageError("source files contain target-domain records")
    if any(i.domain != "target" for i in target_instances):
        raise UsageError("target files contain source-domain records")
    return source, target


# ---------------------------------------------------------------------------
# commands


def cmd_make_fixture(args) -> int:
    spec = SyntheticSpec(
        classes=args.classes,
        train_per_class=args.per_class,
        val_per_class=args.val_per_class,
        unlabeled_per_class=args.unlabeled_per_class,
        test_per_class=args.test_per_class,
        embedding_dim=args.embedding_dim,
        bridge_purity=args.bridge_purity,
    )
    started = time.time()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    source, target, embeddings = generate_synthetic_pair(spec, args.seed)
    files = {
        "source_labeled.jsonl": [r for r in source if r["split"] != "unlabeled"],
        "source_unlabeled.jsonl": [r for r in source if r["split"] == "unlabeled"],
        "target_unlabeled.jsonl": [r for r in target if r["split"] == "unlabeled"],
        "target_test.jsonl": [r for r in target if r["split"] == "test"],
    }
    outputs = []
    for name, records in files.items():
        path = out / name
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        outputs.append(path)
    emb_path = out / "embeddings.txt"
    with open(emb_path, "w", encoding="utf-8") as fh:
        for token in sorted(embeddings):
            vec = " ".join(f"{v:.6f}" for v in embeddings[token])
            fh.write(f"{token} {vec}\n")
    outputs.append(emb_path)
    write_manifest(out, "make-fixture", vars(args), [], outputs, started)
    print(f"fixture: {sum(len(r) for r in files.values())} records, "
          f"{len(embeddings)} embedding rows -> {out}")
    return 0


def _graph_cache_path(out_dir: Path, ablation: str, fraction: float) -> Path:
    return out_dir / f"graph_{ablation}_f{fraction:g}.txt"


def _build_or_load_graph(args, source, target, ablation, fraction, out_dir):
    """Token graph for one (ablation, fraction) cell, cached as text."""
    if ABLATION_SCOPE[ablation] is None:
        return None, None
    cache = _graph_cache_path(out_dir, ablation, fraction)
    inputs = prepare_experiment(
        source, target, ablation, fraction,
        TrainConfig(seeds=args.seeds, data_seed=args.data_seed),
        args.embeddings, window=args.window, loss_mode=args.loss_mode,
        embedding_dim=args.embedding_dim,
    )
    if cache.exists():
        inputs.graph = load_token_graph(cache)
    else:
        save_token_graph(cache, inputs.graph)
    return inputs, cache


def cmd_build_graph(args) -> int:
    started = time.time()
    inputs = check_inputs_exist([
        args.source_train, args.source_unlabeled, args.target_unlabeled,
        args.target_test, args.embeddings,
    ])
    if ABLATION_SCOPE[args.ablation] is None:
        raise UsageError("the local-only ablation has no token graph to build")
    source, target = load_domains(args)
    args.out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_experiment(
        source, target, args.ablation, args.fraction,
        TrainConfig(data_seed=args.data_seed), args.embeddings,
        window=args.window, embedding_dim=args.embedding_dim,
    )
    cache = _graph_cache_path(args.out, args.ablation, args.fraction)
    save_token_graph(cache, prepared.graph)
    g = prepared.graph
    rho = g.adjacency.edge_values
    lo, hi = (rho.min(), rho.max()) if rho.size else (0.0, 0.0)
    print(f"graph: |V|={g.n_nodes} |E|={g.n_edges} scope={g.scope} "
          f"radius={g.radius} rho=[{lo:.4g}, {hi:.4g}] -> {cache}")
    write_manifest(args.out, "build-graph", vars(args), inputs, [cache], started)
    return 0


def _run_one_experiment(args, source, target, ablation, fraction, out_dir):
    train_config = TrainConfig(
        lr_grid=tuple(args.lr_grid),
        patience=args.patience,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        seeds=args.seeds,
        data_seed=args.data_seed,
        eval_source_test=args.eval_source_test,
    )
    prepared, cache = _build_or_load_graph(args, source, target, ablation, fraction, out_dir)
    if prepared is None:
        prepared = prepare_experiment(
            source, target, ablation, fraction, train_config, args.embeddings,
            window=args.window, loss_mode=args.loss_mode,
            embedding_dim=args.embedding_dim,
        )
    report = run_experiment(
        source, target, ablation, fraction, train_config, args.embeddings,
        window=args.window, prepared=prepared,
    )
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    ckpt = ckpt_dir / f"{ablation}_f{fraction:g}.npz"
    params = {name: Tensor(values, requires_grad=True)
              for name, values in report.best_state.items()}
    save_checkpoint(
        ckpt, params, report.model_config, report.vocab_hash,
        experiment={
            "ablation": ablation, "fraction": fraction,
            "data_seed": args.data_seed, "window": args.window,
            "best_lr": report.best_lr,
        },
    )
    outputs = [ckpt] + ([cache] if cache else [])
    return report, outputs


def cmd_train(args) -> int:
    started = time.time()
    input_files = check_inputs_exist([
        args.source_train, args.source_unlabeled, args.target_unlabeled,
        args.target_test, args.embeddings,
    ])
    if args.target_test is None:
        raise UsageError("training needs --target-test for final evaluation")
    source, target = load_domains(args)
    if not target.test:
        raise UsageError("the target test file contains no split=test records")
    if not source.val:
        raise UsageError("the labeled source file contains no split=val records")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cells = (
        [(a, f) for a in ABLATIONS for f in FRACTION_CHOICES]
        if args.sweep
        else [(args.ablation, args.fraction)]
    )
    reports, rows, outputs = [], [], []
    for ablation, fraction in cells:
        log.info("experiment: ablation=%s fraction=%g", ablation, fraction)
        report, extra = _run_one_experiment(args, source, target, ablation, fraction, out)
        reports.append(report)
        rows.extend(report.rows)
        outputs.extend(extra)
        w, mi, ma = report.aggregates["target_test"]
        print(f"{report.experiment}: lr={report.best_lr:g} "
              f"target weighted/micro/macro F1 = {w:.4f}/{mi:.4f}/{ma:.4f}")
    rows_path = out / "reports.jsonl"
    write_report_rows(rows_path, rows)
    summary_path = out / "summary.txt"
    summary_path.write_text(summary_table(reports), encoding="utf-8")
    outputs += [rows_path, summary_path]
    write_manifest(out, "train", vars(args), input_files, outputs, started)
    print(f"wrote {rows_path} ({len(rows)} rows) and {summary_path}")
    return 0


def cmd_heatmap(args) -> int:
    started = time.time()
    input_files = check_inputs_exist([
        args.source_train, args.source_unlabeled, args.target_unlabeled,
        args.target_test, args.embeddings, args.checkpoint,
    ])
    tokens = [t for t in args.heatmap_tokens.split(",") if t]
    if len(tokens) < 2:
        raise UsageError("--heatmap-tokens needs at least two comma-separated tokens")
    params, config, vocab_hash, experiment = load_checkpoint(args.checkpoint)
    source, target = load_domains(args)
    prepared = prepare_experiment(
        source, target,
        experiment.get("ablation", config.ablation),
        experiment.get("fraction", 1.0),
        TrainConfig(data_seed=experiment.get("data_seed", 0)),
        args.embeddings,
        window=experiment.get("window", config.window),
        embedding_dim=args.embedding_dim,
    )
    if prepared.vocab_hash != vocab_hash:
        raise UsageError(
            "corpus files do not match the checkpoint (vocabulary hash differs)"
        )
    # rebuild the vocabulary object for token lookup
    train_subset = subsample_train(
        source.train, experiment.get("fraction", 1.0), experiment.get("data_seed", 0)
    )
    vocab = build_vocab(
        train_subset + source.val + source.test + source.unlabeled + target.unlabeled
    )
    stages = ["before", "after"] if args.stage == "both" else [args.stage]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    gcn = None
    if "after" in stages:
        if "gcn.w0" not in params:
            raise UsageError("checkpoint has no global weights (local-only ablation)")
        gcn = GcnParams(w0=params["gcn.w0"], w1=params["gcn.w1"])
    for stage in stages:
        matrix = heatmap_matrix(
            stage, tokens, vocab, prepared.embeddings, prepared.graph, gcn
        )
        path = out / f"heatmap_{stage}.txt"
        save_heatmap(path, tokens, matrix)
        outputs.append(path)
        if args.render:
            svg = out / f"heatmap_{stage}.svg"
            render_heatmap(svg, tokens, matrix)
            outputs.append(svg)
        print(f"heatmap ({stage}): {len(tokens)} tokens -> {path}")
    write_manifest(out, "heatmap", vars(args), input_files, outputs, started)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glen",
        description="Cross-domain token-graph text classification toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", help="write a synthetic cross-domain corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--val-per-class", type=int, default=10)
    p.add_argument("--unlabeled-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--embedding-dim", type=int, default=300)
    p.add_argument("--bridge-purity", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("build-graph", help="build and cache the token graph")
    add_data_flags(p)
    p.add_argument("--ablation", choices=ABLATIONS, default="glen")
    p.add_argument("--fraction", type=float, choices=FRACTION_CHOICES, default=1.0)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train, evaluate and report")
    add_data_flags(p)
    p.add_argument("--ablation", choices=ABLATIONS, default="glen")
    p.add_argument("--fraction", type=float, choices=FRACTION_CHOICES, default=1.0)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--lr-grid", type=_csv_floats, default=(1e-3, 1e-4, 1e-5),
                   help="comma-separated learning rates")
    p.add_argument("--patience", type=int, default=4)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--loss-mode", choices=("auto", "softmax_ce", "per_label_bce"),
                   default="auto")
    p.add_argument("--eval-source-test", action="store_true")
    p.add_argument("--sweep", action="store_true",
                   help="run every ablation x fraction combination")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("heatmap", help="export token similarity heatmaps")
    add_data_flags(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--heatmap-tokens", required=True,
                   help="comma-separated token subset")
    p.add_argument("--stage", choices=("before", "after", "both"), default="both")
    p.add_argument("--render", action="store_true", help="also write SVG renderings")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_heatmap)
    return parser


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args_in = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if args_in and args_in[0] in ("make-fixture", "build-graph", "train", "heatmap"):
            command, rest = args_in[0], args_in[1:]
            subparser = next(
                a for a in parser._actions
                if isinstance(a, argparse._SubParsersAction)
            ).choices[command]
            rest = apply_config_file(subparser, rest)
            args_in = [command] + rest
        args = parser.parse_args(args_in)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
