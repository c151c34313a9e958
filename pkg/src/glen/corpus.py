"""Tokenization, vocabulary, embeddings, dataset IO and synthetic fixtures."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

OOV_TOKEN = "<oov>"
URL_TOKEN = "<url>"
USER_TOKEN = "<user>"

DOMAINS = ("source", "target")
SPLITS = ("train", "val", "test", "unlabeled")
LABELED_SPLITS = ("train", "val", "test")

_URL_RE = re.compile(r"https?://\S+|www\.\S+")
_USER_RE = re.compile(r"@\w+")
_TOKEN_RE = re.compile(r"<url>|<user>|[a-z0-9_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase tweet-style tokenizer.

    URLs collapse to ``<url>``, mentions to ``<user>``, ``#`` is stripped
    from hashtags, and the text splits on whitespace/punctuation with
    standalone punctuation dropped. Alphanumerics like "c130" stay intact.
    """
    s = text.lower()
    s = _URL_RE.sub(f" {URL_TOKEN} ", s)
    s = _USER_RE.sub(f" {USER_TOKEN} ", s)
    s = s.replace("#", "")
    return _TOKEN_RE.findall(s)


@dataclass
class Instance:
    """One post: id, tokens, optional unified label vector, domain and split.

    ``tokens`` are the surface strings; ``token_ids`` are filled in by
    :func:`encode_instances` once a vocabulary exists. ``label_ids`` hold
    the mapped class ids until :func:`finalize_labels` turns them into a
    0/1 vector over the experiment's class list.
    """

    id: str
    tokens: list[str]
    domain: str
    split: str
    label_ids: tuple[int, ...] | None = None
    labels: np.ndarray | None = None
    token_ids: list[int] | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"instance {self.id}: unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"instance {self.id}: unknown split {self.split!r}")
        labeled = self.split in LABELED_SPLITS
        if labeled and self.label_ids is None:
            raise ValueError(f"instance {self.id}: split {self.split!r} requires labels")
        if not labeled and self.label_ids is not None:
            raise ValueError(f"instance {self.id}: unlabeled split carries labels")
        if not self.tokens:
            raise ValueError(f"instance {self.id}: empty token sequence")


class Vocabulary:
    """Bijective token <-> id map with per-domain occurrence counts.

    Id 0 is the reserved out-of-vocabulary token; every other id is dense
    in [1, |V|).
    """

    def __init__(self, tokens: list[str], n_source: np.ndarray, n_target: np.ndarray):
        self._tokens = [OOV_TOKEN] + list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate token in vocabulary")
        self.n_source = np.concatenate([[0], np.asarray(n_source, dtype=np.int64)])
        self.n_target = np.concatenate([[0], np.asarray(n_target, dtype=np.int64)])
        if len(self.n_source) != len(self._tokens) or len(self.n_target) != len(self._tokens):
            raise ValueError("count arrays must match the token list")

    oov_id = 0

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.oov_id)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()


def build_vocab(instances: list[Instance]) -> Vocabulary:
    """One id per distinct token over the given corpus, with domain counts."""
    order: dict[str, int] = {}
    counts = {"source": [], "target": []}
    for inst in instances:
        hits = counts[inst.domain]
        for tok in inst.tokens:
            i = order.get(tok)
            if i is None:
                i = len(order)
                order[tok] = i
                counts["source"].append(0)
                counts["target"].append(0)
            hits[i] += 1
    return Vocabulary(list(order), counts["source"], counts["target"])


def encode_instances(instances: list[Instance], vocab: Vocabulary) -> list[Instance]:
    """Fill token_ids in place; tokens outside the vocabulary map to OOV."""
    for inst in instances:
        inst.token_ids = [vocab.id_of(t) for t in inst.tokens]
    return instances


# ---------------------------------------------------------------------------
# label mapping


@dataclass
class LabelMap:
    """Source class id -> unified class id, with explicitly dropped classes."""

    mapping: dict[int, int]
    dropped: tuple[int, ...] = ()

    def unified_classes(self) -> list[int]:
        return sorted(set(self.mapping.values()))

    def apply(self, labels: list[int]) -> tuple[int, ...] | None:
        """Map a raw label list; None means every label was dropped."""
        out = set()
        for lab in labels:
            if lab in self.dropped:
                continue
            if lab not in self.mapping:
                raise ValueError(f"label {lab} is neither mapped nor dropped")
            out.add(self.mapping[lab])
        return tuple(sorted(out)) if out else None


# Table-style mapping used by the disaster tweet dataset pair: the two
# "available"/"required" medical classes fold into their general classes,
# class 5 has no counterpart and is dropped.
FIRE16_TO_SMERP17 = LabelMap(
    mapping={1: 1, 3: 1, 2: 2, 4: 2, 7: 3, 6: 4},
    dropped=(5,),
)


def load_label_map(path) -> LabelMap:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    mapping = {int(k): int(v) for k, v in raw["map"].items()}
    dropped = tuple(int(d) for d in raw.get("dropped", ()))
    return LabelMap(mapping, dropped)


# ---------------------------------------------------------------------------
# dataset IO


def load_dataset(path, label_map: LabelMap | None = None) -> list[Instance]:
    """Read line-delimited JSON records into tokenized instances.

    Records whose labels are all dropped classes are discarded, as are
    instances that tokenize to nothing (with a logged count).
    """
    instances = []
    empty = dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid record: {exc}") from None
            try:
                labels = rec.get("labels")
                label_ids = None
                if labels is not None:
                    label_ids = tuple(sorted(set(int(v) for v in labels)))
                    if label_map is not None:
                        label_ids = label_map.apply(list(label_ids))
                        if label_ids is None:
                            dropped += 1
                            continue
                tokens = tokenize(rec["text"])
                if not tokens:
                    empty += 1
                    continue
                instances.append(
                    Instance(
                        id=str(rec["id"]),
                        tokens=tokens,
                        domain=rec["domain"],
                        split=rec["split"],
                        label_ids=label_ids,
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if empty:
        log.info("%s: dropped %d instance(s) that tokenized to nothing", path, empty)
    if dropped:
        log.info("%s: dropped %d instance(s) with only removed classes", path, dropped)
    return instances


def finalize_labels(instances: list[Instance], class_list: list[int]) -> None:
    """Turn label id tuples into 0/1 vectors over `class_list`."""
    index = {c: i for i, c in enumerate(class_list)}
    for inst in instances:
        if inst.label_ids is None:
            continue
        vec = np.zeros(len(class_list), dtype=np.float64)
        for lab in inst.label_ids:
            if lab not in index:
                raise ValueError(
                    f"instance {inst.id}: label {lab} outside class list {class_list}"
                )
            vec[index[lab]] = 1.0
        inst.labels = vec


def collect_classes(instances: list[Instance]) -> list[int]:
    classes = set()
    for inst in instances:
        if inst.label_ids:
            classes.update(inst.label_ids)
    return sorted(classes)


@dataclass
class DomainData:
    """Instances of one domain bucketed by split."""

    name: str
    train: list[Instance] = field(default_factory=list)
    val: list[Instance] = field(default_factory=list)
    test: list[Instance] = field(default_factory=list)
    unlabeled: list[Instance] = field(default_factory=list)

    @classmethod
    def from_instances(cls, name: str, instances: list[Instance]) -> "DomainData":
        data = cls(name)
        for inst in instances:
            getattr(data, inst.split).append(inst)
        return data

    def labeled(self) -> list[Instance]:
        return self.train + self.val + self.test

    def all(self) -> list[Instance]:
        return self.labeled() + self.unlabeled


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    """|V| x dim matrix; rows are pretrained or randomly initialized."""

    matrix: np.ndarray
    pretrained: np.ndarray
    coverage: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def embeddings_from_mapping(
    mapping: dict[str, np.ndarray], vocab: Vocabulary, seed: int, dim: int = 300
) -> EmbeddingTable:
    """Assemble the table row by row; missing tokens (and OOV) get seeded
    uniform values in [-0.25, 0.25]."""
    rng = np.random.default_rng(seed)
    matrix = np.empty((len(vocab), dim), dtype=np.float64)
    flags = np.zeros(len(vocab), dtype=bool)
    for i, token in enumerate(vocab.tokens):
        vec = mapping.get(token)
        if vec is None or i == vocab.oov_id:
            matrix[i] = rng.uniform(-0.25, 0.25, dim)
        else:
            if len(vec) != dim:
                raise ValueError(
                    f"embedding for {token!r} has {len(vec)} values, expected {dim}"
                )
            matrix[i] = vec
            flags[i] = True
    coverage = float(flags.sum()) / max(len(vocab) - 1, 1)
    log.info("embedding coverage: %.1f%% of %d tokens", 100 * coverage, len(vocab) - 1)
    return EmbeddingTable(matrix=matrix, pretrained=flags, coverage=coverage)


def load_embeddings(path, vocab: Vocabulary, seed: int, dim: int = 300) -> EmbeddingTable:
    """Load whitespace-separated text vectors (``token v1 ... v300``)."""
    mapping: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected token plus {dim} values, got {len(parts) - 1}"
                )
            try:
                mapping[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from None
    return embeddings_from_mapping(mapping, vocab, seed, dim)


# ---------------------------------------------------------------------------
# limited-data subsampling


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


FRACTIONS = (1.0, 0.5, 0.25, 0.1)


def subsample_train(instances: list[Instance], fraction: float, seed: int) -> list[Instance]:
    """Uniform random subset of the source training split, size round(f*N)."""
    if fraction not in FRACTIONS:
        raise ValueError(f"fraction must be one of {FRACTIONS}, got {fraction}")
    if fraction == 1.0:
        return list(instances)
    size = _round_half_up(fraction * len(instances))
    if size == 0:
        raise ValueError(f"fraction {fraction} of {len(instances)} instances is empty")
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(instances), size=size, replace=False).tolist())
    return [instances[i] for i in keep]


# ---------------------------------------------------------------------------
# synthetic cross-domain fixture


@dataclass
class SyntheticSpec:
    """Knobs for the desk-scale cross-domain corpus.

    Each class has source-only and target-only indicator tokens plus
    bridge tokens used in both domains. Labels follow indicators
    deterministically; bridges are only `bridge_purity`-pure per class, so
    a model without cross-domain token mixing cannot fully recover the
    target classes.
    """

    classes: int = 2
    train_per_class: int = 50
    val_per_class: int = 10
    unlabeled_per_class: int = 50
    test_per_class: int = 50
    indicators_per_class: int = 3
    bridges_per_class: int = 2
    filler_vocab: int = 30
    instance_len: int = 7
    bridge_purity: float = 0.7
    embedding_dim: int = 300


def _synthetic_text(spec: SyntheticSpec, rng, domain: str, cls: int) -> str:
    prefix = "s" if domain == "source" else "t"
    ind = f"{prefix}{cls}ind{rng.integers(spec.indicators_per_class)}"
    if rng.random() < spec.bridge_purity or spec.classes == 1:
        bcls = cls
    else:
        others = [c for c in range(spec.classes) if c != cls]
        bcls = others[rng.integers(len(others))]
    bridge = f"bridge{bcls}x{rng.integers(spec.bridges_per_class)}"
    words = [f"filler{rng.integers(spec.filler_vocab)}" for _ in range(spec.instance_len)]
    at = int(rng.integers(spec.instance_len - 1))
    pair = [ind, bridge] if rng.random() < 0.5 else [bridge, ind]
    words[at], words[at + 1] = pair
    return " ".join(words)


def _synthetic_records(spec, rng, domain, split, count_per_class, labeled, tag):
    records = []
    for cls in range(spec.classes):
        for k in range(count_per_class):
            rec = {
                "id": f"{tag}-{cls}-{k:04d}",
                "text": _synthetic_text(spec, rng, domain, cls),
                "domain": domain,
                "split": split,
            }
            if labeled:
                rec["labels"] = [cls]
            records.append(rec)
    return records


def generate_synthetic_pair(spec: SyntheticSpec, seed: int):
    """Build (source records, target records, token -> embedding map).

    Source records carry train/val labeled splits plus an unlabeled pool;
    target records are an unlabeled pool plus a held-out labeled test set.
    """
    rng = np.random.default_rng(seed)
    source = (
        _synthetic_records(spec, rng, "source", "train", spec.train_per_class, True, "strain")
        + _synthetic_records(spec, rng, "source", "val", spec.val_per_class, True, "sval")
        + _synthetic_records(spec, rng, "source", "unlabeled", spec.unlabeled_per_class, False, "sunl")
    )
    target = (
        _synthetic_records(spec, rng, "target", "unlabeled", spec.unlabeled_per_class, False, "tunl")
        + _synthetic_records(spec, rng, "target", "test", spec.test_per_class, True, "ttest")
    )
    tokens = sorted({tok for rec in source + target for tok in rec["text"].split()})
    embeddings = {
        tok: rng.uniform(-0.5, 0.5, spec.embedding_dim) for tok in tokens
    }
    return source, target, embeddings


def instances_from_records(records: list[dict], label_map: LabelMap | None = None) -> list[Instance]:
    """Same semantics as load_dataset, for in-memory records."""
    instances = []
    for rec in records:
        labels = rec.get("labels")
        label_ids = None
        if labels is not None:
            label_ids = tuple(sorted(set(int(v) for v in labels)))
            if label_map is not None:
                label_ids = label_map.apply(list(label_ids))
                if label_ids is None:
                    continue
        tokens = tokenize(rec["text"])
        if not tokens:
            continue
        instances.append(
            Instance(
                id=str(rec["id"]),
                tokens=tokens,
                domain=rec["domain"],
                split=rec["split"],
                label_ids=label_ids,
            )
        )
    return instances
