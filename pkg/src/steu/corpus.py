"""Synthetic multi-label corpora with planted class lexicons, plus JSONL I/O.

Each generated class owns a disjoint lexicon of tokens injected only into
documents carrying that label, so the ground-truth class-discriminative
tokens are known exactly. Generation is a pure function of the spec: every
document draws from its own RNG stream derived from (seed, split, index),
which makes output independent of generation order.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
_MAX_TOKEN_ID = 2**32 - 1


class CorpusError(ValueError):
    """Raised for invalid corpus specs, documents, or files."""


@dataclass(frozen=True)
class Vocabulary:
    """Token strings in id order; ids 0 and 1 are reserved for PAD and UNK."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) < 2 or self.tokens[0] != PAD_TOKEN or self.tokens[1] != UNK_TOKEN:
            raise CorpusError("vocabulary must start with the PAD and UNK tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("vocabulary tokens must be unique")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        """Token id, or UNK_ID for out-of-vocabulary tokens."""
        return self._ids.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]


@dataclass(frozen=True)
class Document:
    id: str
    token_ids: tuple[int, ...]
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise CorpusError(f"document {self.id!r}: empty token sequence")
        if any(label not in (0, 1) for label in self.labels):
            raise CorpusError(f"document {self.id!r}: labels must be 0/1")


@dataclass(frozen=True)
class LabeledDataset:
    vocabulary: Vocabulary
    train: tuple[Document, ...]
    val: tuple[Document, ...]
    n_classes: int
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.class_names) != self.n_classes:
            raise CorpusError("class_names length must equal the class count")
        train_ids = {d.id for d in self.train}
        if len(train_ids) != len(self.train):
            raise CorpusError("duplicate document id in train split")
        val_ids = {d.id for d in self.val}
        if len(val_ids) != len(self.val):
            raise CorpusError("duplicate document id in val split")
        overlap = train_ids & val_ids
        if overlap:
            raise CorpusError(f"train/val splits share document ids: {sorted(overlap)[:3]}")
        for doc in self.train + self.val:
            if len(doc.labels) != self.n_classes:
                raise CorpusError(
                    f"document {doc.id!r}: {len(doc.labels)} labels, expected {self.n_classes}")
            if any(t < 0 or t >= self.vocabulary.size for t in doc.token_ids):
                raise CorpusError(f"document {doc.id!r}: token id out of vocabulary range")


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the synthetic corpus generator.

    Marginal label prevalence tracks ``label_prevalence`` best when
    sum(label_prevalence) is close to 1 + multi_label_rate.
    """

    n_classes: int = 6
    shared_vocab_size: int = 500
    lexicon_size_per_class: int = 100
    lexicon_injection_rate: float = 0.3
    doc_length: tuple[int, int] = (20, 40)
    label_prevalence: tuple[float, ...] = (0.30, 0.25, 0.25, 0.20, 0.20, 0.15)
    multi_label_rate: float = 0.35
    n_train: int = 5000
    n_val: int = 2000
    seed: int = 7

    def validate(self) -> None:
        for name in ("n_classes", "shared_vocab_size", "lexicon_size_per_class",
                     "n_train", "n_val"):
            if getattr(self, name) < 1:
                raise CorpusError(f"invalid spec: {name} must be >= 1")
        if not 0.0 <= self.lexicon_injection_rate <= 1.0:
            raise CorpusError("invalid spec: lexicon_injection_rate must be in [0, 1]")
        if not 0.0 <= self.multi_label_rate <= 1.0:
            raise CorpusError("invalid spec: multi_label_rate must be in [0, 1]")
        lo, hi = self.doc_length
        if lo < 1 or lo > hi:
            raise CorpusError("invalid spec: doc_length must satisfy 1 <= min <= max")
        if len(self.label_prevalence) != self.n_classes:
            raise CorpusError("invalid spec: label_prevalence must have n_classes entries")
        if any(not 0.0 <= p <= 1.0 for p in self.label_prevalence):
            raise CorpusError("invalid spec: label_prevalence entries must be in [0, 1]")
        if sum(self.label_prevalence) <= 0.0:
            raise CorpusError("invalid spec: label_prevalence must not be all zero")
        total = 2 + self.shared_vocab_size + self.n_classes * self.lexicon_size_per_class
        if total > _MAX_TOKEN_ID:
            raise CorpusError(
                "invalid spec: shared_vocab_size + n_classes * lexicon_size_per_class "
                "overflows the token id range")


def lexicon_token_ids(spec: GeneratorSpec, class_index: int) -> range:
    """Ids of the tokens planted for one class (ground truth for recall tests)."""
    if not 0 <= class_index < spec.n_classes:
        raise CorpusError(f"class index {class_index} out of range")
    base = 2 + spec.shared_vocab_size + class_index * spec.lexicon_size_per_class
    return range(base, base + spec.lexicon_size_per_class)


def _generator_vocabulary(spec: GeneratorSpec) -> Vocabulary:
    tokens = [PAD_TOKEN, UNK_TOKEN]
    tokens += [f"w{i:04d}" for i in range(spec.shared_vocab_size)]
    for c in range(spec.n_classes):
        tokens += [f"cls{c}tok{j:03d}" for j in range(spec.lexicon_size_per_class)]
    return Vocabulary(tuple(tokens))


def _draw_labels(rng: np.random.Generator, spec: GeneratorSpec) -> tuple[int, ...]:
    weights = np.asarray(spec.label_prevalence, dtype=np.float64)
    probs = weights / weights.sum()
    n_labels = 2 if (spec.n_classes >= 2 and rng.random() < spec.multi_label_rate) else 1
    chosen = rng.choice(spec.n_classes, size=n_labels, replace=False, p=probs)
    labels = [0] * spec.n_classes
    for c in chosen:
        labels[int(c)] = 1
    return tuple(labels)


def _draw_document(spec: GeneratorSpec, split: int, index: int, doc_id: str) -> Document:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(split, index))))
    labels = _draw_labels(rng, spec)
    lo, hi = spec.doc_length
    length = int(rng.integers(lo, hi + 1))
    label_list = np.flatnonzero(np.asarray(labels))
    inject = rng.random(length) < spec.lexicon_injection_rate
    which_label = label_list[rng.integers(0, len(label_list), size=length)]
    lex_pick = rng.integers(0, spec.lexicon_size_per_class, size=length)
    filler_pick = rng.integers(0, spec.shared_vocab_size, size=length)
    lex_base = 2 + spec.shared_vocab_size + which_label * spec.lexicon_size_per_class
    token_ids = np.where(inject, lex_base + lex_pick, 2 + filler_pick)
    return Document(id=doc_id, token_ids=tuple(int(t) for t in token_ids), labels=labels)


def generate_corpus(spec: GeneratorSpec) -> LabeledDataset:
    """Deterministic synthetic dataset with disjoint planted class lexicons."""
    spec.validate()
    vocab = _generator_vocabulary(spec)
    train = tuple(_draw_document(spec, 0, i, f"train-{i:05d}") for i in range(spec.n_train))
    val = tuple(_draw_document(spec, 1, i, f"val-{i:05d}") for i in range(spec.n_val))
    class_names = tuple(f"class_{c}" for c in range(spec.n_classes))
    return LabeledDataset(vocabulary=vocab, train=train, val=val,
                          n_classes=spec.n_classes, class_names=class_names)


def build_vocabulary(texts: Sequence[str], min_count: int = 1) -> Vocabulary:
    """Vocabulary of lowercased whitespace tokens occurring >= min_count times.

    Order is deterministic: count descending, ties broken lexicographically.
    """
    if not texts:
        raise CorpusError("texts is empty")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(text.lower().split())
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary((PAD_TOKEN, UNK_TOKEN, *kept))


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[int, ...]:
    """Lowercase, split on whitespace, map unknowns to UNK, truncate.

    No padding is stored; padding happens at batch time.
    """
    if max_len < 1:
        raise CorpusError("max_len must be >= 1")
    ids = [vocab.id_of(tok) for tok in text.lower().split()]
    if not ids:
        raise CorpusError("empty document")
    return tuple(ids[:max_len])


# ---------------------------------------------------------------------------
# JSONL persistence: train.jsonl / val.jsonl / vocab.json / class_names.json


def save_dataset(dataset: LabeledDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, docs in (("train.jsonl", dataset.train), ("val.jsonl", dataset.val)):
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            for doc in docs:
                fh.write(json.dumps({"id": doc.id,
                                     "tokens": list(doc.token_ids),
                                     "labels": list(doc.labels)},
                                    separators=(",", ":")) + "\n")
    with open(out / "vocab.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(list(dataset.vocabulary.tokens), fh, separators=(",", ":"))
        fh.write("\n")
    with open(out / "class_names.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(list(dataset.class_names), fh, separators=(",", ":"))
        fh.write("\n")


def _read_jsonl(path: Path, n_classes: int, vocab_size: int) -> tuple[Document, ...]:
    docs: list[Document] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id = obj["id"]
                tokens = obj["tokens"]
                labels = obj["labels"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path.name}:{lineno}: malformed line ({exc})") from exc
            if len(labels) != n_classes:
                raise CorpusError(
                    f"{path.name}:{lineno}: {len(labels)} labels, expected {n_classes}")
            if any(not isinstance(t, int) or t < 0 or t >= vocab_size for t in tokens):
                raise CorpusError(f"{path.name}:{lineno}: unknown token id")
            docs.append(Document(id=str(doc_id), token_ids=tuple(tokens),
                                 labels=tuple(int(x) for x in labels)))
    if not docs:
        raise CorpusError(f"{path.name}: no documents")
    return tuple(docs)


def load_dataset(in_dir: str | Path) -> LabeledDataset:
    src = Path(in_dir)
    for name in ("train.jsonl", "val.jsonl", "vocab.json", "class_names.json"):
        if not (src / name).exists():
            raise CorpusError(f"missing corpus file: {src / name}")
    with open(src / "vocab.json", "r", encoding="utf-8") as fh:
        vocab = Vocabulary(tuple(json.load(fh)))
    with open(src / "class_names.json", "r", encoding="utf-8") as fh:
        class_names = tuple(json.load(fh))
    n_classes = len(class_names)
    train = _read_jsonl(src / "train.jsonl", n_classes, vocab.size)
    val = _read_jsonl(src / "val.jsonl", n_classes, vocab.size)
    return LabeledDataset(vocabulary=vocab, train=train, val=val,
                          n_classes=n_classes, class_names=class_names)


def label_matrix(docs: Iterable[Document]) -> np.ndarray:
    """Stack document label vectors into an (N, C) int array."""
    return np.asarray([d.labels for d in docs], dtype=np.int64)
