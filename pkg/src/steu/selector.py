"""Frequency-weighted PMI selection of forget-class-discriminative tokens.

score(t) = log2(P(t|forget) / P(t|all)) * ln(1 + n_f(t)), where a document
is forget-class iff its label vector is 1 at the forget class, and "all"
spans the entire train split. Tokens never seen in forget documents score
exactly 0 (the weight term vanishes before the log singularity is reached).
Scores are computed with scalar math so the ranking is reproducible
bit-for-bit across platforms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import PAD_ID, UNK_ID, LabeledDataset, Vocabulary


class SelectorError(ValueError):
    """Raised for invalid selection inputs or an empty selection."""


@dataclass(frozen=True)
class TokenStats:
    """Occurrence counts with multiplicity over one split."""

    forget_class: int
    n_f: np.ndarray  # per token id, count in forget-class documents
    n_all: np.ndarray  # per token id, count in all documents
    total_f: int
    total_all: int

    @property
    def n_r(self) -> np.ndarray:
        return self.n_all - self.n_f


@dataclass(frozen=True)
class TokenScore:
    token_id: int
    n_f: int
    n_all: int
    pmi: float
    weight: float
    score: float


@dataclass(frozen=True)
class SelectedSet:
    """Top-k token ids in descending score order."""

    token_ids: tuple[int, ...]
    k: int
    min_freq: int
    forget_class: int


def count_token_stats(dataset: LabeledDataset, forget_class: int,
                      split: str = "train") -> TokenStats:
    if not 0 <= forget_class < dataset.n_classes:
        raise SelectorError(f"class index {forget_class} out of range")
    docs = dataset.train if split == "train" else dataset.val
    vocab_size = dataset.vocabulary.size
    n_f = np.zeros(vocab_size, dtype=np.int64)
    n_all = np.zeros(vocab_size, dtype=np.int64)
    any_forget = False
    for doc in docs:
        counts = np.bincount(np.asarray(doc.token_ids, dtype=np.int64),
                             minlength=vocab_size)
        n_all += counts
        if doc.labels[forget_class] == 1:
            n_f += counts
            any_forget = True
    if not any_forget:
        raise SelectorError("empty forget class")
    return TokenStats(forget_class=forget_class, n_f=n_f, n_all=n_all,
                      total_f=int(n_f.sum()), total_all=int(n_all.sum()))


def score_tokens(stats: TokenStats, pmi_base: float = 2.0,
                 weight_base: float = math.e) -> list[TokenScore]:
    """Scores for every token observed in the split, in token-id order.

    Log bases are configurable; defaults are base 2 for the PMI term and
    natural log for the frequency weight.
    """
    if stats.total_f <= 0 or stats.total_all <= 0:
        raise SelectorError("token totals must be positive")
    scores: list[TokenScore] = []
    for token_id in np.flatnonzero(stats.n_all):
        token_id = int(token_id)
        n_f = int(stats.n_f[token_id])
        n_all = int(stats.n_all[token_id])
        if n_f == 0:
            pmi, weight, score = 0.0, 0.0, 0.0
        else:
            ratio = (n_f / stats.total_f) / (n_all / stats.total_all)
            pmi = math.log2(ratio) if pmi_base == 2.0 else math.log(ratio) / math.log(pmi_base)
            weight = math.log(1 + n_f) if weight_base == math.e \
                else math.log(1 + n_f) / math.log(weight_base)
            score = pmi * weight
        scores.append(TokenScore(token_id=token_id, n_f=n_f, n_all=n_all,
                                 pmi=pmi, weight=weight, score=score))
    return scores


def _rank_key(s: TokenScore) -> tuple[float, int, int]:
    return (-s.score, -s.n_f, s.token_id)


def select_tokens(scores: Sequence[TokenScore], k: int, min_freq: int,
                  forget_class: int) -> SelectedSet:
    """Filter to n_f >= min_freq (PAD/UNK never eligible), rank, take top k.

    Ordering is the total order (score desc, n_f desc, token id asc), so the
    result is deterministic on any platform.
    """
    if k < 1:
        raise SelectorError("k must be >= 1")
    eligible = [s for s in scores
                if s.n_f >= min_freq and s.token_id not in (PAD_ID, UNK_ID)]
    if not eligible:
        raise SelectorError("selection empty")
    eligible.sort(key=_rank_key)
    return SelectedSet(token_ids=tuple(s.token_id for s in eligible[:k]),
                       k=k, min_freq=min_freq, forget_class=forget_class)


def write_selection_csv(scores: Sequence[TokenScore], selected: SelectedSet,
                        vocab: Vocabulary, path: str | Path) -> None:
    """Full score table, score-descending, with a selected 0/1 column."""
    chosen = set(selected.token_ids)
    rows = sorted(scores, key=_rank_key)
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["token", "token_id", "n_f", "n_all", "pmi", "weight",
                         "score", "selected"])
        for s in rows:
            writer.writerow([vocab.token_of(s.token_id), s.token_id, s.n_f, s.n_all,
                             repr(s.pmi), repr(s.weight), repr(s.score),
                             1 if s.token_id in chosen else 0])


def read_selected_ids(path: str | Path) -> tuple[int, ...]:
    """Token ids marked selected=1, in file (score-descending) order."""
    with open(Path(path), "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "selected" not in reader.fieldnames:
            raise SelectorError(f"{path}: not a selection CSV")
        ids = [int(row["token_id"]) for row in reader if row["selected"] == "1"]
    if not ids:
        raise SelectorError(f"{path}: no selected tokens")
    return tuple(ids)
