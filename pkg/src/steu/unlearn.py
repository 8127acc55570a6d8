"""Gradient-masked unlearning of one class, plus encoder-level baselines.

The sparse method optimizes lambda_u * forget loss + lambda_k * utility
anchor while only the selected embedding rows (and optionally the head) are
trainable; every other parameter receives an exactly-zero gradient and ends
bit-identical to the baseline. The three comparison methods instead train
the final encoder block plus head. Each step pairs one forget batch with
one retain batch; an epoch is one pass over the forget stream with the
retain stream cycling and reshuffling.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from . import evaluate
from . import model as model_mod
from .corpus import LabeledDataset, label_matrix
from .diffmath import Tape, Tensor
from .model import ModelConfig, ModelParams, encoder_block_tensor_names, forward, pad_batch
from .optim import Adam, clip_global_norm
from .selector import SelectedSet

log = logging.getLogger("steu.unlearn")

METHODS = ("steu", "steu_emb_only", "grad_ascent", "direct_suppression",
           "influence_weighted")
SPARSE_METHODS = ("steu", "steu_emb_only")
GRAD_CLIP_NORM = 1.0


class UnlearnError(ValueError):
    """Raised for invalid unlearning configs or runtime failures."""


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    forget_class: int
    k: int = 64
    min_freq: int = 5
    lambda_u: float = 1.0
    lambda_k: float = 1.0
    lr: float = 5e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    update_head: bool = True
    retain_anchor: bool = True  # baselines only; the sparse objective always anchors
    forget_loss_scope: str = "full"  # "full" or "cf_only"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise UnlearnError(f"unknown method {self.method!r} (choose from {METHODS})")
        if self.lambda_u < 0 or self.lambda_k < 0:
            raise UnlearnError("loss weights must be >= 0")
        if self.lambda_u == 0 and self.lambda_k == 0:
            raise UnlearnError("lambda_u and lambda_k must not both be 0")
        if self.epochs < 1:
            raise UnlearnError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UnlearnError("batch_size must be >= 1")
        if self.forget_loss_scope not in ("full", "cf_only"):
            raise UnlearnError("forget_loss_scope must be 'full' or 'cf_only'")


@dataclass(frozen=True)
class GradientMask:
    """Which embedding rows, head, and encoder tensors may move."""

    embedding_rows: np.ndarray  # bool, length V
    head_trainable: bool
    encoder_trainable_tensors: frozenset[str]

    def trainable_names(self, config: ModelConfig) -> tuple[str, ...]:
        names: list[str] = []
        if self.embedding_rows.any():
            names.append("token_embedding")
        names.extend(sorted(self.encoder_trainable_tensors))
        if self.head_trainable:
            names += ["head.weight", "head.bias"]
        return tuple(names)


def build_mask(selected: SelectedSet, config: UnlearnConfig,
               model_config: ModelConfig) -> GradientMask:
    """Update surface per method: selected rows (+head) for the sparse
    methods, final encoder block + head for the baselines."""
    rows = np.zeros(model_config.vocab_size, dtype=bool)
    if config.method in SPARSE_METHODS:
        ids = np.asarray(selected.token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= model_config.vocab_size):
            raise UnlearnError("selected token id out of embedding range")
        rows[ids] = True
        head = config.update_head and config.method != "steu_emb_only"
        return GradientMask(embedding_rows=rows, head_trainable=head,
                            encoder_trainable_tensors=frozenset())
    last = encoder_block_tensor_names(model_config.n_layers - 1)
    return GradientMask(embedding_rows=rows, head_trainable=True,
                        encoder_trainable_tensors=frozenset(last))


def save_mask(mask: GradientMask, path: str | Path) -> None:
    payload = {"vocab_size": int(mask.embedding_rows.size),
               "embedding_rows": [int(i) for i in np.flatnonzero(mask.embedding_rows)],
               "head_trainable": mask.head_trainable,
               "encoder_trainable_tensors": sorted(mask.encoder_trainable_tensors)}
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mask(path: str | Path) -> GradientMask:
    with open(Path(path), "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    rows = np.zeros(int(payload["vocab_size"]), dtype=bool)
    rows[np.asarray(payload["embedding_rows"], dtype=np.int64)] = True
    return GradientMask(embedding_rows=rows,
                        head_trainable=bool(payload["head_trainable"]),
                        encoder_trainable_tensors=frozenset(
                            payload["encoder_trainable_tensors"]))


def mask_gradients(grads: dict[str, np.ndarray],
                   mask: GradientMask) -> dict[str, np.ndarray]:
    """Zero every gradient entry outside the trainable region.

    Trainable entries pass through bit-for-bit unchanged.
    """
    if "token_embedding" not in grads:
        raise UnlearnError("gradient mapping is missing 'token_embedding'")
    out: dict[str, np.ndarray] = {}
    for name, g in grads.items():
        if name == "token_embedding":
            if g.shape[0] != mask.embedding_rows.size:
                raise UnlearnError("embedding mask length does not match gradient rows")
            g = g.copy()
            g[~mask.embedding_rows] = 0.0
            out[name] = g
        elif name == "position_embedding":
            out[name] = np.zeros_like(g)
        elif name in ("head.weight", "head.bias"):
            out[name] = g if mask.head_trainable else np.zeros_like(g)
        elif name in mask.encoder_trainable_tensors:
            out[name] = g
        else:
            out[name] = np.zeros_like(g)
    return out


def forget_loss(logits: Tensor, labels: np.ndarray, forget_class: int,
                tape: Tape | None = None, scope: str = "full") -> Tensor:
    """BCE against the modified targets with the forget column forced to 0.

    "full" spans all classes of the modified vector; "cf_only" restricts the
    loss to the forget column.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise dm.ShapeError(f"forget_loss: logits {logits.shape} vs labels {labels.shape}")
    if not np.all(labels[:, forget_class] == 1):
        raise UnlearnError("forget batch contains a row without the forget label")
    targets = labels.copy()
    targets[:, forget_class] = 0.0
    per_elem = dm.bce_with_logits(logits, targets, tape)
    if scope == "cf_only":
        col = np.zeros_like(targets)
        col[:, forget_class] = 1.0
        per_elem = dm.mul(per_elem, Tensor(col), tape)
        return dm.scale(dm.sum_all(per_elem, tape), 1.0 / labels.shape[0], tape)
    return dm.scale(dm.sum_all(per_elem, tape), 1.0 / labels.size, tape)


def utility_loss(logits_new: Tensor, logits_base: np.ndarray, forget_class: int,
                 tape: Tape | None = None) -> Tensor:
    """Soft-target BCE anchoring non-forget probabilities to the baseline.

    (1/(C-1)) * sum over classes != c_f of the batch-mean BCE between the
    updated and frozen sigmoid outputs; exactly stationary at equal logits.
    """
    logits_base = np.asarray(logits_base, dtype=np.float64)
    if logits_base.shape != logits_new.shape:
        raise dm.ShapeError(
            f"utility_loss: logits {logits_new.shape} vs baseline {logits_base.shape}")
    batch, n_classes = logits_new.shape
    if n_classes < 2:
        raise UnlearnError("utility loss needs at least 2 classes")
    base_probs = 1.0 / (1.0 + np.exp(-logits_base))
    q = dm.sigmoid(logits_new, tape)
    per_elem = dm.soft_bce(q, base_probs, tape)
    keep = np.ones((batch, n_classes))
    keep[:, forget_class] = 0.0
    per_elem = dm.mul(per_elem, Tensor(keep), tape)
    return dm.scale(dm.sum_all(per_elem, tape), 1.0 / ((n_classes - 1) * batch), tape)


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    forget_loss: float
    utility_loss: float
    total_loss: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    forget_f1: float
    retain_avg_f1: float


@dataclass
class TrainingHistory:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)


def save_history(history: TrainingHistory, path: str | Path) -> None:
    """Per-step CSV; each epoch's last step row carries the epoch F1 pair."""
    end_of_epoch = {}
    for rec in history.steps:
        end_of_epoch[rec.epoch] = rec.step
    by_epoch = {e.epoch: e for e in history.epochs}
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "epoch", "forget_loss", "utility_loss",
                         "total_loss", "forget_f1", "retain_avg_f1"])
        for rec in history.steps:
            row = [rec.step, rec.epoch, repr(rec.forget_loss),
                   repr(rec.utility_loss), repr(rec.total_loss)]
            epoch_rec = by_epoch.get(rec.epoch)
            if epoch_rec is not None and end_of_epoch[rec.epoch] == rec.step:
                row += [repr(epoch_rec.forget_f1), repr(epoch_rec.retain_avg_f1)]
            else:
                row += ["", ""]
            writer.writerow(row)


class _CyclingSampler:
    """Shuffled index stream that reshuffles whenever it is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator) -> None:
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out: list[int] = []
        while len(out) < count:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(count - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + take])
            self.pos += take
        return np.asarray(out, dtype=np.int64)


def _per_example_weights(per_elem: np.ndarray) -> np.ndarray:
    """Weights proportional to per-example loss, normalized to mean 1."""
    per_example = per_elem.mean(axis=1)
    total = per_example.sum()
    if total <= 1e-12:
        return np.ones_like(per_example)
    return per_example * (per_example.size / total)


def run_unlearning(theta0: ModelParams, dataset: LabeledDataset,
                   selected: SelectedSet, config: UnlearnConfig,
                   threshold: float = 0.5) -> tuple[ModelParams, TrainingHistory]:
    """Run one unlearning method from a frozen baseline.

    theta0 is never mutated; it supplies the frozen anchor logits. Returns
    the updated parameters and the per-step/per-epoch history.
    """
    config.validate()
    cfg = theta0.config
    c_f = config.forget_class
    if not 0 <= c_f < cfg.n_classes:
        raise UnlearnError(f"forget class {c_f} out of range")
    if dataset.vocabulary.size != cfg.vocab_size or dataset.n_classes != cfg.n_classes:
        raise UnlearnError("dataset does not match the baseline's config")

    labels = label_matrix(dataset.train)
    forget_idx = np.flatnonzero(labels[:, c_f] == 1)
    retain_idx = np.flatnonzero(labels[:, c_f] == 0)
    if forget_idx.size == 0:
        raise UnlearnError("empty forget stream")
    if retain_idx.size == 0:
        raise UnlearnError("empty retain stream")

    mask = build_mask(selected, config, cfg)
    theta_prime = theta0.copy()
    trainable = mask.trainable_names(cfg)
    opt = Adam({name: theta_prime.tensors[name] for name in trainable}, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    retain_sampler = _CyclingSampler(retain_idx.size, rng)

    seqs = [d.token_ids for d in dataset.train]
    labels_f64 = labels.astype(np.float64)
    use_anchor = (config.method in SPARSE_METHODS) or config.retain_anchor
    history = TrainingHistory()
    step = 0
    for epoch in range(1, config.epochs + 1):
        forget_order = forget_idx[rng.permutation(forget_idx.size)]
        for start in range(0, forget_order.size, config.batch_size):
            step += 1
            f_batch = forget_order[start:start + config.batch_size]
            r_batch = retain_idx[retain_sampler.take(config.batch_size)]

            tape = Tape()
            ids_f, len_f = pad_batch([seqs[i] for i in f_batch])
            logits_f = forward(theta_prime, ids_f, len_f, tape).logits

            ul_value = 0.0
            ul_term: Tensor | None = None
            if use_anchor and config.lambda_k > 0:
                ids_r, len_r = pad_batch([seqs[i] for i in r_batch])
                logits_r = forward(theta_prime, ids_r, len_r, tape).logits
                base_logits = forward(theta0, ids_r, len_r).logits.data
                ul_term = utility_loss(logits_r, base_logits, c_f, tape)
                ul_value = ul_term.item()

            if config.method == "grad_ascent":
                fl = model_mod.multilabel_loss(logits_f, labels_f64[f_batch], tape)
                total = dm.scale(fl, -config.lambda_u, tape)
            elif config.method == "influence_weighted":
                fl, total = _influence_forget_term(
                    logits_f, labels_f64[f_batch], c_f, config, tape)
            else:
                fl = forget_loss(logits_f, labels_f64[f_batch], c_f, tape,
                                 scope=config.forget_loss_scope)
                total = dm.scale(fl, config.lambda_u, tape)
            if ul_term is not None:
                total = dm.add(total, dm.scale(ul_term, config.lambda_k, tape), tape)

            total_value = total.item()
            if not np.isfinite(total_value):
                raise UnlearnError(f"non-finite loss at step {step} (epoch {epoch})")

            grads = theta_prime.grads_by_name(dm.backward(tape, total))
            grads = mask_gradients(grads, mask)
            step_grads = {name: grads[name] for name in trainable}
            if config.method == "grad_ascent":
                step_grads = clip_global_norm(step_grads, GRAD_CLIP_NORM)
            opt.step(step_grads)
            history.steps.append(StepRecord(step=step, epoch=epoch,
                                            forget_loss=fl.item(),
                                            utility_loss=ul_value,
                                            total_loss=total_value))
        f_f1, r_f1 = evaluate.forget_retain_f1(theta_prime, dataset.val, c_f, threshold)
        history.epochs.append(EpochRecord(epoch=epoch, forget_f1=f_f1, retain_avg_f1=r_f1))
        log.info("%s epoch %d: forget F1 %.4f, retain avg F1 %.4f",
                 config.method, epoch, f_f1, r_f1)
    return theta_prime, history


def _influence_forget_term(logits_f: Tensor, labels_f: np.ndarray, c_f: int,
                           config: UnlearnConfig, tape: Tape) -> tuple[Tensor, Tensor]:
    """Direct suppression with per-example gradients weighted by that
    example's normalized loss (weights are constants, mean 1 per batch)."""
    if not np.all(labels_f[:, c_f] == 1):
        raise UnlearnError("forget batch contains a row without the forget label")
    targets = labels_f.copy()
    targets[:, c_f] = 0.0
    per_elem = dm.bce_with_logits(logits_f, targets, tape)
    weights = _per_example_weights(per_elem.data)
    batch, n_classes = labels_f.shape
    weight_mat = np.repeat(weights[:, None], n_classes, axis=1)
    weighted = dm.mul(per_elem, Tensor(weight_mat), tape)
    weighted_mean = dm.scale(dm.sum_all(weighted, tape), 1.0 / labels_f.size, tape)
    total = dm.scale(weighted_mean, config.lambda_u, tape)
    # history records the unweighted suppression loss
    unweighted = dm.scale(dm.sum_all(per_elem, tape), 1.0 / labels_f.size, tape)
    return unweighted, total


def emb_only_variant(config: UnlearnConfig) -> UnlearnConfig:
    """The same run with the classifier head frozen (ablation rows)."""
    return replace(config, method="steu_emb_only", update_head=False)
