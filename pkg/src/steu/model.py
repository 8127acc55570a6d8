"""Multi-label classifier: trainable token embeddings, a small transformer
encoder, and a linear head, with baseline training and binary checkpoints.

The forward pipeline is: embedding lookup + position embeddings, then per
block (self-attention with padding mask -> add&norm -> feed-forward ->
add&norm), mean-pool over non-pad positions, linear head. Attention and
feed-forward layers carry no bias terms; layer norms have gain/bias.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .corpus import PAD_ID, LabeledDataset, label_matrix
from .diffmath import ShapeError, Tape, Tensor
from .optim import Adam

log = logging.getLogger("steu.model")

CHECKPOINT_MAGIC = b"STEU"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02
_ATTN_NEG = -1e9


class ModelError(ValueError):
    """Raised for invalid model configs, inputs, or checkpoints."""


class CheckpointError(ModelError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    max_len: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 256
    n_classes: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "dim", "max_len", "n_layers", "n_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ModelError("n_classes must be >= 2")
        if self.dim % self.n_heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")


def encoder_block_tensor_names(block: int) -> tuple[str, ...]:
    prefix = f"encoder.{block}"
    return (f"{prefix}.attn.w_q", f"{prefix}.attn.w_k", f"{prefix}.attn.w_v",
            f"{prefix}.attn.w_o", f"{prefix}.ln1.gain", f"{prefix}.ln1.bias",
            f"{prefix}.ffn.w1", f"{prefix}.ffn.w2",
            f"{prefix}.ln2.gain", f"{prefix}.ln2.bias")


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map; also fixes checkpoint order."""
    d, f = config.dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"encoder.{i}"
        shapes[f"{p}.attn.w_q"] = (d, d)
        shapes[f"{p}.attn.w_k"] = (d, d)
        shapes[f"{p}.attn.w_v"] = (d, d)
        shapes[f"{p}.attn.w_o"] = (d, d)
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
    shapes["head.weight"] = (d, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


class ModelParams:
    """Named tensor store for all model parameters."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]) -> None:
        expected = tensor_shapes(config)
        if set(tensors) != set(expected):
            raise ModelError("parameter tensor names do not match the config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ModelError(
                    f"tensor {name!r}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors: dict[str, Tensor] = {name: tensors[name] for name in expected}

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParams":
        """Gaussian(0, 0.02) weights, layer-norm gains 1, biases 0."""
        rng = np.random.default_rng(config.seed)
        tensors: dict[str, Tensor] = {}
        for name, shape in tensor_shapes(config).items():
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif name.endswith(".bias") or name == "head.bias":
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, INIT_STD, size=shape)
            tensors[name] = Tensor(data)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> tuple[str, ...]:
        return tuple(self.tensors)

    def copy(self) -> "ModelParams":
        """Independent deep copy (the frozen baseline relies on this)."""
        return ModelParams(self.config, {n: t.copy() for n, t in self.tensors.items()})

    def parameter_counts(self) -> dict[str, int]:
        return {name: t.size for name, t in self.tensors.items()}

    def total_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def grads_by_name(self, grads: dict[Tensor, Tensor]) -> dict[str, np.ndarray]:
        """Re-key a diffmath gradient mapping by parameter name."""
        return {name: grads[t].data for name, t in self.tensors.items()}


@dataclass
class BatchOutput:
    logits: Tensor
    tape: Tape | None


def pad_batch(docs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token-id sequences with PAD to the batch max length."""
    if not docs:
        raise ModelError("empty batch")
    lengths = np.asarray([len(d) for d in docs], dtype=np.int64)
    ids = np.full((len(docs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for row, doc in enumerate(docs):
        ids[row, :len(doc)] = doc
    return ids, lengths


def forward(params: ModelParams, token_ids: np.ndarray, lengths: np.ndarray,
            tape: Tape | None = None) -> BatchOutput:
    """Logits for a padded batch; with a tape, records the backward graph."""
    cfg = params.config
    token_ids = np.asarray(token_ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    batch, seq = token_ids.shape
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise ModelError(f"token id out of range (vocab size {cfg.vocab_size})")
    if lengths.min() < 1:
        raise ModelError("document length must be >= 1")
    if seq > cfg.max_len or lengths.max() > cfg.max_len:
        raise ModelError(f"sequence length exceeds max_len {cfg.max_len}")

    if tape is not None:
        tape.watch(*params.tensors.values())

    x = dm.embedding_lookup(params["token_embedding"], token_ids, tape)
    pos = dm.slice_rows(params["position_embedding"], seq, tape)
    x = dm.add(x, pos, tape)

    # additive key mask: 0 at real positions, large negative at padding
    key_mask = np.where(np.arange(seq)[None, :] < lengths[:, None], 0.0, _ATTN_NEG)
    key_mask_t = Tensor(key_mask.reshape(batch, 1, 1, seq))

    d_head = cfg.dim // cfg.n_heads
    inv_sqrt = 1.0 / (d_head ** 0.5)
    for i in range(cfg.n_layers):
        p = f"encoder.{i}"
        q = _split_heads(dm.matmul(x, params[f"{p}.attn.w_q"], tape), cfg, tape)
        k = _split_heads(dm.matmul(x, params[f"{p}.attn.w_k"], tape), cfg, tape)
        v = _split_heads(dm.matmul(x, params[f"{p}.attn.w_v"], tape), cfg, tape)
        scores = dm.scale(dm.matmul(q, dm.transpose(k, (0, 1, 3, 2), tape), tape),
                          inv_sqrt, tape)
        scores = dm.add(scores, key_mask_t, tape)
        attn = dm.matmul(dm.softmax(scores, tape), v, tape)
        attn = dm.matmul(_merge_heads(attn, cfg, tape), params[f"{p}.attn.w_o"], tape)
        x = dm.layer_norm(dm.add(x, attn, tape),
                          params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], tape=tape)
        hidden = dm.gelu(dm.matmul(x, params[f"{p}.ffn.w1"], tape), tape)
        ffn = dm.matmul(hidden, params[f"{p}.ffn.w2"], tape)
        x = dm.layer_norm(dm.add(x, ffn, tape),
                          params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], tape=tape)

    pooled = dm.mean_pool(x, lengths, tape)
    logits = dm.add(dm.matmul(pooled, params["head.weight"], tape), params["head.bias"], tape)
    return BatchOutput(logits=logits, tape=tape)


def _split_heads(x: Tensor, cfg: ModelConfig, tape: Tape | None) -> Tensor:
    batch, seq, _ = x.shape
    x = dm.reshape(x, (batch, seq, cfg.n_heads, cfg.dim // cfg.n_heads), tape)
    return dm.transpose(x, (0, 2, 1, 3), tape)


def _merge_heads(x: Tensor, cfg: ModelConfig, tape: Tape | None) -> Tensor:
    batch, _, seq, _ = x.shape
    x = dm.transpose(x, (0, 2, 1, 3), tape)
    return dm.reshape(x, (batch, seq, cfg.dim), tape)


def multilabel_loss(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over batch and classes of BCE-with-logits."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ShapeError(f"loss: logits {logits.shape} vs labels {labels.shape}")
    per_elem = dm.bce_with_logits(logits, labels, tape)
    return dm.scale(dm.sum_all(per_elem, tape), 1.0 / labels.size, tape)


def predict_proba(params: ModelParams, docs: Sequence, batch_size: int = 128) -> np.ndarray:
    """Sigmoid probabilities, (N, C). Accepts Documents or raw id sequences."""
    seqs = [d.token_ids if hasattr(d, "token_ids") else d for d in docs]
    out = np.empty((len(seqs), params.config.n_classes), dtype=np.float64)
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        ids, lengths = pad_batch(chunk)
        logits = forward(params, ids, lengths).logits
        out[start:start + len(chunk)] = dm.sigmoid(logits).data
    return out


def predict(params: ModelParams, docs: Sequence, threshold: float = 0.5,
            batch_size: int = 128) -> np.ndarray:
    """Binary label matrix; class assigned iff sigmoid(logit) >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ModelError("threshold must be in (0, 1)")
    return (predict_proba(params, docs, batch_size) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_macro_f1: float


def train_baseline(dataset: LabeledDataset, config: ModelConfig,
                   hyper: TrainHyper) -> tuple[ModelParams, list[EpochMetrics]]:
    """Train all parameters jointly; deterministic under a fixed seed."""
    if dataset.vocabulary.size != config.vocab_size:
        raise ModelError(
            f"dataset vocabulary size {dataset.vocabulary.size} != config {config.vocab_size}")
    if dataset.n_classes != config.n_classes:
        raise ModelError(
            f"dataset class count {dataset.n_classes} != config {config.n_classes}")
    if not dataset.train:
        raise ModelError("empty training split")

    from . import evaluate  # late import: evaluate imports this module

    params = ModelParams.init(config)
    labels = label_matrix(dataset.train).astype(np.float64)
    seqs = [d.token_ids for d in dataset.train]
    opt = Adam(params.tensors, lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    metrics: list[EpochMetrics] = []
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(seqs))
        losses: list[float] = []
        for step_start in range(0, len(order), hyper.batch_size):
            batch_idx = order[step_start:step_start + hyper.batch_size]
            ids, lengths = pad_batch([seqs[i] for i in batch_idx])
            tape = Tape()
            out = forward(params, ids, lengths, tape)
            loss = multilabel_loss(out.logits, labels[batch_idx], tape)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise ModelError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"step {step_start // hyper.batch_size}")
            grads = params.grads_by_name(dm.backward(tape, loss))
            opt.step(grads)
            losses.append(loss_val)
        preds = predict(params, dataset.val)
        per_class = evaluate.per_class_metrics(preds, label_matrix(dataset.val))
        macro = float(np.mean([m.f1 for m in per_class]))
        metrics.append(EpochMetrics(epoch=epoch, train_loss=float(np.mean(losses)),
                                    val_macro_f1=macro))
        log.info("baseline epoch %d: train loss %.4f, val macro F1 %.4f",
                 epoch, metrics[-1].train_loss, macro)
    return params, metrics


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, config block (7 u32), then
# per-tensor records (name len u32, name, rank u32, dims u32..., f64 values),
# all little-endian, tensors in canonical order.


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    cfg = params.config
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<7I", cfg.vocab_size, cfg.dim, cfg.max_len,
                             cfg.n_layers, cfg.n_heads, cfg.ffn_dim, cfg.n_classes))
        for name, tensor in params.tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", len(tensor.shape)))
            fh.write(struct.pack(f"<{len(tensor.shape)}I", *tensor.shape))
            fh.write(tensor.data.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str | Path,
                    expected: ModelConfig | None = None) -> ModelParams:
    """Bit-exact inverse of save_checkpoint.

    The config seed is not persisted; the loaded config carries seed 0.
    """
    with open(Path(path), "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        vals = struct.unpack("<7I", _read_exact(fh, 28, "config"))
        config = ModelConfig(vocab_size=vals[0], dim=vals[1], max_len=vals[2],
                             n_layers=vals[3], n_heads=vals[4], ffn_dim=vals[5],
                             n_classes=vals[6], seed=0)
        if expected is not None:
            for field_name in ("vocab_size", "dim", "max_len", "n_layers",
                               "n_heads", "ffn_dim", "n_classes"):
                if getattr(config, field_name) != getattr(expected, field_name):
                    raise CheckpointError(
                        f"{path}: checkpoint {field_name}={getattr(config, field_name)} "
                        f"does not match expected {getattr(expected, field_name)}")
        shapes = tensor_shapes(config)
        tensors: dict[str, Tensor] = {}
        for expected_name, expected_shape in shapes.items():
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name != expected_name:
                raise CheckpointError(
                    f"{path}: tensor {name!r} where {expected_name!r} expected")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            if dims != expected_shape:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {dims}, expected {expected_shape}")
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 8 * count, f"values of {name}")
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            tensors[name] = Tensor(data, validate=False)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return ModelParams(config, tensors)
