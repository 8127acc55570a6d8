"""F1 metrics, parameter-change audits, budget accounting, and report files.

The zero-division convention is explicit: precision, recall, and F1 are 0
whenever their denominator is 0 (a fully suppressed class therefore scores
an F1 of exactly 0). The freeze audit compares raw float64 bit patterns,
never tolerances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import model as model_mod
from .corpus import Document, label_matrix
from .model import ModelParams

if TYPE_CHECKING:  # only for annotations; unlearn imports this module
    from .unlearn import GradientMask


class EvalError(ValueError):
    """Raised for malformed metric or audit inputs."""


@dataclass(frozen=True)
class ClassMetrics:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float
    recall: float
    f1: float


def per_class_metrics(preds: np.ndarray, gold: np.ndarray) -> list[ClassMetrics]:
    preds = np.asarray(preds)
    gold = np.asarray(gold)
    if preds.shape != gold.shape or preds.ndim != 2:
        raise EvalError(f"shape mismatch: preds {preds.shape} vs gold {gold.shape}")
    out: list[ClassMetrics] = []
    for c in range(preds.shape[1]):
        p, g = preds[:, c], gold[:, c]
        tp = int(np.sum((p == 1) & (g == 1)))
        fp = int(np.sum((p == 1) & (g == 0)))
        fn = int(np.sum((p == 0) & (g == 1)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append(ClassMetrics(tp, fp, fn, precision, recall, f1))
    return out


def macro_f1(metrics: Sequence[ClassMetrics]) -> float:
    return float(np.mean([m.f1 for m in metrics]))


def forget_retain_f1(params: ModelParams, docs: Sequence[Document], forget_class: int,
                     threshold: float = 0.5) -> tuple[float, float]:
    """(forget-class F1, unweighted mean F1 over the other classes)."""
    if not docs:
        raise EvalError("empty evaluation split")
    if not 0 <= forget_class < params.config.n_classes:
        raise EvalError(f"class index {forget_class} out of range")
    preds = model_mod.predict(params, docs, threshold)
    metrics = per_class_metrics(preds, label_matrix(docs))
    retain = [m.f1 for c, m in enumerate(metrics) if c != forget_class]
    return metrics[forget_class].f1, float(np.mean(retain))


# ---------------------------------------------------------------------------
# freeze audit


@dataclass(frozen=True)
class TensorAudit:
    name: str
    changed: int
    max_abs_diff: float


@dataclass(frozen=True)
class ParamAudit:
    tensors: tuple[TensorAudit, ...]
    total_changed: int
    changed_tensor_names: tuple[str, ...]
    violations: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def _changed_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # bit-pattern comparison: catches sign-of-zero flips and NaNs too
    return a.view(np.uint64) != b.view(np.uint64)


def param_audit(theta0: ModelParams, theta_prime: ModelParams,
                mask: "GradientMask") -> ParamAudit:
    """Bitwise diff of two parameter sets against a declared update surface.

    Passes iff every changed entry lies inside the mask's trainable region.
    """
    if theta0.config != theta_prime.config and (
            model_mod.tensor_shapes(theta0.config) != model_mod.tensor_shapes(theta_prime.config)):
        raise EvalError("parameter sets have incompatible configs")
    audits: list[TensorAudit] = []
    violations: list[str] = []
    for name, t0 in theta0.tensors.items():
        t1 = theta_prime.tensors[name]
        diff = _changed_mask(t0.data, t1.data)
        changed = int(diff.sum())
        max_abs = float(np.max(np.abs(t1.data - t0.data))) if changed else 0.0
        audits.append(TensorAudit(name=name, changed=changed, max_abs_diff=max_abs))
        if changed == 0:
            continue
        if name == "token_embedding":
            bad_rows = np.flatnonzero(diff.any(axis=1) & ~mask.embedding_rows)
            if bad_rows.size:
                violations.append(
                    f"token_embedding: {bad_rows.size} frozen rows changed "
                    f"(first: {int(bad_rows[0])})")
        elif name in ("head.weight", "head.bias"):
            if not mask.head_trainable:
                violations.append(f"{name}: changed but head is frozen")
        elif name in mask.encoder_trainable_tensors:
            pass
        else:
            violations.append(f"{name}: changed but frozen")
    changed_names = tuple(a.name for a in audits if a.changed)
    return ParamAudit(tensors=tuple(audits),
                      total_changed=sum(a.changed for a in audits),
                      changed_tensor_names=changed_names,
                      violations=tuple(violations))


def param_budget(k: int, dim: int, n_classes: int, include_head: bool,
                 total_params: int) -> tuple[int, float]:
    """Updated-parameter count k*d (+ d*C + C with the head) and model fraction."""
    if min(k, dim, n_classes, total_params) < 1:
        raise EvalError("budget arguments must be >= 1")
    updated = k * dim + (dim * n_classes + n_classes if include_head else 0)
    return updated, updated / total_params


def format_percent(fraction: float) -> str:
    """Two-decimal percentage used in the aligned-text tables."""
    return f"{100.0 * fraction:.2f}%"


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class UnlearnReport:
    method: str
    forget_base: float
    forget_final: float
    retain_base: float
    retain_final: float
    params_updated: int
    percent_model: float
    k: int | None = None
    update_head: bool | None = None

    @property
    def delta_utility(self) -> float:
        # delta = final - baseline
        return self.retain_final - self.retain_base


_CSV_FIELDS = ("method", "forget_base", "forget_final", "retain_base",
               "retain_final", "delta_utility", "params_updated", "percent_model",
               "k", "update_head")


def _report_order(runs: Sequence[UnlearnReport]) -> list[UnlearnReport]:
    return sorted(runs, key=lambda r: (-r.params_updated, r.method))


def _aligned_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def _ablation_label(r: UnlearnReport) -> str:
    head = "+ head" if r.update_head else "(emb only)"
    return f"k={r.k} {head}"


def build_report(runs: Sequence[UnlearnReport], out_dir: str | Path) -> list[Path]:
    """Comparison table, budget-ablation table (when applicable), tradeoff CSV.

    Text tables round percentages to two decimals; the CSVs keep full
    precision. Returns the list of files written.
    """
    if not runs:
        raise EvalError("no runs to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    ordered = _report_order(runs)

    path = out / "comparison.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_FIELDS)
        for r in ordered:
            writer.writerow([r.method, repr(r.forget_base), repr(r.forget_final),
                             repr(r.retain_base), repr(r.retain_final),
                             repr(r.delta_utility), r.params_updated,
                             repr(r.percent_model),
                             "" if r.k is None else r.k,
                             "" if r.update_head is None else int(r.update_head)])
    written.append(path)

    rows = [[r.method, f"{r.forget_final:.4f}", f"{r.retain_final:.4f}",
             f"{r.delta_utility:+.4f}", str(r.params_updated),
             format_percent(r.percent_model)] for r in ordered]
    path = out / "comparison.txt"
    path.write_text(_aligned_table(
        ["method", "forget_f1", "retain_f1", "delta_utility", "params_updated",
         "pct_model"], rows), encoding="utf-8")
    written.append(path)

    path = out / "tradeoff.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "params_updated", "retain_f1", "forget_f1"])
        for r in ordered:
            writer.writerow([r.method, r.params_updated, repr(r.retain_final),
                             repr(r.forget_final)])
    written.append(path)

    ablation = [r for r in runs
                if r.method in ("steu", "steu_emb_only")
                and r.k is not None and r.update_head is not None]
    if len({(r.k, r.update_head) for r in ablation}) >= 2:
        ablation.sort(key=lambda r: (bool(r.update_head), r.k or 0))
        path = out / "ablation.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["configuration", "k", "update_head", "params_updated",
                             "percent_model", "forget_f1", "retain_avg_f1"])
            for r in ablation:
                writer.writerow([_ablation_label(r), r.k, int(bool(r.update_head)),
                                 r.params_updated, repr(r.percent_model),
                                 repr(r.forget_final), repr(r.retain_final)])
        written.append(path)
        rows = [[_ablation_label(r), str(r.params_updated),
                 format_percent(r.percent_model), f"{r.forget_final:.4f}",
                 f"{r.retain_final:.4f}"] for r in ablation]
        path = out / "ablation.txt"
        path.write_text(_aligned_table(
            ["configuration", "params_updated", "pct_model", "forget_f1",
             "retain_avg_f1"], rows), encoding="utf-8")
        written.append(path)
    return written
