"""Command-line pipeline: gen-corpus, train, select-tokens, unlearn, eval,
audit, report, and the ablate driver.

Stages hand off through files only. Every value is resolved as
defaults <- config file (flat ``key = value`` lines) <- command-line flags,
and each output directory receives the resolved configuration as
``run_config.txt`` so a run can be reproduced from its own provenance.

Exit codes: 0 success, 1 usage error, 2 validation/audit failure.
``STEU_LOG`` (error|info|debug) controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate
from .corpus import CorpusError, GeneratorSpec, generate_corpus, load_dataset, save_dataset
from .model import (ModelConfig, ModelError, TrainHyper, load_checkpoint,
                    save_checkpoint, train_baseline)
from .selector import (SelectedSet, SelectorError, count_token_stats, read_selected_ids,
                       score_tokens, select_tokens, write_selection_csv)
from .unlearn import (METHODS, GradientMask, UnlearnConfig, UnlearnError, build_mask,
                      load_mask, run_unlearning, save_history, save_mask)

log = logging.getLogger("steu.cli")

USAGE_ERROR = 1
VALIDATION_ERROR = 2

DEFAULTS: dict[str, object] = {
    # corpus generator
    "n_classes": 6,
    "shared_vocab_size": 500,
    "lexicon_size_per_class": 100,
    "lexicon_injection_rate": 0.3,
    "doc_len_min": 20,
    "doc_len_max": 40,
    "label_prevalence": "0.30,0.25,0.25,0.20,0.20,0.15",
    "multi_label_rate": 0.35,
    "n_train": 5000,
    "n_val": 2000,
    # model
    "dim": 64,
    "max_len": 64,
    "n_layers": 2,
    "n_heads": 2,
    "ffn_dim": 256,
    # baseline training
    "lr": 1e-3,
    "epochs": 6,
    "batch_size": 32,
    # unlearning
    "method": "steu",
    "forget_class": 0,
    "k": 64,
    "min_freq": 5,
    "lambda_u": 1.0,
    "lambda_k": 1.0,
    "unlearn_lr": 5e-3,
    "unlearn_epochs": 5,
    "update_head": True,
    "retain_anchor": True,
    "forget_loss_scope": "full",
    # evaluation
    "threshold": 0.5,
    "seed": 7,
}


class CliError(Exception):
    """Validation failure surfaced to the user with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse default exits with 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _parse_config_file(path: Path) -> dict[str, str]:
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value: object) -> object:
    default = DEFAULTS[key]
    if isinstance(value, str):
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise CliError(f"config key {key!r}: expected a boolean, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(value)
        if isinstance(default, float):
            return float(value)
    return value


class RunConfig:
    """Fully resolved key/value view: defaults <- config file <- flags."""

    def __init__(self, args: argparse.Namespace) -> None:
        values = dict(DEFAULTS)
        config_path = getattr(args, "config", None)
        if config_path:
            for key, raw in _parse_config_file(Path(config_path)).items():
                values[key] = _coerce(key, raw)
        for key in DEFAULTS:
            flag = getattr(args, key, None)
            if flag is not None:
                values[key] = _coerce(key, flag)
        self.values = values

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    def generator_spec(self) -> GeneratorSpec:
        prevalence = tuple(float(x) for x in str(self["label_prevalence"]).split(","))
        return GeneratorSpec(
            n_classes=int(self["n_classes"]),
            shared_vocab_size=int(self["shared_vocab_size"]),
            lexicon_size_per_class=int(self["lexicon_size_per_class"]),
            lexicon_injection_rate=float(self["lexicon_injection_rate"]),
            doc_length=(int(self["doc_len_min"]), int(self["doc_len_max"])),
            label_prevalence=prevalence,
            multi_label_rate=float(self["multi_label_rate"]),
            n_train=int(self["n_train"]),
            n_val=int(self["n_val"]),
            seed=int(self["seed"]))

    def model_config(self, vocab_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, dim=int(self["dim"]), max_len=int(self["max_len"]),
            n_layers=int(self["n_layers"]), n_heads=int(self["n_heads"]),
            ffn_dim=int(self["ffn_dim"]), n_classes=n_classes, seed=int(self["seed"]))

    def unlearn_config(self) -> UnlearnConfig:
        return UnlearnConfig(
            method=str(self["method"]), forget_class=int(self["forget_class"]),
            k=int(self["k"]), min_freq=int(self["min_freq"]),
            lambda_u=float(self["lambda_u"]), lambda_k=float(self["lambda_k"]),
            lr=float(self["unlearn_lr"]), epochs=int(self["unlearn_epochs"]),
            batch_size=int(self["batch_size"]), seed=int(self["seed"]),
            update_head=bool(self["update_head"]),
            retain_anchor=bool(self["retain_anchor"]),
            forget_loss_scope=str(self["forget_loss_scope"]))

    def write_sidecar(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values)]
        (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require_file(path: str | Path, hint: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{p} not found; {hint}")
    return p


def _require_dataset(path: str | Path) -> Path:
    return _require_file(Path(path) / "train.jsonl",
                         "run `steu gen-corpus` first").parent


def _compute_selection(dataset, run: RunConfig):
    stats = count_token_stats(dataset, int(run["forget_class"]))
    scores = score_tokens(stats)
    selected = select_tokens(scores, k=int(run["k"]), min_freq=int(run["min_freq"]),
                             forget_class=int(run["forget_class"]))
    return scores, selected


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_corpus(args: argparse.Namespace) -> int:
    run = RunConfig(args)
    spec = run.generator_spec()
    dataset = generate_corpus(spec)
    out = Path(args.out)
    save_dataset(dataset, out)
    run.write_sidecar(out)
    log.info("wrote corpus with %d train / %d val documents to %s",
             len(dataset.train), len(dataset.val), out)
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    run = RunConfig(args)
    dataset = load_dataset(_require_dataset(args.data))
    config = run.model_config(dataset.vocabulary.size, dataset.n_classes)
    hyper = TrainHyper(lr=float(run["lr"]), epochs=int(run["epochs"]),
                       batch_size=int(run["batch_size"]), seed=int(run["seed"]))
    params, metrics = train_baseline(dataset, config, hyper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "theta0.ckpt")
    with open(out / "train_metrics.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_macro_f1\n")
        for m in metrics:
            fh.write(f"{m.epoch},{m.train_loss!r},{m.val_macro_f1!r}\n")
    run.write_sidecar(out)
    log.info("baseline val macro F1: %.4f", metrics[-1].val_macro_f1)
    return 0


def _cmd_select_tokens(args: argparse.Namespace) -> int:
    run = RunConfig(args)
    dataset = load_dataset(_require_dataset(args.data))
    scores, selected = _compute_selection(dataset, run)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_selection_csv(scores, selected, dataset.vocabulary, out)
    run.write_sidecar(out.parent)
    log.info("selected %d tokens for class %d -> %s",
             len(selected.token_ids), selected.forget_class, out)
    return 0


def _cmd_unlearn(args: argparse.Namespace) -> int:
    run = RunConfig(args)
    dataset = load_dataset(_require_dataset(args.data))
    theta0 = load_checkpoint(
        _require_file(args.baseline, "run `steu train` first"))
    config = run.unlearn_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.selection:
        ids = read_selected_ids(_require_file(
            args.selection, "run `steu select-tokens` first"))
        selected = SelectedSet(token_ids=ids, k=len(ids),
                               min_freq=config.min_freq,
                               forget_class=config.forget_class)
    else:
        scores, selected = _compute_selection(dataset, run)
        write_selection_csv(scores, selected, dataset.vocabulary,
                            out / "selection.csv")
    theta_prime, history = run_unlearning(theta0, dataset, selected, config,
                                          threshold=float(run["threshold"]))
    save_checkpoint(theta_prime, out / "theta_prime.ckpt")
    save_history(history, out / "history.csv")
    save_mask(build_mask(selected, config, theta0.config), out / "mask.json")
    run.write_sidecar(out)
    final = history.epochs[-1]
    log.info("%s: forget F1 %.4f, retain avg F1 %.4f after %d epochs",
             config.method, final.forget_f1, final.retain_avg_f1, config.epochs)
    return 0


def _write_metrics_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_eval(args: argparse.Namespace) -> int:
    run = RunConfig(args)
    dataset = load_dataset(_require_dataset(args.data))
    params = load_checkpoint(_require_file(args.ckpt, "no checkpoint to evaluate"))
    c_f = int(run["forget_class"])
    threshold = float(run["threshold"])
    forget_f1, retain_f1 = evaluate.forget_retain_f1(params, dataset.val, c_f, threshold)
    from .corpus import label_matrix
    from .model import predict
    all_metrics = evaluate.per_class_metrics(predict(params, dataset.val, threshold),
                                             label_matrix(dataset.val))
    payload: dict = {
        "method": str(run["method"]),
        "forget_class": c_f,
        "threshold": threshold,
        "forget_f1": forget_f1,
        "retain_avg_f1": retain_f1,
        "macro_f1_all_classes": evaluate.macro_f1(all_metrics),
        "per_class_f1": [m.f1 for m in all_metrics],
        "k": int(run["k"]),
        "update_head": bool(run["update_head"]),
        "total_params": params.total_parameters(),
    }
    if args.baseline_ckpt:
        theta0 = load_checkpoint(_require_file(args.baseline_ckpt,
                                               "run `steu train` first"))
        base_forget, base_retain = evaluate.forget_retain_f1(
            theta0, dataset.val, c_f, threshold)
        payload["forget_base"] = base_forget
        payload["retain_base"] = base_retain
        payload["delta_utility"] = retain_f1 - base_retain
        if args.mask:
            mask = load_mask(_require_file(args.mask, "run `steu unlearn` first"))
            audit = evaluate.param_audit(theta0, params, mask)
            payload["params_updated"] = audit.total_changed
            payload["percent_model"] = audit.total_changed / params.total_parameters()
            payload["audit_passed"] = audit.passed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_metrics_json(out, payload)
    log.info("forget F1 %.4f, retain avg F1 %.4f -> %s", forget_f1, retain_f1, out)
    return 0


def _cmd_audit(args: argparse.Namespace) -> int:
    theta0 = load_checkpoint(_require_file(args.baseline, "run `steu train` first"))
    theta_prime = load_checkpoint(_require_file(args.updated, "run `steu unlearn` first"))
    mask = load_mask(_require_file(args.mask, "run `steu unlearn` first"))
    audit = evaluate.param_audit(theta0, theta_prime, mask)
    lines = [f"{'tensor':32s}  {'changed':>9s}  {'max_abs_diff':>13s}"]
    for t in audit.tensors:
        lines.append(f"{t.name:32s}  {t.changed:9d}  {t.max_abs_diff:13.6e}")
    lines.append(f"total changed entries: {audit.total_changed}")
    lines.append(f"audit: {'PASS' if audit.passed else 'FAIL'}")
    for violation in audit.violations:
        lines.append(f"violation: {violation}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0 if audit.passed else VALIDATION_ERROR


def _report_from_json(path: Path) -> evaluate.UnlearnReport:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    missing = [key for key in ("method", "forget_f1", "retain_avg_f1", "forget_base",
                               "retain_base", "params_updated", "percent_model")
               if key not in payload]
    if missing:
        raise CliError(f"{path}: metrics file missing keys {missing} "
                       "(run `steu eval` with --baseline-ckpt and --mask)")
    return evaluate.UnlearnReport(
        method=payload["method"], forget_base=payload["forget_base"],
        forget_final=payload["forget_f1"], retain_base=payload["retain_base"],
        retain_final=payload["retain_avg_f1"],
        params_updated=payload["params_updated"],
        percent_model=payload["percent_model"],
        k=payload.get("k"), update_head=payload.get("update_head"))


def _cmd_report(args: argparse.Namespace) -> int:
    runs = [_report_from_json(_require_file(p, "run `steu eval` first"))
            for p in args.runs]
    written = evaluate.build_report(runs, args.out)
    for path in written:
        log.info("wrote %s", path)
    print((Path(args.out) / "comparison.txt").read_text(encoding="utf-8"), end="")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    run = RunConfig(args)
    dataset = load_dataset(_require_dataset(args.data))
    theta0 = load_checkpoint(_require_file(args.baseline, "run `steu train` first"))
    base_config = run.unlearn_config()
    threshold = float(run["threshold"])
    base_forget, base_retain = evaluate.forget_retain_f1(
        theta0, dataset.val, base_config.forget_class, threshold)
    total = theta0.total_parameters()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs: list[UnlearnConfig] = []
    if args.grid in ("methods", "both"):
        for method in METHODS:
            if method == "steu_emb_only":
                continue
            jobs.append(UnlearnConfig(
                method=method, forget_class=base_config.forget_class,
                k=base_config.k, min_freq=base_config.min_freq,
                lambda_u=base_config.lambda_u, lambda_k=base_config.lambda_k,
                lr=base_config.lr, epochs=base_config.epochs,
                batch_size=base_config.batch_size, seed=base_config.seed,
                retain_anchor=base_config.retain_anchor,
                forget_loss_scope=base_config.forget_loss_scope))
    if args.grid in ("budget", "both"):
        ks = [int(x) for x in args.ks.split(",")]
        for k in ks:
            for update_head in (False, True):
                jobs.append(UnlearnConfig(
                    method="steu" if update_head else "steu_emb_only",
                    forget_class=base_config.forget_class, k=k,
                    min_freq=base_config.min_freq, lambda_u=base_config.lambda_u,
                    lambda_k=base_config.lambda_k, lr=base_config.lr,
                    epochs=base_config.epochs, batch_size=base_config.batch_size,
                    seed=base_config.seed, update_head=update_head,
                    retain_anchor=base_config.retain_anchor,
                    forget_loss_scope=base_config.forget_loss_scope))

    stats = count_token_stats(dataset, base_config.forget_class)
    scores = score_tokens(stats)
    reports: list[evaluate.UnlearnReport] = []
    seen: set[tuple] = set()
    for config in jobs:
        label = f"{config.method}_k{config.k}" + ("" if config.update_head else "_embonly")
        if label in seen:
            continue
        seen.add(label)
        selected = select_tokens(scores, k=config.k, min_freq=config.min_freq,
                                 forget_class=config.forget_class)
        run_dir = out / label
        run_dir.mkdir(parents=True, exist_ok=True)
        theta_prime, history = run_unlearning(theta0, dataset, selected, config,
                                              threshold=threshold)
        save_checkpoint(theta_prime, run_dir / "theta_prime.ckpt")
        save_history(history, run_dir / "history.csv")
        mask = build_mask(selected, config, theta0.config)
        save_mask(mask, run_dir / "mask.json")
        audit = evaluate.param_audit(theta0, theta_prime, mask)
        if not audit.passed:
            raise CliError(f"{label}: freeze audit failed: {audit.violations}")
        forget_f1, retain_f1 = evaluate.forget_retain_f1(
            theta_prime, dataset.val, config.forget_class, threshold)
        report = evaluate.UnlearnReport(
            method=config.method, forget_base=base_forget, forget_final=forget_f1,
            retain_base=base_retain, retain_final=retain_f1,
            params_updated=audit.total_changed,
            percent_model=audit.total_changed / total,
            k=config.k, update_head=config.update_head)
        reports.append(report)
        _write_metrics_json(run_dir / "metrics.json", {
            "method": config.method, "forget_class": config.forget_class,
            "threshold": threshold, "forget_f1": forget_f1,
            "retain_avg_f1": retain_f1, "forget_base": base_forget,
            "retain_base": base_retain, "delta_utility": retain_f1 - base_retain,
            "params_updated": audit.total_changed,
            "percent_model": audit.total_changed / total,
            "audit_passed": audit.passed, "k": config.k,
            "update_head": config.update_head, "total_params": total})
        log.info("%s: forget %.4f -> %.4f, retain %.4f -> %.4f",
                 label, base_forget, forget_f1, base_retain, retain_f1)
    evaluate.build_report(reports, out)
    run.write_sidecar(out)
    print((out / "comparison.txt").read_text(encoding="utf-8"), end="")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_config_flags(parser: argparse.ArgumentParser, keys: tuple[str, ...]) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    for key in keys:
        flag = "--" + key.replace("_", "-")
        default = DEFAULTS[key]
        if isinstance(default, bool):
            group = parser.add_mutually_exclusive_group()
            group.add_argument(flag, dest=key, action="store_const", const=True)
            group.add_argument("--no-" + key.replace("_", "-"), dest=key,
                               action="store_const", const=False)
        elif isinstance(default, int):
            parser.add_argument(flag, dest=key, type=int)
        elif isinstance(default, float):
            parser.add_argument(flag, dest=key, type=float)
        else:
            parser.add_argument(flag, dest=key, type=str)


_GEN_KEYS = ("n_classes", "shared_vocab_size", "lexicon_size_per_class",
             "lexicon_injection_rate", "doc_len_min", "doc_len_max",
             "label_prevalence", "multi_label_rate", "n_train", "n_val")
_MODEL_KEYS = ("dim", "max_len", "n_layers", "n_heads", "ffn_dim")
_TRAIN_KEYS = _MODEL_KEYS + ("lr", "epochs", "batch_size")
_UNLEARN_KEYS = ("method", "forget_class", "k", "min_freq", "lambda_u", "lambda_k",
                 "unlearn_lr", "unlearn_epochs", "batch_size", "update_head",
                 "retain_anchor", "forget_loss_scope", "threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="steu", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    _add_config_flags(p, _GEN_KEYS)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("train", help="train the baseline classifier")
    _add_config_flags(p, _TRAIN_KEYS)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory for theta0")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("select-tokens", help="rank tokens by the selection score")
    _add_config_flags(p, ("forget_class", "k", "min_freq"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="selection CSV path")
    p.set_defaults(func=_cmd_select_tokens)

    p = sub.add_parser("unlearn", help="run an unlearning method")
    _add_config_flags(p, _UNLEARN_KEYS)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True, help="theta0 checkpoint")
    p.add_argument("--selection", help="selection CSV (recomputed when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_unlearn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    _add_config_flags(p, ("forget_class", "threshold", "method", "k", "update_head"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline-ckpt", help="adds base/delta metrics")
    p.add_argument("--mask", help="adds the parameter audit")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("audit", help="bitwise freeze audit (exit 2 on fail)")
    p.add_argument("--baseline", required=True)
    p.add_argument("--updated", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", help="optional report file")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("report", help="tables and tradeoff CSV from metrics JSONs")
    p.add_argument("--runs", nargs="+", required=True, help="metrics JSON files")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("ablate", help="run the method and budget grids")
    _add_config_flags(p, _UNLEARN_KEYS)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--grid", choices=("methods", "budget", "both"), default="both")
    p.add_argument("--ks", default="64,128,256", help="budget grid token counts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)
    return parser


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("STEU_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args))
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, CorpusError, ModelError, SelectorError, UnlearnError,
            evaluate.EvalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
