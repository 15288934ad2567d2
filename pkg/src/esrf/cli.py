"""Batch experiment runner.

Usage::

    python -m esrf run --config experiment.conf [--fold N | --all-folds]
        [--cold-start] [--ablation NAME] [--model esrf|bpr|lightgcn|random]
        [--sweep key=v1,v2,... | --sweep key=a..b[:step]] [--export-diagnostics]
        [--seed N] [--deterministic] [--set key=value ...]

The config file holds one ``key = value`` per line; ``#`` starts a comment.
Relative paths resolve against the config file's directory.

Dataset and protocol keys:

    ratings             path to ``user<TAB>item[<TAB>weight]`` records (required)
    trust               path to ``truster<TAB>trustee`` records (required)
    format              tsv (the only format)
    rating_threshold    keep rows whose weight is strictly greater (default: keep all)
    skip_header         true to drop the first data line of each file (default false)
    folds               cross-validation fold count (default 5)
    fold                fold index or ``all`` (default 0)
    repeats             independent re-splits with seeds seed, seed+1, ... (default 1)
    val_fraction        share of each user's training positives held out for early stopping (default 0.1)
    cold_start          true to train and evaluate on cold-start users only (default false)
    cold_threshold      cold-start users have strictly fewer training records than this (default 20)
    model               esrf | bpr | lightgcn | random (default esrf)
    ablation            comma list of no-motif, no-denoise, no-attention, no-adversarial
    sweep               ``key=list`` or ``key=a..b[:step]`` over a training key
    output_dir          run directory; relative values sit under $ESRF_OUTPUT_ROOT (default ./runs)
    export_diagnostics  true to write attention / overlap / ego-network exports (default false)
    diagnostics_sample  users sampled for the heatmap and ego networks (default 20)
    deterministic       true to pin BLAS to one thread (default false)
    seed                root seed for splits, initialisation and sampling (default 0)

Every other key is a training hyperparameter (``dim``, ``layers``, ``k``,
``tau``, ``beta``, ``reg``, ``learning_rate``, ``batch_size``, epochs, ...).

Exit status: 0 success, 2 bad configuration or input, 3 training aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import MfModel, train_bpr_mf
from .data import (
    SocialDataset,
    cold_start_filter,
    holdout_split,
    kfold_split,
    load_dataset,
    write_split_manifest,
)
from .diagnostics import export_diagnostics
from .errors import ConfigError, InputError, ParseError, TrainingAborted
from .evaluation import MetricsReport, evaluate_split
from .trainer import Trainer, TrainingConfig, TrainingHistory, save_checkpoint

log = logging.getLogger("esrf")

OUTPUT_ROOT_ENV = "ESRF_OUTPUT_ROOT"
MODELS = ("esrf", "bpr", "lightgcn", "random")
ABLATIONS = {
    "no-motif": "no_motif",
    "no-denoise": "no_denoise",
    "no-attention": "no_attention",
    "no-adversarial": "no_adversarial",
}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


# -- config -------------------------------------------------------------------
def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to a dict of raw strings; later keys win."""
    raw = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        raw[key.strip()] = value.strip()
    return raw


def _to_bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _coerce(key: str, text: str, kind: str):
    optional = kind.startswith("Optional[")
    base = kind[len("Optional[") : -1] if optional else kind
    if optional and text.strip().lower() in ("", "none"):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {base}, got {text!r}") from None
    if base == "bool":
        return _to_bool(text, key)
    return text.strip()


TRAINING_TYPES = TrainingConfig.field_types()


def coerce_training(key: str, text: str):
    if key not in TRAINING_TYPES:
        raise ConfigError(f"unknown training key {key!r}")
    return _coerce(key, text, TRAINING_TYPES[key])


def parse_sweep(spec: str) -> tuple[str, list]:
    """``k=10,20`` or ``beta=0.1..0.9`` (step from the finest endpoint decimal) or ``a..b:step``."""
    key, sep, values = spec.partition("=")
    key = key.strip()
    if not sep or not values.strip():
        raise ConfigError(f"sweep {spec!r}: expected key=values")
    match = re.fullmatch(r"\s*([-+0-9.eE]+)\.\.([-+0-9.eE]+)(?::([-+0-9.eE]+))?\s*", values)
    if match:
        lo_text, hi_text, step_text = match.groups()
        decimals = max(len(t.split(".")[1]) if "." in t else 0 for t in (lo_text, hi_text, step_text or "0"))
        try:
            lo, hi = float(lo_text), float(hi_text)
            step = float(step_text) if step_text else 10.0**-decimals
        except ValueError:
            raise ConfigError(f"sweep {spec!r}: bad range") from None
        if step <= 0 or hi < lo:
            raise ConfigError(f"sweep {spec!r}: empty range")
        count = int(np.floor((hi - lo) / step + 1e-9)) + 1
        texts = [f"{lo + i * step:.{decimals}f}" for i in range(count)]
    else:
        texts = [t.strip() for t in values.split(",") if t.strip()]
    if not texts:
        raise ConfigError(f"sweep {spec!r}: no values")
    return key, [coerce_training(key, t) for t in texts]


@dataclass
class ExperimentConfig:
    ratings: Path
    trust: Path
    training: TrainingConfig
    rating_threshold: Optional[float] = None
    skip_header: bool = False
    folds: int = 5
    fold: Optional[int] = 0  # None means every fold
    repeats: int = 1
    val_fraction: float = 0.1
    cold_start: bool = False
    cold_threshold: int = 20
    model: str = "esrf"
    ablations: tuple = ()
    sweep: Optional[tuple] = None  # (key, values)
    output_dir: Path = Path("runs")
    export_diagnostics: bool = False
    diagnostics_sample: int = 20
    deterministic: bool = False
    seed: int = 0

    def fold_indices(self) -> list:
        return list(range(self.folds)) if self.fold is None else [self.fold]


def build_experiment(raw: dict, base_dir: Path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate raw config strings (plus parsed CLI overrides) into an :class:`ExperimentConfig`."""
    raw = dict(raw)
    overrides = dict(overrides or {})
    for key, value in overrides.pop("set", {}).items():
        raw[key] = value

    def take(key, default=None):
        return raw.pop(key, default)

    def path_key(key):
        text = take(key)
        if text is None:
            raise ConfigError(f"missing required key {key!r}")
        path = Path(text)
        path = path if path.is_absolute() else base_dir / path
        if not path.is_file():
            raise ConfigError(f"{key}: file not found: {path}")
        return path

    ratings, trust = path_key("ratings"), path_key("trust")
    fmt = take("format", "tsv").lower()
    if fmt != "tsv":
        raise ConfigError(f"format: only 'tsv' is supported, got {fmt!r}")
    threshold = take("rating_threshold")
    threshold = None if threshold in (None, "", "none") else _coerce("rating_threshold", threshold, "float")
    skip_header = _to_bool(take("skip_header", "false"), "skip_header")
    folds = _coerce("folds", take("folds", "5"), "int")
    fold_text = take("fold", "0")
    fold = None if fold_text.lower() == "all" else _coerce("fold", fold_text, "int")
    repeats = _coerce("repeats", take("repeats", "1"), "int")
    val_fraction = _coerce("val_fraction", take("val_fraction", "0.1"), "float")
    cold = _to_bool(take("cold_start", "false"), "cold_start")
    cold_threshold = _coerce("cold_threshold", take("cold_threshold", "20"), "int")
    model = take("model", "esrf").lower()
    ablation_text = take("ablation", "")
    ablations = [a.strip() for a in ablation_text.split(",") if a.strip() and a.strip() != "none"]
    sweep_text = take("sweep")
    out_text = take("output_dir")
    export = _to_bool(take("export_diagnostics", "false"), "export_diagnostics")
    sample = _coerce("diagnostics_sample", take("diagnostics_sample", "20"), "int")
    deterministic = _to_bool(take("deterministic", "false"), "deterministic")
    seed = _coerce("seed", take("seed", "0"), "int")

    if "fold" in overrides:
        fold = overrides["fold"]
    if overrides.get("cold_start"):
        cold = True
    if overrides.get("model"):
        model = overrides["model"]
    ablations += overrides.get("ablations", [])
    if overrides.get("sweep"):
        sweep_text = overrides["sweep"]
    if overrides.get("export_diagnostics"):
        export = True
    if overrides.get("deterministic"):
        deterministic = True
    if overrides.get("seed") is not None:
        seed = overrides["seed"]

    training = {key: coerce_training(key, value) for key, value in raw.items()}
    training["seed"] = seed
    for name in ablations:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        training[ABLATIONS[name]] = True
    if model not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}, got {model!r}")
    if model == "random":
        training["random_neighbors"] = True
        training["no_adversarial"] = True
    cfg = TrainingConfig(**training).validate()
    sweep = None
    if sweep_text:
        key, values = parse_sweep(sweep_text)
        for value in values:
            replace(cfg, **{key: value}).validate()
        sweep = (key, tuple(values))

    if folds < 2:
        raise ConfigError("folds must be at least 2")
    if fold is not None and not 0 <= fold < folds:
        raise ConfigError(f"fold {fold} outside 0..{folds - 1}")
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    if cold_threshold < 1:
        raise ConfigError("cold_threshold must be at least 1")
    if sample < 1:
        raise ConfigError("diagnostics_sample must be at least 1")
    if export and model in ("bpr", "lightgcn"):
        raise ConfigError(f"diagnostics need alternative neighbourhoods; model {model!r} has none")

    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    if overrides.get("output_dir"):
        out = Path(overrides["output_dir"])
    elif out_text:
        out = Path(out_text)
        out = out if out.is_absolute() else root / out
    else:
        out = root / "experiment"
    return ExperimentConfig(
        ratings=ratings,
        trust=trust,
        training=cfg,
        rating_threshold=threshold,
        skip_header=skip_header,
        folds=folds,
        fold=fold,
        repeats=repeats,
        val_fraction=val_fraction,
        cold_start=cold,
        cold_threshold=cold_threshold,
        model=model,
        ablations=tuple(ablations),
        sweep=sweep,
        output_dir=out,
        export_diagnostics=export,
        diagnostics_sample=sample,
        deterministic=deterministic,
        seed=seed,
    )


def load_experiment(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return build_experiment(parse_config_text(text, str(path)), path.parent, overrides)


# -- reports ------------------------------------------------------------------
@dataclass(frozen=True)
class ResultRow:
    model: str
    report: MetricsReport
    seed: int
    fold: str


def _mean_rows(rows: Sequence[ResultRow]) -> list:
    """One averaged row per (model, mode, seed) group spanning several folds."""
    groups = {}
    for row in rows:
        groups.setdefault((row.model, row.report.mode, row.seed), []).append(row)
    out = []
    for (model, mode, seed), members in groups.items():
        if len(members) < 2:
            continue
        reports = [m.report for m in members]
        mean = MetricsReport(
            float(np.mean([r.precision for r in reports])),
            float(np.mean([r.recall for r in reports])),
            float(np.mean([r.ndcg for r in reports])),
            reports[0].n,
            int(sum(r.user_count for r in reports)),
            mode,
        )
        out.append(ResultRow(model, mean, seed, "mean"))
    return out


def format_rows(rows: Sequence[ResultRow]) -> tuple[list, list]:
    """Header and cell strings: percent with 3 decimals, NDCG with 5."""
    if not rows:
        raise InputError("no results to report")
    n = rows[0].report.n
    header = ["model", "mode", f"Prec@{n}", f"Recall@{n}", f"NDCG@{n}", "seed", "fold"]
    cells = [
        [
            r.model,
            r.report.mode,
            f"{100 * r.report.precision:.3f}",
            f"{100 * r.report.recall:.3f}",
            f"{r.report.ndcg:.5f}",
            str(r.seed),
            r.fold,
        ]
        for r in rows
    ]
    return header, cells


def emit_report(rows: Sequence[ResultRow], out_dir, root_seed: int, with_means: bool = True) -> tuple[Path, Path]:
    """Write ``report.tsv`` and ``report.md``; fold means are appended when folds repeat."""
    rows = list(rows) + (_mean_rows(rows) if with_means else [])
    header, cells = format_rows(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tsv, md = out / "report.tsv", out / "report.md"
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={root_seed}\n")
        fh.write("\t".join(header) + "\n")
        for row in cells:
            fh.write("\t".join(row) + "\n")
    with open(md, "w", encoding="utf-8") as fh:
        fh.write(f"Root seed: {root_seed}. Precision and recall in percent.\n\n")
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "|".join("---" for _ in header) + "|\n")
        for row in cells:
            fh.write("| " + " | ".join(row) + " |\n")
    return tsv, md


# -- orchestration ------------------------------------------------------------
def _slug(text: str) -> str:
    return re.sub(r"_+", "_", re.sub(r"[^A-Za-z0-9_.=-]+", "_", text))


def model_label(exp: ExperimentConfig, sweep_value=None) -> str:
    label = exp.model + "".join(f"-{a}" for a in exp.ablations)
    if exp.sweep is not None:
        label += f"[{exp.sweep[0]}={sweep_value}]"
    return label


def _write_history(history: TrainingHistory, path: Path, root_seed: int) -> None:
    path.write_text(f"# seed={root_seed}\n" + history.to_tsv(), encoding="utf-8")


def _save_mf(path: Path, model: MfModel, cfg: TrainingConfig) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.array(1),
            config=np.array(json.dumps(asdict(cfg), sort_keys=True)),
            trained=np.array(model.trained),
            **model.arrays(),
        )


@dataclass
class RunContext:
    exp: ExperimentConfig
    data: SocialDataset
    rows: list = field(default_factory=list)


def _train_one(ctx: RunContext, cfg: TrainingConfig, fit, val, run_id: str):
    out = ctx.exp.output_dir
    history_path = out / f"history_{run_id}.tsv"
    if ctx.exp.model == "bpr":
        model, history = train_bpr_mf(fit, cfg, val)
        _write_history(history, history_path, ctx.exp.seed)
        _save_mf(out / f"checkpoint_{run_id}.npz", model, cfg)
        return model, model.scorer()
    use_generator = ctx.exp.model != "lightgcn"
    trainer = Trainer(fit, ctx.data.social if use_generator else None, cfg, val, use_generator=use_generator)
    try:
        if use_generator:
            model, history = trainer.run()
        else:
            trainer.fit_discriminator(cfg.baseline_epochs)
            trainer.model.trained = True
            model, history = trainer.model, trainer.history
    finally:
        _write_history(trainer.history, history_path, ctx.exp.seed)
    save_checkpoint(out / f"checkpoint_{run_id}.npz", model)
    return model, model.scorer()


def run_experiment(exp: ExperimentConfig) -> list:
    """Load, split, train, evaluate and write every artifact; returns the report rows."""
    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(exp.ratings, exp.trust, exp.rating_threshold, skip_header=exp.skip_header)
    log.info("loaded %d users, %d items, %d positives, %d ties",
             data.n_users, data.n_items, len(data.feedback), data.social.s.nnz)
    ctx = RunContext(exp, data)
    sweep_values = exp.sweep[1] if exp.sweep else (None,)
    mode = "cold_start" if exp.cold_start else "general"
    for repeat in range(exp.repeats):
        seed = exp.seed + repeat
        plan = kfold_split(data.feedback, exp.folds, seed)
        write_split_manifest(data.feedback, plan, out / f"split_r{repeat}.tsv")
        for fold in exp.fold_indices():
            train_fold, test = plan.train_test(data.feedback, fold)
            eval_users = None
            if exp.cold_start:
                train_fold = cold_start_filter(train_fold, exp.cold_threshold)
                eval_users = np.unique(train_fold.positives[:, 0])
            if exp.val_fraction > 0:
                fit, val = holdout_split(train_fold, exp.val_fraction, seed)
                val = val if len(val) else None
            else:
                fit, val = train_fold, None
            for value in sweep_values:
                cfg = replace(exp.training, seed=seed)
                if exp.sweep is not None:
                    cfg = replace(cfg, **{exp.sweep[0]: value}).validate()
                label = model_label(exp, value)
                run_id = _slug(f"{label}_{mode}_r{repeat}_f{fold}")
                log.info("run %s", run_id)
                model, scorer = _train_one(ctx, cfg, fit, val, run_id)
                report = evaluate_split(scorer, train_fold, test, n=cfg.eval_n, mode=mode, users=eval_users)
                ctx.rows.append(ResultRow(label, report, seed, str(fold)))
                emit_report(ctx.rows, out, exp.seed)
                log.info("%s Prec@%d %.5f", run_id, report.n, report.precision)
                if exp.export_diagnostics:
                    export_diagnostics(
                        model,
                        data.social.s,
                        out / f"diagnostics_{run_id}",
                        sample=exp.diagnostics_sample,
                        seed=seed,
                        user_labels=data.feedback.user_labels,
                        header=f"seed={exp.seed}",
                    )
    return ctx.rows


# -- entry point ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esrf", description="Social recommendation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment described by a config file")
    run.add_argument("--config", required=True, help="key = value experiment file")
    folds = run.add_mutually_exclusive_group()
    folds.add_argument("--fold", type=int, help="single fold index")
    folds.add_argument("--all-folds", action="store_true", help="run every fold")
    run.add_argument("--cold-start", action="store_true", help="train and evaluate on cold-start users")
    run.add_argument("--ablation", action="append", default=[], choices=sorted(ABLATIONS))
    run.add_argument("--model", choices=MODELS)
    run.add_argument("--sweep", help="key=v1,v2,... or key=a..b[:step]")
    run.add_argument("--export-diagnostics", action="store_true")
    run.add_argument("--seed", type=int)
    run.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    run.add_argument("--output-dir", help="overrides output_dir and the output root")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return parser


def _overrides(args) -> dict:
    sets = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        sets[key.strip()] = value.strip()
    out = {
        "set": sets,
        "cold_start": args.cold_start,
        "model": args.model,
        "ablations": list(args.ablation),
        "sweep": args.sweep,
        "export_diagnostics": args.export_diagnostics,
        "deterministic": args.deterministic,
        "seed": args.seed,
        "output_dir": args.output_dir,
    }
    if args.all_folds:
        out["fold"] = None
    elif args.fold is not None:
        out["fold"] = args.fold
    return out


def pin_threads() -> None:
    for name in THREAD_VARS:
        os.environ[name] = "1"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        exp = load_experiment(args.config, _overrides(args))
        if exp.deterministic:
            pin_threads()
        rows = run_experiment(exp)
    except (ConfigError, InputError, ParseError) as exc:
        print(f"esrf: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"esrf: training aborted: {exc}", file=sys.stderr)
        return 3
    header, cells = format_rows(rows)
    print("\t".join(header))
    for row in cells:
        print("\t".join(row))
    return 0
