"""Experiment runner.

Subcommands: synth, run, sweep-lambda, ablate-merge, diagnose,
eval-robust, export-csv.  Every run writes a manifest (resolved config,
seeds, content hash of inputs) plus result CSVs; two invocations with
identical config and seeds produce byte-identical outputs.

Config files are flat key = value text; dotted keys or [section]
headers both work, # starts a comment.  Omitted keys take the defaults
(the experiment-table values), unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cil_pipeline import (
    MergeConfig,
    PipelineConfig,
    TrainingConfig,
    read_checkpoint,
    refit_bank,
    run_sequence,
    write_checkpoint,
)
from .class_gaussians import read_bank
from .errors import ValidationError
from .evaluation_metrics import (
    evaluate_robustness,
    write_accuracy_csv,
    write_perturbation_csv,
    write_robustness_csv,
    write_summary_csv,
)
from .feature_store import (
    FeatureDataset,
    TaskEntry,
    TaskSplit,
    generate_synthetic,
    read_features,
    write_features,
    write_manifest,
)
from .lca_align import LcaConfig, align_classifiers
from .rng import stream
from .theory_diagnostics import check_bound_thm1, check_bound_thm2

OUT_ROOT_ENV = "FCIL_OUT_ROOT"

DEFAULT_SWEEP_LAMBDAS = (0.0, 0.01, 0.1, 1.0, 10.0)
ABLATION_METHODS = ("im", "im_ca", "im_lca")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    tasks: int = 10
    classes_per_task: int = 4
    dim: int = 32
    per_class_train: int = 64
    per_class_test: int = 32
    separation: float = 3.0
    within_class_scale: float = 1.0


@dataclass(frozen=True)
class DiagnosticsConfig:
    delta: float = 0.05
    p_min: float = 1e-6
    mc_samples: int = 2000
    tv_samples: int = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Full run configuration; the defaults are the experiment-table values."""

    dataset_source: str = "synthetic"  # "synthetic" or a feature-file path
    dataset_test_source: str = ""  # companion test file ("" derives or splits)
    seeds: tuple[int, ...] = (1993, 1994, 1995)
    synth: SynthSpec = SynthSpec()
    training: TrainingConfig = TrainingConfig()
    merge: MergeConfig = MergeConfig()
    alignment_enabled: bool = True
    alignment: LcaConfig = LcaConfig()
    alignment_schedule: str = "per_task"
    adapter_kind: str = "residual_linear"
    adapter_hidden: int = 32
    adapter_scale: float = 1.0
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    output_dir: str = ""

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            training=self.training,
            merge=self.merge,
            adapter_kind=self.adapter_kind,
            adapter_hidden=self.adapter_hidden,
            adapter_scale=self.adapter_scale,
            alignment=self.alignment if self.alignment_enabled else None,
            alignment_schedule=self.alignment_schedule,
        )


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int(raw: str) -> int:
    return int(raw.strip())


def _parse_float(raw: str) -> float:
    return float(raw.strip())


def _parse_seeds(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty seed list")
    return tuple(int(p) for p in parts)


def _enum(choices: tuple[str, ...]):
    def parse(raw: str) -> str:
        value = raw.strip()
        if value not in choices:
            raise ValueError(f"{value!r} not in allowed set {choices}")
        return value

    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# key -> ((block attr | None, field name), parser)
_SCHEMA = {
    "dataset.source": ((None, "dataset_source"), str.strip),
    "dataset.test_source": ((None, "dataset_test_source"), str.strip),
    "seeds": ((None, "seeds"), _parse_seeds),
    "synth.tasks": (("synth", "tasks"), _parse_int),
    "synth.classes_per_task": (("synth", "classes_per_task"), _parse_int),
    "synth.dim": (("synth", "dim"), _parse_int),
    "synth.per_class_train": (("synth", "per_class_train"), _parse_int),
    "synth.per_class_test": (("synth", "per_class_test"), _parse_int),
    "synth.separation": (("synth", "separation"), _parse_float),
    "synth.within_class_scale": (("synth", "within_class_scale"), _parse_float),
    "training.epochs": (("training", "epochs"), _parse_int),
    "training.batch_size": (("training", "batch_size"), _parse_int),
    "training.lr": (("training", "lr"), _parse_float),
    "training.weight_decay": (("training", "weight_decay"), _parse_float),
    "training.momentum": (("training", "momentum"), _parse_float),
    "training.eta_min": (("training", "eta_min"), _parse_float),
    "merge.operator": (("merge", "operator"), _enum(("max_abs", "max", "min"))),
    "merge.alpha": (("merge", "alpha"), _parse_float),
    "alignment.enabled": ((None, "alignment_enabled"), _parse_bool),
    "alignment.lambda": (("alignment", "lam"), _parse_float),
    "alignment.per_class": (("alignment", "per_class"), _parse_int),
    "alignment.epochs": (("alignment", "epochs"), _parse_int),
    "alignment.batch_size": (("alignment", "batch_size"), _parse_int),
    "alignment.head_subset": (("alignment", "head_subset"), str.strip),
    "alignment.resample": (("alignment", "resample"), _enum(("epoch", "fixed"))),
    "alignment.schedule": ((None, "alignment_schedule"), _enum(("per_task", "final"))),
    "adapter.kind": ((None, "adapter_kind"), _enum(("residual_linear", "residual_mlp"))),
    "adapter.hidden": ((None, "adapter_hidden"), _parse_int),
    "adapter.scale": ((None, "adapter_scale"), _parse_float),
    "diagnostics.delta": (("diagnostics", "delta"), _parse_float),
    "diagnostics.p_min": (("diagnostics", "p_min"), _parse_float),
    "diagnostics.mc_samples": (("diagnostics", "mc_samples"), _parse_int),
    "diagnostics.tv_samples": (("diagnostics", "tv_samples"), _parse_int),
    "output.dir": ((None, "output_dir"), str.strip),
}

_ALIASES = {"lambda": "alignment.lambda"}

_BLOCK_TYPES = {
    "synth": SynthSpec,
    "training": TrainingConfig,
    "merge": MergeConfig,
    "alignment": LcaConfig,
    "diagnostics": DiagnosticsConfig,
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse sectioned key = value text; omitted keys take the defaults."""
    top: dict[str, object] = {}
    blocks: dict[str, dict[str, object]] = {name: {} for name in _BLOCK_TYPES}
    section = ""
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        key = _ALIASES.get(key, key)
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        (block, attr), parser = _SCHEMA[key]
        try:
            value = parser(raw_value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if block is None:
            top[attr] = value
        else:
            blocks[block][attr] = value
    kwargs: dict[str, object] = dict(top)
    for name, cls in _BLOCK_TYPES.items():
        if blocks[name]:
            try:
                kwargs[name] = cls(**blocks[name])
            except ValueError as exc:
                raise ConfigError(f"invalid {name} block: {exc}") from None
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def resolved_text(cfg: ExperimentConfig) -> str:
    """Canonical echo of every key; re-parses to an equal config."""
    lines = []
    for key, ((block, attr), _) in _SCHEMA.items():
        holder = cfg if block is None else getattr(cfg, block)
        lines.append(f"{key} = {_fmt(getattr(holder, attr))}")
    return "\n".join(lines) + "\n"


def parse_config_file(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def parse_synth_overrides(spec: str) -> SynthSpec:
    """Compact synth spec: "tasks=10,classes=4,dim=32,train=64,test=32,sep=3,scale=1"."""
    short = {
        "tasks": ("tasks", _parse_int),
        "classes": ("classes_per_task", _parse_int),
        "dim": ("dim", _parse_int),
        "train": ("per_class_train", _parse_int),
        "test": ("per_class_test", _parse_int),
        "sep": ("separation", _parse_float),
        "scale": ("within_class_scale", _parse_float),
    }
    values = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        key, _, raw = part.partition("=")
        key = key.strip()
        if key not in short:
            raise ConfigError(f"unknown synth key {key!r}; know {sorted(short)}")
        attr, parser = short[key]
        values[attr] = parser(raw)
    return replace(SynthSpec(), **values)


def _split_single_file(dataset: FeatureDataset, test_fraction: float = 0.25) -> TaskSplit:
    """Deterministic per-class split when only one feature file is given:
    the last ceil(fraction * K) rows of each class become test rows."""
    split = TaskSplit()
    tasks = sorted(set(dataset.class_to_task.values()))
    for t in tasks:
        class_ids = tuple(sorted(c for c, ct in dataset.class_to_task.items() if ct == t))
        train_rows = []
        test_rows = []
        for c in class_ids:
            rows = np.flatnonzero(dataset.labels == c)
            n_test = max(1, int(np.ceil(test_fraction * rows.size)))
            if rows.size - n_test < 1:
                raise ValidationError(f"class {c} has too few rows to split")
            train_rows.append(rows[: rows.size - n_test])
            test_rows.append(rows[rows.size - n_test :])
        split.tasks.append(TaskEntry(t, class_ids, np.concatenate(train_rows), np.concatenate(test_rows)))
    return split


def _merge_train_test(train: FeatureDataset, test: FeatureDataset) -> tuple[FeatureDataset, TaskSplit]:
    if train.dim != test.dim:
        raise ValidationError(f"train dim {train.dim} != test dim {test.dim}")
    if train.class_to_task != test.class_to_task:
        raise ValidationError("train and test files disagree on the class/task table")
    merged = FeatureDataset(
        np.concatenate([train.features, test.features]),
        np.concatenate([train.labels, test.labels]),
        np.concatenate([train.task_ids, test.task_ids]),
        dict(train.class_to_task),
    )
    split = TaskSplit()
    offset = train.n_rows
    for t in sorted(set(merged.class_to_task.values())):
        class_ids = tuple(sorted(c for c, ct in merged.class_to_task.items() if ct == t))
        mask_train = np.isin(train.labels, class_ids)
        mask_test = np.isin(test.labels, class_ids)
        split.tasks.append(
            TaskEntry(
                t,
                class_ids,
                np.flatnonzero(mask_train),
                offset + np.flatnonzero(mask_test),
            )
        )
    return merged, split


def load_dataset(cfg: ExperimentConfig, seed: int) -> tuple[FeatureDataset, TaskSplit]:
    if cfg.dataset_source == "synthetic":
        s = cfg.synth
        return generate_synthetic(
            seed,
            s.tasks,
            s.classes_per_task,
            s.dim,
            s.per_class_train,
            s.per_class_test,
            s.separation,
            s.within_class_scale,
        )
    train = read_features(cfg.dataset_source)
    test_path = cfg.dataset_test_source
    if not test_path:
        candidate = cfg.dataset_source.replace(".train.fcil", ".test.fcil")
        if candidate != cfg.dataset_source and Path(candidate).exists():
            test_path = candidate
    if test_path:
        return _merge_train_test(train, read_features(test_path))
    split = _split_single_file(train)
    split.validate(train)
    return train, split


def content_hash(cfg: ExperimentConfig) -> str:
    h = hashlib.sha256()
    if cfg.dataset_source == "synthetic":
        h.update(resolved_text(cfg).encode())
    else:
        h.update(Path(cfg.dataset_source).read_bytes())
        if cfg.dataset_test_source:
            h.update(Path(cfg.dataset_test_source).read_bytes())
    return h.hexdigest()


def write_run_manifest(out: Path, cfg: ExperimentConfig) -> None:
    text = resolved_text(cfg)
    with open(out / "manifest.txt", "w") as fh:
        fh.write(f"fcil {__version__}\n")
        fh.write(f"content_hash = {content_hash(cfg)}\n")
        fh.write(text)


def _csv_writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh)


def _aggregate_rows(values: list[float]) -> list[str]:
    arr = np.asarray(values, dtype=np.float64)
    return [repr(float(arr.mean())), repr(float(arr.std(ddof=0))), repr(float(np.median(arr)))]


def _resolve_out(out: str | None, cfg: ExperimentConfig) -> Path:
    target = out or cfg.output_dir
    if not target:
        raise ConfigError("no output directory: pass --out or set output.dir")
    root = os.environ.get(OUT_ROOT_ENV, "")
    path = Path(target)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_cfg(args) -> ExperimentConfig:
    cfg = parse_config_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "synth", None):
        cfg = replace(cfg, synth=parse_synth_overrides(args.synth), dataset_source="synthetic")
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset_source=args.dataset)
    if getattr(args, "seed", None):
        cfg = replace(cfg, seeds=tuple(args.seed))
    return cfg


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, cfg)
    for seed in cfg.seeds:
        dataset, split = load_dataset(replace(cfg, dataset_source="synthetic"), seed)
        train_rows = np.concatenate([e.train_rows for e in split.tasks])
        test_rows = np.concatenate([e.test_rows for e in split.tasks])
        for tag, rows in (("train", train_rows), ("test", test_rows)):
            part = FeatureDataset(
                dataset.features[rows],
                dataset.labels[rows],
                dataset.task_ids[rows],
                dict(dataset.class_to_task),
            )
            write_features(out / f"synthetic_seed{seed}.{tag}.fcil", part)
        write_manifest(out / f"synthetic_seed{seed}.manifest.txt", dataset)
    write_run_manifest(out, cfg)
    return 0


def _run_one(cfg: ExperimentConfig, seed: int, out: Path | None):
    dataset, split = load_dataset(cfg, seed)
    state, matrix = run_sequence(dataset, split, cfg.pipeline_config(), seed, align_log_dir=out)
    return dataset, split, state, matrix


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, cfg)
    write_run_manifest(out, cfg)
    aa_values = []
    for seed in cfg.seeds:
        _, _, state, matrix = _run_one(cfg, seed, out if args.align_logs else None)
        write_accuracy_csv(out / f"accuracy_matrix_seed{seed}.csv", matrix)
        write_summary_csv(out / f"summary_seed{seed}.csv", matrix)
        write_checkpoint(out / f"checkpoint_seed{seed}.bin", state)
        aa_values.append(matrix.aa)
    fh, writer = _csv_writer(out / "aggregate.csv")
    with fh:
        writer.writerow(["seed", "aa"])
        for seed, aa in zip(cfg.seeds, aa_values):
            writer.writerow([seed, repr(float(aa))])
        writer.writerow(["mean_std_median", *_aggregate_rows(aa_values)])
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, cfg)
    lambdas = tuple(float(x) for x in args.lambdas.split(",")) if args.lambdas else DEFAULT_SWEEP_LAMBDAS
    write_run_manifest(out, cfg)
    fh, writer = _csv_writer(out / "lambda_sweep.csv")
    sfh, swriter = _csv_writer(out / "lambda_summary.csv")
    with fh, sfh:
        writer.writerow(["lambda", "seed", "aa"])
        swriter.writerow(["lambda", "mean", "std", "median"])
        for lam in lambdas:
            sweep_cfg = replace(
                cfg, alignment_enabled=True, alignment=replace(cfg.alignment, lam=lam)
            )
            aa_values = []
            for seed in cfg.seeds:
                _, _, _, matrix = _run_one(sweep_cfg, seed, None)
                writer.writerow([repr(lam), seed, repr(float(matrix.aa))])
                aa_values.append(matrix.aa)
            swriter.writerow([repr(lam), *_aggregate_rows(aa_values)])
    return 0


def method_config(cfg: ExperimentConfig, method: str, operator: str) -> ExperimentConfig:
    """Ablation variants: im (no alignment), im_ca (alignment, lambda 0),
    im_lca (alignment, configured lambda)."""
    if method not in ABLATION_METHODS:
        raise ConfigError(f"unknown method {method!r}; know {ABLATION_METHODS}")
    cfg = replace(cfg, merge=replace(cfg.merge, operator=operator))
    if method == "im":
        return replace(cfg, alignment_enabled=False)
    if method == "im_ca":
        return replace(cfg, alignment_enabled=True, alignment=replace(cfg.alignment, lam=0.0))
    return replace(cfg, alignment_enabled=True)


def cmd_ablate_merge(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, cfg)
    write_run_manifest(out, cfg)
    operators = tuple(args.operators.split(",")) if args.operators else ("min", "max", "max_abs")
    fh, writer = _csv_writer(out / "ablate_merge.csv")
    sfh, swriter = _csv_writer(out / "ablate_merge_summary.csv")
    with fh, sfh:
        writer.writerow(["operator", "method", "seed", "aa"])
        swriter.writerow(["operator", "method", "mean", "std", "median"])
        for operator in operators:
            for method in ABLATION_METHODS:
                variant = method_config(cfg, method, operator)
                aa_values = []
                for seed in cfg.seeds:
                    _, _, _, matrix = _run_one(variant, seed, None)
                    writer.writerow([operator, method, seed, repr(float(matrix.aa))])
                    aa_values.append(matrix.aa)
                swriter.writerow([operator, method, *_aggregate_rows(aa_values)])
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, cfg)
    write_run_manifest(out, cfg)
    diag = cfg.diagnostics
    fh, writer = _csv_writer(out / "bounds.csv")
    with fh:
        writer.writerow(
            [
                "seed",
                "theorem",
                "measured",
                "training",
                "robustness",
                "uncertainty",
                "tv",
                "tv_se",
                "l_max",
                "delta",
                "n",
                "classes",
                "rhs",
                "holds",
            ]
        )
        for seed in cfg.seeds:
            dataset, split, state, _ = _run_one(cfg, seed, None)
            # a final fixed-sample alignment pass; its draw is the theorem's D
            fixed = replace(cfg.alignment, resample="fixed")
            d_feats, d_labels = align_classifiers(
                state, fixed, cfg.training, stream(seed, "diagnose-align")
            )
            rep1 = check_bound_thm1(
                state.classifier,
                state.bank,
                d_feats,
                d_labels,
                diag.delta,
                stream(seed, "diagnose-thm1"),
                p_min=diag.p_min,
                mc_test_per_class=diag.mc_samples,
            )
            writer.writerow(
                [
                    seed,
                    "thm1",
                    repr(rep1.measured),
                    repr(rep1.training),
                    repr(rep1.robustness_term),
                    repr(rep1.uncertainty),
                    "",
                    "",
                    repr(rep1.l_max),
                    repr(rep1.delta),
                    rep1.n,
                    rep1.class_count,
                    repr(rep1.rhs),
                    rep1.holds,
                ]
            )
            bank_now = refit_bank(state, dataset, split)
            rep2 = check_bound_thm2(
                state.classifier,
                bank_now,
                state.bank,
                d_feats,
                d_labels,
                diag.delta,
                stream(seed, "diagnose-thm2"),
                p_min=diag.p_min,
                mc_test_per_class=diag.mc_samples,
                tv_samples=diag.tv_samples,
            )
            writer.writerow(
                [
                    seed,
                    "thm2",
                    repr(rep2.measured),
                    repr(rep2.training),
                    repr(rep2.robustness_term),
                    repr(rep2.uncertainty),
                    repr(rep2.tv),
                    repr(rep2.tv_standard_error),
                    repr(rep2.l_max),
                    repr(rep2.delta),
                    rep2.n,
                    rep2.class_count,
                    repr(rep2.rhs),
                    rep2.holds,
                ]
            )
    return 0


def cmd_eval_robust(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args.out, cfg)
    write_run_manifest(out, cfg)
    fh, writer = _csv_writer(out / "robustness_aggregate.csv")
    with fh:
        writer.writerow(["seed", "clean", "acc_c", "acc_p", "robustness", "severity5"])
        rows = []
        for seed in cfg.seeds:
            dataset, split, state, _ = _run_one(cfg, seed, None)
            test_rows = np.concatenate([e.test_rows for e in split.tasks])
            report = evaluate_robustness(
                state, dataset.features[test_rows], dataset.labels[test_rows], seed
            )
            write_robustness_csv(out / f"robustness_seed{seed}.csv", report)
            write_perturbation_csv(out / f"perturbation_seed{seed}.csv", report)
            writer.writerow(
                [
                    seed,
                    repr(report.clean_accuracy),
                    repr(report.acc_c),
                    repr(report.acc_p),
                    repr(report.score),
                    repr(report.severity5_accuracy),
                ]
            )
            rows.append(report)
    return 0


def cmd_export_csv(args) -> int:
    out = _resolve_out(args.out, ExperimentConfig(output_dir="."))
    did_anything = False
    if args.dataset:
        dataset = read_features(args.dataset)
        write_manifest(out / "dataset_manifest.txt", dataset)
        fh, writer = _csv_writer(out / "dataset_rows.csv")
        with fh:
            writer.writerow(["row", "label", "task"])
            for i, (label, task) in enumerate(zip(dataset.labels, dataset.task_ids)):
                writer.writerow([i, int(label), int(task)])
        did_anything = True
    if args.bank:
        bank = read_bank(args.bank)
        fh, writer = _csv_writer(out / "bank_stats.csv")
        with fh:
            writer.writerow(["class", "count", "mean_norm", "cov_trace"])
            for c in sorted(bank.class_ids()):
                g = bank[c]
                writer.writerow(
                    [c, g.count, repr(float(np.linalg.norm(g.mean))), repr(float(np.trace(g.cov)))]
                )
        did_anything = True
    if args.checkpoint:
        state = read_checkpoint(args.checkpoint)
        fh, writer = _csv_writer(out / "checkpoint_summary.csv")
        with fh:
            writer.writerow(["field", "value"])
            writer.writerow(["task_cursor", state.task_cursor])
            writer.writerow(["heads", len(state.classifier.heads)])
            writer.writerow(["classes", state.classifier.n_classes])
            writer.writerow(["adapter_kind", state.adapter_spec.kind])
            writer.writerow(["adapter_dim", state.adapter_spec.dim])
            writer.writerow(["merged_tasks", state.merge.merged_count])
        did_anything = True
    if not did_anything:
        raise ConfigError("export-csv: pass at least one of --dataset, --bank, --checkpoint")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcil", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fcil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset_flags=True):
        p.add_argument("--config", help="config file path")
        p.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
        p.add_argument("--out", help="output directory")
        if dataset_flags:
            p.add_argument("--dataset", help="feature file (overrides config)")
            p.add_argument("--synth", help="synthetic spec, e.g. tasks=10,classes=4,dim=32")

    p = sub.add_parser("synth", help="generate synthetic feature files")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("run", help="run the incremental pipeline per seed")
    common(p)
    p.add_argument("--align-logs", action="store_true", help="write per-epoch alignment CSVs")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep-lambda", help="AA versus the dispersion weight")
    common(p)
    p.add_argument("--lambdas", help="comma list, default 0,0.01,0.1,1,10")
    p.set_defaults(fn=cmd_sweep_lambda)

    p = sub.add_parser("ablate-merge", help="merge-operator x alignment-method grid")
    common(p)
    p.add_argument("--operators", help="comma list, default min,max,max_abs")
    p.set_defaults(fn=cmd_ablate_merge)

    p = sub.add_parser("diagnose", help="generalization-bound reports")
    common(p)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("eval-robust", help="corruption/perturbation robustness")
    common(p)
    p.set_defaults(fn=cmd_eval_robust)

    p = sub.add_parser("export-csv", help="dump binary artifacts as CSV")
    p.add_argument("--dataset")
    p.add_argument("--bank")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_export_csv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
