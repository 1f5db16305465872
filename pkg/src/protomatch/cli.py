"""Command-line harness: dataset synthesis, training runs, gradient
verification, and metrics summarization.

Config files are flat `key = value` text under bracketed sections
([dataset], [synth], [train], [run]); lists are comma-separated. The
effective config (after defaults and flag overrides) is echoed into the
output directory so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import datamodel as dm
from . import trainer as tr


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: tr.TrainConfig
    source: str = "synth"  # synth | file
    synth: dm.SynthConfig | None = None
    dataset_path: str | None = None
    out: str | None = None
    folds_parallel: int = 1
    target_subject: int | None = None


_TUPLE_INT_KEYS = {"hidden_widths", "disc_hidden"}
_TUPLE_STR_KEYS = {"ablations"}


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _TUPLE_INT_KEYS:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key in _TUPLE_STR_KEYS:
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _parse_section(parser, section: str, cls):
    """Build a dataclass from one config section with strict key checking."""
    defaults = {f.name: f.default for f in fields(cls)}
    valid = sorted(defaults)
    kwargs = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; valid keys: {', '.join(valid)}"
                )
            kwargs[key] = _coerce(section, key, raw, defaults[key])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    train = _parse_section(parser, "train", tr.TrainConfig)

    source, dataset_path = "synth", None
    if parser.has_section("dataset"):
        for key, raw in parser.items("dataset"):
            if key == "source":
                source = raw.strip()
            elif key == "path":
                dataset_path = raw.strip()
            else:
                raise ConfigError(
                    f"unknown key {key!r} in [dataset]; valid keys: path, source"
                )
    if source not in ("synth", "file"):
        raise ConfigError(f"[dataset] source must be 'synth' or 'file', got {source!r}")
    if source == "file" and not dataset_path:
        raise ConfigError("[dataset] source=file requires a path")

    synth = _parse_section(parser, "synth", dm.SynthConfig) if (
        parser.has_section("synth") or source == "synth"
    ) else None

    out, folds_parallel, target_subject = None, 1, None
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key == "out":
                out = raw.strip()
            elif key == "folds_parallel":
                folds_parallel = int(raw)
            elif key == "target_subject":
                target_subject = int(raw)
            else:
                raise ConfigError(
                    f"unknown key {key!r} in [run]; valid keys: out, "
                    "folds_parallel, target_subject"
                )
    return RunConfig(train=train, source=source, synth=synth,
                     dataset_path=dataset_path, out=out,
                     folds_parallel=folds_parallel, target_subject=target_subject)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def write_effective_config(cfg: RunConfig, path):
    lines = ["[dataset]", f"source = {cfg.source}"]
    if cfg.dataset_path:
        lines.append(f"path = {cfg.dataset_path}")
    if cfg.synth is not None:
        lines.append("")
        lines.append("[synth]")
        for f in fields(dm.SynthConfig):
            lines.append(f"{f.name} = {_format_value(getattr(cfg.synth, f.name))}")
    lines.append("")
    lines.append("[train]")
    for f in fields(tr.TrainConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg.train, f.name))}")
    lines.append("")
    lines.append("[run]")
    if cfg.out:
        lines.append(f"out = {cfg.out}")
    lines.append(f"folds_parallel = {cfg.folds_parallel}")
    if cfg.target_subject is not None:
        lines.append(f"target_subject = {cfg.target_subject}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_or_synthesize(cfg: RunConfig) -> dm.Dataset:
    if cfg.source == "file":
        return dm.load_dataset(cfg.dataset_path)
    return dm.synthesize_dataset(cfg.synth or dm.SynthConfig())


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "ablation", None):
        extra = tuple(v.strip() for v in args.ablation.split(",") if v.strip())
        cfg.train = tr.TrainConfig(**{
            **{f.name: getattr(cfg.train, f.name) for f in fields(tr.TrainConfig)},
            "ablations": tuple(dict.fromkeys(cfg.train.ablations + extra)),
        })
    if getattr(args, "folds_parallel", None) is not None:
        cfg.folds_parallel = args.folds_parallel
    if getattr(args, "target_subject", None) is not None:
        cfg.target_subject = args.target_subject
    if getattr(args, "split_target_k", None) is not None:
        cfg.train = tr.TrainConfig(**{
            **{f.name: getattr(cfg.train, f.name) for f in fields(tr.TrainConfig)},
            "protocol": "split_target",
            "split_k": args.split_target_k,
        })
    return cfg


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = parse_config(args.config)
    if cfg.synth is None:
        raise ConfigError("synth command needs a [synth] section")
    out_path = args.out or cfg.dataset_path
    if not out_path:
        raise ConfigError("no output path: pass --out or set [dataset] path")
    ds = dm.synthesize_dataset(cfg.synth)
    dm.write_dataset(ds, out_path)
    per_class = {}
    per_subject = {}
    for seg in ds.segments:
        per_class[seg.label] = per_class.get(seg.label, 0) + 1
        per_subject[seg.subject] = per_subject.get(seg.subject, 0) + 1
    print(f"wrote {len(ds.segments)} segments to {out_path}")
    print("per-class counts: " + ", ".join(
        f"{k}: {per_class[k]}" for k in sorted(per_class)))
    print("per-subject counts: " + ", ".join(
        f"{k}: {per_subject[k]}" for k in sorted(per_subject)))
    return 0


def cmd_train(args) -> int:
    cfg = apply_overrides(parse_config(args.config), args)
    if not cfg.out:
        raise ConfigError("train needs an output directory (--out or [run] out)")
    dataset = load_or_synthesize(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    write_effective_config(cfg, os.path.join(cfg.out, "effective.cfg"))

    if cfg.target_subject is not None:
        fold_index = list(dataset.subjects).index(cfg.target_subject)
        partition = dm.partition_loso(dataset, cfg.target_subject,
                                      cfg.train.n_labeled_trials)
        fold_dir = os.path.join(cfg.out, f"fold_{cfg.target_subject:02d}")
        try:
            result = tr.train_fold(cfg.train, partition, fold_index, fold_dir)
        except Exception as exc:  # noqa: BLE001 - report and signal via exit code
            print(f"fold {cfg.target_subject} failed: {exc}", file=sys.stderr)
            return 1
        print(f"target_subject {result.target_subject} "
              f"accuracy {100 * result.accuracy:05.2f}")
        return 0

    table = tr.run_loso(cfg.train, dataset, out_dir=cfg.out,
                        parallel=cfg.folds_parallel)
    print(table.summary_text())
    return 1 if table.n_failed else 0


def cmd_gradcheck(args) -> int:
    tolerance = 1e-4
    worst_overall = 0.0
    for seed in range(args.seeds):
        report = tr.gradcheck_suite(seed=seed, h=args.h,
                                    inject_fault=args.inject_fault)
        print(f"seed {seed}")
        for loss_name, per_param in report.items():
            worst = max(per_param.values())
            worst_overall = max(worst_overall, worst)
            print(f"  {loss_name}: worst {worst:.3e}")
            for param in sorted(per_param):
                print(f"    {param}: {per_param[param]:.3e}")
    ok = worst_overall <= tolerance
    print(f"worst relative error {worst_overall:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {tolerance:g})")
    return 0 if ok else 1


def _read_run_dir(run_dir):
    """Collect per-fold summaries and divergence traces from a run directory."""
    summary_path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(summary_path):
        raise ConfigError(f"{run_dir}: missing summary.json (not a finished run?)")
    with open(summary_path, encoding="utf-8") as fh:
        summary = json.load(fh)
    divergences = []
    for name in sorted(os.listdir(run_dir)):
        metrics = os.path.join(run_dir, name, "metrics.jsonl")
        if not os.path.isfile(metrics):
            continue
        trace = []
        with open(metrics, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    raise ConfigError(
                        f"{metrics}: malformed JSON at line {lineno}"
                    ) from None
                if "weighted_divergence" in rec:
                    trace.append(rec["weighted_divergence"])
        if trace:
            divergences.append(trace)
    return summary, divergences


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        summary, divergences = _read_run_dir(run_dir)
        mean, std = summary["mean"], summary["std"]
        print(f"{run_dir}: {100 * mean:05.2f}+-{100 * std:05.2f} "
              f"({len(summary['folds'])} folds, {summary['n_failed']} failed)")
        if divergences:
            first = float(np.mean([t[0] for t in divergences]))
            last = float(np.mean([t[-1] for t in divergences]))
            print(f"  weighted divergence: epoch0 {first:.4f} -> final {last:.4f}")
        rows.append((run_dir, mean))
    if len(rows) > 1:
        base_dir, base_mean = rows[0]
        for run_dir, mean in rows[1:]:
            delta = 100 * (mean - base_mean)
            print(f"delta {run_dir} vs {base_dir}: {delta:+.2f} accuracy points")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomatch",
        description="Semi-supervised multi-domain training harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", help="output CSV path")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train folds per the config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--ablation", help="comma-separated ablation flags")
    p_train.add_argument("--folds-parallel", type=int, dest="folds_parallel")
    p_train.add_argument("--target-subject", type=int, dest="target_subject",
                         help="train a single fold with this target subject")
    p_train.add_argument("--split-target-k", type=int, dest="split_target_k",
                         help="use the held-out-target protocol with K adaptation trials")
    p_train.set_defaults(func=cmd_train)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_grad.add_argument("--seeds", type=int, default=5)
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--inject-fault", action="store_true",
                        help="negate one backward rule; the audit must fail")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_rep = sub.add_parser("report", help="summarize one or more run directories")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, dm.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
