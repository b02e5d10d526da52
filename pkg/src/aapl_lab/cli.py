"""Command-line entry point: ``aapl-lab {train,eval,profile,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .data import Dataset, full_plan, generate_dataset, split_base_new
from .encoders import EncoderDims, init_frozen
from .errors import ConfigError, NumericError, VersionError
from .evaluation import (
    EvalReport,
    evaluate_base_to_new,
    evaluate_domain_shift,
    evaluate_transfer,
    export_profile,
    export_report,
    profile_checkpoint,
)
from . import gradcheck
from .training import Checkpoint, run_seeded_ensemble, train_loop

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERSION = 0, 1, 2, 3, 4

METRIC_COLUMNS = ("step", "ce", "adtriplet", "total", "lr")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        w.writerow([row["step"], *(repr(float(row[k])) for k in METRIC_COLUMNS[1:])])
    return buf.getvalue()


def _dataset(exp: cfgmod.ExperimentConfig) -> Dataset:
    return generate_dataset(exp.dataset)


def _plan(exp: cfgmod.ExperimentConfig, ds: Dataset):
    shots = exp.train.shots
    return split_base_new(ds, exp.split_seed, shots) if exp.protocol == "base-to-new" else full_plan(ds, shots)


def _save_checkpoint(ck: Checkpoint, exp: cfgmod.ExperimentConfig, out: Path) -> None:
    ck.experiment = exp.to_dict()
    out.mkdir(parents=True, exist_ok=True)
    ck.save(out / "checkpoint.json")
    _write(out / "metrics.csv", metrics_csv(ck.history))


def cmd_train(args) -> int:
    exp = cfgmod.load(args.config, args.set)
    if args.seeds is not None:
        exp.seeds = args.seeds
    if exp.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "resolved-config.json", cfgmod.dumps(exp))

    ds = _dataset(exp)
    plan = _plan(exp, ds)
    enc = init_frozen(EncoderDims(), exp.encoder_seed, ds.classes)
    if exp.seeds == 1:
        ck = train_loop(exp.train, ds, plan, enc)
        _save_checkpoint(ck, exp, out)
        print(f"trained {exp.train.steps} steps; final metrics {json.dumps(ck.final_metrics, sort_keys=True)}")
        print(f"wrote {out / 'checkpoint.json'}")
        return EXIT_OK

    if exp.protocol != "base-to-new":
        raise ConfigError("--seeds > 1 runs the base-to-new ensemble; set protocol=base-to-new")
    result = run_seeded_ensemble(exp.train, ds, plan, exp.seeds, enc)
    for k, ck in enumerate(result.checkpoints):
        _save_checkpoint(ck, exp, out / f"seed-{k}")
    doc = {"tool_version": __version__, "summary": result.summary, "reports": [r.to_dict() for r in result.reports]}
    _write(out / "ensemble.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    rows = [[f"seed-{k}", *(r.rows[0][c] for c in ("base", "new", "hm"))] for k, r in enumerate(result.reports)]
    rows.append(["mean", *(result.summary[c]["mean"] for c in ("base", "new", "hm"))])
    rows.append(["std", *(result.summary[c]["std"] for c in ("base", "new", "hm"))])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replica", "base", "new", "hm"])
    w.writerows([[r[0], *(repr(float(v)) for v in r[1:])] for r in rows])
    _write(out / "report_ensemble.csv", buf.getvalue())
    s = result.summary
    print(f"{exp.seeds} seeds: base {s['base']['mean']:.2f} new {s['new']['mean']:.2f} hm {s['hm']['mean']:.2f}")
    return EXIT_OK


def _load_checkpoint(path) -> tuple[Checkpoint, cfgmod.ExperimentConfig]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: checkpoint not found")
    try:
        ck = Checkpoint.load(p)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:line {exc.lineno}: not a checkpoint ({exc.msg})") from None
    if ck.tool_version != __version__:
        raise VersionError(f"{p}: checkpoint written by version {ck.tool_version}, this is {__version__}")
    if ck.experiment is None:
        raise ConfigError(f"{p}: checkpoint has no experiment config")
    exp = cfgmod.build(ck.experiment, f"{p}#experiment")
    return ck, exp


EVAL_KEYS = ("protocol", "targets", "shifts", "profile")


def _eval_overrides(exp: cfgmod.ExperimentConfig, overrides: list[str]) -> cfgmod.ExperimentConfig:
    for item in overrides:
        key = item.split("=", 1)[0].strip()
        if key.split(".")[0] not in EVAL_KEYS:
            raise ConfigError(f"--set {item}: only {', '.join(EVAL_KEYS)} can change after training")
    return cfgmod.build(cfgmod.apply_overrides(exp.to_dict(), overrides), "<checkpoint+overrides>")


def run_eval(ck: Checkpoint, exp: cfgmod.ExperimentConfig) -> EvalReport:
    ds = _dataset(exp)
    if exp.protocol == "base-to-new":
        return evaluate_base_to_new(ck, ds, split_base_new(ds, exp.split_seed, exp.train.shots))
    if exp.protocol == "cross-dataset":
        targets = [generate_dataset(t) for t in exp.targets]
        return evaluate_transfer(ck, ds, targets, "cross-dataset")
    return evaluate_domain_shift(ck, ds, list(exp.shifts), exp.dataset.seed)


def cmd_eval(args) -> int:
    ck, exp = _load_checkpoint(args.checkpoint)
    overrides = list(args.set)
    if args.protocol:
        overrides.append(f"protocol={args.protocol}")
    exp = _eval_overrides(exp, overrides)
    report = run_eval(ck, exp)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    for p in export_report(report, out):
        print(f"wrote {p}")
    for row in report.rows:
        print("  " + "  ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_profile(args) -> int:
    ck, exp = _load_checkpoint(args.checkpoint)
    n_points = args.n_points if args.n_points is not None else exp.profile.n_points
    seed = args.seed if args.seed is not None else exp.profile.seed
    if n_points < 2:
        raise ConfigError("--n-points must be >= 2")
    prof = profile_checkpoint(ck, _dataset(exp), n_points, seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    for p in export_profile(prof, out):
        print(f"wrote {p}")
    print(f"mean by-augmentation silhouette: meta {prof.meta_mean:.4f}  delta {prof.delta_mean:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, args.points, args.extended)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  max_rel_error  status")
    for r in results:
        print(f"{r.name:<{width}}  {r.max_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {gradcheck.TOLERANCE:g}")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aapl-lab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a prompt learner and write checkpoint.json + metrics.csv")
    t.add_argument("--config", help="experiment JSON (defaults are used when omitted)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    t.add_argument("--seeds", type=int, help="number of seeded replicas (base-to-new ensemble)")
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation protocol on a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--protocol", choices=cfgmod.PROTOCOLS)
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override targets/shifts")
    e.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="per-augmentation silhouettes and PCA projections of meta/delta tokens")
    p.add_argument("checkpoint")
    p.add_argument("--n-points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=10)
    g.add_argument("--extended", action="store_true", help="also check the objective variants")
    g.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # non-finite values are detected and reported explicitly, so numpy's warnings are noise
        with np.errstate(all="ignore"):
            return args.func(args)
    except VersionError as exc:
        print(f"version error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
