"""Command-line driver: ``cbdistill {synth,train,ablate,suite,report}``.

Exit codes: 0 success, 1 numerical abort, 2 usage or configuration error.
Logs go to stderr; machine-readable results go to files under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import RunConfig, default_composition, load_config
from .data import ConfigError, DatasetParseError, DatasetValidationError, LongTailProfile
from .eval import CSV_HEADER, EvalReport, emit_report, read_json_report
from .experiment import load_data, run
from .model import save_model
from .train import METHODS, TrainingDiverged

log = logging.getLogger("cbdistill")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

ALPHA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
BETA_GRID = (1.0, 10.0, 100.0, 1000.0)
K_GRID = (1, 2, 3, 4)
# one row per ensemble in the teacher-ensemble ablation table, K = 1..4
COMPOSITION_GRID = (
    ("standard",), ("data_aug",),
    ("standard", "standard"), ("data_aug", "data_aug"), ("standard", "data_aug"),
    ("standard", "data_aug", "data_aug"),
    ("standard", "standard", "data_aug", "data_aug"),
)
SUITE_METHODS = ("instance", "class_balanced", "crt", "finetune", "cbd", "cbd_k")
METRICS = CSV_HEADER[2:]


class UsageError(Exception):
    pass


# --- file helpers --------------------------------------------------------

def atomic_write(path: Path, text: str) -> None:
    """Write to ``<path>.partial`` then rename, so readers never see half a file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_report(r: EvalReport, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for fmt in ("json", "csv"):
        tmp = out / f"{stem}.{fmt}.partial"
        emit_report(r, fmt, tmp)
        os.replace(tmp, out / f"{stem}.{fmt}")


def aggregate(reports: list[EvalReport]) -> list[list]:
    """Per-method mean and sample std (0 for a single run) of every metric."""
    by_method: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method, rs in by_method.items():
        row = [method, len(rs)]
        for m in METRICS:
            vals = [getattr(r, m) for r in rs if getattr(r, m) is not None]
            if not vals:
                row += ["", ""]
                continue
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            row += [repr(float(np.mean(vals))), repr(std)]
        rows.append(row)
    return rows


AGG_HEADER = ["method", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]


# --- subcommands ---------------------------------------------------------

def cmd_synth(args) -> int:
    profile = LongTailProfile(num_classes=args.classes, head_count=args.head,
                              tail_count=args.tail, decay=args.decay, zipf_s=args.zipf_s,
                              feature_dim=args.dim, class_separation=args.separation,
                              noise_sigma=args.noise, seed=args.seed,
                              test_per_class=args.test_per_class)
    try:
        train, test = data_mod.synthesize(profile)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, d in (("train", train), ("test", test)):
        tmp = out / f"{name}.csv.partial"
        data_mod.save(d, tmp)
        os.replace(tmp, out / f"{name}.csv")
    print(f"classes={train.num_classes} train={len(train)} test={len(test)}")
    print("train counts: " + " ".join(str(int(n)) for n in train.class_counts))
    return EXIT_OK


def _config(args, extra: list[str] = ()) -> RunConfig:
    return load_config(args.config, list(args.set or []) + list(extra))


def cmd_train(args) -> int:
    cfg = _config(args)
    train, test = load_data(cfg)
    outcome = run(cfg, train, test, jobs=args.jobs)
    out = Path(args.out)
    write_report(outcome.report, out, "report")
    digest = cfg.digest()
    if outcome.model is not None:
        save_model(outcome.model, out / "model.npz", digest)
    for k, t in enumerate(outcome.teachers):
        save_model(t, out / f"teacher_{k}.npz", digest)
    log.info("%s", outcome.report.summary())
    print(json.dumps(outcome.report.to_dict()))
    return EXIT_OK


def _sweep_points(axis: str, grid: list[str] | None, modes: list[str]):
    """Yield (swept value label, mode label, config overrides) triples."""
    if axis == "alpha":
        values = [float(v) for v in grid] if grid else ALPHA_GRID
        for mode in modes:
            for a in values:
                yield a, mode, [f"method='cbd'", f"alpha={a!r}", f"distill_mode='{mode}'"]
    elif axis == "beta":
        values = [float(v) for v in grid] if grid else BETA_GRID
        for b in values:
            yield b, "feature", ["method='cbd'", f"beta={b!r}", "distill_mode='feature'"]
    elif axis == "K":
        values = [int(v) for v in grid] if grid else K_GRID
        for K in values:
            types = default_composition(K)
            yield K, "ensemble", ["method='cbd_k'", f"K={K}", f"teacher_types={json.dumps(types)}"]
    else:
        comps = [tuple(v.split("+")) for v in grid] if grid else COMPOSITION_GRID
        for comp in comps:
            yield ("+".join(comp), "ensemble",
                   ["method='cbd_k'", f"K={len(comp)}", f"teacher_types={json.dumps(list(comp))}"])


def cmd_ablate(args) -> int:
    axes = [a for item in args.axis for a in item.split(",") if a]
    if len(axes) != 1:
        raise UsageError(f"ablate sweeps exactly one axis, got {axes or 'none'}")
    axis = axes[0]
    if axis not in ("alpha", "beta", "K", "ensemble_composition"):
        raise UsageError(f"unknown sweep axis {axis!r}")
    modes = args.modes.split(",") if args.modes else ["feature"]
    bad = [m for m in modes if m not in ("feature", "classifier", "hybrid")]
    if bad:
        raise UsageError(f"alpha sweeps support feature/classifier/hybrid modes, got {bad}")
    grid = args.grid.split(",") if args.grid else None
    base = _config(args)
    train, test = load_data(base)
    cache: dict = {}
    rows = []
    for value, mode, overrides in _sweep_points(axis, grid, modes):
        cfg = _config(args, overrides)
        r = run(cfg, train, test, cache=cache, jobs=args.jobs).report
        log.info("%s=%s %s", axis, value, r.summary())
        rows.append([value, mode] + r.csv_row())
    out = Path(args.out)
    atomic_write(out / f"sweep_{axis}.csv", csv_text([axis, "distill_mode", *CSV_HEADER], rows))
    return EXIT_OK


def cmd_suite(args) -> int:
    methods = args.methods.split(",") if args.methods else list(SUITE_METHODS)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}")
    if not args.seeds:
        raise UsageError("suite needs at least one seed")
    base = _config(args)
    train, test = load_data(base)
    out = Path(args.out)
    caches: dict[int, dict] = {s: {} for s in args.seeds}

    def one(pair):
        method, seed = pair
        cfg = replace(base, method=method, seed=seed).validate()
        r = run(cfg, train, test, cache=caches[seed]).report
        write_report(r, out / "runs", f"{method}_seed{seed}")
        log.info("%s", r.summary())
        return r

    # seed-major order keeps each seed's teacher cache warm
    pairs = [(m, s) for s in args.seeds for m in methods]
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(one, pairs))
    else:
        reports = [one(p) for p in pairs]
    atomic_write(out / "aggregate.csv", csv_text(AGG_HEADER, aggregate(reports)))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.input)
    paths = sorted(p for p in root.rglob("*.json"))
    if not paths:
        raise UsageError(f"no JSON reports under {root}")
    reports = []
    for p in paths:
        try:
            reports.append(read_json_report(p))
        except (TypeError, json.JSONDecodeError):
            log.warning("skipping %s: not a report", p)
    for r in reports:
        print(r.summary())
    if args.out:
        atomic_write(Path(args.out), csv_text(AGG_HEADER, aggregate(reports)))
    return EXIT_OK


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic long-tailed dataset")
    s.add_argument("--classes", type=int, default=20)
    s.add_argument("--head", type=int, default=200)
    s.add_argument("--tail", type=int, default=5)
    s.add_argument("--decay", choices=("exponential", "zipf"), default="exponential")
    s.add_argument("--zipf-s", type=float, default=1.0)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--separation", type=float, default=LongTailProfile.class_separation)
    s.add_argument("--noise", type=float, default=LongTailProfile.noise_sigma)
    s.add_argument("--test-per-class", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    def common(sp):
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="train and evaluate one method")
    common(t)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("ablate", help="sweep one axis")
    common(a)
    a.add_argument("--axis", action="append", required=True,
                   help="alpha | beta | K | ensemble_composition")
    a.add_argument("--grid", help="comma-separated sweep values")
    a.add_argument("--modes", help="alpha sweep distillation modes, e.g. feature,classifier,hybrid")
    a.set_defaults(fn=cmd_ablate)

    u = sub.add_parser("suite", help="every method over several seeds, plus an aggregate")
    common(u)
    u.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    u.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    u.set_defaults(fn=cmd_suite)

    r = sub.add_parser("report", help="summarise JSON reports under a directory")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", help="write an aggregate CSV here")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except TrainingDiverged as e:
        log.error("numerical abort: %s", e)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetParseError, DatasetValidationError) as e:
        print(f"cbdistill {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
