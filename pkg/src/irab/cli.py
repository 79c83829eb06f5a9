"""Command line: ``irab gen-data | train | eval | simulate | report | ablate``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, SplitSizes, load_config, save_config
from .errors import ConfigError, DataError, IrabError
from .pseudo import NoiseModel
from .scenes import (ROLES, SceneSpec, generate_scenes, manifest_checksum, read_dataset, split_dataset,
                     write_dataset)
from .simulation import run_simulation, summarize, write_csv
from .training import METHODS, evaluate, run_ablation, train

log = logging.getLogger("irab")

REPORT_FIELDS = ("method", "seed", "n_labeled", "n_unlabeled", "n_test", "mae", "mse", "wall_time_s",
                 "pl_precision", "pl_coverage", "run_dir")


class UsageError(IrabError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec.from_dict(_read_json(args.spec)) if args.spec else SceneSpec()
    sizes = SplitSizes(*args.sizes)
    scenes = generate_scenes(sizes.total, args.seed, spec)
    split = split_dataset(scenes, sizes.n_labeled, sizes.n_unlabeled, sizes.n_test, args.split_seed)
    split.spec = spec
    write_dataset(split, args.out)
    print(f"wrote {sizes.total} scenes to {args.out} (manifest sha256 {manifest_checksum(args.out)})")
    return 0


# -- train --------------------------------------------------------------------

def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    t = cfg.train
    if args.method:
        t = replace(t, method=args.method)
    if args.seed is not None:
        t = replace(t, seed=args.seed)
    if args.data:
        t = replace(t, dataset_dir=str(args.data))
    cfg.train = t
    if args.out:
        cfg.output_dir = str(args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if not cfg.train.dataset_dir:
        raise DataError("no dataset: set train.dataset_dir in the config or pass --data")
    run_dir = Path(cfg.output_dir or "runs") / f"{cfg.train.method}-{cfg.train.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    audit = [] if args.audit else None
    result = train(cfg.train, run_dir=run_dir, audit=audit)
    if args.audit:
        Path(args.audit).write_text("\n".join(audit) + "\n", encoding="utf-8")
    if result.test is not None:
        print(f"{cfg.train.method} seed {cfg.train.seed}: test MAE {result.test['mae']:.3f} "
              f"MSE {result.test['mse']:.3f} -> {run_dir}")
    else:
        print(f"{cfg.train.method} seed {cfg.train.seed} -> {run_dir}")
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = read_dataset(args.data, (args.role,))
    scenes = data.role(args.role)
    if not scenes:
        raise DataError(f"no {args.role} scenes in {args.data}")
    res = evaluate(model, scenes)
    out = {"mae": res["mae"], "mse": res["mse"], "n": len(scenes), "role": args.role}
    print(json.dumps(out, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(out, sort_keys=True) + "\n", encoding="utf-8")
    return 0


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    noise = NoiseModel.parse(args.noise)
    spec = SceneSpec.from_dict(_read_json(args.spec)) if args.spec else SceneSpec()
    rows = run_simulation(noise, args.tp, range(args.seeds), spec)
    if args.out:
        write_csv(rows, args.out)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for method, s in summarize(rows).items():
        print(f"# {method}: precision {s['precision']:.4f} coverage {s['coverage']:.4f} "
              f"subset_violations {s['subset_violations']}", file=sys.stderr)
    return 0


# -- report -------------------------------------------------------------------

def _run_dirs(paths: Sequence[str]) -> list:
    found = []
    for p in map(Path, paths):
        if (p / "metrics.jsonl").is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(d for d in p.iterdir() if (d / "metrics.jsonl").is_file()))
        else:
            raise DataError(f"no such run directory {p}")
    if not found:
        raise DataError("no run directories with metrics.jsonl found")
    return found


def _jsonl(path: Path) -> list:
    if not path.is_file():
        return []
    try:
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSONL: {e}") from None


def read_run(run_dir: Path) -> dict:
    """One report row from a run directory's metrics and timing files."""
    records = _jsonl(run_dir / "metrics.jsonl")
    tests = [r for r in records if r.get("kind") == "test"]
    if not tests:
        raise DataError(f"{run_dir}: metrics.jsonl has no test record")
    t = tests[-1]
    evals = [r for r in records if r.get("kind") == "eval"]
    timing = _jsonl(run_dir / "timing.jsonl")
    last = evals[-1] if evals else {}
    return {"method": t["method"], "seed": t["seed"],
            "n_labeled": t.get("n_labeled_train", 0) + t.get("n_val", 0),
            "n_unlabeled": t.get("n_unlabeled"), "n_test": t.get("n_test"),
            "mae": t["mae"], "mse": t["mse"],
            "wall_time_s": timing[-1].get("wall_time_s") if timing else None,
            "pl_precision": last.get("pl_precision"), "pl_coverage": last.get("pl_coverage"),
            "run_dir": str(run_dir)}


def median_rows(rows: Sequence[dict]) -> list:
    out = []
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        med = {"method": method, "seed": "median", "n_labeled": sel[0]["n_labeled"],
               "n_unlabeled": sel[0]["n_unlabeled"], "n_test": sel[0]["n_test"], "run_dir": ""}
        for key in ("mae", "mse", "wall_time_s", "pl_precision", "pl_coverage"):
            vals = [r[key] for r in sel if r[key] is not None]
            med[key] = statistics.median(vals) if vals else None
        out.append(med)
    return out


def format_table(medians: Sequence[dict]) -> str:
    lines = [f"{'Method':<16}{'MAE':>9}{'MSE':>9}", "-" * 34]
    for r in sorted(medians, key=lambda r: r["mae"]):
        lines.append(f"{r['method']:<16}{r['mae']:>9.2f}{r['mse']:>9.2f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows = [read_run(d) for d in _run_dirs(args.runs)]
    rows.sort(key=lambda r: (r["method"], r["seed"]))
    meds = median_rows(rows)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows + meds)
    table = format_table(meds)
    Path(args.out).with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


# -- ablate -------------------------------------------------------------------

def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.data:
        cfg.train = replace(cfg.train, dataset_dir=str(args.data))
    if not cfg.train.dataset_dir:
        raise DataError("no dataset: set train.dataset_dir in the config or pass --data")
    cast = int if args.factor in ("num_tasks", "n_labeled") else float
    try:
        values = [cast(v) for v in args.values.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse values {args.values!r}") from None
    data = read_dataset(cfg.train.dataset_dir)
    rows = run_ablation({args.factor: values}, cfg.train, data, manifest_checksum(cfg.train.dataset_dir),
                        args.run_root)
    fields = ("factor", "value", "method", "seed", "mae", "mse", "n_labeled", "manifest_sha256", "config")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config": json.dumps(r["config"], sort_keys=True)})
    for r in rows:
        print(f"{r['factor']}={r['value']}: MAE {r['mae']:.3f} MSE {r['mse']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="irab", description="Desk-scale semi-supervised crowd counting experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON file (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=2020)
    g.add_argument("--split-seed", type=int, default=7)
    g.add_argument("--sizes", type=int, nargs=3, default=(40, 200, 100), metavar=("LABELED", "UNLABELED", "TEST"))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--out", help="output root; runs go to <out>/<method>-<seed>")
    t.add_argument("--audit", help="write every dataset file opened to this path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--role", choices=ROLES, default="test")
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="score pseudo-labelling rules on simulated posteriors")
    s.add_argument("--noise", required=True, help="e.g. logit-gaussian:2.0 or flip:0.1")
    s.add_argument("--tp", type=float, default=0.9)
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--spec", help="scene spec JSON file")
    s.add_argument("--out", help="CSV path (stdout when omitted)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="aggregate run directories into a CSV")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="train over one varied factor")
    a.add_argument("--config", required=True)
    a.add_argument("--factor", required=True, choices=("t_p", "num_tasks", "n_labeled"))
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--data")
    a.add_argument("--run-root")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except IrabError as e:
        print(f"irab: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
