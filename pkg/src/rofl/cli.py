"""``rofl`` command line: nmse-sweep, timing, train, bounds, selftest.

Settings resolve as built-in defaults < ``--config`` file (YAML or JSON) <
``ROFL_*`` environment variables < command-line flags. Every command writes
``<out>/<command>.csv`` and a ``<out>/<command>.json`` sidecar holding the
resolved configuration and a summary.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import experiments as ex
from .channel import SystemConfig

COMMANDS = ("nmse-sweep", "timing", "train", "bounds", "selftest")
ENV_PREFIX = "ROFL_"

DEFAULTS = {
    "nmse-sweep": {"M": [256, 512, 1024], "K": 8, "snr_db": list(range(-5, 21)), "trials": 2000,
                   "receivers": ["ro", "mmse"]},
    "timing": {"M": [256, 512, 1024], "K": 8, "snr_db": 10, "trials": 2000,
               "receivers": ["ro", "mmse", "mmse-cov"], "repeats": 3},
    "train": {"M": 256, "K": 8, "snr_db": 10, "trials": 1, "receivers": ["ideal", "ro", "mmse"],
              "task": "svm-mnist", "rounds": 100, "data_dir": "data/mnist", "per_client": 500,
              "test_size": 2000, "eta": 0.05, "batch_size": None, "lam": None, "local_steps": 1,
              "d": 10, "samples_per_client": 50, "condition": 2.0, "noise_std": 1.0,
              "gamma": 3.0, "pre_runs": 3, "inflation": 1.2},
    "bounds": {"M": [8, 64, 256, 1024], "K": [1, 2, 4, 8, 16, 64, 256, 1024], "snr_db": [0, 10, 20],
               "trials": 2000, "receivers": ["ro"], "T": 200, "grad_bound": 1.0,
               "task": "quadratic", "task_M": 256, "task_K": 8, "task_snr_db": 10,
               "d": 10, "samples_per_client": 50, "condition": 2.0, "noise_std": 1.0,
               "gamma": 3.0, "batch_size": None, "lam": None, "pre_runs": 3, "inflation": 1.2,
               "params": None},
    "selftest": {"trials": 20000, "receivers": ["ro"]},
}
COMMON = {"seed": 0, "threads": 1, "out": "results"}
ENV_KEYS = ("seed", "trials", "out", "threads", "receivers", "config")
KNOWN_RECEIVERS = {"ideal", "ro", "mmse", "mmse-cov"}
# settings left as None take the task's own default
TASK_DEFAULTS = {"svm-mnist": {"batch_size": 100, "lam": 1e-3}, "quadratic": {"batch_size": 5, "lam": 0.0}}


class UsageError(ValueError):
    pass


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentSpec:
    """Fully resolved settings for one command."""

    command: str
    Ms: list[int]
    Ks: list[int]
    snrs_db: list[float]
    trials: int
    receivers: list[str]
    out: Path
    seed: int
    threads: int = 1
    task: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentSpec":
        if self.command != "selftest" and not (self.Ms and self.Ks and self.snrs_db):
            raise UsageError("M, K and snr_db grids must be non-empty")
        if self.trials < 1:
            raise UsageError(f"trials must be >= 1, got {self.trials}")
        if self.threads < 1:
            raise UsageError(f"threads must be >= 1, got {self.threads}")
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        unknown = set(self.receivers) - KNOWN_RECEIVERS
        if unknown:
            raise UsageError(f"unknown receivers {sorted(unknown)}; choose from {sorted(KNOWN_RECEIVERS)}")
        if any(int(m) < 1 for m in self.Ms) or any(int(k) < 1 for k in self.Ks):
            raise UsageError("M and K must be positive")
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"output directory {self.out} is not writable: {exc}") from exc
        if not os.access(self.out, os.W_OK):
            raise UsageError(f"output directory {self.out} is not writable")
        return self

    def resolved(self) -> dict:
        return {"command": self.command, "M": self.Ms, "K": self.Ks, "snr_db": self.snrs_db,
                "trials": self.trials, "receivers": self.receivers, "out": str(self.out),
                "seed": self.seed, "threads": self.threads, "task": self.task}


def load_config(path) -> dict:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping of keys to values")
    return data


def _env_overrides(environ) -> dict:
    out = {}
    for key in ENV_KEYS:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None and raw != "":
            out[key] = raw
    return out


def _coerce(key: str, value):
    if key in ("seed", "trials", "threads"):
        return int(value)
    if key == "receivers" and isinstance(value, str):
        return [r.strip() for r in value.split(",") if r.strip()]
    return value


def resolve(command: str, args: argparse.Namespace, environ=None) -> ExperimentSpec:
    environ = os.environ if environ is None else environ
    settings = dict(COMMON) | dict(DEFAULTS[command])
    env = _env_overrides(environ)
    config_path = args.config or env.pop("config", None)
    if config_path:
        cfg = load_config(config_path)
        cfg = cfg.get(command, cfg) if isinstance(cfg.get(command), dict) else cfg
        unknown = set(cfg) - set(settings)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        settings.update(cfg)
    env.pop("config", None)
    settings.update(env)
    for key in ("seed", "trials", "out", "threads", "receivers"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in settings:
            raise UsageError(f"--set expects KEY=VALUE with a known key, got {item!r}")
        settings[key] = yaml.safe_load(raw)
    settings = {k: _coerce(k, v) for k, v in settings.items()}

    grid_keys = ("M", "K", "snr_db", "seed", "trials", "receivers", "out", "threads")
    task = {k: v for k, v in settings.items() if k not in grid_keys}
    return ExperimentSpec(
        command=command,
        Ms=[int(m) for m in _as_list(settings.get("M", []))],
        Ks=[int(k) for k in _as_list(settings.get("K", []))],
        snrs_db=[float(s) for s in _as_list(settings.get("snr_db", []))],
        trials=settings["trials"],
        receivers=list(settings["receivers"]),
        out=Path(settings["out"]),
        seed=settings["seed"],
        threads=settings["threads"],
        task=task,
    ).validate()


# --------------------------------------------------------------------------- output

def csv_text(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_outputs(spec: ExperimentSpec, csv_body: str, summary: dict, elapsed_s: float):
    csv_path = spec.out / f"{spec.command}.csv"
    json_path = spec.out / f"{spec.command}.json"
    csv_path.write_text(csv_body, encoding="utf-8")
    sidecar = {"config": spec.resolved(), "summary": summary, "elapsed_s": elapsed_s}
    json_path.write_text(json.dumps(_jsonable(sidecar), indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return csv_path, json_path


# --------------------------------------------------------------------------- commands

def _one(values: list, name: str):
    if len(values) != 1:
        raise UsageError(f"{name} takes a single value for this command, got {values}")
    return values[0]


def run_nmse_sweep(spec):
    rows, summary = ex.nmse_sweep(spec.Ms, _one(spec.Ks, "K"), spec.snrs_db, spec.trials, spec.seed,
                                  spec.threads, [r for r in spec.receivers if r in ("ro", "mmse")])
    return csv_text(map(ex.row_strings, rows), ex.CSV_HEADER), summary


def run_timing(spec):
    receivers = [r for r in spec.receivers if r in ("ro", "mmse", "mmse-cov")]
    rows, summary = ex.timing(spec.Ms, _one(spec.Ks, "K"), _one(spec.snrs_db, "snr_db"),
                              spec.trials, spec.seed, receivers, int(spec.task["repeats"]))
    body = csv_text((ex.row_strings(r) + [str(ns)] for r, ns in rows), ex.TIMING_HEADER)
    lines = [f"{'M':>6} " + " ".join(f"{r:>12}" for r in receivers) + "  ratios"]
    for M, secs in summary["seconds"].items():
        ratios = "  ".join(f"ro/{rec}={summary['ratios'][rec][M]:.4%}" for rec in summary["ratios"])
        lines.append(f"{M:>6} " + " ".join(f"{secs[r]:>11.4f}s" for r in receivers) + "  " + ratios)
    print("\n".join(lines))
    return body, summary


def _task_value(task: dict, name: str, key: str):
    value = task.get(key)
    return TASK_DEFAULTS[name][key] if value is None else value


def _quadratic_setup(spec, K):
    t = spec.task
    return ex.build_quadratic_setup(
        K, spec.seed, d=int(t["d"]),
        samples_per_client=int(t["samples_per_client"]), condition=float(t["condition"]),
        noise_std=float(t["noise_std"]), lam=float(_task_value(t, "quadratic", "lam")),
        batch_size=int(_task_value(t, "quadratic", "batch_size")), gamma=float(t["gamma"]),
        local_steps=int(t.get("local_steps", 1)))


def run_train(spec):
    t = spec.task
    cfg = SystemConfig(M=_one(spec.Ms, "M"), K=_one(spec.Ks, "K"), snr_db=_one(spec.snrs_db, "snr_db"),
                       master_seed=spec.seed)
    rounds = int(t["rounds"])
    receivers = [r for r in spec.receivers if r in ("ideal", "ro", "mmse")]
    if t["task"] == "svm-mnist":
        setup = ex.build_svm_setup(t["data_dir"], cfg.K, int(t["per_client"]), int(t["test_size"]),
                                   spec.seed, lam=float(_task_value(t, "svm-mnist", "lam")),
                                   eta=float(t["eta"]),
                                   batch_size=int(_task_value(t, "svm-mnist", "batch_size")),
                                   local_steps=int(t["local_steps"]))
    elif t["task"] == "quadratic":
        setup = _quadratic_setup(spec, cfg.K)
    else:
        raise UsageError(f"unknown task {t['task']!r}; choose svm-mnist or quadratic")
    rows, summary = ex.train(setup, cfg, receivers, rounds, spec.trials, spec.seed, spec.threads)
    if t["task"] == "quadratic":
        summary["bound"] = {}
        for rec in receivers:
            H = ex.measure_grad_bound(setup, cfg, rec, rounds, spec.seed, int(t["pre_runs"]),
                                      float(t["inflation"]))
            params = ex.bound_params_for(setup, cfg, H)
            bound = ex.theorem1_bound(np.arange(1, rounds + 1), params)
            rows += [ex.ResultRow("train", cfg.M, cfg.K, cfg.snr_db, rec, s + 1, "theorem1_bound",
                                  float(b), spec.trials, spec.seed) for s, b in enumerate(bound)]
            summary["bound"][rec] = {"grad_bound": H, "mu": params.mu, "lip": params.lip, "B": params.B}
    return csv_text(map(ex.row_strings, rows), ex.CSV_HEADER), summary


def run_bounds(spec):
    t = spec.task
    params = None
    if t.get("params"):
        params = ex.BoundParams(**t["params"])
    elif t.get("task") == "quadratic":
        cfg = SystemConfig(M=int(t["task_M"]), K=int(t["task_K"]), snr_db=float(t["task_snr_db"]))
        setup = _quadratic_setup(spec, cfg.K)
        H = ex.measure_grad_bound(setup, cfg, spec.receivers[0] if spec.receivers else "ro",
                                  int(t["T"]), spec.seed, int(t["pre_runs"]), float(t["inflation"]))
        params = ex.bound_params_for(setup, cfg, H)
    elif t.get("task") not in (None, "none"):
        raise UsageError(f"bounds needs task 'quadratic', 'none' or explicit params, got {t['task']!r}")
    rows, summary = ex.bounds_report(params, int(t["T"]), spec.Ks, spec.Ms, spec.snrs_db,
                                     spec.trials, spec.seed, spec.threads, float(t["grad_bound"]))
    return csv_text(map(ex.row_strings, rows), ex.CSV_HEADER), summary


def run_selftest(spec, projection=None):
    checks = ex.selftest(spec.seed, projection=projection, trials=spec.trials)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    body = csv_text(([c.name, ex.format_value(c.statistic), c.threshold, str(int(c.passed))]
                     for c in checks), ["check", "statistic", "threshold", "passed"])
    return body, {"failures": [f"selftest check failed: {n}" for n in failed]}


RUNNERS = {"nmse-sweep": run_nmse_sweep, "timing": run_timing, "train": run_train,
           "bounds": run_bounds, "selftest": run_selftest}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rofl", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON file of settings")
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--threads", type=int)
        p.add_argument("--receivers", type=lambda s: [r.strip() for r in s.split(",") if r.strip()],
                       help="comma-separated, e.g. ro,mmse")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one setting (value parsed as YAML); repeatable")
    return ap


def main(argv=None, environ=None, projection=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = resolve(args.command, args, environ)
    except (UsageError, OSError, yaml.YAMLError, ValueError) as exc:
        print(f"rofl {args.command}: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        if args.command == "selftest":
            body, summary = run_selftest(spec, projection)
        else:
            body, summary = RUNNERS[args.command](spec)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"rofl {args.command}: {exc}", file=sys.stderr)
        return 2
    csv_path, _ = write_outputs(spec, body, summary, time.perf_counter() - start)
    failures = summary.get("failures", [])
    for f in failures:
        print(f"rofl {args.command}: {f}", file=sys.stderr)
    print(f"wrote {csv_path}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
