"""Experiment runner CLI.

Commands:

    qchlab validate <config>
    qchlab run <config>
    qchlab sweep <config> --axis <section.key> --values v1,v2,... [--workers N]
    qchlab example <family>

Exit codes: 0 pass, 1 acceptance criterion failed, 2 config error,
3 runtime error.  Output directories come from the config's
``output.directory`` (relative paths resolve under $QCHLAB_OUTPUT_ROOT
when that variable is set).  Reruns with the same config and seed
produce byte-identical numeric outputs; only the manifest timestamps
differ.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
from datetime import datetime, timezone

from . import __version__
from .config import FAMILIES, ConfigError, ExperimentConfig, default_config, load_config
from .experiments import Criterion, run_experiment

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def resolve_outdir(cfg: ExperimentConfig) -> str:
    out = cfg.output_directory
    root = os.environ.get("QCHLAB_OUTPUT_ROOT")
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def write_manifest(path: str, cfg: ExperimentConfig, criteria: list[Criterion],
                   started: str, finished: str) -> None:
    """Atomic manifest write: config hash, seed, version, per-criterion outcome."""
    payload = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "code_version": __version__,
        "family": cfg.family,
        "started": started,
        "finished": finished,
        "criteria": {
            c.name: {
                "value": c.value,
                "tolerance": c.tolerance,
                "comparison": c.comparison,
                "passed": c.passed,
            }
            for c in criteria
        },
        "all_passed": all(c.passed for c in criteria),
    }
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_config(cfg: ExperimentConfig, outdir: str | None = None,
               quiet: bool = False) -> int:
    outdir = outdir or resolve_outdir(cfg)
    os.makedirs(outdir, exist_ok=True)
    started = _now()
    criteria = run_experiment(cfg, outdir)
    finished = _now()
    write_manifest(os.path.join(outdir, "manifest.json"), cfg, criteria,
                   started, finished)
    for c in criteria:
        status = "PASS" if c.passed else "FAIL"
        if not quiet:
            print(f"{status} {c.name}: value={c.value:.6g} {c.comparison} "
                  f"tolerance={c.tolerance:.6g}")
    passed = all(c.passed for c in criteria)
    if not quiet:
        print(f"{'PASS' if passed else 'FAIL'} {cfg.family}: "
              f"{sum(c.passed for c in criteria)}/{len(criteria)} criteria")
    return EXIT_OK if passed else EXIT_ACCEPTANCE


def _sweep_child(config_text: str, outdir: str, axis: str, value: str) -> dict:
    """Runs one sweep point in a worker process; never raises."""
    from .config import parse_config

    try:
        cfg = parse_config(config_text)
        code = run_config(cfg, outdir, quiet=True)
        with open(os.path.join(outdir, "manifest.json")) as fh:
            manifest = json.load(fh)
        return {
            "axis": axis, "value": value, "exit_code": code,
            "passed": manifest["all_passed"],
            "criteria": {k: v["value"] for k, v in manifest["criteria"].items()},
        }
    except Exception as exc:  # recorded, sweep continues
        return {"axis": axis, "value": value, "exit_code": EXIT_RUNTIME,
                "passed": False, "error": f"{type(exc).__name__}: {exc}"}


def run_sweep(cfg: ExperimentConfig, axis: str, values: list[str],
              workers: int = 1) -> int:
    if "." not in axis:
        raise ConfigError(f"sweep axis must be section.key, got {axis!r}")
    section, key = axis.split(".", 1)
    base_out = resolve_outdir(cfg)
    os.makedirs(base_out, exist_ok=True)
    jobs = []
    for v in values:
        child = cfg.replaced(section, key, v)
        child_out = os.path.join(base_out, f"{key}={v}")
        jobs.append((child.canonical_text(), child_out, axis, v))
    results = []
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_child, *job) for job in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_child(*job) for job in jobs]

    crit_keys = sorted({k for r in results for k in r.get("criteria", {})})
    summary = os.path.join(base_out, "sweep_summary.csv")
    with open(summary, "w") as fh:
        fh.write(",".join(["axis", "value", "passed", "error", *crit_keys]) + "\n")
        for r in results:
            cells = [r["axis"], str(r["value"]), str(int(r["passed"])),
                     r.get("error", "")]
            for k in crit_keys:
                val = r.get("criteria", {}).get(k)
                cells.append("" if val is None else f"{val:.17g}")
            fh.write(",".join(cells) + "\n")
    print(f"sweep summary: {summary} ({len(results)} runs)")
    failed = [r for r in results if not r["passed"]]
    return EXIT_OK if not failed else EXIT_ACCEPTANCE


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qchlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    p_val = sub.add_parser("validate", help="parse and validate a config file")
    p_val.add_argument("config")
    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("config")
    p_sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, help="config field, e.g. physical.charge")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values (empty string sweeps nothing)")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_ex = sub.add_parser("example", help="print a benchmark config for a family")
    p_ex.add_argument("family", choices=FAMILIES)
    args = parser.parse_args(argv)

    try:
        if args.command == "example":
            sys.stdout.write(default_config(args.family).canonical_text())
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"ok: {cfg.family} (hash {cfg.config_hash()[:16]})")
            return EXIT_OK
        if args.command == "run":
            return run_config(cfg)
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v != ""]
            return run_sweep(cfg, args.axis, values, args.workers)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
