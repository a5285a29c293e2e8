"""Command line: ``mpo-sim run <config> [--override k=v]... [--out DIR]`` and ``mpo-sim verify <config>``.

Exit codes: 0 success, 2 configuration error, 3 numerical-guard abort, 4 check failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dynamics import Liouvillian, NumericalGuardError, propagate
from .model import ModelError
from .trajectories import UnravelingSystem, ensemble_average, write_records
from .verify import default_suite

EXIT_OK, EXIT_CONFIG, EXIT_GUARD, EXIT_CHECK = 0, 2, 3, 4
log = logging.getLogger("mpo_sim")


class OutputWriter:
    """Single funnel for artifacts so the manifest lists every file with its digest."""

    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, str] = {}

    def write_text(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        self.files[name] = sha256(path)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def add(self, name: str) -> None:
        self.files[name] = sha256(self.out / name)

    def manifest(self, cfg: RunConfig | None, argv: list[str], wall: float, status: int) -> Path:
        versions = {"mpo_sim": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}
        try:
            import numba

            versions["numba"] = numba.__version__
        except ImportError:  # pragma: no cover
            pass
        obj = {
            "argv": argv,
            "config": cfg.raw if cfg else None,
            "config_path": cfg.source if cfg else None,
            "versions": versions,
            "wall_time_s": wall,
            "exit_code": status,
            "files": dict(sorted(self.files.items())),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_master(cfg: RunConfig, w: OutputWriter) -> int:
    model = cfg.model()
    L = Liouvillian.from_model(model, cfg.run.frame)
    res = propagate(
        L,
        cfg.initial_state(),
        cfg.t_grid(),
        cfg.run.dt,
        observables=cfg.observable_ops(),
        leak_tol=cfg.leak_tol,
        trace_tol=cfg.trace_tol,
        check_halving=cfg.run.halving_check,
        keep_states=False,
    )
    w.write_text("timeseries.csv", res.csv())
    summary = {
        "max_trace_err": float(res.trace_err.max()),
        "max_pos_err": float(res.pos_err.max()),
        "max_edge_leak": float(res.edge_leak.max()),
        "halving_diff": res.halving_diff,
    }
    w.write_json("summary.json", summary)
    return EXIT_OK


def _run_stochastic(cfg: RunConfig, w: OutputWriter) -> int:
    r = cfg.run
    system = UnravelingSystem.from_model(cfg.model(), r.mode, r.frame, r.counting, r.homodyne)
    stats = ensemble_average(
        system,
        cfg.initial_state(),
        r.n_traj,
        cfg.t_grid(),
        r.mode,
        r.seed,
        r.dt,
        observables=cfg.observable_ops(),
        frame=r.frame,
        batch_size=r.batch_size,
        leak_tol=cfg.leak_tol,
        record_stride=r.record_stride,
    )
    w.out.mkdir(parents=True, exist_ok=True)
    write_records(stats.records, w.out / "records.jsonl")
    w.add("records.jsonl")
    w.write_text("stats.csv", stats.csv())
    return EXIT_OK


def _run_verify(cfg: RunConfig, w: OutputWriter | None, seed: int = 0) -> tuple[int, list[dict]]:
    reports = default_suite(cfg.model(), seed=seed)
    data = [r.to_dict() for r in reports]
    for r in reports:
        log.info(r.line())
    if w is not None:
        w.write_json("report.json", data)
    return (EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK), data


def _error_record(kind: str, exc: Exception, code: int) -> dict:
    rec = {"error": kind, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        rec.update(path=exc.path, line=exc.line, field=exc.field)
    return rec


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    argv = list(sys.argv[1:]) if args.argv is None else args.argv
    try:
        cfg = load_config(args.config, args.override)
    except (ConfigError, ModelError) as exc:
        print(json.dumps(_error_record("config", exc, EXIT_CONFIG)), file=sys.stderr)
        return EXIT_CONFIG
    w = OutputWriter(Path(args.out or cfg.run.output_dir))
    try:
        if cfg.run.mode == "master":
            status = _run_master(cfg, w)
        elif cfg.run.mode in ("jump", "homodyne"):
            status = _run_stochastic(cfg, w)
        else:
            status, _ = _run_verify(cfg, w, cfg.run.seed or 0)
    except NumericalGuardError as exc:
        status = EXIT_GUARD
        rec = _error_record("numerical_guard", exc, status)
        w.write_json("error.json", rec)
        print(json.dumps(rec), file=sys.stderr)
    except (ConfigError, ModelError, ValueError) as exc:
        status = EXIT_CONFIG
        rec = _error_record("config", exc, status)
        w.write_json("error.json", rec)
        print(json.dumps(rec), file=sys.stderr)
    w.manifest(cfg, argv, time.perf_counter() - t0, status)
    return status


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.override)
    except (ConfigError, ModelError) as exc:
        print(json.dumps(_error_record("config", exc, EXIT_CONFIG)), file=sys.stderr)
        return EXIT_CONFIG
    w = OutputWriter(Path(args.out)) if args.out else None
    status, data = _run_verify(cfg, w, args.seed)
    print(json.dumps(data, indent=2, sort_keys=True))
    if w is not None:
        w.manifest(cfg, list(sys.argv[1:]) if args.argv is None else args.argv, time.perf_counter() - t0, status)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpo-sim", description="Multi-photon open-system simulator and verifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the mode selected in the config")
    r.add_argument("config")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config key, JSON value")
    r.add_argument("--out", help="output directory (default: run.output_dir)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("verify", help="run the structural check suite and print a JSON report")
    v.add_argument("config")
    v.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    v.add_argument("--out", help="also write report.json and a manifest here")
    v.add_argument("--seed", type=int, default=0, help="seed for random interior samples")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
