"""Command-line runner: ``randombsde <subcommand> --config run.yaml``.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure,
4 a check or duality link failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from . import benchmarks
from .bsde import PenalizationSchedule, build_population, dual_representation_value, minimal_solution
from .checks import run_all
from .control import FiniteMarkMeasure, InitialPath
from .errors import ConfigError, InvalidInput, NoClosedForm, NumericalFailure
from .estimators import ValueEstimate, duality_report, estimate_dual, primal_sweep, standard_family
from .girsanov import IntensityField
from .numerics import CONTINUATIONS, Numerics

log = logging.getLogger("randombsde")

SUBCOMMANDS = ("simulate", "bsde", "dual", "primal", "duality", "check")
EXIT_OK, EXIT_INPUT, EXIT_NUMERICS, EXIT_CHECK = 0, 2, 3, 4
SCHEMA = 1

_DEFAULTS: dict[str, Any] = {
    "schema": SCHEMA,
    "benchmark": {"name": "uncertain-volatility", "params": {}},
    "t0": 0.0,
    "initial": {"kind": "constant", "value": 1.0},
    "mark": None,
    "lambda_scale": 1.0,
    "numerics": {"paths": 10000, "steps": 50, "seed": 0, "degree": 2, "ridge": 1e-8, "workers": 1,
                 "continuation": "resimulate", "fresh_paths": 0},
    "schedule": {"levels": [1, 2, 4, 8, 16, 32, 64, 128], "stop_tol": 1e-3, "richardson": False},
    "dual": {"kind": "bang-bang", "value": 1.0, "epsilon": 0.01},
    "primal": {"cells": 4},
    "allowance": 0.01,
    "checks": {"samples": 100000},
    "simulate": {"dump": 10},
}
_INITIAL_KEYS = {"constant": {"kind", "value"}, "ramp": {"kind", "start", "end"},
                 "samples": {"kind", "times", "values"}}


def _merge(defaults: dict, given: dict, where: str = "") -> dict:
    out = dict(defaults)
    for key, value in given.items():
        path = f"{where}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if key in ("initial", "params"):
            out[key] = value
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = value
    return out


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated run description plus its canonical hash."""

    raw: dict
    bench: benchmarks.Benchmark
    x: InitialPath
    mark: float
    measure: FiniteMarkMeasure
    numerics: Numerics
    schedule: PenalizationSchedule
    dual: dict
    allowance: float
    cells: int
    check_samples: int
    dump: int
    digest: str = field(default="")

    @property
    def spec(self):
        return self.bench.spec()

    @classmethod
    def from_mapping(cls, given: dict, seed: Optional[int] = None, workers: Optional[int] = None) -> "RunConfig":
        if not isinstance(given, dict):
            raise ConfigError("config must be a mapping")
        if given.get("schema") != SCHEMA:
            raise ConfigError(f"config needs 'schema: {SCHEMA}'")
        raw = _merge(_DEFAULTS, given)
        if seed is not None:
            raw["numerics"]["seed"] = seed
        if workers is not None:
            raw["numerics"]["workers"] = workers
        try:
            return cls._build(raw)
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, InvalidInput):
                raise
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def _build(cls, raw: dict) -> "RunConfig":
        b = raw["benchmark"]
        if set(b) - {"name", "params"}:
            raise ConfigError("benchmark takes only 'name' and 'params'")
        params = dict(b.get("params") or {})
        if "marks" in params:
            params["marks"] = tuple(float(m) for m in params["marks"])
        bench = benchmarks.get(str(b["name"]), **params)
        spec = bench.spec()
        t0 = float(raw["t0"])
        if not 0 <= t0 < spec.horizon:
            raise ConfigError("t0 must lie in [0, T)")
        x = _initial_path(raw["initial"], t0)
        space = spec.control_space
        mark = raw["mark"]
        if mark is None:
            mark = float(space.points[0]) if space.is_finite else float(space.bounds[0])
        mark = float(mark)
        if not space.contains(mark):
            raise ConfigError("initial mark is outside the control space")
        scale = float(raw["lambda_scale"])
        if not scale > 0:
            raise ConfigError("lambda_scale must be positive")
        measure = FiniteMarkMeasure.uniform(space).scaled(scale)
        nm = raw["numerics"]
        if nm["continuation"] not in CONTINUATIONS:
            raise ConfigError(f"continuation must be one of {CONTINUATIONS}")
        numerics = Numerics(paths=_count(nm["paths"], "paths"), steps=_count(nm["steps"], "steps"),
                            seed=_seed(nm["seed"]), degree=int(nm["degree"]), ridge=float(nm["ridge"]),
                            workers=_count(nm["workers"], "workers"), continuation=str(nm["continuation"]),
                            fresh_paths=int(nm["fresh_paths"]))
        sc = raw["schedule"]
        schedule = PenalizationSchedule(tuple(float(v) for v in sc["levels"]),
                                        None if sc["stop_tol"] is None else float(sc["stop_tol"]),
                                        bool(sc["richardson"]))
        dual = dict(raw["dual"])
        if dual["kind"] not in ("constant", "bang-bang"):
            raise ConfigError("dual.kind must be 'constant' or 'bang-bang'")
        if not float(dual["value"]) > 0 or not float(dual["epsilon"]) > 0:
            raise ConfigError("dual value and epsilon must be positive")
        allowance = float(raw["allowance"])
        if allowance < 0:
            raise ConfigError("allowance must be nonnegative")
        digest = hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
        return cls(raw, bench, x, mark, measure, numerics, schedule, dual, allowance,
                   _count(raw["primal"]["cells"], "primal.cells"), _count(raw["checks"]["samples"], "checks.samples"),
                   int(raw["simulate"]["dump"]), digest)


def _count(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v or v < 1:
        raise ConfigError(f"{name} must be a positive integer")
    return int(v)


def _seed(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    return v


def _initial_path(spec: dict, t0: float) -> InitialPath:
    if not isinstance(spec, dict) or spec.get("kind") not in _INITIAL_KEYS:
        raise ConfigError(f"initial.kind must be one of {sorted(_INITIAL_KEYS)}")
    extra = set(spec) - _INITIAL_KEYS[spec["kind"]]
    if extra:
        raise ConfigError(f"unknown keys in initial: {sorted(extra)}")
    if spec["kind"] == "constant":
        return InitialPath.constant(float(spec["value"]), t0)
    if spec["kind"] == "ramp":
        return InitialPath.ramp(float(spec["start"]), float(spec["end"]), t0)
    path = InitialPath(np.asarray(spec["times"], dtype=float), np.asarray(spec["values"], dtype=float))
    if abs(path.t0 - t0) > 1e-12:
        raise ConfigError("sampled initial path must end at t0")
    return path


def load_config(path: str, seed: Optional[int] = None, workers: Optional[int] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return RunConfig.from_mapping(data, seed, workers)


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if v is None:
        return ""
    return str(v)


class Outputs:
    """Collects files in memory and writes them once the run has succeeded or failed cleanly."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.files: dict[str, str] = {}

    @property
    def header(self) -> str:
        return f"# config_sha256={self.config.digest} seed={self.config.numerics.seed}\n"

    def table(self, name: str, columns: Sequence[str], rows: Sequence[Sequence]):
        buf = io.StringIO()
        buf.write(self.header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self.files[name] = buf.getvalue()

    def report(self, payload: dict):
        body = {"config_sha256": self.config.digest, "seed": self.config.numerics.seed, **payload}
        self.files["report.json"] = json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n"

    def write(self, out: Path):
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            with open(out / name, "w", newline="") as fh:
                fh.write(text)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if np.isfinite(f) else repr(f)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


VALUE_COLUMNS = ("label", "name", "value", "stderr", "paths", "steps", "seed")


def _value_rows(estimates: Sequence[ValueEstimate]) -> list[list]:
    return [[e.as_row()[c] for c in VALUE_COLUMNS] for e in estimates]


# --------------------------------------------------------------------------
# subcommands


def _closed_form(cfg: RunConfig) -> Optional[float]:
    try:
        return benchmarks.closed_form_value(cfg.bench, cfg.x.t0, cfg.x)
    except NoClosedForm:
        return None


def _bsde(cfg: RunConfig, out: Outputs):
    ms = minimal_solution(cfg.spec, cfg.x, cfg.mark, cfg.measure, cfg.schedule, cfg.numerics)
    rows = [[r.level, r.steps, cfg.x.t0, r.y0, r.stderr, r.violation, r.violation_stderr, r.k_mean] for r in ms.table]
    out.table("convergence.csv", ("level", "steps", "time", "y0", "stderr", "violation", "violation_stderr",
                                  "k_mean"), rows)
    est = ValueEstimate(ms.y0, ms.stderr, ms.solution.population.n_paths, ms.solution.grid.summary(),
                        cfg.numerics.seed, "bsde", f"level {ms.solution.level:g}")
    return ms, est


def cmd_bsde(cfg: RunConfig, out: Outputs) -> int:
    ms, est = _bsde(cfg, out)
    rows = [est]
    cf = _closed_form(cfg)
    if cf is not None:
        rows.append(ValueEstimate(cf, 0.0, 1, {"steps": None}, None, "closed-form", cfg.bench.name))
    out.table("values.csv", VALUE_COLUMNS, _value_rows(rows))
    out.report({"command": "bsde", "y0": ms.y0, "stderr": ms.stderr, "stopped_early": ms.stopped_early,
                "converged_level": ms.converged_level, "extrapolated": ms.extrapolated, "closed_form": cf,
                "levels": [r._asdict() for r in ms.table]})
    return EXIT_OK


def _dual_estimate(cfg: RunConfig, ms=None) -> ValueEstimate:
    if cfg.dual["kind"] == "constant":
        nu = IntensityField.constant(float(cfg.dual["value"]))
        return estimate_dual(cfg.spec, cfg.x, cfg.mark, cfg.measure, nu, cfg.numerics, "constant")
    if ms is None:
        ms = minimal_solution(cfg.spec, cfg.x, cfg.mark, cfg.measure, cfg.schedule, cfg.numerics)
    fresh = cfg.numerics.fresh_paths or cfg.numerics.paths
    cert = dual_representation_value(ms.solution, epsilon=float(cfg.dual["epsilon"]), paths=fresh)
    return ValueEstimate(cert.estimate, cert.stderr, fresh, ms.solution.grid.summary(), cfg.numerics.seed, "dual",
                         "bang-bang")


def cmd_dual(cfg: RunConfig, out: Outputs) -> int:
    est = _dual_estimate(cfg)
    out.table("values.csv", VALUE_COLUMNS, _value_rows([est]))
    out.report({"command": "dual", "kind": cfg.dual["kind"], "value": est.value, "stderr": est.stderr})
    return EXIT_OK


def _primal(cfg: RunConfig):
    family, names = standard_family(cfg.spec, cfg.x, cfg.cells)
    return primal_sweep(cfg.spec, cfg.x, family, cfg.numerics, names)


def cmd_primal(cfg: RunConfig, out: Outputs) -> int:
    best, table = _primal(cfg)
    out.table("values.csv", VALUE_COLUMNS, _value_rows(table))
    out.report({"command": "primal", "best": best.name, "value": best.value, "stderr": best.stderr})
    return EXIT_OK


def cmd_duality(cfg: RunConfig, out: Outputs) -> int:
    ms, bsde_est = _bsde(cfg, out)
    best, table = _primal(cfg)
    dual = _dual_estimate(cfg, ms)
    rep = duality_report(best, [dual], bsde_est, cfg.allowance)
    out.table("values.csv", VALUE_COLUMNS, _value_rows([bsde_est, dual] + table))
    out.report({"command": "duality", **rep.as_dict(), "closed_form": _closed_form(cfg)})
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_check(cfg: RunConfig, out: Outputs) -> int:
    results = run_all(cfg.check_samples, cfg.numerics.seed)
    out.table("values.csv", ("name", "passed", "observed", "expected", "stderr"),
              [[r.name, r.passed, r.observed, r.expected, r.stderr] for r in results])
    passed = all(r.passed for r in results)
    out.report({"command": "check", "passed": passed, "checks": [r.as_dict() for r in results]})
    return EXIT_OK if passed else EXIT_CHECK


def cmd_simulate(cfg: RunConfig, out: Outputs) -> int:
    pop = build_population(cfg.spec, cfg.x, cfg.mark, cfg.measure, cfg.numerics)
    path, events = pop.path, pop.events
    k = min(cfg.dump, pop.n_paths)
    times = path.grid.nodes
    rows = [[i, times[j], *path.values[j, i], path.marks[j, i]] for i in range(k) for j in range(times.size)]
    state_cols = [f"x{c}" for c in range(cfg.spec.dim_state)]
    out.table("paths.csv", ("path", "time", *state_cols, "mark"), rows)
    ev = [[i, events.epochs[i, j], events.marks[i, j]] for i in range(k) for j in range(events.counts[i])]
    out.table("mpp.csv", ("path", "epoch", "mark"), ev)
    g = pop.gains
    se = float(g.std(ddof=1) / np.sqrt(g.size)) if g.size > 1 else 0.0
    est = ValueEstimate(float(g.mean()), se, pop.n_paths, pop.grid.summary(), cfg.numerics.seed, "dual",
                        "randomized gain")
    out.table("values.csv", VALUE_COLUMNS, _value_rows([est]))
    out.report({"command": "simulate", "gain_mean": est.value, "gain_stderr": se,
                "mean_jumps": float(events.counts.mean()), "expected_jumps":
                    cfg.measure.total_mass * (cfg.spec.horizon - cfg.x.t0)})
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "bsde": cmd_bsde, "dual": cmd_dual, "primal": cmd_primal,
            "duality": cmd_duality, "check": cmd_check}


def run(subcommand: str, config: RunConfig, out_dir: str | Path) -> int:
    """Run one subcommand and write its files; returns the exit code.

    Nothing is written when the run fails with an input or numerical error.
    """
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Outputs(config)
    code = COMMANDS[subcommand](config, out)
    out.write(Path(out_dir))
    return code


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="randombsde", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="YAML or JSON run description")
    p.add_argument("--seed", type=int, default=None, help="overrides numerics.seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--workers", type=int, default=None, help="overrides numerics.workers")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("RANDOMBSDE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.workers)
        return run(args.subcommand, cfg, args.out)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
