"""Command line front end.

``aggmark run CONFIG`` writes ``cashflows.csv``, ``reserves.csv`` and
``report.json`` to the output directory.  ``aggmark verify CONFIG`` also runs
the Monte Carlo side and writes ``verify.csv`` with one z-score per quantity.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 verification failure (some ``|z| > 4``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cashflow import (
    PaymentSpec,
    expected_cashflow_general,
    expected_cashflow_reset,
    fast_path_cashflow,
    write_cashflow_csv,
)
from .errors import (
    AggmarkError,
    BoundViolationError,
    ConditioningError,
    ConfigError,
    DomainError,
    InfeasibleConditioningError,
    NumericalBlowupError,
)
from .model import AggregateModel, validate
from .mpp import History
from .phb import BehaviourSpec, scaled_cashflow
from .prodint import BLOWUP_THRESHOLD, EDGE, TimeGrid
from . import sim

log = logging.getLogger("aggmark")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4
Z_LIMIT = 4.0
VERIFY_BINS = 5


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _line_of(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return None


@dataclass
class Conditioning:
    state: int
    duration: float
    history: Optional[History] = None

    def label(self) -> str:
        return f"state={self.state},duration={_fmt(self.duration)}"


@dataclass
class RunConfig:
    path: Path
    text: str
    sha256: str
    model: AggregateModel
    sim_model: Optional[AggregateModel]
    payments: PaymentSpec
    grid: TimeGrid
    steps: int
    substeps: int
    conditioning: list
    behaviour: Optional[BehaviourSpec]
    n_paths: Optional[int]
    seed: int
    output: Path
    quadrature: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def start(self) -> float:
        return self.grid.start

    @property
    def end(self) -> float:
        return self.grid.end


def _fail(cfg_path, text, key, message):
    raise ConfigError(message, _line_of(text, key) if key else None, str(cfg_path))


def _load_model_field(value, base: Path, cfg_path, text, key):
    if isinstance(value, str):
        mpath = (base / value) if not Path(value).is_absolute() else Path(value)
        try:
            mtext = mpath.read_text()
        except OSError as exc:
            _fail(cfg_path, text, key, f"cannot read model file {mpath}: {exc.strerror}")
        try:
            data = json.loads(mtext)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, exc.lineno, str(mpath)) from None
        source = mpath
    elif isinstance(value, dict):
        data, source = value, cfg_path
    else:
        _fail(cfg_path, text, key, "'model' must be a file path or an inline object")
    try:
        return AggregateModel.from_dict(data)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid model: {exc}", _line_of(text, key) if source == cfg_path else None, str(source)) from None


def load_config(path, grid_steps=None, substeps=None, seed=None, out=None) -> RunConfig:
    """Parse and check a run configuration; raises ``ConfigError`` with a line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, str(path)) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", 1, str(path))
    known = {"model", "sim_model", "payments", "grid", "conditioning", "behaviour", "simulation", "output", "quadrature", "description"}
    for key in data:
        if key not in known:
            _fail(path, text, key, f"unknown field {key!r}")
    for key in ("model", "payments", "grid", "conditioning"):
        if key not in data:
            raise ConfigError(f"missing required field {key!r}", None, str(path))
    base = path.parent
    model = _load_model_field(data["model"], base, path, text, "model")
    sim_model = _load_model_field(data["sim_model"], base, path, text, "sim_model") if "sim_model" in data else None

    try:
        payments = PaymentSpec.from_dict(data["payments"])
        payments.check_model(model)
    except (ValueError, KeyError, TypeError) as exc:
        _fail(path, text, "payments", f"invalid payments: {exc}")

    g = data["grid"]
    if not isinstance(g, dict):
        _fail(path, text, "grid", "'grid' must be an object")
    for key in ("start", "end", "steps"):
        if key not in g:
            _fail(path, text, "grid", f"grid is missing {key!r}")
    try:
        start, end = float(g["start"]), float(g["end"])
        steps = int(grid_steps if grid_steps is not None else g["steps"])
        sub = int(substeps if substeps is not None else g.get("substeps", 10))
    except (TypeError, ValueError):
        _fail(path, text, "grid", "grid values must be numbers")
    if not end > start or steps < 1 or sub < 1:
        _fail(path, text, "grid", "grid needs start < end and positive steps and substeps")
    if end > payments.horizon + 1e-12:
        _fail(path, text, "end", f"grid end {end} exceeds the payment horizon {payments.horizon}")
    grid = TimeGrid.uniform(start, end, steps, sub).with_breakpoints(list(model.breakpoints) + list(payments.time_breakpoints))

    conds = []
    if not isinstance(data["conditioning"], list) or not data["conditioning"]:
        _fail(path, text, "conditioning", "'conditioning' must be a nonempty list")
    for item in data["conditioning"]:
        if not isinstance(item, dict):
            _fail(path, text, "conditioning", "conditioning entries must be objects")
        if "history" in item:
            try:
                hist = History.from_pairs([tuple(p) for p in item["history"]])
            except (ValueError, TypeError) as exc:
                _fail(path, text, "history", f"invalid history: {exc}")
            if hist.last_time > start:
                _fail(path, text, "history", "history has jumps after the grid start")
            conds.append(Conditioning(hist.last_state, start - hist.last_time, hist))
            continue
        try:
            i, u = int(item["state"]), float(item.get("duration", 0.0))
        except (KeyError, TypeError, ValueError):
            _fail(path, text, "state", "conditioning entries need 'state' (and optionally 'duration')")
        if not 1 <= i <= model.J:
            _fail(path, text, "state", f"unknown macrostate {i}")
        if u < 0 or u > start + 1e-12:
            _fail(path, text, "duration", f"duration {u} must lie in [0, grid start]")
        if model.reset is None:
            _fail(path, text, "state", "(state, duration) conditioning needs a reset model; give a 'history' instead")
        conds.append(Conditioning(i, u))

    behaviour = None
    if data.get("behaviour") is not None:
        try:
            behaviour = BehaviourSpec.from_dict(data["behaviour"])
        except (ValueError, KeyError, TypeError) as exc:
            _fail(path, text, "behaviour", f"invalid behaviour: {exc}")

    simb = data.get("simulation") or {}
    n_paths = simb.get("n_paths")
    if n_paths is not None and (not isinstance(n_paths, int) or n_paths < 2):
        _fail(path, text, "n_paths", "n_paths must be an integer >= 2")
    run_seed = int(seed if seed is not None else simb.get("seed", 0))
    output = Path(out) if out is not None else base / data.get("output", "out")
    quad = data.get("quadrature")
    if quad not in (None, "trapezoid", "stieltjes"):
        _fail(path, text, "quadrature", "quadrature must be 'trapezoid' or 'stieltjes'")
    digest = hashlib.sha256(text.encode()).hexdigest()
    return RunConfig(path, text, digest, model, sim_model, payments, grid, steps, sub, conds, behaviour, n_paths, run_seed, output, quad)


def _check_model(model: AggregateModel, cfg: RunConfig, what: str) -> None:
    samples = np.unique(np.concatenate(([0.0], np.linspace(0.0, cfg.end, 64), cfg.grid.points)))
    report = validate(model, samples)
    if not report.ok:
        raise ConfigError(f"{what} failed validation: {report.summary()}", _line_of(cfg.text, what), str(cfg.path))


def _tables(cfg: RunConfig) -> tuple[list, dict]:
    model, pay, t, grid = cfg.model, cfg.payments, cfg.start, cfg.grid
    fast = bool(pay.duration_independent)
    tables = []
    for c in cfg.conditioning:
        target = c.history if c.history is not None else (c.state, c.duration)
        if cfg.behaviour is not None:
            table = scaled_cashflow(model, cfg.behaviour, target, t, grid, pay, quadrature=cfg.quadrature)
        elif fast:
            table = fast_path_cashflow(model, target, t, grid, pay)
        elif c.history is not None:
            table = expected_cashflow_general(model, c.history, t, grid, pay, cfg.quadrature or "stieltjes")
        else:
            table = expected_cashflow_reset(model, c.state, c.duration, t, grid, pay, cfg.quadrature or "trapezoid")
        tables.append(table)
    meta = {
        "fast_path": fast,
        "method": sorted({tb.method for tb in tables}),
    }
    return tables, meta


def _report_base(cfg: RunConfig, meta: dict) -> dict:
    return {
        "config": str(cfg.path.name),
        "config_sha256": cfg.sha256,
        "model": {"macrostates": list(cfg.model.names), "micro_counts": list(cfg.model.micro_counts), "reset": cfg.model.is_reset},
        "grid": {
            "start": cfg.start,
            "end": cfg.end,
            "steps": cfg.steps,
            "substeps": cfg.substeps,
            "points": int(cfg.grid.points.size),
        },
        "tolerances": {"edge": EDGE, "blowup_threshold": BLOWUP_THRESHOLD},
        "quadrature": cfg.quadrature,
        "behaviour": cfg.behaviour.to_dict() if cfg.behaviour is not None else None,
        **meta,
    }


def _write_reserves(path: Path, cfg: RunConfig, tables) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_sha256={cfg.sha256}\n")
        fh.write("initial_state,initial_duration,reserve\n")
        for c, tb in zip(cfg.conditioning, tables):
            fh.write(f"{c.state},{_fmt(c.duration)},{_fmt(tb.reserve[0])}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_valuation(cfg: RunConfig) -> dict:
    _check_model(cfg.model, cfg, "model")
    tables, meta = _tables(cfg)
    cfg.output.mkdir(parents=True, exist_ok=True)
    write_cashflow_csv(cfg.output / "cashflows.csv", tables, f"config_sha256={cfg.sha256}")
    _write_reserves(cfg.output / "reserves.csv", cfg, tables)
    report = _report_base(cfg, meta)
    report["reserves"] = [
        {"state": c.state, "duration": c.duration, "reserve": float(tb.reserve[0])} for c, tb in zip(cfg.conditioning, tables)
    ]
    _write_json(cfg.output / "report.json", report)
    log.info("wrote %s", cfg.output)
    return report


def _zscore(analytic: float, mc: float, se: float) -> float:
    diff = analytic - mc
    if se > 0:
        return diff / se
    return 0.0 if abs(diff) <= 1e-9 * max(1.0, abs(analytic)) else math.copysign(math.inf, diff)


def run_verify(cfg: RunConfig) -> tuple[dict, bool]:
    if cfg.n_paths is None:
        raise ConfigError("verify needs a 'simulation' block with n_paths", _line_of(cfg.text, "simulation"), str(cfg.path))
    _check_model(cfg.model, cfg, "model")
    mc_model = cfg.sim_model if cfg.sim_model is not None else cfg.model
    if cfg.sim_model is not None:
        _check_model(cfg.sim_model, cfg, "sim_model")
    tables, meta = _tables(cfg)
    edges = np.linspace(cfg.start, cfg.end, VERIFY_BINS + 1)
    rows = []
    for n, (c, tb) in enumerate(zip(cfg.conditioning, tables)):
        if c.history is not None:
            cond = sim.HistoryStart(c.history, until=cfg.start)
        else:
            cond = sim.StateStart(c.state, c.duration, cfg.start)
        streams = sim.PaymentStreams(cfg.payments, [cfg.start, cfg.end], True, cfg.behaviour)
        binned = sim.PaymentStreams(cfg.payments, edges, False, cfg.behaviour)
        seed = cfg.seed + 1000 * n
        mean_v, se_v = sim.estimate(mc_model, cond, streams, cfg.n_paths, seed)
        mean_b, se_b = sim.estimate(mc_model, cond, binned, cfg.n_paths, seed + 1)
        rows.append((c, "reserve", cfg.start, cfg.end, float(tb.reserve[0]), float(mean_v[0]), float(se_v[0])))
        acc = np.diff(tb.accumulated_at(edges)[0])
        for b in range(VERIFY_BINS):
            rows.append((c, "cashflow", edges[b], edges[b + 1], float(acc[b]), float(mean_b[b]), float(se_b[b])))
    results = []
    with open(_ready(cfg.output) / "verify.csv", "w") as fh:
        fh.write(f"# config_sha256={cfg.sha256}\n")
        fh.write("initial_state,initial_duration,quantity,from,to,analytic,monte_carlo,standard_error,z\n")
        for c, q, a, b, an, mc, se in rows:
            z = _zscore(an, mc, se)
            results.append({"state": c.state, "duration": c.duration, "quantity": q, "from": float(a), "to": float(b), "analytic": an, "monte_carlo": mc, "standard_error": se, "z": z})
            fh.write(",".join([str(c.state), _fmt(c.duration), q, _fmt(a), _fmt(b), _fmt(an), _fmt(mc), _fmt(se), _fmt(z)]) + "\n")
    ok = all(abs(r["z"]) <= Z_LIMIT for r in results)
    report = _report_base(cfg, meta)
    report["verification"] = {
        "n_paths": cfg.n_paths,
        "seed": cfg.seed,
        "z_limit": Z_LIMIT,
        "max_abs_z": max(abs(r["z"]) for r in results),
        "passed": ok,
        "quantities": results,
        "sim_model_override": cfg.sim_model is not None,
    }
    _write_json(cfg.output / "report.json", report)
    return report, ok


def _ready(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aggmark", description="Valuation of aggregate Markov multi-state life insurance models.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "compute cash flows and reserves"), ("verify", "compare analytic results with Monte Carlo")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--grid-steps", type=int, help="override grid.steps")
        sp.add_argument("--substeps", type=int, help="override grid.substeps")
        sp.add_argument("--seed", type=int, help="override simulation.seed")
        sp.add_argument("--out", help="override the output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.grid_steps, args.substeps, args.seed, args.out)
        if args.command == "run":
            report = run_valuation(cfg)
            for r in report["reserves"]:
                print(f"V[state={r['state']}, duration={_fmt(r['duration'])}] = {_fmt(r['reserve'])}")
            return EXIT_OK
        report, ok = run_verify(cfg)
        v = report["verification"]
        print(f"{len(v['quantities'])} quantities, max |z| = {v['max_abs_z']:.3f} ({'pass' if ok else 'FAIL'})")
        return EXIT_OK if ok else EXIT_VERIFY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalBlowupError, BoundViolationError, InfeasibleConditioningError) as exc:
        frames = [f for f in traceback.extract_tb(exc.__traceback__) if "aggmark" in f.filename]
        origin = Path(frames[-1].filename).stem if frames else "aggmark"
        print(f"numerical failure ({origin}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DomainError, ConditioningError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AggmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
