"""Command-line front end.

Exit codes: 0 success, 1 domain error (invalid model, infeasible setup,
missing models), 2 I/O error (missing or unparseable files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .control import APPROACHES, ControlError, LtcConfig, gap_report, read_report_csv, report_csv, run_approaches
from .feeder import FeederError, feeder_from_dict, serialize_feeder, synthetic_feeder
from .opf import OpfConfig, OpfError, opf_csv, read_opf_csv, solve_opf_batch
from .regression import RegressionError, StepwiseConfig, dump_models, format_table, parse_models, train_models
from .scenarios import (ScenarioError, SplitSpec, SyntheticConfig, generate_synthetic, load_scenarios,
                        serialize_scenarios, split)

log = logging.getLogger("vvoreg")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2

DEFAULTS = {
    "gamma": 1.0,
    "vmin": OpfConfig().v_min,
    "vmax": OpfConfig().v_max,
    "seed": 0,
    "jobs": 1,
    "approach": list(APPROACHES),
    "days": 28,
    "validation_days": 1,
    "n_buses": 129,
    "base_kv": 5.0,
    "pv_fraction": 1.0,
    "dip": True,
    "out": ".",
    "tau_add": StepwiseConfig().tau_add,
    "tau_remove": StepwiseConfig().tau_remove,
}


class IoFailure(Exception):
    pass


def _read(path: Optional[str], what: str) -> str:
    if not path:
        raise IoFailure(f"missing --{what}")
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {what} file {path}: {exc.strerror or exc}") from None


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def _load_feeder(path):
    text = _read(path, "feeder")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: not valid JSON ({exc})") from None
    return feeder_from_dict(doc)


def _load_scenarios(path, model):
    return load_scenarios(_read(path, "scenarios"), model, source_tag=Path(path).name)


def _opf_config(a) -> OpfConfig:
    cfg = OpfConfig(gamma=a.gamma, v_min=a.vmin, v_max=a.vmax)
    cfg.check()
    return cfg


def _out(a) -> Path:
    return Path(a.out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(a) -> int:
    try:
        model = _load_feeder(a.feeder)
    except FeederError as exc:
        print(f"invalid feeder: {exc}")
        return EXIT_DOMAIN
    print(f"ok: {model.n_buses} buses, {len(model.lines)} lines, {len(model.inverters)} inverters")
    return EXIT_OK


def cmd_synth(a) -> int:
    out = _out(a)
    if a.feeder:
        model = _load_feeder(a.feeder)
    else:
        model = synthetic_feeder(a.n_buses, seed=a.seed, base_kv=a.base_kv)
        _write(out / "feeder.json", serialize_feeder(model))
    cfg = SyntheticConfig(days=a.days, seed=a.seed, pv_fraction=a.pv_fraction, dip=a.dip)
    sc = generate_synthetic(model, cfg)
    v = a.validation_days
    train, val = split(sc, SplitSpec.by_days(cfg.start, range(v, cfg.days), range(v)))
    _write(out / "scenarios.csv", serialize_scenarios(sc, model))
    _write(out / "train.csv", serialize_scenarios(train, model))
    _write(out / "validation.csv", serialize_scenarios(val, model))
    meta = {"seed": a.seed, "days": a.days, "validation_days": v, "pv_fraction": a.pv_fraction,
            "dip": a.dip, "n_buses": model.n_buses, "base_kv": model.base_kv, "source": sc.source}
    _write(out / "synth.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(sc)} steps ({len(train)} train, {len(val)} validation) for "
          f"{model.n_buses} buses / {len(model.inverters)} inverters to {out}")
    return EXIT_OK


def cmd_opf(a) -> int:
    model = _load_feeder(a.feeder)
    sc = _load_scenarios(a.scenarios, model)
    cfg = _opf_config(a)
    sols = solve_opf_batch(model, sc, cfg, jobs=a.jobs)
    path = _out(a)
    if path.suffix.lower() != ".csv":
        path = path / "opf.csv"
    _write(path, opf_csv(model, sols))
    ok = sum(s.ok for s in sols)
    exact = sum(s.exact for s in sols)
    print(f"{len(sols)} scenarios: {ok} optimal, {exact} exact, {len(sols) - ok} failed -> {path}")
    statuses = sorted({s.status for s in sols if not s.ok})
    if statuses:
        print("failures: " + ", ".join(statuses))
    if sols and ok == 0:
        print("no scenario could be solved; check --vmin/--vmax and --gamma")
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_train(a) -> int:
    model = _load_feeder(a.feeder)
    sc = _load_scenarios(a.scenarios, model)
    cfg = _opf_config(a)
    if a.solutions:
        sols = read_opf_csv(_read(a.solutions, "solutions"), model, sc)
    else:
        sols = solve_opf_batch(model, sc, cfg, jobs=a.jobs)
    prov = {"train_start": str(sc.timestamps[0]) if len(sc) else "",
            "train_end": str(sc.timestamps[-1]) if len(sc) else "",
            "gamma": cfg.gamma, "source": sc.source}
    models = train_models(sc, sols, model, StepwiseConfig(a.tau_add, a.tau_remove), provenance=prov)
    path = _out(a)
    if path.suffix.lower() != ".json":
        path = path / "models.json"
    _write(path, dump_models(models))
    for m in models:
        print(format_table(m))
    print(f"{len(models)} models -> {path}")
    return EXIT_OK


def cmd_simulate(a) -> int:
    model = _load_feeder(a.feeder)
    sc = _load_scenarios(a.scenarios, model)
    cfg = _opf_config(a)
    approaches = list(dict.fromkeys(a.approach))
    models = None
    if any(x.startswith("regression") for x in approaches):
        if not a.models:
            raise ControlError("regression approaches need --models")
        models = parse_models(_read(a.models, "models"))
    ltc = LtcConfig()
    reports = run_approaches(model, sc, approaches, models, cfg, ltc)
    opf = read_opf_csv(_read(a.solutions, "solutions"), model, sc) if a.solutions else None
    out = _out(a)
    _write(out / "report.csv", report_csv(reports, opf, model.base_mva))
    summary = {"approaches": approaches, "steps": len(sc), "gamma": cfg.gamma}
    if opf is not None:
        summary["gaps"] = {k: g.to_dict() for k, g in gap_report(reports, opf, model.base_mva).items()}
    summary["objective_mean"] = {k: float(np.mean(r.objective)) if len(r) else None for k, r in reports.items()}
    summary["nonconverged_steps"] = {k: int((~r.converged).sum()) for k, r in reports.items()}
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    _write(out / "summary.json", text)
    print(text, end="")
    return EXIT_OK


def cmd_compare(a) -> int:
    merged = {}
    for path in a.reports:
        for row in read_report_csv(_read(path, "report")):
            merged.setdefault(row["approach"], []).append(row)
    summary = {}
    for name, rows in merged.items():
        obj = np.array([float(r["objective"]) for r in rows if r["objective"]])
        gaps = np.array([float(r["gap"]) for r in rows if r["gap"]])
        summary[name] = {
            "steps": len(rows),
            "objective_mean": float(obj.mean()) if obj.size else None,
            "gap_mean": float(gaps.mean()) if gaps.size else None,
            "gap_max": float(gaps.max()) if gaps.size else None,
            "v_min": min(float(r["v_min"]) for r in rows if r["v_min"]),
            "v_max": max(float(r["v_max"]) for r in rows if r["v_max"]),
            "tap_range": [min(int(r["tap"]) for r in rows), max(int(r["tap"]) for r in rows)],
        }
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if a.out and a.out != ".":
        _write(Path(a.out), text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vvoreg", description="Regression-based inverter reactive power control")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        # defaults stay None so config files can fill them before DEFAULTS do
        sp.add_argument("--config", help="YAML or JSON file supplying any flag")
        opts = {
            "feeder": dict(help="feeder JSON document"),
            "scenarios": dict(help="scenario CSV"),
            "models": dict(help="regression model file"),
            "solutions": dict(help="OPF solution CSV aligned with --scenarios"),
            "gamma": dict(type=float, help="voltage deviation weight (default 1.0)"),
            "vmin": dict(type=float, help="lower squared-voltage bound, p.u.^2 (default 0.9025)"),
            "vmax": dict(type=float, help="upper squared-voltage bound, p.u.^2 (default 1.1025)"),
            "approach": dict(action="append", choices=APPROACHES, help="repeatable; default all four"),
            "seed": dict(type=int),
            "jobs": dict(type=int, help="worker processes for batch OPF"),
            "out": dict(help="output file or directory"),
        }
        for n in names:
            sp.add_argument(f"--{n}", **opts[n])

    sp = sub.add_parser("validate", help="check a feeder document")
    common(sp, "feeder")
    sp = sub.add_parser("synth", help="generate a synthetic feeder and scenarios")
    common(sp, "feeder", "seed", "out")
    sp.add_argument("--days", type=int)
    sp.add_argument("--validation-days", dest="validation_days", type=int)
    sp.add_argument("--n-buses", dest="n_buses", type=int)
    sp.add_argument("--base-kv", dest="base_kv", type=float)
    sp.add_argument("--pv-fraction", dest="pv_fraction", type=float)
    sp.add_argument("--no-dip", dest="dip", action="store_const", const=False)
    sp = sub.add_parser("opf", help="solve the OPF for every scenario")
    common(sp, "feeder", "scenarios", "gamma", "vmin", "vmax", "jobs", "out")
    sp = sub.add_parser("train", help="fit per-inverter regression controllers")
    common(sp, "feeder", "scenarios", "solutions", "gamma", "vmin", "vmax", "jobs", "out")
    sp.add_argument("--tau-add", dest="tau_add", type=float, help="minimum BIC gain to add a term (default 2)")
    sp.add_argument("--tau-remove", dest="tau_remove", type=float, help="minimum BIC gain to drop a term (default 0)")
    sp = sub.add_parser("simulate", help="closed-loop evaluation of control approaches")
    common(sp, "feeder", "scenarios", "models", "solutions", "gamma", "vmin", "vmax", "approach", "out")
    sp = sub.add_parser("compare", help="merge report files into one summary")
    common(sp, "out")
    sp.add_argument("reports", nargs="+")
    return p


def _merge_config(a) -> None:
    """Fill unset flags from --config, then from DEFAULTS; explicit flags win."""
    conf = {}
    if getattr(a, "config", None):
        text = _read(a.config, "config")
        try:
            conf = json.loads(text) if a.config.endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise IoFailure(f"{a.config}: cannot parse config ({exc})") from None
        conf = {str(k).replace("-", "_"): v for k, v in (conf or {}).items()}
    for key, val in vars(a).items():
        if val is None:
            if key in conf:
                setattr(a, key, conf[key])
            elif key in DEFAULTS:
                setattr(a, key, DEFAULTS[key])
    if getattr(a, "approach", None) is not None and isinstance(a.approach, str):
        a.approach = [a.approach]


COMMANDS = {"validate": cmd_validate, "synth": cmd_synth, "opf": cmd_opf, "train": cmd_train,
            "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv: Optional[Sequence[str]] = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _merge_config(a)
        return COMMANDS[a.command](a)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FeederError, ScenarioError, OpfError, RegressionError, ControlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
