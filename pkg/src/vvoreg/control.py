"""Closed-loop evaluation of local reactive power controllers.

Four approaches are supported: no reactive support, constant lagging power
factor, regression controllers, and regression controllers followed by a
substation tap changer (LTC) decision. Controllers only see their own bus,
so each timestep is one nonlinear power-flow solve (plus a tap search).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .feeder import FeederModel
from .opf import OpfConfig, inverter_capacity, objective_terms
from .powerflow import Injections, PowerFlowSolution, residuals, solve_powerflow
from .regression import RegressionModel, predict
from .scenarios import ScenarioSet

APPROACHES = ("none", "constpf", "regression", "regression-ltc")
KINDS = ("none", "const_pf", "regression")


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerSpec:
    kind: str = "none"
    pf: float = 0.9
    model: Optional[RegressionModel] = None
    clip: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ControlError(f"unknown controller kind {self.kind!r}")
        if not 0.0 < self.pf <= 1.0:
            raise ControlError(f"power factor must be in (0, 1], got {self.pf}")
        if self.kind == "regression" and self.model is None:
            raise ControlError("regression controller needs a model")


@dataclass(frozen=True)
class LtcConfig:
    tap_step: float = 0.00625
    tap_range: int = 16
    v_target: float = 0.98**2
    margin: float = 0.005
    nominal: float = 1.0  # squared slack voltage at tap 0

    @property
    def taps(self) -> np.ndarray:
        return np.arange(-self.tap_range, self.tap_range + 1)

    def slack_v(self, tap):
        return (1.0 + np.asarray(tap) * self.tap_step) ** 2 * self.nominal


def controller_output(spec: ControllerSpec, p_c, q_c, p_g, q_bar):
    """Reactive setpoint from local measurements only (vectorized)."""
    q_bar = np.asarray(q_bar, dtype=float)
    if np.any(q_bar < 0):
        raise ControlError("reactive capacity must be nonnegative")
    if spec.kind == "none":
        return np.zeros(np.broadcast_shapes(np.shape(p_g), q_bar.shape))
    if spec.kind == "const_pf":
        q = np.asarray(p_g, dtype=float) * math.tan(math.acos(spec.pf))
    else:
        q = predict(spec.model, p_c, q_c, p_g, q_bar)
    return np.clip(q, -q_bar, q_bar) if spec.clip else q


def make_specs(approach: str, model: FeederModel,
               models: Optional[Sequence[RegressionModel]] = None,
               pf: float = 0.9, clip: bool = True) -> List[ControllerSpec]:
    """One spec per inverter, in ``model.inverters`` order."""
    if approach not in APPROACHES:
        raise ControlError(f"unknown approach {approach!r}; choose from {', '.join(APPROACHES)}")
    if approach == "none":
        return [ControllerSpec("none", clip=clip) for _ in model.inverters]
    if approach == "constpf":
        return [ControllerSpec("const_pf", pf=pf, clip=clip) for _ in model.inverters]
    by_bus = {m.inverter: m for m in (models or ())}
    missing = [inv.bus for inv in model.inverters if inv.bus not in by_bus]
    if missing:
        raise ControlError(f"no regression model for inverter(s) {', '.join(missing)}")
    return [ControllerSpec("regression", model=by_bus[inv.bus], clip=clip) for inv in model.inverters]


def ltc_select_tap(model: FeederModel, inj: Injections, ltc: LtcConfig = LtcConfig(),
                   v_min: float = OpfConfig().v_min):
    """Tap minimizing ``sum |v - v_target|`` subject to ``min v >= v_min + margin``.

    Ties go to the tap closest to 0. If no tap is feasible the tap with the
    highest minimum voltage wins. ``inj`` may carry batch dimensions; the
    result then has the batch shape.
    """
    taps = ltc.taps
    batch = inj.p.shape[:-1]
    v0 = ltc.slack_v(taps).reshape((-1,) + (1,) * len(batch))
    sol = solve_powerflow(model, inj, v0=v0)
    dev = np.sum(np.abs(sol.v - ltc.v_target), axis=-1)
    vlow = np.min(sol.v, axis=-1)
    feasible = vlow >= v_min + ltc.margin
    # order taps by |tap| so argmin/argmax pick the one closest to 0 on ties
    order = np.argsort(np.abs(taps), kind="stable")
    dev_o = np.where(feasible, dev, np.inf)[order]
    best = order[np.argmin(dev_o, axis=0)]
    fallback = order[np.argmax(vlow[order], axis=0)]
    pick = np.where(np.any(feasible, axis=0), best, fallback)
    out = taps[pick]
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StepResult:
    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    q_g: np.ndarray
    q_bar: np.ndarray
    P0: float
    Q0: float
    tap: int
    objective: float
    converged: bool


@dataclass
class SimulationReport:
    """Per-timestep results of one approach; arrays have a leading time axis."""

    approach: str
    timestamps: np.ndarray
    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    q_g: np.ndarray
    q_bar: np.ndarray
    P0: np.ndarray
    Q0: np.ndarray
    tap: np.ndarray
    objective: np.ndarray
    loss: np.ndarray
    deviation: np.ndarray
    converged: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def step(self, n: int) -> StepResult:
        return StepResult(self.v[n], self.P[n], self.Q[n], self.ell[n], self.q_g[n], self.q_bar[n],
                          float(self.P0[n]), float(self.Q0[n]), int(self.tap[n]),
                          float(self.objective[n]), bool(self.converged[n]))

    @property
    def steps(self) -> List[StepResult]:
        return [self.step(n) for n in range(len(self))]

    @property
    def v_min(self) -> np.ndarray:
        return self.v.min(axis=1)

    @property
    def v_max(self) -> np.ndarray:
        return self.v.max(axis=1)


def objective_value(model: FeederModel, sol: PowerFlowSolution, cfg: OpfConfig = OpfConfig()) -> float:
    """Loss plus weighted voltage deviation on a converged nonlinear solution."""
    if not sol.converged:
        raise ControlError(f"power flow did not converge ({sol.status})")
    return objective_terms(model, sol.v, sol.ell, cfg)[2]


def simulate(model: FeederModel, scenarios: ScenarioSet, specs: Sequence[ControllerSpec],
             ltc: Optional[LtcConfig] = None, cfg: OpfConfig = OpfConfig(),
             approach: str = "", tol: float = 1e-10, chunk: int = 512) -> SimulationReport:
    """Run the controllers against the nonlinear power flow at every timestep."""
    if len(specs) != len(model.inverters):
        raise ControlError(f"{len(model.inverters)} inverters but {len(specs)} controller specs")
    if tuple(scenarios.bus_ids) != tuple(model.bus_ids):
        raise ControlError("scenario buses do not match the feeder")
    Tn, B = scenarios.p_c.shape
    idx = [model.bus_index[inv.bus] for inv in model.inverters]
    s_rated = np.array([inv.s_rated for inv in model.inverters])
    p_g_inv = scenarios.p_g[:, idx]
    q_bar = inverter_capacity(p_g_inv, s_rated)
    q_inv = np.zeros_like(q_bar)
    for k, spec in enumerate(specs):
        j = idx[k]
        q_inv[:, k] = controller_output(spec, scenarios.p_c[:, j], scenarios.q_c[:, j],
                                        scenarios.p_g[:, j], q_bar[:, k])
    q_g = np.zeros((Tn, B))
    q_g[:, idx] = q_inv
    inj = Injections(scenarios.p_c, scenarios.q_c, scenarios.p_g, q_g)

    tap = np.zeros(Tn, dtype=int)
    if ltc is not None:
        for a in range(0, Tn, chunk):
            sl = slice(a, a + chunk)
            part = Injections(inj.p_c[sl], inj.q_c[sl], inj.p_g[sl], inj.q_g[sl])
            tap[sl] = ltc_select_tap(model, part, ltc, cfg.v_min)
        v0 = ltc.slack_v(tap)
    else:
        v0 = np.full(Tn, cfg.slack_v)
    sol = solve_powerflow(model, inj, v0=v0, tol=tol)
    res = residuals(model, sol, inj)
    worst = np.max(np.abs(np.concatenate(
        [res.real_balance, res.reactive_balance, res.voltage_drop, res.current], axis=-1)), axis=-1) \
        if len(model.lines) else np.zeros(Tn)
    converged = (worst <= 1e-8) & np.all(np.isfinite(sol.v), axis=-1) & np.all(sol.v > 0, axis=-1)
    loss = sol.ell @ model.topology.r
    dev = np.sum(np.abs(sol.v - cfg.v_ref), axis=-1)
    obj = loss + cfg.gamma * dev
    return SimulationReport(approach, scenarios.timestamps, sol.v, sol.P, sol.Q, sol.ell, q_inv, q_bar,
                            np.asarray(sol.P0), np.asarray(sol.Q0), tap, obj, loss, dev, converged)


def run_approaches(model: FeederModel, scenarios: ScenarioSet, approaches: Sequence[str],
                   models: Optional[Sequence[RegressionModel]] = None, cfg: OpfConfig = OpfConfig(),
                   ltc: LtcConfig = LtcConfig(), pf: float = 0.9, clip: bool = True
                   ) -> Dict[str, SimulationReport]:
    out = {}
    for name in approaches:
        base = "regression" if name == "regression-ltc" else name
        specs = make_specs(base, model, models, pf, clip)
        out[name] = simulate(model, scenarios, specs, ltc if name == "regression-ltc" else None,
                             cfg, approach=name)
    return out


@dataclass(frozen=True)
class GapSummary:
    approach: str
    gap: np.ndarray  # per step, NaN where excluded
    excluded: int
    max: float
    mean: float
    p50: float
    p95: float
    sub_q_reduction_kvar: Optional[tuple] = None  # (min, max) vs approach "none"
    v_envelope: tuple = ()
    notes: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "approach": self.approach,
            "excluded_steps": self.excluded,
            "gap_max": self.max,
            "gap_mean": self.mean,
            "gap_p50": self.p50,
            "gap_p95": self.p95,
            "sub_q_reduction_kvar": list(self.sub_q_reduction_kvar) if self.sub_q_reduction_kvar else None,
            "v_min": self.v_envelope[0] if self.v_envelope else None,
            "v_max": self.v_envelope[1] if self.v_envelope else None,
            "notes": list(self.notes),
        }


def relative_gaps(objective, opf: Sequence):
    """``(J - J_opf) / J_opf``; NaN where the OPF failed or ``J_opf <= 0``."""
    j_opf = np.array([s.objective if s.ok else np.nan for s in opf])
    good = np.isfinite(j_opf) & (j_opf > 0)
    gap = np.full(len(j_opf), np.nan)
    gap[good] = (np.asarray(objective)[good] - j_opf[good]) / j_opf[good]
    return gap


def gap_report(reports: Mapping[str, SimulationReport], opf: Sequence,
               base_mva: float = 1.0) -> Dict[str, GapSummary]:
    out = {}
    ref = reports.get("none")
    for name, rep in reports.items():
        if len(rep) != len(opf):
            raise ControlError(f"{name}: {len(rep)} steps but {len(opf)} OPF solutions")
        gap = relative_gaps(rep.objective, opf)
        ok = np.isfinite(gap)
        notes = []
        excluded = int((~ok).sum())
        if excluded:
            notes.append(f"{excluded} steps excluded (OPF failed or nonpositive optimum)")
        g = gap[ok]
        stat = (lambda f: float(f(g)) if g.size else math.nan)
        red = None
        if ref is not None and name != "none":
            d = (ref.Q0 - rep.Q0) * base_mva * 1000.0
            red = (float(d.min()), float(d.max()))
        out[name] = GapSummary(name, gap, excluded, stat(np.max), stat(np.mean), stat(np.median),
                               stat(lambda a: np.percentile(a, 95)), red,
                               (float(rep.v.min()), float(rep.v.max())), tuple(notes))
    return out


REPORT_COLUMNS = ("timestep", "approach", "objective", "gap", "v_min", "v_max",
                  "sub_p_kw", "sub_q_kvar", "tap")


def _num(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def report_csv(reports: Mapping[str, SimulationReport], opf: Optional[Sequence] = None,
               base_mva: float = 1.0) -> str:
    """Long-format report; ``gap`` is empty when no OPF reference is given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    kw = base_mva * 1000.0
    for name, rep in reports.items():
        gap = relative_gaps(rep.objective, opf) if opf is not None else np.full(len(rep), np.nan)
        vmin, vmax = rep.v_min, rep.v_max
        for n in range(len(rep)):
            w.writerow([str(rep.timestamps[n]), name, _num(rep.objective[n]), _num(gap[n]),
                        _num(vmin[n]), _num(vmax[n]), _num(rep.P0[n] * kw), _num(rep.Q0[n] * kw),
                        int(rep.tap[n])])
    return buf.getvalue()


def read_report_csv(text: str) -> List[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != REPORT_COLUMNS:
        raise ControlError(f"report columns must be {','.join(REPORT_COLUMNS)}")
    return rows
