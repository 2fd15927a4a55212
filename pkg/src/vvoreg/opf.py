"""Second-order cone relaxation of the loss/voltage-flattening OPF.

Decision variables per scenario: squared voltage ``v`` at every non-slack
bus, ``P``, ``Q`` and squared current ``l`` per line, reactive output ``q_g``
per inverter, and an epigraph variable ``t`` per bus carrying
``|v - v_ref|``. The objective is ``sum(r * l) + gamma * sum(t)``.
The current equation ``l = (P^2 + Q^2) / v`` is relaxed to the rotated cone
``l * v >= P^2 + Q^2``; exactness is checked after the solve.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
import csv
import io
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from .conic import ConicProblem, RotatedCone, solve_conic
from .feeder import FeederModel
from .powerflow import Injections

log = logging.getLogger(__name__)


class OpfError(ValueError):
    pass


@dataclass(frozen=True)
class OpfConfig:
    gamma: float = 1.0
    v_ref: float = 1.0
    v_min: float = 0.95**2
    v_max: float = 1.05**2
    slack_v: float = 1.0

    def check(self) -> None:
        if self.gamma < 0:
            raise OpfError(f"gamma must be nonnegative, got {self.gamma}")
        if self.v_min > self.v_max:
            raise OpfError(f"voltage bounds infeasible: v_min={self.v_min} > v_max={self.v_max}")
        if self.slack_v <= 0:
            raise OpfError("slack_v must be positive")


def inverter_capacity(p_g, s_rated, tol: float = 1e-12):
    """Reactive headroom ``sqrt(s_rated^2 - p_g^2)``."""
    p_g = np.asarray(p_g, dtype=float)
    s_rated = np.asarray(s_rated, dtype=float)
    if np.any(p_g < -tol) or np.any(p_g > s_rated + tol):
        raise OpfError("PV output must satisfy 0 <= p_g <= s_rated (curtailment is not modelled)")
    return np.sqrt(np.maximum(s_rated**2 - p_g**2, 0.0))


@dataclass(frozen=True)
class OpfLayout:
    """Variable indices of the OPF; -1 marks the slack bus voltage."""

    v: np.ndarray  # per bus
    P: np.ndarray  # per line
    Q: np.ndarray
    ell: np.ndarray
    q_g: np.ndarray  # per inverter
    t: np.ndarray  # per bus
    n_vars: int

    @classmethod
    def for_model(cls, model: FeederModel) -> "OpfLayout":
        T = model.topology
        B, E, I = model.n_buses, len(model.lines), len(model.inverters)
        v = np.full(B, -1, dtype=int)
        nonslack = [j for j in range(B) if j != T.slack]
        v[nonslack] = np.arange(B - 1)
        off = B - 1
        P = off + np.arange(E); off += E
        Q = off + np.arange(E); off += E
        ell = off + np.arange(E); off += E
        q_g = off + np.arange(I); off += I
        t = off + np.arange(B); off += B
        return cls(v, P, Q, ell, q_g, t, off)


def build_opf(model: FeederModel, inj: Injections, cfg: OpfConfig,
              q_bar: Optional[np.ndarray] = None) -> ConicProblem:
    """Assemble the conic program for one scenario (``inj.q_g`` is ignored)."""
    cfg.check()
    T = model.topology
    L = OpfLayout.for_model(model)
    B, E, I = model.n_buses, len(model.lines), len(model.inverters)
    if q_bar is None:
        q_bar = inverter_capacity(inj.p_g[T.inverter_bus], [i.s_rated for i in model.inverters])
    n = L.n_vars
    p = inj.p_c - inj.p_g
    q = np.asarray(inj.q_c, dtype=float)
    inv_on_bus = np.full(B, -1, dtype=int)
    inv_on_bus[T.inverter_bus] = np.arange(I)

    rows, cols, vals, rhs = [], [], [], []

    def add(row, col, val):
        rows.append(row); cols.append(col); vals.append(val)

    for k in range(E):
        j, i = T.line_to[k], T.line_from[k]
        r, x = T.r[k], T.x[k]
        children = np.flatnonzero(T.child_lines[k])
        # real power balance at the downstream bus
        row = 3 * k
        add(row, L.P[k], 1.0)
        for c in children:
            add(row, L.P[c], -1.0)
        add(row, L.ell[k], -r)
        rhs.append(p[j])
        # reactive power balance
        row += 1
        add(row, L.Q[k], 1.0)
        for c in children:
            add(row, L.Q[c], -1.0)
        add(row, L.ell[k], -x)
        if inv_on_bus[j] >= 0:
            add(row, L.q_g[inv_on_bus[j]], 1.0)
        rhs.append(q[j])
        # voltage drop
        row += 1
        add(row, L.v[j], 1.0)
        add(row, L.P[k], 2.0 * r)
        add(row, L.Q[k], 2.0 * x)
        add(row, L.ell[k], -(r * r + x * x))
        if i == T.slack:
            rhs.append(cfg.slack_v)
        else:
            add(row, L.v[i], -1.0)
            rhs.append(0.0)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(3 * E, n))

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    nonslack = L.v >= 0
    lb[L.v[nonslack]] = cfg.v_min
    ub[L.v[nonslack]] = cfg.v_max
    lb[L.q_g] = -q_bar
    ub[L.q_g] = q_bar
    # |v - v_ref| <= t needs no more headroom than this
    t_cap = max(cfg.v_max - cfg.v_ref, cfg.v_ref - cfg.v_min, abs(cfg.slack_v - cfg.v_ref)) + 1.0
    ub[L.t] = t_cap

    grows, gcols, gvals, h = [], [], [], []
    row = 0
    for j in range(B):
        if L.v[j] >= 0:
            grows += [row, row, row + 1, row + 1]
            gcols += [L.v[j], L.t[j], L.v[j], L.t[j]]
            gvals += [1.0, -1.0, -1.0, -1.0]
            h += [cfg.v_ref, -cfg.v_ref]
        else:
            grows += [row, row + 1]
            gcols += [L.t[j], L.t[j]]
            gvals += [-1.0, -1.0]
            h += [cfg.v_ref - cfg.slack_v, cfg.slack_v - cfg.v_ref]
        row += 2
    G_lin = sp.csr_matrix((gvals, (grows, gcols)), shape=(row, n))

    cones = []
    for k in range(E):
        i = T.line_from[k]
        if i == T.slack:
            cones.append(RotatedCone(int(L.ell[k]), None, (int(L.P[k]), int(L.Q[k])), b_const=cfg.slack_v))
        else:
            cones.append(RotatedCone(int(L.ell[k]), int(L.v[i]), (int(L.P[k]), int(L.Q[k]))))

    c = np.zeros(n)
    c[L.ell] = T.r
    c[L.t] = cfg.gamma
    return ConicProblem(c, A, np.asarray(rhs, dtype=float), lb, ub, G_lin, np.asarray(h), tuple(cones))


@dataclass
class OpfSolution:
    status: str
    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    q_g: np.ndarray
    q_bar: np.ndarray
    objective: float
    loss: float
    voltage_deviation: float
    exact: bool
    max_cone_slack: float
    duality_gap: float
    iterations: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    @classmethod
    def failed(cls, model: FeederModel, status: str, message: str = "") -> "OpfSolution":
        B, E, I = model.n_buses, len(model.lines), len(model.inverters)
        nan = np.nan
        return cls(status, np.full(B, nan), np.full(E, nan), np.full(E, nan), np.full(E, nan),
                   np.full(I, nan), np.full(I, nan), nan, nan, nan, False, nan, nan, 0, message)


@dataclass(frozen=True)
class ExactnessReport:
    slack: np.ndarray
    max_slack: float
    exact: bool


def check_exactness(model: FeederModel, sol, tol: float = 1e-6) -> ExactnessReport:
    """Cone slack ``l - (P^2 + Q^2) / v_from`` per line."""
    T = model.topology
    slack = sol.ell - (sol.P**2 + sol.Q**2) / sol.v[T.line_from]
    mx = float(np.max(slack)) if slack.size else 0.0
    return ExactnessReport(slack, mx, bool(mx <= tol))


def objective_terms(model: FeederModel, v, ell, cfg: OpfConfig):
    """(loss, voltage deviation sum, objective) for given voltages and currents."""
    loss = float(np.dot(model.topology.r, ell))
    dev = float(np.sum(np.abs(np.asarray(v) - cfg.v_ref)))
    return loss, dev, loss + cfg.gamma * dev


def solve_opf(model: FeederModel, inj: Injections, cfg: OpfConfig = OpfConfig(),
              exact_tol: float = 1e-6, gap_tol: float = 1e-8, feas_tol: float = 1e-8) -> OpfSolution:
    T = model.topology
    try:
        q_bar = inverter_capacity(inj.p_g[T.inverter_bus], [i.s_rated for i in model.inverters])
        prob = build_opf(model, inj, cfg, q_bar)
    except OpfError as exc:
        return OpfSolution.failed(model, "domain-error", str(exc))
    res = solve_conic(prob, gap_tol=gap_tol, feas_tol=feas_tol)
    if res.status != "optimal":
        sol = OpfSolution.failed(model, res.status, f"conic solver: {res.status}")
        sol.iterations = res.iterations
        return sol
    L = OpfLayout.for_model(model)
    x = res.x
    v = np.where(L.v >= 0, x[np.maximum(L.v, 0)], cfg.slack_v)
    P, Q, ell, q_g = x[L.P], x[L.Q], x[L.ell], x[L.q_g]
    loss, dev, obj = objective_terms(model, v, ell, cfg)
    sol = OpfSolution("optimal", v, P, Q, ell, q_g, q_bar, obj, loss, dev, False, 0.0,
                      res.gap, res.iterations)
    rep = check_exactness(model, sol, exact_tol)
    sol.exact, sol.max_cone_slack = rep.exact, rep.max_slack
    return sol


def _solve_one(args):
    model, inj, cfg = args
    return solve_opf(model, inj, cfg)


def solve_opf_batch(model: FeederModel, scenarios, cfg: OpfConfig = OpfConfig(),
                    jobs: int = 1) -> List[OpfSolution]:
    """One solution per scenario, in order; failures are recorded per item."""
    items = [(model, scenarios.injections(n), cfg) for n in range(len(scenarios))]
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_solve_one, items, chunksize=max(1, len(items) // (4 * jobs))))
    else:
        out = [_solve_one(it) for it in items]
    bad = sum(not s.ok for s in out)
    if bad:
        log.warning("%d of %d OPF scenarios failed", bad, len(out))
    return out


OPF_COLUMNS = ("scenario_index", "bus", "q_g_opt", "v", "objective", "exact")


def _num(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else ""


def opf_csv(model: FeederModel, solutions: List[OpfSolution]) -> str:
    """One row per (scenario, bus); failed scenarios leave numeric cells empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OPF_COLUMNS)
    inv_col = {model.bus_index[inv.bus]: k for k, inv in enumerate(model.inverters)}
    for n, s in enumerate(solutions):
        for j, bus in enumerate(model.bus_ids):
            q = s.q_g[inv_col[j]] if j in inv_col else (0.0 if s.ok else math.nan)
            w.writerow([n, bus, _num(q), _num(s.v[j]), _num(s.objective), "true" if s.exact else "false"])
    return buf.getvalue()


def read_opf_csv(text: str, model: FeederModel, scenarios) -> List[OpfSolution]:
    """Rebuild per-scenario solutions (v, q_g, q_bar, objective, exact) from ``opf_csv`` output.

    Branch quantities are not stored and come back as NaN; ``q_bar`` is
    recomputed from the scenarios.
    """
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != OPF_COLUMNS:
        raise OpfError(f"OPF file columns must be {','.join(OPF_COLUMNS)}")
    N, B = len(scenarios), model.n_buses
    if len(rows) != N * B:
        raise OpfError(f"OPF file has {len(rows)} rows, expected {N} scenarios x {B} buses")
    T = model.topology
    s_rated = [i.s_rated for i in model.inverters]
    out = []
    for n in range(N):
        block = rows[n * B:(n + 1) * B]
        if any(int(r["scenario_index"]) != n for r in block) or [r["bus"] for r in block] != list(model.bus_ids):
            raise OpfError(f"OPF file rows for scenario {n} are out of order")
        if block[0]["objective"] == "":
            out.append(OpfSolution.failed(model, "failed", "recorded as failed"))
            continue
        v = np.array([float(r["v"]) for r in block])
        q_all = np.array([float(r["q_g_opt"]) for r in block])
        q_bar = inverter_capacity(scenarios.p_g[n, T.inverter_bus], s_rated)
        E = len(model.lines)
        nan = np.full(E, np.nan)
        out.append(OpfSolution("optimal", v, nan, nan.copy(), nan.copy(), q_all[T.inverter_bus], q_bar,
                               float(block[0]["objective"]), math.nan, math.nan,
                               block[0]["exact"] == "true", math.nan, math.nan))
    return out
