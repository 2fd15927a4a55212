"""Backward/forward sweep for the nonlinear branch-flow (DistFlow) equations.

For a line ``k`` from bus ``i`` to bus ``j``::

    P_k = p_j + r_k l_k + sum(P_c for child lines c of j)
    Q_k = q_j + x_k l_k + sum(Q_c ...)
    v_j = v_i - 2 (r_k P_k + x_k Q_k) + (r_k^2 + x_k^2) l_k
    l_k = (P_k^2 + Q_k^2) / v_i

with ``p = p_c - p_g`` and ``q = q_c - q_g`` the net demand. Voltages are
squared magnitudes. Every quantity may carry leading batch dimensions, so a
grid of candidate setpoints is solved in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederModel


@dataclass(frozen=True)
class Injections:
    """Per-bus consumption and generation in p.u., in ``model.buses`` order."""

    p_c: np.ndarray
    q_c: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray

    @classmethod
    def zeros(cls, n_buses: int) -> "Injections":
        z = np.zeros(n_buses)
        return cls(z, z, z, z)

    @classmethod
    def build(cls, n_buses, p_c=None, q_c=None, p_g=None, q_g=None) -> "Injections":
        arrs = [np.zeros(n_buses) if a is None else np.asarray(a, dtype=float)
                for a in (p_c, q_c, p_g, q_g)]
        shape = np.broadcast_shapes(*(a.shape for a in arrs))
        return cls(*(np.broadcast_to(a, shape) for a in arrs))

    @property
    def p(self) -> np.ndarray:
        return self.p_c - self.p_g

    @property
    def q(self) -> np.ndarray:
        return self.q_c - self.q_g

    def with_q_g(self, q_g) -> "Injections":
        q_g = np.asarray(q_g, dtype=float)
        shape = np.broadcast_shapes(self.p_c.shape, q_g.shape)
        return Injections(*(np.broadcast_to(a, shape) for a in (self.p_c, self.q_c, self.p_g, q_g)))


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray  # (..., B) squared voltage magnitudes
    P: np.ndarray  # (..., E) sending-end real flow
    Q: np.ndarray
    ell: np.ndarray  # (..., E) squared current magnitude
    P0: np.ndarray  # substation real injection
    Q0: np.ndarray
    converged: bool
    iterations: int
    status: str  # converged | max-iter | collapse


@dataclass(frozen=True)
class ResidualReport:
    real_balance: np.ndarray
    reactive_balance: np.ndarray
    voltage_drop: np.ndarray
    current: np.ndarray

    @property
    def max(self) -> dict:
        out = {}
        for name in ("real_balance", "reactive_balance", "voltage_drop", "current"):
            a = np.abs(getattr(self, name))
            out[name] = float(a.max()) if a.size else 0.0
        return out

    @property
    def worst(self) -> float:
        return max(self.max.values())


class PowerFlowError(RuntimeError):
    pass


def solve_powerflow(
    model: FeederModel,
    inj: Injections,
    v0=1.0,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> PowerFlowSolution:
    """Fixed-point sweep; stops when ``max |dv| <= tol`` across the batch."""
    if np.any(np.asarray(v0) <= 0):
        raise PowerFlowError("slack voltage must be positive")
    T = model.topology
    p, q = inj.p, inj.q
    batch = np.broadcast_shapes(p.shape[:-1], np.shape(v0))
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), batch)[..., None]
    S, SL = T.subtree, T.line_subtree
    r, x = T.r, T.x
    z2 = r**2 + x**2
    pd = p @ S.T
    qd = q @ S.T
    E = len(r)
    ell = np.zeros(batch + (E,))
    v = np.broadcast_to(v0, batch + (model.n_buses,)).copy()
    status, it = "max-iter", 0
    for it in range(1, max_iter + 1):
        P = pd + (r * ell) @ SL.T
        Q = qd + (x * ell) @ SL.T
        drop = 2.0 * (r * P + x * Q) - z2 * ell
        v_new = v0 - drop @ S
        if np.any(v_new <= 0) or not np.all(np.isfinite(v_new)):
            status = "collapse"
            v = v_new
            break
        ell = (P**2 + Q**2) / v_new[..., T.line_from]
        dv = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        v = v_new
        if dv <= tol:
            status = "converged"
            break
    P = pd + (r * ell) @ SL.T
    Q = qd + (x * ell) @ SL.T
    if status != "collapse":
        v = v0 - (2.0 * (r * P + x * Q) - z2 * ell) @ S
    from_slack = (T.line_from == T.slack).astype(float)
    P0 = P @ from_slack + p[..., T.slack]
    Q0 = Q @ from_slack + q[..., T.slack]
    return PowerFlowSolution(v, P, Q, ell, P0, Q0, status == "converged", it, status)


def residuals(model: FeederModel, sol, inj: Injections) -> ResidualReport:
    """Per-line residuals of the four branch-flow equations.

    ``sol`` needs ``v``, ``P``, ``Q`` and ``ell`` attributes, so OPF solutions
    can be checked too.
    """
    T = model.topology
    p, q = inj.p, inj.q
    P, Q, ell, v = sol.P, sol.Q, sol.ell, sol.v
    CL = T.child_lines
    real = P - T.r * ell - p[..., T.line_to] - P @ CL.T
    reac = Q - T.x * ell - q[..., T.line_to] - Q @ CL.T
    vd = v[..., T.line_to] - v[..., T.line_from] + 2.0 * (T.r * P + T.x * Q) - (T.r**2 + T.x**2) * ell
    cur = ell - (P**2 + Q**2) / v[..., T.line_from]
    return ResidualReport(real, reac, vd, cur)


def line_losses(model: FeederModel, sol) -> np.ndarray:
    """Total resistive loss sum(r * l) (batch-aware)."""
    return sol.ell @ model.topology.r
