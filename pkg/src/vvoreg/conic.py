"""Primal-dual interior-point solver for linear cone programs.

Problems are posed over the product of the nonnegative orthant and
second-order cones::

    minimize    c'x
    subject to  A x = b
                G x + s = h,   s in K

and solved through the homogeneous self-dual embedding with Nesterov-Todd
scaling and a Mehrotra predictor-corrector step. The embedding provides
infeasibility and unboundedness certificates without a phase-one problem.

:class:`ConicProblem` is the modelling front end used by the OPF builder: it
keeps variable bounds, linear inequalities and rotated cones separate and
lowers them to the standard form above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


@dataclass(frozen=True)
class RotatedCone:
    """Membership ``a * b >= sum(y_k**2)`` with ``a, b >= 0``.

    ``a`` and ``b`` are affine: ``x[a_index] + a_const``; an index of ``None``
    means the side is the constant alone.
    """

    a_index: Optional[int]
    b_index: Optional[int]
    y_indices: tuple
    a_const: float = 0.0
    b_const: float = 0.0


@dataclass(frozen=True)
class StandardForm:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    n_orthant: int
    soc_sizes: tuple


@dataclass(frozen=True)
class ConicProblem:
    """Linear objective, equalities, bounds, inequalities and rotated cones.

    ``G_lin x <= h_lin`` holds the general linear inequalities. Bounds may be
    infinite.
    """

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    G_lin: sp.csr_matrix
    h_lin: np.ndarray
    cones: tuple = ()

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    def standard_form(self) -> StandardForm:
        n = self.n_vars
        rows, cols, vals, h = [], [], [], []
        r = 0
        for j in np.flatnonzero(np.isfinite(self.lb)):
            rows.append(r); cols.append(j); vals.append(-1.0); h.append(-self.lb[j])
            r += 1
        for j in np.flatnonzero(np.isfinite(self.ub)):
            rows.append(r); cols.append(j); vals.append(1.0); h.append(self.ub[j])
            r += 1
        G_lin = sp.coo_matrix(self.G_lin)
        rows.extend(G_lin.row + r); cols.extend(G_lin.col); vals.extend(G_lin.data)
        h.extend(self.h_lin)
        r += G_lin.shape[0]
        n_orthant = r

        # cones sorted by size so equal-size blocks are contiguous
        order = sorted(range(len(self.cones)), key=lambda i: len(self.cones[i].y_indices))
        sizes = []
        for i in order:
            cone = self.cones[i]
            # s = (a + b, 2 y, a - b) = h - G x
            for sign, row in ((1.0, r), (-1.0, r + len(cone.y_indices) + 1)):
                if cone.a_index is not None:
                    rows.append(row); cols.append(cone.a_index); vals.append(-1.0)
                if cone.b_index is not None:
                    rows.append(row); cols.append(cone.b_index); vals.append(-sign)
            h.append(cone.a_const + cone.b_const)
            for k, yi in enumerate(cone.y_indices):
                rows.append(r + 1 + k); cols.append(yi); vals.append(-2.0)
                h.append(0.0)
            h.append(cone.a_const - cone.b_const)
            d = len(cone.y_indices) + 2
            sizes.append(d)
            r += d
        G = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
        return StandardForm(
            c=np.asarray(self.c, dtype=float),
            A=sp.csr_matrix(self.A_eq),
            b=np.asarray(self.b_eq, dtype=float),
            G=G,
            h=np.asarray(h, dtype=float),
            n_orthant=n_orthant,
            soc_sizes=tuple(sizes),
        )


@dataclass
class ConicSolution:
    status: str  # optimal | infeasible | unbounded | max-iter | numerical-error
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    primal_objective: float
    dual_objective: float
    gap: float
    relative_gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    history: list = field(default_factory=list, repr=False)


def _jdet(ub):
    """``u0^2 - |u_bar|^2`` with the dominant tail entry factored out.

    Near the boundary of a rotated cone ``(a+b, 2y, a-b)`` with ``a << b`` the
    naive form cancels catastrophically; peeling off the largest entry keeps
    the error relative to the product ``4ab`` instead of ``(a+b)^2``.
    """
    tail = np.abs(ub[:, 1:])
    k = np.argmax(tail, axis=1)
    rows = np.arange(len(ub))
    big = tail[rows, k].copy()
    tail[rows, k] = 0.0
    rest = np.einsum("ij,ij->i", tail, tail)
    return (ub[:, 0] - big) * (ub[:, 0] + big) - rest


class _Cones:
    """Vectorised cone arithmetic; SOC blocks are grouped by dimension."""

    def __init__(self, n_orthant: int, soc_sizes: Sequence[int]):
        self.l = n_orthant
        self.groups = []  # (start, count, dim)
        start = n_orthant
        sizes = list(soc_sizes)
        i = 0
        while i < len(sizes):
            d = sizes[i]
            j = i
            while j < len(sizes) and sizes[j] == d:
                j += 1
            self.groups.append((start, j - i, d))
            start += (j - i) * d
            i = j
        self.m = start
        self.degree = n_orthant + len(sizes)
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for st, k, d in self.groups:
            e[st : st + k * d : d] = 1.0
        self.e = e

    def blocks(self, u):
        return [u[st : st + k * d].reshape(k, d) for st, k, d in self.groups]

    def min_eig(self, u) -> float:
        vals = [np.inf]
        if self.l:
            vals.append(u[: self.l].min())
        for ub in self.blocks(u):
            vals.append((ub[:, 0] - np.linalg.norm(ub[:, 1:], axis=1)).min())
        return float(min(vals))

    def product(self, u, v):
        out = np.empty_like(u)
        out[: self.l] = u[: self.l] * v[: self.l]
        for (st, k, d), ub, vb in zip(self.groups, self.blocks(u), self.blocks(v)):
            ob = out[st : st + k * d].reshape(k, d)
            ob[:, 0] = np.einsum("ij,ij->i", ub, vb)
            ob[:, 1:] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out

    def inv_product(self, lam, d_):
        """Solve lam o x = d_ for x."""
        out = np.empty_like(d_)
        out[: self.l] = d_[: self.l] / lam[: self.l]
        for (st, k, d), lb, db in zip(self.groups, self.blocks(lam), self.blocks(d_)):
            ob = out[st : st + k * d].reshape(k, d)
            l0 = lb[:, 0]
            lbar_d = np.einsum("ij,ij->i", lb[:, 1:], db[:, 1:])
            det = _jdet(lb)
            x0 = (l0 * db[:, 0] - lbar_d) / det
            ob[:, 0] = x0
            ob[:, 1:] = (db[:, 1:] - x0[:, None] * lb[:, 1:]) / l0[:, None]
        return out

    def max_step(self, u, du) -> float:
        alpha = np.inf
        if self.l:
            neg = du[: self.l] < 0
            if neg.any():
                alpha = min(alpha, float(np.min(-u[: self.l][neg] / du[: self.l][neg])))
        for ub, db in zip(self.blocks(u), self.blocks(du)):
            u0, d0 = ub[:, 0], db[:, 0]
            a = d0**2 - np.einsum("ij,ij->i", db[:, 1:], db[:, 1:])
            b = 2.0 * (u0 * d0 - np.einsum("ij,ij->i", ub[:, 1:], db[:, 1:]))
            c = u0**2 - np.einsum("ij,ij->i", ub[:, 1:], ub[:, 1:])
            disc = b**2 - 4.0 * a * c
            with np.errstate(divide="ignore", invalid="ignore"):
                sq = np.sqrt(np.maximum(disc, 0.0))
                q = -0.5 * (b + np.where(b >= 0, sq, -sq))
                r1 = q / a
                r2 = c / q
                cand = np.full(a.shape, np.inf)
                real = disc >= 0
                for r in (r1, r2):
                    ok = real & np.isfinite(r) & (r > 0)
                    cand = np.where(ok, np.minimum(cand, r), cand)
                lin = -u0 / d0
                cand = np.where((d0 < 0) & (lin > 0), np.minimum(cand, lin), cand)
            if cand.size:
                alpha = min(alpha, float(cand.min()))
        return alpha

    def nt_scaling(self, s, z):
        """Return (W blocks, W^-1 blocks, lambda) for the NT scaling point."""
        w_lin = np.sqrt(s[: self.l] / z[: self.l])
        lam = np.empty_like(s)
        lam[: self.l] = np.sqrt(s[: self.l] * z[: self.l])
        W, Winv = [], []
        for (st, k, d), sb, zb in zip(self.groups, self.blocks(s), self.blocks(z)):
            sJs = _jdet(sb)
            zJz = _jdet(zb)
            sn = sb / np.sqrt(sJs)[:, None]
            zn = zb / np.sqrt(zJz)[:, None]
            gamma = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", sn, zn)))
            Jzn = zn.copy()
            Jzn[:, 1:] *= -1.0
            wbar = (sn + Jzn) / (2.0 * gamma)[:, None]
            eta = (sJs / zJz) ** 0.25
            w0, w1 = wbar[:, 0], wbar[:, 1:]
            Wb = np.empty((k, d, d))
            Wb[:, 0, 0] = w0
            Wb[:, 0, 1:] = w1
            Wb[:, 1:, 0] = w1
            Wb[:, 1:, 1:] = np.eye(d - 1) + np.einsum("ki,kj->kij", w1, w1) / (1.0 + w0)[:, None, None]
            Wib = Wb.copy()
            Wib[:, 0, 1:] *= -1.0
            Wib[:, 1:, 0] *= -1.0
            Wb *= eta[:, None, None]
            Wib /= eta[:, None, None]
            W.append(Wb)
            Winv.append(Wib)
            lam[st : st + k * d] = np.einsum("kij,kj->ki", Wb, zb).ravel()
        return w_lin, W, Winv, lam

    def apply(self, w_lin, Wblocks, u, inverse=False):
        out = np.empty_like(u)
        out[: self.l] = u[: self.l] / w_lin if inverse else w_lin * u[: self.l]
        for (st, k, d), Wb, ub in zip(self.groups, Wblocks, self.blocks(u)):
            out[st : st + k * d] = np.einsum("kij,kj->ki", Wb, ub).ravel()
        return out


class _KKT:
    """Sparse factorisation of the scaled KKT matrix

        [ 0        A'  G'W^-1 ]
        [ A        0   0      ]
        [ W^-1 G   0   -I     ]

    whose solution ``(x, y, u)`` gives ``z = W^-1 u`` for the system with the
    ``-W'W`` block. Keeping the third diagonal block at ``-I`` moves the
    ill-conditioning of late iterations into the off-diagonal blocks, where
    pivoting copes with it far better.
    """

    def __init__(self, A, G, cones: _Cones, reg: float = 1e-11, refine: int = 5,
                 ordering: str = "COLAMD"):
        self.ordering = ordering
        self.n = A.shape[1] if A.shape[0] else G.shape[1]
        self.p = A.shape[0]
        self.m = G.shape[0]
        self.cones = cones
        self.reg = reg
        self.refine = refine
        n, p, m = self.n, self.p, self.m
        Ac = sp.coo_matrix(A)
        self.A_part = sp.csc_matrix(
            (np.r_[Ac.data, Ac.data], (np.r_[Ac.row + n, Ac.col], np.r_[Ac.col, Ac.row + n])),
            shape=(n + p + m, n + p + m),
        )
        self.G = sp.csr_matrix(G)
        # block-diagonal pattern of W^-1
        br, bc = [np.arange(cones.l)], [np.arange(cones.l)]
        for st, k, d in cones.groups:
            base = st + d * np.arange(k)
            ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
            br.append((base[:, None, None] + ii).ravel())
            bc.append((base[:, None, None] + jj).ravel())
        self.w_rows = np.concatenate(br)
        self.w_cols = np.concatenate(bc)
        self.N = n + p + m
        self.reg_diag = np.r_[np.full(n, reg), np.full(p, -reg), np.zeros(m)]
        self.minus_I = sp.diags(np.r_[np.zeros(n + p), -np.ones(m)]).tocsc()

    def factor(self, w_lin, Winv_blocks):
        vals = [1.0 / w_lin] + [Wb.ravel() for Wb in Winv_blocks]
        m, n, p = self.m, self.n, self.p
        self.Winv = sp.csr_matrix((np.concatenate(vals), (self.w_rows, self.w_cols)), shape=(m, m))
        Gs = sp.coo_matrix(self.Winv @ self.G)
        off = sp.csc_matrix(
            (np.r_[Gs.data, Gs.data], (np.r_[Gs.row + n + p, Gs.col], np.r_[Gs.col, Gs.row + n + p])),
            shape=(self.N, self.N),
        )
        self.K = (self.A_part + off + self.minus_I).tocsc()
        self.lu = splu((self.K + sp.diags(self.reg_diag)).tocsc(), permc_spec=self.ordering)

    def solve(self, bx, by, bz):
        rhs = np.concatenate([bx, by, self.Winv @ bz])
        sol = self.lu.solve(rhs)
        target = 1e-14 * max(1.0, float(np.abs(rhs).max()))
        for _ in range(self.refine):
            res = rhs - self.K @ sol
            if float(np.abs(res).max()) <= target:
                break
            sol = sol + self.lu.solve(res)
        n, p = self.n, self.p
        return sol[:n], sol[n : n + p], self.Winv @ sol[n + p :]


def _norm(v) -> float:
    return float(np.linalg.norm(v)) if v.size else 0.0


def solve_conic(
    prob,
    gap_tol: float = 1e-8,
    feas_tol: float = 1e-8,
    max_iter: int = 100,
    step: float = 0.99,
    abs_tol: float = 1e-13,
) -> ConicSolution:
    """Solve a :class:`ConicProblem` or :class:`StandardForm`.

    Convergence requires primal and dual residuals below ``feas_tol`` and a
    duality gap ``s'z`` below ``gap_tol`` relative to the objective, or below
    ``abs_tol`` outright (objectives at or near zero).
    """
    sf = prob.standard_form() if isinstance(prob, ConicProblem) else prob
    c, A, b, G, h = sf.c, sf.A, sf.b, sf.G, sf.h
    n = c.shape[0]
    if A.shape[0] == 0:
        A = sp.csr_matrix((0, n))
    cones = _Cones(sf.n_orthant, sf.soc_sizes)
    kkt = _KKT(A, G, cones)
    AT, GT = A.T.tocsr(), G.T.tocsr()
    e = cones.e
    m = cones.m

    # initial point: least-norm s and z, shifted into the cone interior
    kkt.factor(np.ones(cones.l), [np.broadcast_to(np.eye(d), (k, d, d)) for _, k, d in cones.groups])
    x, _, zt = kkt.solve(np.zeros(n), b, h)
    s = -zt
    _, y, z = kkt.solve(-c, np.zeros(A.shape[0]), np.zeros(m))
    ap = -cones.min_eig(s)
    if ap >= -1e-8:
        s = s + (1.0 + ap) * e
    ad = -cones.min_eig(z)
    if ad >= -1e-8:
        z = z + (1.0 + ad) * e
    tau, kappa = 1.0, 1.0

    nb, nh, nc = max(1.0, _norm(b)), max(1.0, _norm(h)), max(1.0, _norm(c))
    history = []
    status = "max-iter"
    it = 0
    for it in range(max_iter + 1):
        r_d = AT @ y + GT @ z + c * tau
        r_p = A @ x - b * tau
        r_g = G @ x + s - h * tau
        cx, by_, hz = float(c @ x), float(b @ y), float(h @ z)
        r_t = kappa + cx + by_ + hz
        sz = float(s @ z)
        mu = (sz + tau * kappa) / (cones.degree + 1)

        pres = max(_norm(r_p) / nb, _norm(r_g) / nh) / tau
        dres = _norm(r_d) / nc / tau
        pcost, dcost = cx / tau, -(by_ + hz) / tau
        gap = sz / tau**2
        rgap = gap / max(abs(pcost), abs(dcost), 1e-300)
        history.append((it, pcost, dcost, pres, dres, gap, tau, kappa))

        if pres <= feas_tol and dres <= feas_tol and (rgap <= gap_tol or gap <= abs_tol):
            status = "optimal"
            break
        if by_ + hz < 0 and _norm(AT @ y + GT @ z) / -(by_ + hz) <= feas_tol:
            status = "infeasible"
            break
        if cx < 0 and max(_norm(A @ x), _norm(G @ x + s)) / -cx <= feas_tol:
            status = "unbounded"
            break
        if it == max_iter:
            break

        try:
            w_lin, W, Winv, lam = cones.nt_scaling(s, z)
            kkt.factor(w_lin, Winv)
        except (RuntimeError, FloatingPointError, ValueError):
            status = "numerical-error"
            break
        x1, y1, z1 = kkt.solve(-c, b, h)
        denom1 = float(c @ x1 + b @ y1 + h @ z1) - kappa / tau

        def direction(sigma, ds_rhs, dk_rhs):
            Wl = cones.apply(w_lin, W, cones.inv_product(lam, ds_rhs))
            x2, y2, z2 = kkt.solve(-(1 - sigma) * r_d, -(1 - sigma) * r_p, -(1 - sigma) * r_g - Wl)
            dtau = (
                -(1 - sigma) * r_t - float(c @ x2 + b @ y2 + h @ z2) - dk_rhs / tau
            ) / denom1
            dx, dy, dz = x2 + dtau * x1, y2 + dtau * y1, z2 + dtau * z1
            ds = -(1 - sigma) * r_g + h * dtau - G @ dx
            dkappa = (dk_rhs - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        def max_alpha(dz, ds, dtau, dkappa):
            a = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        lamlam = cones.product(lam, lam)
        aff = direction(0.0, -lamlam, -tau * kappa)
        alpha_a = min(1.0, max_alpha(aff[2], aff[3], aff[4], aff[5]))
        sigma = (1.0 - alpha_a) ** 3

        ds_s = cones.apply(w_lin, Winv, aff[3], inverse=True)
        dz_s = cones.apply(w_lin, W, aff[2])
        corr = cones.product(ds_s, dz_s)
        dx, dy, dz, ds, dtau, dkappa = direction(
            sigma,
            -lamlam - corr + sigma * mu * e,
            -tau * kappa - aff[4] * aff[5] + sigma * mu,
        )
        alpha = min(1.0, step * max_alpha(dz, ds, dtau, dkappa))
        if not np.isfinite(alpha) or alpha <= 1e-12:
            status = "numerical-error"
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkappa

    if status in ("infeasible", "unbounded"):
        scale = 1.0
    else:
        scale = 1.0 / tau
    return ConicSolution(
        status=status,
        x=x * scale,
        y=y * scale,
        z=z * scale,
        s=s * scale,
        primal_objective=pcost,
        dual_objective=dcost,
        gap=gap,
        relative_gap=rgap,
        primal_residual=pres,
        dual_residual=dres,
        iterations=it,
        history=history,
    )
