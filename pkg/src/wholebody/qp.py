"""Dense convex QP solver (dual active-set, Goldfarb-Idnani).

Solves::

    minimize    1/2 x'Hx + g'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

The dual method starts from the unconstrained minimizer and adds violated
constraints one at a time, so no feasible starting point is needed.  The
reduced matrices are refactorized (Cholesky) on every active-set change,
which is cheap at the tens-of-variables scale used here and keeps the
iteration deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    hessian: np.ndarray
    gradient: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None

    def __post_init__(self):
        self.hessian = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        n = self.hessian.shape[0]
        if self.hessian.shape != (n, n):
            raise ValueError("hessian must be square")
        if np.max(np.abs(self.hessian - self.hessian.T), initial=0.0) > 1e-10 * max(
            1.0, np.max(np.abs(self.hessian))
        ):
            raise ValueError("hessian must be symmetric")
        self.gradient = np.asarray(self.gradient, dtype=float).reshape(n)
        self.A_eq, self.b_eq = self._block(self.A_eq, self.b_eq, n, "equality")
        self.A_in, self.b_in = self._block(self.A_in, self.b_in, n, "inequality")

    @staticmethod
    def _block(A, b, n, what):
        if A is None:
            return np.zeros((0, n)), np.zeros(0)
        A = np.asarray(A, dtype=float).reshape(-1, n)
        b = np.asarray(b, dtype=float).reshape(-1)
        if b.size != A.shape[0]:
            raise ValueError(f"{what} block has {A.shape[0]} rows but {b.size} bounds")
        return A, b

    @property
    def n(self) -> int:
        return self.hessian.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.hessian @ x + self.gradient @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    status: str
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    active: list = field(default_factory=list)
    kkt_residual: float = float("inf")
    iterations: int = 0
    objective: float = float("nan")
    farkas: Optional[np.ndarray] = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residual(problem: QpProblem, x, y, u) -> float:
    """Max-norm of stationarity, primal and dual feasibility and complementarity."""
    stat = problem.hessian @ x + problem.gradient + problem.A_eq.T @ y + problem.A_in.T @ u
    parts = [np.abs(stat), np.abs(problem.A_eq @ x - problem.b_eq)]
    if problem.A_in.size:
        slack = problem.b_in - problem.A_in @ x
        parts += [np.maximum(-slack, 0.0), np.maximum(-u, 0.0), np.abs(u * slack)]
    return float(max((p.max() for p in parts if p.size), default=0.0))


def _factor(hessian):
    try:
        return sla.cho_factor(hessian, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        # positive semidefinite: the smallest shift that makes it factorizable
        shift = 1e-10 * max(1.0, float(np.max(np.abs(np.diag(hessian)))))
        n = hessian.shape[0]
        return sla.cho_factor(hessian + shift * np.eye(n), lower=True), shift


def solve_qp(problem: QpProblem, tolerance: float = 1e-9, max_iterations: int = 200) -> QpSolution:
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    n = problem.n
    n_eq = problem.A_eq.shape[0]
    # constraint normals in the "N'x >= b" convention used by the dual method
    normals = np.vstack([-problem.A_eq, -problem.A_in]) if n_eq + problem.A_in.shape[0] else np.zeros((0, n))
    rhs = np.concatenate([-problem.b_eq, -problem.b_in])
    m_total = normals.shape[0]

    chol, _ = _factor(problem.hessian)
    Ginv = sla.cho_solve(chol, np.eye(n), check_finite=False)
    x = -Ginv @ problem.gradient

    active: list[int] = []
    u = np.zeros(0)

    def directions(p):
        """Primal step direction z and dual direction r for adding constraint p."""
        if not active:
            return Ginv @ normals[p], np.zeros(0)
        Na = normals[active].T
        GN = Ginv @ Na
        S = Na.T @ GN
        try:
            cS = sla.cho_factor(S, lower=True, check_finite=False)
            r = sla.cho_solve(cS, GN.T @ normals[p], check_finite=False)
        except np.linalg.LinAlgError:
            r = np.linalg.lstsq(S, GN.T @ normals[p], rcond=None)[0]
        z = Ginv @ normals[p] - GN @ r
        return z, r

    def slack(p):
        return float(normals[p] @ x - rhs[p])

    def polish():
        """Re-solve the KKT system of the final active set in one shot.

        Removes the round-off accumulated over the steps; kept only if it
        stays primal and dual feasible.
        """
        nonlocal x, u
        if not active:
            return
        Na = normals[active].T
        m = Na.shape[1]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = problem.hessian
        K[:n, n:] = -Na
        K[n:, :n] = Na.T
        b = np.concatenate([-problem.gradient, rhs[active]])
        try:
            sol = np.linalg.solve(K, b)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, b, rcond=None)[0]
        x_new, u_new = sol[:n], sol[n:]
        ineq = np.array([c >= n_eq for c in active])
        if np.any(u_new[ineq] < -tolerance):
            return
        if m_total and np.min(normals @ x_new - rhs) < -tolerance * scale:
            return
        x, u = x_new, u_new

    def finish(status, farkas=None, iters=0):
        if status == OPTIMAL:
            polish()
        y = np.zeros(n_eq)
        lam = np.zeros(problem.A_in.shape[0])
        for k, c in enumerate(active):
            if c < n_eq:
                y[c] = u[k]
            else:
                lam[c - n_eq] = u[k]
        return QpSolution(
            x=x.copy(),
            status=status,
            eq_multipliers=y,
            in_multipliers=lam,
            active=[c - n_eq for c in active if c >= n_eq],
            kkt_residual=kkt_residual(problem, x, y, lam),
            iterations=iters,
            objective=problem.objective(x),
            farkas=farkas,
        )

    scale = max(1.0, float(np.abs(rhs).max(initial=0.0)))

    # equalities first; their multipliers are free in sign and never dropped
    if n_eq:
        Ne = normals[:n_eq].T
        GN = Ginv @ Ne
        S = Ne.T @ GN
        try:
            cS = sla.cho_factor(S, lower=True, check_finite=False)
            well_posed = np.min(np.abs(np.diag(cS[0]))) > 1e-7 * np.sqrt(np.max(np.diag(S)))
        except np.linalg.LinAlgError:
            well_posed = False
        if well_posed:
            # independent rows: all of them at once
            u = sla.cho_solve(cS, rhs[:n_eq] - Ne.T @ x, check_finite=False)
            x = x + GN @ u
            active = list(range(n_eq))
    for p in range(len(active), n_eq):
        z, r = directions(p)
        s = slack(p)
        zn = float(z @ normals[p])
        if abs(zn) <= 1e-14 * max(1.0, float(normals[p] @ normals[p])):
            if abs(s) <= tolerance * scale:
                continue  # linearly dependent and consistent
            return finish(INFEASIBLE, farkas=_dependent_certificate(normals, active, p, n_eq))
        t = -s / zn
        x = x + t * z
        u = np.concatenate([u - t * r, [t]])
        active.append(p)

    it = 0
    while it < max_iterations:
        it += 1
        mask = np.ones(m_total, dtype=bool)
        mask[:n_eq] = False
        mask[active] = False
        inactive = np.flatnonzero(mask)
        if not inactive.size:
            return finish(OPTIMAL, iters=it)
        slacks = normals[inactive] @ x - rhs[inactive]
        worst = int(np.argmin(slacks))  # ties resolve to the lowest index
        if slacks[worst] >= -tolerance * scale:
            return finish(OPTIMAL, iters=it)
        p = int(inactive[worst])
        u_plus = np.concatenate([u, [0.0]])
        while True:
            z, r = directions(p)
            zn = float(z @ normals[p])
            # z vanishes when normal p lies in the span of the active normals
            degenerate = zn <= 1e-12 * float(normals[p] @ Ginv @ normals[p]) or len(active) >= n
            full = np.inf if degenerate else -slack(p) / zn
            partial, drop = np.inf, None
            for k, c in enumerate(active):
                if c >= n_eq and r[k] > 1e-14:
                    ratio = u_plus[k] / r[k]
                    if ratio < partial:
                        partial, drop = ratio, k
            t = min(full, partial)
            if not np.isfinite(t):
                cert = np.zeros(m_total)
                cert[p] = 1.0
                for k, c in enumerate(active):
                    cert[c] = -r[k]
                return finish(INFEASIBLE, farkas=cert, iters=it)
            if np.isfinite(full):
                x = x + t * z
            u_plus[:-1] -= t * r
            u_plus[-1] += t
            if t == full:
                active.append(p)
                u = u_plus
                break
            del active[drop]
            u_plus = np.delete(u_plus, drop)
            it += 1
            if it >= max_iterations:
                u = u_plus[:-1]
                return finish(MAX_ITER, iters=it)
    return finish(MAX_ITER, iters=it)


def _dependent_certificate(normals, active, p, n_eq):
    cert = np.zeros(normals.shape[0])
    cert[p] = 1.0
    if active:
        coef, *_ = np.linalg.lstsq(normals[active].T, normals[p], rcond=None)
        for k, c in enumerate(active):
            cert[c] = -coef[k]
    return cert

