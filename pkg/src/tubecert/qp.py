"""Dense convex kernels: QP solver, eigenvalue checks, Lyapunov/Riccati.

The QP solver is an operator-splitting (ADMM) method for

    min 1/2 x'Px + q'x   s.t.  A_eq x = b_eq,  A_in x <= b_in

with Ruiz equilibration, a cached KKT factorization for repeated solves
against the same constraint structure, warm starting, and an active-set
polish step that brings KKT residuals to solver tolerance.  Problems at the
scale used here (a few hundred variables) are comfortably dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NoConvergenceError, UnstableError

_INF = 1e30


@dataclass
class QuadraticProgram:
    """Data of a convex QP.  Empty constraint blocks may be None."""

    P_cost: np.ndarray
    q_cost: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.P_cost = np.asarray(self.P_cost, dtype=float)
        self.q_cost = np.asarray(self.q_cost, dtype=float).reshape(-1)
        n = self.q_cost.shape[0]
        if self.A_eq is None or np.size(self.A_eq) == 0:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.A_in is None or np.size(self.A_in) == 0:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        else:
            self.A_in = np.atleast_2d(np.asarray(self.A_in, dtype=float))
            self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)

    @property
    def num_vars(self) -> int:
        return self.q_cost.shape[0]

    def validate(self, psd_tol: float = 1e-9) -> None:
        n = self.num_vars
        if self.P_cost.shape != (n, n):
            raise ValueError("cost matrix shape disagrees with q")
        if not np.allclose(self.P_cost, self.P_cost.T, atol=1e-8):
            raise ValueError("cost matrix must be symmetric")
        if self.A_eq.shape[1] != n or self.A_in.shape[1] != n:
            raise ValueError("constraint matrices disagree with variable count")
        if self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise ValueError("A_eq/b_eq row counts disagree")
        if self.A_in.shape[0] != self.b_in.shape[0]:
            raise ValueError("A_in/b_in row counts disagree")
        if n:
            w = np.linalg.eigvalsh(0.5 * (self.P_cost + self.P_cost.T))
            if w[0] < -psd_tol * max(1.0, w[-1]):
                raise ValueError(f"cost matrix is not PSD (min eig {w[0]:.3e})")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P_cost @ x + self.q_cost @ x)


@dataclass
class SolveReport:
    status: str  # Optimal | Infeasible | MaxIter | NumericalFailure
    x_opt: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    y_opt: np.ndarray | None = None


@dataclass
class ADMMWorkspace:
    """Scaling + factorization reused across solves that share matrices."""

    P_ref: np.ndarray | None = None
    A_eq_ref: np.ndarray | None = None
    A_in_ref: np.ndarray | None = None
    D: np.ndarray | None = None  # variable scaling
    E: np.ndarray | None = None  # constraint scaling
    c: float = 1.0  # cost scaling
    A: np.ndarray | None = None  # scaled stacked constraints
    P: np.ndarray | None = None  # scaled cost
    rho: np.ndarray | None = None
    sigma: float = 1e-6
    factor: tuple | None = None
    m_eq: int = 0
    extras: dict = field(default_factory=dict)

    def matches(self, qp: QuadraticProgram) -> bool:
        return (
            self.P_ref is qp.P_cost
            and self.A_eq_ref is qp.A_eq
            and self.A_in_ref is qp.A_in
        )


def _ruiz_equilibrate(P, A, q, iters: int = 10):
    """Modified Ruiz scaling of the KKT matrix [[P, A'], [A, 0]]."""
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps = P.copy()
    As = A.copy()
    qs = q.copy()
    for _ in range(iters):
        col_norm_x = np.maximum(
            np.max(np.abs(Ps), axis=0, initial=0.0),
            np.max(np.abs(As), axis=0, initial=0.0),
        )
        col_norm_y = np.max(np.abs(As), axis=1, initial=0.0)
        dx = 1.0 / np.sqrt(np.clip(col_norm_x, 1e-8, 1e8))
        dy = 1.0 / np.sqrt(np.clip(col_norm_y, 1e-8, 1e8))
        Ps = Ps * dx[:, None] * dx[None, :]
        qs = qs * dx
        As = As * dy[:, None] * dx[None, :]
        D *= dx
        E *= dy
        # cost scaling keeps the quadratic and linear parts comparable
        pn = np.mean(np.max(np.abs(Ps), axis=0, initial=0.0)) if n else 1.0
        qn = np.max(np.abs(qs), initial=0.0)
        gamma = 1.0 / max(min(pn, 1e8), min(qn, 1e8), 1e-8) if max(pn, qn) > 0 else 1.0
        gamma = np.clip(gamma, 1e-8, 1e8)
        Ps *= gamma
        qs *= gamma
        c *= gamma
    return Ps, As, qs, D, E, c


def _prepare_workspace(qp: QuadraticProgram, ws: ADMMWorkspace, rho0: float) -> None:
    A = np.vstack([qp.A_eq, qp.A_in])
    Ps, As, _, D, E, c = _ruiz_equilibrate(qp.P_cost, A, qp.q_cost)
    m_eq = qp.A_eq.shape[0]
    rho = np.full(A.shape[0], rho0)
    rho[:m_eq] *= 1e3  # stiff equality rows
    ws.P_ref, ws.A_eq_ref, ws.A_in_ref = qp.P_cost, qp.A_eq, qp.A_in
    ws.D, ws.E, ws.c = D, E, c
    ws.P, ws.A = Ps, As
    ws.rho = rho
    ws.m_eq = m_eq
    _factorize(ws)


def _factorize(ws: ADMMWorkspace) -> None:
    n = ws.P.shape[0]
    M = ws.P + ws.sigma * np.eye(n)
    if ws.A.shape[0]:
        M = M + (ws.A.T * ws.rho) @ ws.A
    ws.factor = sla.cho_factor(M, lower=True, check_finite=False)


def _residuals(qp: QuadraticProgram, x: np.ndarray, y: np.ndarray):
    """Unscaled KKT residuals: constraint violation and stationarity."""
    r_eq = qp.A_eq @ x - qp.b_eq if qp.A_eq.shape[0] else np.zeros(0)
    r_in = qp.A_in @ x - qp.b_in if qp.A_in.shape[0] else np.zeros(0)
    prim = 0.0
    if r_eq.size:
        prim = max(prim, float(np.max(np.abs(r_eq))))
    if r_in.size:
        prim = max(prim, float(np.max(np.clip(r_in, 0.0, None))))
    grad = qp.P_cost @ x + qp.q_cost
    if y.size:
        m_eq = qp.A_eq.shape[0]
        y_in = np.clip(y[m_eq:], 0.0, None)  # inequality duals are nonnegative
        grad = grad + qp.A_eq.T @ y[:m_eq] + qp.A_in.T @ y_in
    dual = float(np.max(np.abs(grad), initial=0.0))
    return prim, dual


def _polish(qp: QuadraticProgram, x: np.ndarray, y: np.ndarray, z: np.ndarray):
    """Solve the equality-constrained KKT system on the detected active set."""
    n = qp.num_vars
    m_eq = qp.A_eq.shape[0]
    if qp.A_in.shape[0]:
        slack = qp.b_in - qp.A_in @ x
        y_in = y[m_eq:]
        scale = 1.0 + np.abs(qp.b_in)
        active = (slack < 1e-6 * scale) | (y_in > 1e-6)
    else:
        active = np.zeros(0, dtype=bool)
    A_act = np.vstack([qp.A_eq, qp.A_in[active]])
    b_act = np.concatenate([qp.b_eq, qp.b_in[active]])
    k = A_act.shape[0]
    delta = 1e-9
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = qp.P_cost + delta * np.eye(n)
    KKT[:n, n:] = A_act.T
    KKT[n:, :n] = A_act
    KKT[n:, n:] = -delta * np.eye(k)
    rhs = np.concatenate([-qp.q_cost, b_act])
    try:
        lu = sla.lu_factor(KKT, check_finite=False)
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        # iterative refinement against the unregularized KKT system
        for _ in range(2):
            res = rhs.copy()
            res[:n] -= qp.P_cost @ sol[:n] + A_act.T @ sol[n:]
            res[n:] -= A_act @ sol[:n]
            sol += sla.lu_solve(lu, res, check_finite=False)
    except (sla.LinAlgError, ValueError):
        return None
    x_p = sol[:n]
    nu = sol[n:]
    y_p = np.zeros(qp.A_eq.shape[0] + qp.A_in.shape[0])
    y_p[:m_eq] = nu[:m_eq]
    y_full_in = np.zeros(qp.A_in.shape[0])
    y_full_in[active] = nu[m_eq:]
    if y_full_in.size and np.min(y_full_in, initial=0.0) < -1e-7:
        return None  # wrong active set guess
    y_p[m_eq:] = np.clip(y_full_in, 0.0, None)
    return x_p, y_p


def solve_qp(
    qp: QuadraticProgram,
    tol: float = 1e-8,
    max_iter: int = 20000,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
    workspace: ADMMWorkspace | None = None,
    polish: bool = True,
) -> SolveReport:
    """Solve a convex QP by operator splitting.

    ``workspace`` may be reused across calls whose P/A_eq/A_in are the very
    same arrays; scaling and the KKT factorization are then recomputed only
    once, which is what makes receding-horizon use cheap.
    """
    n = qp.num_vars
    if n == 0:
        return SolveReport("Optimal", np.zeros(0), 0.0, 0.0, 0.0, 0)

    ws = workspace if workspace is not None else ADMMWorkspace()
    if not ws.matches(qp):
        qp.validate()
        _prepare_workspace(qp, ws, rho0=0.1)

    m = ws.A.shape[0]
    m_eq = ws.m_eq
    b = np.concatenate([qp.b_eq, qp.b_in])
    # scaled problem data
    qs = ws.c * ws.D * qp.q_cost
    lb = np.concatenate([qp.b_eq, np.full(qp.b_in.shape[0], -_INF)])
    ls = ws.E * lb
    us = ws.E * b
    ls[m_eq:] = np.maximum(ls[m_eq:], -_INF)

    if x0 is not None:
        x = np.asarray(x0, dtype=float) / ws.D
    else:
        x = np.zeros(n)
    if y0 is not None:
        y = ws.c * (np.asarray(y0, dtype=float) / ws.E) if m else np.zeros(0)
    else:
        y = np.zeros(m)
    z = np.clip(ws.A @ x, ls, us) if m else np.zeros(0)

    alpha = 1.6
    sigma = ws.sigma
    best = None
    status = "MaxIter"
    it = 0
    check_every = 25
    rho_adaptions = 0
    dy_acc = np.zeros(m)
    dx_acc = np.zeros(n)

    if m == 0:
        # unconstrained minimum
        try:
            x = np.linalg.solve(qp.P_cost + 1e-12 * np.eye(n), -qp.q_cost)
            prim, dual = _residuals(qp, x, np.zeros(0))
            st = "Optimal" if dual <= tol * (1 + np.abs(qp.q_cost).max(initial=0.0)) else "NumericalFailure"
            return SolveReport(st, x, qp.objective(x), prim, dual, 1, np.zeros(0))
        except np.linalg.LinAlgError:
            return SolveReport("NumericalFailure", x, np.nan, np.inf, np.inf, 1)

    while it < max_iter:
        it += 1
        rhs = sigma * x - qs + ws.A.T @ (ws.rho * z - y)
        x_t = sla.cho_solve(ws.factor, rhs, check_finite=False)
        z_t = ws.A @ x_t
        x_new = alpha * x_t + (1 - alpha) * x
        zc = alpha * z_t + (1 - alpha) * z + y / ws.rho
        z_new = np.clip(zc, ls, us)
        y_new = ws.rho * (zc - z_new)
        dy_acc = y_new - y
        dx_acc = x_new - x
        x, z, y = x_new, z_new, y_new

        if it % check_every == 0 or it == max_iter:
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                status = "NumericalFailure"
                break
            x_un = ws.D * x
            y_un = (ws.E / ws.c) * y
            prim, dual = _residuals(qp, x_un, y_un)
            scale_p = 1.0 + float(np.max(np.abs(b), initial=0.0))
            scale_d = 1.0 + float(np.max(np.abs(qp.q_cost), initial=0.0))
            best = (x_un, y_un, prim, dual)
            if prim <= tol * scale_p and dual <= tol * scale_d:
                status = "Optimal"
                break
            if polish and prim <= 1e3 * tol * scale_p and dual <= 1e5 * tol * scale_d:
                pol = _polish(qp, x_un, y_un, z)
                if pol is not None:
                    xp, yp = pol
                    pp, dd = _residuals(qp, xp, yp)
                    if pp <= tol * scale_p and dd <= tol * scale_d:
                        return SolveReport(
                            "Optimal", xp, qp.objective(xp), pp, dd, it, yp
                        )
            # primal infeasibility certificate from the dual increment
            dy_un = (ws.E / ws.c) * dy_acc
            ndy = float(np.max(np.abs(dy_un), initial=0.0))
            if ndy > 1e-12:
                atdy = float(np.max(np.abs(
                    qp.A_eq.T @ dy_un[:m_eq] + qp.A_in.T @ dy_un[m_eq:]
                ), initial=0.0))
                dy_in = dy_un[m_eq:]
                ok_sign = np.all(dy_in >= -1e-8 * ndy)
                support = float(qp.b_eq @ dy_un[:m_eq] + qp.b_in @ np.clip(dy_in, 0.0, None))
                if ok_sign and atdy <= 1e-8 * ndy * scale_p and support < -1e-8 * ndy * scale_p:
                    status = "Infeasible"
                    break
            # dual infeasibility (unbounded below): treat as numerical failure
            ndx = float(np.max(np.abs(dx_acc), initial=0.0))
            if ndx > 1e-12:
                dx_un = ws.D * dx_acc
                pdx = float(np.max(np.abs(qp.P_cost @ dx_un), initial=0.0))
                qdx = float(qp.q_cost @ dx_un)
                adx = ws.A @ dx_acc
                adx_ok = np.max(np.abs(adx[:m_eq]), initial=0.0) <= 1e-8 * ndx and np.all(
                    adx[m_eq:] <= 1e-8 * ndx
                )
                if pdx <= 1e-9 * ndx and qdx < -1e-9 * ndx and adx_ok:
                    status = "NumericalFailure"
                    break
            # adaptive rho keeps primal/dual progress balanced
            if rho_adaptions < 6 and it >= 50:
                ratio = (prim / scale_p) / max(dual / scale_d, 1e-16)
                if ratio > 1e3 or ratio < 1e-3:
                    ws.rho = np.clip(ws.rho * np.sqrt(max(ratio, 1e-10)), 1e-6, 1e6)
                    _factorize(ws)
                    rho_adaptions += 1

    if best is None:
        x_un = ws.D * x
        y_un = (ws.E / ws.c) * y
        prim, dual = _residuals(qp, x_un, y_un)
        best = (x_un, y_un, prim, dual)
    x_un, y_un, prim, dual = best
    if status == "MaxIter" and polish:
        pol = _polish(qp, x_un, y_un, z)
        if pol is not None:
            xp, yp = pol
            pp, dd = _residuals(qp, xp, yp)
            scale_p = 1.0 + float(np.max(np.abs(b), initial=0.0))
            scale_d = 1.0 + float(np.max(np.abs(qp.q_cost), initial=0.0))
            if pp <= tol * scale_p and dd <= tol * scale_d:
                return SolveReport("Optimal", xp, qp.objective(xp), pp, dd, it, yp)
    obj = qp.objective(x_un) if np.all(np.isfinite(x_un)) else np.nan
    return SolveReport(status, x_un, obj, prim, dual, it, y_un)


def min_eigenvalue(M: np.ndarray, sym_tol: float = 1e-10) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    M = np.asarray(M, dtype=float)
    scale = max(1.0, float(np.max(np.abs(M), initial=0.0)))
    if not np.allclose(M, M.T, atol=sym_tol * scale):
        raise ValueError("matrix is not symmetric within tolerance")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def max_eigenvalue(M: np.ndarray, sym_tol: float = 1e-10) -> float:
    return -min_eigenvalue(-np.asarray(M, dtype=float), sym_tol)


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float)))))


def solve_discrete_lyapunov(A_cl: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Solve A' S A - S = -W for S by squaring (doubling) iterations."""
    A_cl = np.asarray(A_cl, dtype=float)
    W = np.asarray(W, dtype=float)
    rho = spectral_radius(A_cl)
    if rho >= 1.0 - 1e-9:
        raise UnstableError(f"spectral radius {rho:.6f} >= 1")
    S = 0.5 * (W + W.T)
    Ak = A_cl.copy()
    for _ in range(200):
        incr = Ak.T @ S @ Ak
        S = S + incr
        S = 0.5 * (S + S.T)
        if np.max(np.abs(incr)) <= 1e-16 * max(np.max(np.abs(S)), 1e-300):
            break
        Ak = Ak @ Ak
    resid = np.max(np.abs(A_cl.T @ S @ A_cl - S + W))
    if not np.isfinite(resid) or resid > 1e-8 * max(1.0, np.max(np.abs(S))):
        raise NoConvergenceError(f"Lyapunov residual {resid:.3e}")
    return S


def lqr_gain(A, B, Q_lqr, R_lqr, max_iter: int = 200):
    """Discrete-time LQR via a structured doubling iteration.

    Returns (K, P) with the closed loop A + B K stable and P the value
    matrix solving the algebraic Riccati fixed point.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q_lqr, dtype=float))
    R = np.atleast_2d(np.asarray(R_lqr, dtype=float))
    n = A.shape[0]
    if B.shape[0] != n:
        B = B.reshape(n, -1)
    G = B @ np.linalg.solve(R, B.T)
    Ak = A.copy()
    Gk = 0.5 * (G + G.T)
    Hk = 0.5 * (Q + Q.T)
    P = None
    for _ in range(max_iter):
        M = np.eye(n) + Gk @ Hk
        try:
            Minv_A = np.linalg.solve(M, Ak)
            Minv_G = np.linalg.solve(M, Gk)
        except np.linalg.LinAlgError as e:
            raise NoConvergenceError(f"doubling step singular: {e}") from None
        H_next = Hk + Ak.T @ Hk @ Minv_A
        G_next = Gk + Ak @ Minv_G @ Ak.T
        A_next = Ak @ Minv_A
        H_next = 0.5 * (H_next + H_next.T)
        diff = np.max(np.abs(H_next - Hk))
        Hk, Gk, Ak = H_next, 0.5 * (G_next + G_next.T), A_next
        if diff <= 1e-14 * max(1.0, np.max(np.abs(Hk))):
            P = Hk
            break
    if P is None:
        raise NoConvergenceError("Riccati doubling did not converge")
    # residual check of the Riccati fixed point
    BtPB = B.T @ P @ B
    K = -np.linalg.solve(R + BtPB, B.T @ P @ A)
    resid = A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(R + BtPB, B.T @ P @ A) + Q
    rnorm = np.max(np.abs(resid))
    if rnorm > 1e-9 * max(1.0, np.max(np.abs(P))):
        raise NoConvergenceError(f"Riccati residual {rnorm:.3e}")
    if spectral_radius(A + B @ K) >= 1.0:
        raise NoConvergenceError("closed loop not stable; pair may not be stabilizable")
    return K, P
