"""Synthesis of probabilistic error tubes and the tube feedback gain.

The closed-loop error splits into a stochastic part (handled by the
stationary covariance of the error recursion plus a tail bound) and a
model-error part (handled by an ellipsoidal robustly invariant set
certified through an S-procedure eigenvalue test).  Their Minkowski sum is
the tube used to tighten constraints, valid at the product of the two
probability levels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .chisq import chi2_quantile
from .errors import InfeasibleAtCapError, UnstableError
from .geometry import Ellipsoid, SupportSet, SupportTerm
from .qp import lqr_gain, max_eigenvalue, solve_discrete_lyapunov, spectral_radius

ALPHA_FLOOR = 1e-12
SIGMA_REG = 1e-12


@dataclass(frozen=True)
class ProbabilityBudget:
    """Target chance levels and their split between noise and model error.

    Each constraint family (state, input) gets a tube valid at
    p = p_noise * p_model.  The default split is the symmetric square root.
    """

    p_x: float
    p_u: float
    split_x: tuple[float, float] | None = None  # (p_noise, p_model)
    split_u: tuple[float, float] | None = None
    gaussian: bool = True
    s_proc_weight: float = 1.0  # weight on the disturbance multiplier budget

    def __post_init__(self):
        for p in (self.p_x, self.p_u):
            if not 0.0 < p < 1.0:
                raise ValueError("probability levels must be in (0, 1)")

    def levels_x(self) -> tuple[float, float]:
        if self.split_x is not None:
            return self.split_x
        r = float(np.sqrt(self.p_x))
        return (r, r)

    def levels_u(self) -> tuple[float, float]:
        if self.split_u is not None:
            return self.split_u
        r = float(np.sqrt(self.p_u))
        return (r, r)


@dataclass
class TubeSpec:
    """Feedback gain, composed tubes, and their probability bookkeeping."""

    K_R: np.ndarray
    R_x: SupportSet
    R_u: SupportSet
    levels: dict  # per-tube (p_s, p_m) plus totals
    P_shape: np.ndarray
    alpha: float
    Sigma_inf: np.ndarray

    def __post_init__(self):
        self.K_R = np.atleast_2d(np.asarray(self.K_R, dtype=float))
        self.P_shape = np.atleast_2d(np.asarray(self.P_shape, dtype=float))
        self.Sigma_inf = np.atleast_2d(np.asarray(self.Sigma_inf, dtype=float))
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        for key in ("x", "u"):
            ps, pm = self.levels[key]
            total = self.levels[f"p_{key}"]
            if abs(ps * pm - total) > 1e-12:
                raise ValueError(f"probability split for {key} does not multiply to total")

    def validate_closed_loop(self, A: np.ndarray, B: np.ndarray) -> float:
        rho = spectral_radius(A + B @ self.K_R)
        if rho >= 1.0:
            raise UnstableError(f"tube feedback does not stabilize (rho={rho:.4f})")
        return rho

    def to_json_dict(self) -> dict:
        return {
            "K_R": self.K_R.tolist(),
            "R_x": self.R_x.to_json_dict(),
            "R_u": self.R_u.to_json_dict(),
            "levels": {
                "x": list(self.levels["x"]),
                "u": list(self.levels["u"]),
                "p_x": self.levels["p_x"],
                "p_u": self.levels["p_u"],
            },
            "P_shape": self.P_shape.tolist(),
            "alpha": self.alpha,
            "Sigma_inf": self.Sigma_inf.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)

    @classmethod
    def from_json_dict(cls, d: dict) -> "TubeSpec":
        levels = {
            "x": tuple(d["levels"]["x"]),
            "u": tuple(d["levels"]["u"]),
            "p_x": d["levels"]["p_x"],
            "p_u": d["levels"]["p_u"],
        }
        return cls(
            K_R=np.array(d["K_R"], dtype=float),
            R_x=SupportSet.from_json_dict(d["R_x"], level=levels["p_x"]),
            R_u=SupportSet.from_json_dict(d["R_u"], level=levels["p_u"]),
            levels=levels,
            P_shape=np.array(d["P_shape"], dtype=float),
            alpha=float(d["alpha"]),
            Sigma_inf=np.array(d["Sigma_inf"], dtype=float),
        )

    @classmethod
    def from_json(cls, s: str) -> "TubeSpec":
        return cls.from_json_dict(json.loads(s))


def prs_stochastic(
    A_cl: np.ndarray, noise_cov: np.ndarray, p_s: float, gaussian: bool = True
) -> Ellipsoid:
    """Reachable-error ellipsoid for the noise-driven error recursion.

    The stationary covariance solves the closed-loop Lyapunov equation; the
    level set is sized by the chi-squared quantile for Gaussian noise or by
    the Chebyshev bound otherwise.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if not 0.0 < p_s < 1.0:
        raise ValueError("p_s must be in (0, 1)")
    n = A_cl.shape[0]
    sigma_inf = solve_discrete_lyapunov(A_cl, noise_cov)
    # rank-deficient noise leaves a singular stationary covariance
    if np.linalg.eigvalsh(sigma_inf)[0] < SIGMA_REG:
        sigma_inf = sigma_inf + SIGMA_REG * np.eye(n)
    p_tilde = chi2_quantile(n, p_s) if gaussian else n / (1.0 - p_s)
    S = np.linalg.inv(sigma_inf)
    return Ellipsoid(np.zeros(n), 0.5 * (S + S.T), p_tilde)


def _invariance_lmi(A_cl, P, Q_inv, tau0, tau1) -> np.ndarray:
    n = A_cl.shape[0]
    M = np.zeros((2 * n, 2 * n))
    APA = A_cl.T @ P @ A_cl
    M[:n, :n] = APA - tau0 * P
    M[:n, n:] = A_cl.T @ P
    M[n:, :n] = P @ A_cl
    M[n:, n:] = P - tau1 * Q_inv
    return 0.5 * (M + M.T)


def _ris_alpha_feasible(A_cl, P, Q_inv, alpha, p_bar, tau0_grid, eig_tol) -> bool:
    """Check existence of multipliers certifying invariance at level alpha.

    The disturbance multiplier is eliminated at its budget-optimal value
    tau1 = (1 - tau0) * alpha / p_bar (the LMI only improves with larger
    tau1), leaving a 1-D search over the contraction multiplier tau0.
    """

    def margin(tau0: float) -> float:
        tau1 = (1.0 - tau0) * alpha / p_bar
        return max_eigenvalue(_invariance_lmi(A_cl, P, Q_inv, tau0, tau1))

    vals = np.array([margin(t) for t in tau0_grid])
    if np.min(vals) <= eig_tol:
        return True
    # local refinement around the best grid point
    j = int(np.argmin(vals))
    lo = tau0_grid[max(j - 1, 0)]
    hi = tau0_grid[min(j + 1, len(tau0_grid) - 1)]
    for _ in range(40):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        f1, f2 = margin(m1), margin(m2)
        if min(f1, f2) <= eig_tol:
            return True
        if f1 < f2:
            hi = m2
        else:
            lo = m1
    return margin(0.5 * (lo + hi)) <= eig_tol


def ris_model_error(
    A_cl: np.ndarray,
    P_shape: np.ndarray,
    W_m: Ellipsoid | None,
    p_m: float,
    alpha_cap: float = 1e12,
    p_bar: float = 1.0,
    rel_tol: float = 1e-6,
) -> float:
    """Smallest certified level alpha with {e : e'Pe <= alpha} invariant
    for e+ = A_cl e + w over all w in W_m.

    Certification is by an S-procedure test reduced to eigenvalue checks,
    bisected on alpha (feasibility is monotone in alpha).  Returns the
    configured floor when W_m is (numerically) a point.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    P = np.atleast_2d(np.asarray(P_shape, dtype=float))
    rho = spectral_radius(A_cl)
    if rho >= 1.0 - 1e-9:
        raise UnstableError(f"spectral radius {rho:.6f} >= 1")
    if W_m is None:
        return ALPHA_FLOOR
    # treat tiny disturbance sets as a point
    radius2 = W_m.rho / np.linalg.eigvalsh(W_m.S)[0]
    if radius2 <= (10 * ALPHA_FLOOR) ** 2:
        return ALPHA_FLOOR
    # normalize the disturbance set to level 1: w' (S/rho) w <= 1
    Q_inv = W_m.S / W_m.rho
    scale = max(1.0, float(np.max(np.abs(P))))
    eig_tol = 1e-9 * scale
    tau0_grid = np.concatenate(
        [np.geomspace(1e-6, 1.0 - 1e-6, 63), [rho**2 + 1e-9]]
    )
    tau0_grid = np.clip(np.sort(tau0_grid), 1e-9, 1.0 - 1e-9)

    def feasible(alpha: float) -> bool:
        return _ris_alpha_feasible(A_cl, P, Q_inv, alpha, p_bar, tau0_grid, eig_tol)

    # bracket: grow alpha until feasible
    w_scale = float(np.max(np.abs(W_m.rho * np.linalg.inv(W_m.S))))
    alpha_hi = max(w_scale * float(np.max(np.abs(P))), ALPHA_FLOOR) / max(
        (1.0 - rho) ** 2, 1e-6
    )
    grow = 0
    while not feasible(alpha_hi):
        alpha_hi *= 4.0
        grow += 1
        if alpha_hi > alpha_cap:
            raise InfeasibleAtCapError(
                f"no invariant level below cap {alpha_cap:.3e}; "
                "tube feedback too weak for the model-error bound"
            )
    alpha_lo = 0.0
    while alpha_hi - alpha_lo > rel_tol * alpha_hi:
        mid = 0.5 * (alpha_lo + alpha_hi)
        if feasible(mid):
            alpha_hi = mid
        else:
            alpha_lo = mid
    return float(max(alpha_hi, ALPHA_FLOOR))


def compose_tube(E_alpha: Ellipsoid, R_s: Ellipsoid, level: float | None = None) -> SupportSet:
    """Minkowski sum of the invariant set and the stochastic set."""
    if E_alpha.dim != R_s.dim:
        raise ValueError("set dimensions disagree")
    return SupportSet(
        terms=(SupportTerm.from_ellipsoid(E_alpha), SupportTerm.from_ellipsoid(R_s)),
        level=level,
    )


def build_tube_spec(
    A: np.ndarray,
    B: np.ndarray,
    noise_cov: np.ndarray,
    w_max: float,
    budget: ProbabilityBudget,
    Q_lqr: np.ndarray | None = None,
    R_lqr: np.ndarray | None = None,
) -> TubeSpec:
    """End-to-end tube synthesis for given nominal dynamics.

    The tube feedback and the invariant-set shape both come from an LQR
    design on (A, B); state and input tubes share the invariant set (the
    model-error bound does not depend on the probability split) and differ
    in the sizing of their stochastic part.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    m = B.shape[1]
    Q_lqr = np.eye(n) if Q_lqr is None else np.atleast_2d(np.asarray(Q_lqr, dtype=float))
    R_lqr = np.eye(m) if R_lqr is None else np.atleast_2d(np.asarray(R_lqr, dtype=float))
    K, P_lqr = lqr_gain(A, B, Q_lqr, R_lqr)
    A_cl = A + B @ K

    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    ps_x, pm_x = budget.levels_x()
    ps_u, pm_u = budget.levels_u()
    Rs_x = prs_stochastic(A_cl, noise_cov, ps_x, gaussian=budget.gaussian)
    Rs_u = (
        Rs_x
        if (ps_u == ps_x)
        else prs_stochastic(A_cl, noise_cov, ps_u, gaussian=budget.gaussian)
    )
    W_m = None
    if w_max > 0.0:
        W_m = Ellipsoid(np.zeros(n), np.eye(n), w_max**2)
    alpha = ris_model_error(A_cl, P_lqr, W_m, max(pm_x, pm_u), p_bar=budget.s_proc_weight)
    E_alpha = Ellipsoid(np.zeros(n), P_lqr, alpha)
    sigma_inf = solve_discrete_lyapunov(A_cl, noise_cov)
    levels = {
        "x": (ps_x, pm_x),
        "u": (ps_u, pm_u),
        "p_x": ps_x * pm_x,
        "p_u": ps_u * pm_u,
    }
    spec = TubeSpec(
        K_R=K,
        R_x=compose_tube(E_alpha, Rs_x, level=levels["p_x"]),
        R_u=compose_tube(E_alpha, Rs_u, level=levels["p_u"]),
        levels=levels,
        P_shape=P_lqr,
        alpha=alpha,
        Sigma_inf=sigma_inf,
    )
    spec.validate_closed_loop(A, B)
    return spec
