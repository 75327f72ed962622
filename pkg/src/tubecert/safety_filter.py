"""Online certification filter.

Each step solves a convex backup problem: find a nominal input plan,
starting from an internally simulated nominal state, that ends in the
terminal set while respecting tube-tightened constraints, and whose first
input reproduces the proposed control as closely as possible.  The applied
input adds the tube feedback on the deviation between the measured and the
nominal state.  The nominal state is never reset to the measurement; this
is what makes feasibility carry over from one step to the next even under
unbounded noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapReachedError,
    InitiallyInfeasibleError,
    NoPreviousPlanError,
)
from .geometry import HPolytope, hull_weights, map_tube, pontryagin_tighten
from .qp import ADMMWorkspace, QuadraticProgram, SolveReport, solve_qp
from .terminal import TerminalSet, VertexPlan, dedup_candidates, enlarge, prune
from .tubes import TubeSpec


@dataclass
class FilterConfig:
    horizon: int = 30
    cert_tolerance: float | None = None  # default 1e-6 * sqrt(m)
    W_cert: np.ndarray | None = None  # default identity
    solver_tol: float = 1e-8
    solver_max_iter: int = 20000
    max_consecutive_fallbacks: int = 100  # diagnostic threshold only

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def eps(self, m: int) -> float:
        return self.cert_tolerance if self.cert_tolerance is not None else 1e-6 * np.sqrt(m)

    def weight(self, m: int) -> np.ndarray:
        if self.W_cert is None:
            return np.eye(m)
        W = np.atleast_2d(np.asarray(self.W_cert, dtype=float))
        if W.shape != (m, m):
            raise ValueError("certification weight must be m x m")
        if np.linalg.eigvalsh(0.5 * (W + W.T))[0] <= 0:
            raise ValueError("certification weight must be positive definite")
        return W


@dataclass
class _QPTemplate:
    """Constant QP structure shared by every step of an episode.

    Only the linear cost and the first block of the equality right-hand
    side change with (x, u_L, z); sharing the arrays lets the solver reuse
    its scaling and factorization.
    """

    P: np.ndarray
    A_eq: np.ndarray
    b_eq_const: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    n: int
    m: int
    N: int
    V: int
    generation: int
    workspace: ADMMWorkspace

    def v_slice(self, i: int) -> slice:
        return slice(i * self.m, (i + 1) * self.m)

    def z_slice(self, i: int) -> slice:
        # states z_1..z_N; z_0 is a constant
        off = self.N * self.m
        return slice(off + (i - 1) * self.n, off + i * self.n)

    @property
    def lam_slice(self) -> slice:
        off = self.N * (self.m + self.n)
        return slice(off, off + self.V)

    @property
    def num_vars(self) -> int:
        return self.N * (self.m + self.n) + self.V


def _build_template(
    A: np.ndarray,
    B: np.ndarray,
    X_t: HPolytope,
    U_t: HPolytope,
    terminal: TerminalSet,
    config: FilterConfig,
) -> _QPTemplate:
    n, m = B.shape
    N = config.horizon
    Vmat = terminal.vertex_matrix()  # (V, n)
    V = Vmat.shape[0]
    nv = N * (m + n) + V
    W = config.weight(m)

    P = np.zeros((nv, nv))
    P[:m, :m] = 2.0 * W

    me = N * n + n + 1
    A_eq = np.zeros((me, nv))
    b_eq_const = np.zeros(me)
    zoff = N * m
    loff = N * (m + n)
    for i in range(N):
        rows = slice(i * n, (i + 1) * n)
        A_eq[rows, zoff + i * n : zoff + (i + 1) * n] = np.eye(n)  # z_{i+1}
        if i > 0:
            A_eq[rows, zoff + (i - 1) * n : zoff + i * n] = -A  # -A z_i
        A_eq[rows, i * m : (i + 1) * m] = -B
    # terminal: z_N = sum_j lam_j V_j ;  sum lam = 1
    rows = slice(N * n, N * n + n)
    A_eq[rows, zoff + (N - 1) * n : zoff + N * n] = np.eye(n)
    A_eq[rows, loff : loff + V] = -Vmat.T
    A_eq[N * n + n, loff : loff + V] = 1.0
    b_eq_const[N * n + n] = 1.0

    fx = X_t.num_facets
    fu = U_t.num_facets
    mi = (N - 1) * fx + N * fu + V
    A_in = np.zeros((mi, nv))
    b_in = np.zeros(mi)
    r = 0
    for i in range(1, N):  # z_1..z_{N-1} in the tightened state set
        A_in[r : r + fx, zoff + (i - 1) * n : zoff + i * n] = X_t.H
        b_in[r : r + fx] = X_t.h
        r += fx
    for i in range(N):  # inputs in the tightened input set
        A_in[r : r + fu, i * m : (i + 1) * m] = U_t.H
        b_in[r : r + fu] = U_t.h
        r += fu
    A_in[r : r + V, loff : loff + V] = -np.eye(V)  # lam >= 0
    b_in.setflags(write=False)

    return _QPTemplate(
        P=P,
        A_eq=A_eq,
        b_eq_const=b_eq_const,
        A_in=A_in,
        b_in=b_in,
        n=n,
        m=m,
        N=N,
        V=V,
        generation=terminal.generation,
        workspace=ADMMWorkspace(),
    )


@dataclass
class FilterResult:
    u_applied: np.ndarray
    u_proposed: np.ndarray
    certified: bool
    modification: float
    solver: SolveReport
    plan: VertexPlan
    terminal_lambda: np.ndarray
    step_time: float = 0.0


@dataclass
class FilterState:
    z: np.ndarray
    A: np.ndarray
    B: np.ndarray
    tubes: TubeSpec
    X_t: HPolytope
    U_t: HPolytope
    terminal: TerminalSet
    config: FilterConfig
    previous_plan: VertexPlan | None = None
    k: int = 0
    fallback_count: int = 0
    consecutive_fallbacks: int = 0
    candidates: list = field(default_factory=list)  # (step, z, plan) of solved steps
    _template: _QPTemplate | None = None
    _last_y: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def template(self) -> _QPTemplate:
        if self._template is None or self._template.generation != self.terminal.generation:
            self._template = _build_template(
                self.A, self.B, self.X_t, self.U_t, self.terminal, self.config
            )
            self._last_y = None
        return self._template


def tightened_sets(
    X: HPolytope, U: HPolytope, tubes: TubeSpec
) -> tuple[HPolytope, HPolytope]:
    """Shrink the original constraints by the state and mapped input tubes."""
    X_t = pontryagin_tighten(X, tubes.R_x)
    U_t = pontryagin_tighten(U, map_tube(tubes.K_R, tubes.R_u))
    return X_t, U_t


def build_qp(fs: FilterState, x: np.ndarray, u_L: np.ndarray) -> QuadraticProgram:
    """Assemble the step QP for measured state x and proposed input u_L.

    The nominal initial state enters as a constant: it shifts the dynamics
    right-hand side and the cost reference c = u_L - K (x - z).
    """
    t = fs.template()
    x = np.asarray(x, dtype=float).reshape(-1)
    u_L = np.asarray(u_L, dtype=float).reshape(-1)
    c = u_L - fs.tubes.K_R @ (x - fs.z)
    q = np.zeros(t.num_vars)
    W = t.P[: t.m, : t.m] / 2.0
    q[: t.m] = -2.0 * (W @ c)
    b_eq = t.b_eq_const.copy()
    b_eq[: t.n] = fs.A @ fs.z
    return QuadraticProgram(
        P_cost=t.P, q_cost=q, A_eq=t.A_eq, b_eq=b_eq, A_in=t.A_in, b_in=t.b_in
    )


def _extract_plan(fs: FilterState, t: _QPTemplate, x_opt: np.ndarray) -> VertexPlan:
    N, n, m = t.N, t.n, t.m
    v = x_opt[: N * m].reshape(N, m)
    z_tail = x_opt[N * m : N * m + N * n].reshape(N, n)
    z = np.vstack([fs.z[None, :], z_tail])
    lam = x_opt[t.lam_slice].copy()
    return VertexPlan(v=v, z=z, lam=lam)


def _warm_start(fs: FilterState, t: _QPTemplate):
    p = fs.previous_plan
    if p is None or p.horizon != t.N or p.lam.shape[0] != t.V:
        return None, None
    v_shift, z_shift, lam = _shift_plan(fs, p)
    x0 = np.concatenate([v_shift.reshape(-1), z_shift[1:].reshape(-1), lam])
    return x0, fs._last_y


def _terminal_extension(fs: FilterState, p: VertexPlan) -> np.ndarray:
    """Input continuing the backup beyond its stored horizon.

    Mixes the first inputs of the terminal vertices' stored plans with the
    plan's hull weights; the origin vertex contributes zero input.
    """
    lam = p.lam
    kappa = np.zeros(fs.m)
    for w, vp in zip(lam, fs.terminal.plans):
        if vp is not None and w > 0.0:
            kappa += w * vp.v[0]
    return kappa


def _shift_plan(fs: FilterState, p: VertexPlan):
    kappa = _terminal_extension(fs, p)
    if p.horizon > 1:
        v_shift = np.vstack([p.v[1:], kappa[None, :]])
    else:
        v_shift = kappa[None, :]
    z_new = fs.A @ p.z[-1] + fs.B @ kappa
    z_shift = np.vstack([p.z[1:], z_new[None, :]])
    lam_new, dist = hull_weights(
        fs.terminal.vertex_matrix(), z_new, fs.terminal.membership_tol
    )
    if lam_new is None:
        lam_new = p.lam
    return v_shift, z_shift, lam_new


def init_filter(
    x0: np.ndarray,
    model: tuple[np.ndarray, np.ndarray],
    tubes: TubeSpec,
    terminal: TerminalSet,
    config: FilterConfig,
) -> FilterState:
    """Start a certification session at measured state x0.

    The nominal state is initialized to the measurement and one backup
    problem is solved (with zero proposed input) to certify that a safe
    plan exists at all; states without one are rejected.
    """
    A, B = (np.atleast_2d(np.asarray(M, dtype=float)) for M in model)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    fs = FilterState(
        z=x0.copy(),
        A=A,
        B=B,
        tubes=tubes,
        X_t=terminal.X_t,
        U_t=terminal.U_t,
        terminal=terminal,
        config=config,
    )
    if not fs.X_t.contains(x0, tol=1e-9):
        raise InitiallyInfeasibleError(
            "initial state violates the tightened state constraints"
        )
    t = fs.template()
    qp = build_qp(fs, x0, np.zeros(fs.m))
    rep = solve_qp(qp, tol=config.solver_tol, max_iter=config.solver_max_iter,
                   workspace=t.workspace)
    if rep.status != "Optimal":
        raise InitiallyInfeasibleError(
            f"no feasible backup plan from the initial state (solver: {rep.status})"
        )
    fs.previous_plan = _extract_plan(fs, t, rep.x_opt)
    fs._last_y = rep.y_opt
    return fs


def fallback_shift(fs: FilterState, x: np.ndarray):
    """Backup input from the shifted previous plan (numerical safety net).

    Feasibility theory says the step problem is always solvable once it was
    at start-up; this path guards against solver failures by applying the
    previous plan shifted one step and extended by the terminal
    continuation.
    """
    if fs.previous_plan is None:
        raise NoPreviousPlanError("no previous plan to shift")
    v_shift, z_shift, lam = _shift_plan(fs, fs.previous_plan)
    plan = VertexPlan(
        v=v_shift, z=np.vstack([fs.z[None, :], z_shift[0:]])[: v_shift.shape[0] + 1], lam=lam
    )
    # plan states: z_0 = current nominal, then the shifted tail
    z_full = np.vstack([fs.z[None, :], z_shift])[1:]  # shifted states z_1.. for plan
    plan = VertexPlan(v=v_shift, z=np.vstack([fs.z[None, :], z_full]), lam=lam)
    x = np.asarray(x, dtype=float).reshape(-1)
    u_applied = v_shift[0] + fs.tubes.K_R @ (x - fs.z)
    return u_applied, plan


def peek_backup_input(fs: FilterState, x: np.ndarray) -> np.ndarray:
    """The input the filter would fall back to at state x (no mutation)."""
    if fs.previous_plan is None:
        raise NoPreviousPlanError("no previous plan")
    p = fs.previous_plan
    v0 = p.v[1] if p.horizon > 1 else _terminal_extension(fs, p)
    return v0 + fs.tubes.K_R @ (np.asarray(x, dtype=float).reshape(-1) - fs.z)


def filter_step(fs: FilterState, x: np.ndarray, u_L: np.ndarray):
    """Certify or minimally modify a proposed input; advance the filter.

    Returns (FilterResult, FilterState).  Never raises during closed-loop
    operation: solver failures fall back to the shifted previous plan.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float).reshape(-1)
    u_L = np.asarray(u_L, dtype=float).reshape(-1)
    t = fs.template()
    qp = build_qp(fs, x, u_L)
    x0, y0 = _warm_start(fs, t)
    rep = solve_qp(
        qp,
        tol=fs.config.solver_tol,
        max_iter=fs.config.solver_max_iter,
        x0=x0,
        y0=y0,
        workspace=t.workspace,
    )
    W = fs.config.weight(fs.m)
    eps = fs.config.eps(fs.m)
    z_pre = fs.z.copy()
    if rep.status == "Optimal":
        plan = _extract_plan(fs, t, rep.x_opt)
        v0 = plan.v[0]
        u_applied = v0 + fs.tubes.K_R @ (x - z_pre)
        fs.candidates.append((fs.k, z_pre, plan))
        fs._last_y = rep.y_opt
        fs.consecutive_fallbacks = 0
    else:
        u_applied, plan = fallback_shift(fs, x)
        v0 = plan.v[0]
        fs.fallback_count += 1
        fs.consecutive_fallbacks += 1
    diff = u_applied - u_L
    modification = float(np.sqrt(diff @ W @ diff))
    certified = bool(rep.status == "Optimal" and modification <= eps)
    fs.previous_plan = plan
    fs.z = fs.A @ z_pre + fs.B @ v0
    fs.k += 1
    result = FilterResult(
        u_applied=u_applied,
        u_proposed=u_L.copy(),
        certified=certified,
        modification=modification,
        solver=rep,
        plan=plan,
        terminal_lambda=plan.lam.copy(),
        step_time=time.perf_counter() - t0,
    )
    return result, fs


def _one_step_invariant_subset(ts: TerminalSet, A: np.ndarray, B: np.ndarray) -> TerminalSet:
    """Drop vertices whose one-step successor leaves the hull.

    The successor of a vertex under its plan's first input must stay in the
    hull for the shifted backup to remain feasible; removing a vertex can
    break others, so iterate to a fixed point.
    """
    current = ts
    while True:
        V = current.vertex_matrix()
        drop = []
        for j, (v, p) in enumerate(zip(current.vertices, current.plans)):
            if p is None:
                continue
            succ = A @ v + B @ p.v[0]
            _, dist = hull_weights(V, succ, current.membership_tol)
            if dist > 10 * current.membership_tol:
                drop.append(j)
        if not drop:
            return current
        keep = [j for j in range(len(current.vertices)) if j not in drop]
        nxt = current.snapshot()
        nxt.vertices = [current.vertices[j] for j in keep]
        nxt.plans = [current.plans[j] for j in keep]
        nxt.generation += 1
        current = nxt


def finish_episode(fs: FilterState) -> dict:
    """Grow the terminal set from this episode's solved nominal states.

    Only states whose one-step nominal successor was also collected are
    eligible (the hull must be invariant one step ahead); candidates are
    deduplicated, pre-filtered by a containment certificate, and appended
    until the vertex cap saturates.
    """
    cands = fs.candidates
    fs.candidates = []
    if not cands:
        return {"added": 0, "generation": fs.terminal.generation}
    # keep only candidates whose successor step was also solved
    steps = {k for k, _, _ in cands}
    eligible = [(k, z, p) for (k, z, p) in cands if (k + 1) in steps]
    points = [z for _, z, _ in eligible]
    kept_idx = dedup_candidates(points, tol=1e-6)
    added = 0
    saturated = False
    ts = fs.terminal
    for i in kept_idx:
        _, z, p = eligible[i]
        if saturated:
            break
        try:
            new_ts = enlarge(ts, z, plan=p)
        except CapReachedError:
            ts = prune(ts)
            try:
                new_ts = enlarge(ts, z, plan=p)
            except CapReachedError:
                saturated = True
                continue
        if new_ts is not ts:
            added += 1
        ts = new_ts
    ts = _one_step_invariant_subset(ts, fs.A, fs.B)
    fs.terminal = ts
    return {"added": added, "generation": ts.generation, "vertices": len(ts.vertices)}
