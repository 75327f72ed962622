"""Growing terminal set for the nominal backup problem.

The terminal region is the convex hull of nominal initial states collected
from successfully solved backup problems, always containing the origin.
Each added vertex carries the plan that certified it, so invariance of the
enlarged set can be replayed rather than trusted.  The union-then-hull
construction keeps the online problem a convex QP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapReachedError, OriginInfeasibleError
from .geometry import HPolytope, hull_distance, hull_membership


@dataclass(frozen=True)
class VertexPlan:
    """Feasible nominal plan (v_0..N-1, z_0..N) with terminal hull weights."""

    v: np.ndarray  # (N, m)
    z: np.ndarray  # (N+1, n)
    lam: np.ndarray  # weights over the vertex list at solve time

    def __post_init__(self):
        object.__setattr__(self, "v", np.atleast_2d(np.asarray(self.v, dtype=float)))
        object.__setattr__(self, "z", np.atleast_2d(np.asarray(self.z, dtype=float)))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float).reshape(-1))

    @property
    def horizon(self) -> int:
        return self.v.shape[0]


@dataclass
class TerminalSet:
    """Vertex collection whose convex hull is the terminal region."""

    vertices: list[np.ndarray]
    plans: list[VertexPlan | None]
    X_t: HPolytope
    U_t: HPolytope
    max_vertices: int = 200
    generation: int = 0
    membership_tol: float = 1e-6

    @property
    def dim(self) -> int:
        return self.vertices[0].shape[0]

    def vertex_matrix(self) -> np.ndarray:
        return np.array(self.vertices)

    def contains(self, q, tol: float | None = None) -> bool:
        return hull_membership(
            self.vertex_matrix(), q, self.membership_tol if tol is None else tol
        )

    def snapshot(self) -> "TerminalSet":
        return TerminalSet(
            vertices=[v.copy() for v in self.vertices],
            plans=list(self.plans),
            X_t=self.X_t,
            U_t=self.U_t,
            max_vertices=self.max_vertices,
            generation=self.generation,
            membership_tol=self.membership_tol,
        )

    # -- persistence ---------------------------------------------------

    def to_json_dict(self) -> dict:
        plans = []
        for p in self.plans:
            if p is None:
                plans.append(None)
            else:
                plans.append({"v": p.v.tolist(), "z": p.z.tolist(), "lam": p.lam.tolist()})
        return {
            "generation": self.generation,
            "max_vertices": self.max_vertices,
            "vertices": [v.tolist() for v in self.vertices],
            "plans": plans,
            "X_t": self.X_t.to_json_dict(),
            "U_t": self.U_t.to_json_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d: dict) -> "TerminalSet":
        plans: list[VertexPlan | None] = []
        for p in d["plans"]:
            if p is None:
                plans.append(None)
            else:
                plans.append(
                    VertexPlan(np.array(p["v"]), np.array(p["z"]), np.array(p["lam"]))
                )
        return cls(
            vertices=[np.array(v, dtype=float) for v in d["vertices"]],
            plans=plans,
            X_t=HPolytope.from_json_dict(d["X_t"]),
            U_t=HPolytope.from_json_dict(d["U_t"]),
            max_vertices=int(d["max_vertices"]),
            generation=int(d["generation"]),
        )

    @classmethod
    def from_json(cls, s: str) -> "TerminalSet":
        return cls.from_json_dict(json.loads(s))


def init_terminal(X_t: HPolytope, U_t: HPolytope, max_vertices: int = 200) -> TerminalSet:
    """Terminal set containing only the origin.

    The origin must lie in both tightened sets: it is an equilibrium under
    zero input, so staying put is the implicit backup continuation.
    """
    zero_x = np.zeros(X_t.dim)
    zero_u = np.zeros(U_t.dim)
    if not X_t.contains(zero_x, tol=1e-9):
        raise OriginInfeasibleError("origin violates the tightened state constraints")
    if not U_t.contains(zero_u, tol=1e-9):
        raise OriginInfeasibleError("zero input violates the tightened input constraints")
    return TerminalSet(
        vertices=[zero_x],
        plans=[None],
        X_t=X_t,
        U_t=U_t,
        max_vertices=max_vertices,
    )


def enlarge(ts: TerminalSet, z0: np.ndarray, plan: VertexPlan | None = None) -> TerminalSet:
    """Add a certified nominal initial state as a new vertex.

    Points already inside the hull are skipped (the hull is unchanged by
    interior points).  Raises when the vertex cap is reached so the caller
    can prune and retry.
    """
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    if not ts.X_t.contains(z0, tol=1e-7):
        raise ValueError("candidate vertex violates the tightened state constraints")
    if ts.contains(z0):
        return ts
    if len(ts.vertices) >= ts.max_vertices:
        raise CapReachedError(f"vertex cap {ts.max_vertices} reached")
    out = ts.snapshot()
    out.vertices.append(z0.copy())
    out.plans.append(plan)
    out.generation += 1
    return out


def prune(ts: TerminalSet) -> TerminalSet:
    """Drop vertices expressible as convex combinations of the others."""
    keep = list(range(len(ts.vertices)))
    changed = True
    while changed and len(keep) > 1:
        changed = False
        for idx in list(keep):
            if idx == 0:
                continue  # origin is always kept
            others = [ts.vertices[j] for j in keep if j != idx]
            if hull_membership(np.array(others), ts.vertices[idx], ts.membership_tol):
                keep.remove(idx)
                changed = True
    if len(keep) == len(ts.vertices):
        return ts
    out = ts.snapshot()
    out.vertices = [ts.vertices[j] for j in keep]
    out.plans = [ts.plans[j] for j in keep]
    out.generation += 1
    return out


def revalidate(ts: TerminalSet, X_t: HPolytope, U_t: HPolytope) -> TerminalSet:
    """Re-check every vertex (and its plan) against new tightened sets.

    Used after tubes are recomputed: vertices certified under the old
    tightening may no longer be valid and are discarded.
    """
    if not X_t.contains(np.zeros(X_t.dim), tol=1e-9):
        raise OriginInfeasibleError("origin violates the new tightened state constraints")
    vertices = [np.zeros(X_t.dim)]
    plans: list[VertexPlan | None] = [None]
    for v, p in zip(ts.vertices[1:], ts.plans[1:]):
        if not X_t.contains(v, tol=1e-9):
            continue
        if p is not None:
            if not np.all(X_t.contains(p.z, tol=1e-7)):
                continue
            if not np.all(U_t.contains(p.v, tol=1e-7)):
                continue
        vertices.append(v)
        plans.append(p)
    return TerminalSet(
        vertices=vertices,
        plans=plans,
        X_t=X_t,
        U_t=U_t,
        max_vertices=ts.max_vertices,
        generation=ts.generation + 1,
        membership_tol=ts.membership_tol,
    )


def validate_invariance(
    ts: TerminalSet,
    A: np.ndarray,
    B: np.ndarray,
    dyn_tol: float = 1e-8,
    slack_tol: float = 1e-7,
) -> None:
    """Replay every stored plan and assert the invariance certificate.

    Checks per vertex: the plan starts at the vertex, follows the nominal
    dynamics, respects the tightened sets throughout, and re-enters the
    current hull at its end.  Raises AssertionError with a description on
    the first failure.
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    V = ts.vertex_matrix()
    for k, (v, p) in enumerate(zip(ts.vertices, ts.plans)):
        if p is None:
            nominal_next = A @ v
            assert np.max(np.abs(nominal_next)) <= 1e-7 or ts.contains(nominal_next), (
                f"plan-less vertex {k} has no invariant continuation"
            )
            continue
        assert np.max(np.abs(p.z[0] - v)) <= dyn_tol, f"plan of vertex {k} starts elsewhere"
        for i in range(p.horizon):
            res = p.z[i + 1] - (A @ p.z[i] + B @ p.v[i])
            assert np.max(np.abs(res)) <= dyn_tol, (
                f"plan of vertex {k} violates dynamics at step {i}"
            )
        assert np.all(ts.X_t.contains(p.z, tol=slack_tol)), (
            f"plan of vertex {k} leaves the tightened state set"
        )
        assert np.all(ts.U_t.contains(p.v, tol=slack_tol)), (
            f"plan of vertex {k} leaves the tightened input set"
        )
        dist = hull_distance(V, p.z[-1], ts.membership_tol)
        assert dist <= 10 * ts.membership_tol, (
            f"plan of vertex {k} ends {dist:.2e} outside the hull"
        )


def dedup_candidates(points: list[np.ndarray], tol: float = 1e-6) -> list[int]:
    """Indices of points that are not within tol of an earlier point."""
    kept: list[int] = []
    for i, p in enumerate(points):
        dup = False
        for j in kept:
            if np.max(np.abs(p - points[j])) <= tol:
                dup = True
                break
        if not dup:
            kept.append(i)
    return kept
