"""Constraint sets and tube geometry.

Polytopes in halfspace form hold the state/input constraints, ellipsoids
hold noise and error sets, and Minkowski sums of ellipsoids (the tubes) are
kept implicit: every consumer only ever needs the support function
``supp(a) = max { a.e : e in tube }``, which is exact and cheap for a sum
of ellipsoids, wheres the sum itself has no closed form.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyTighteningError, NotABoxError

# Slack below which a facet is considered violated when deciding emptiness.
EMPTY_TOL = 1e-9


def _as_matrix(a) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    return m


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=float).reshape(-1)
    return v


@dataclass(frozen=True)
class HPolytope:
    """Polytope { x : H x <= h } in halfspace representation.

    Instances are validated on construction: dimensions must agree and the
    set must be nonempty (up to ``EMPTY_TOL`` facet slack). Unbounded
    polytopes are allowed; only genuinely contradictory facets raise.
    """

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", _as_matrix(self.H))
        object.__setattr__(self, "h", _as_vector(self.h))
        if self.H.shape[0] != self.h.shape[0]:
            raise DimensionMismatchError(
                f"{self.H.shape[0]} facet normals but {self.h.shape[0]} offsets"
            )
        if self.chebyshev_radius() < -EMPTY_TOL:
            raise EmptyTighteningError("polytope is empty")
        self.H.setflags(write=False)
        self.h.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def num_facets(self) -> int:
        return self.H.shape[0]

    def contains(self, x, tol: float = 0.0):
        """Membership test; `x` may be a single point or (k, dim) stack."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return bool(np.all(self.H @ x <= self.h + tol))
        return np.all(x @ self.H.T <= self.h + tol, axis=1)

    def slack(self, x) -> np.ndarray:
        """Per-facet slack h - Hx (negative entries mean violation)."""
        return self.h - self.H @ np.asarray(x, dtype=float)

    def chebyshev_radius(self, cap: float = 1e9) -> float:
        """Radius of the largest inscribed ball, capped for unbounded sets.

        Negative values measure how contradictory the facets are; the
        emptiness check on construction compares against ``EMPTY_TOL``.
        """
        from scipy.optimize import linprog

        norms = np.linalg.norm(self.H, axis=1)
        zero = norms <= 0.0
        if np.any(self.h[zero] < -EMPTY_TOL):
            return -np.inf
        Hn = self.H[~zero]
        hn = self.h[~zero]
        nn = norms[~zero]
        if Hn.shape[0] == 0:
            return cap
        d = self.dim
        # max r  s.t.  H x + ||H_j|| r <= h   (variables x, r)
        c = np.zeros(d + 1)
        c[-1] = -1.0
        A_ub = np.hstack([Hn, nn[:, None]])
        res = linprog(
            c,
            A_ub=A_ub,
            b_ub=hn,
            bounds=[(None, None)] * d + [(None, cap)],
            method="highs",
        )
        if res.status != 0 or res.x is None:
            return -np.inf
        return float(res.x[-1])

    def to_json_dict(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "HPolytope":
        return cls(np.array(d["H"], dtype=float), np.array(d["h"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s: str) -> "HPolytope":
        return cls.from_json_dict(json.loads(s))

    @classmethod
    def box(cls, lower, upper) -> "HPolytope":
        """Axis-aligned box [lower, upper] as a polytope."""
        lower = _as_vector(lower)
        upper = _as_vector(upper)
        if lower.shape != upper.shape:
            raise DimensionMismatchError("box bounds disagree")
        d = lower.shape[0]
        eye = np.eye(d)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid { x : (x-c)' S (x-c) <= rho } with S symmetric PD."""

    center: np.ndarray
    S: np.ndarray
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vector(self.center))
        object.__setattr__(self, "S", _as_matrix(self.S))
        object.__setattr__(self, "rho", float(self.rho))
        if self.S.shape[0] != self.S.shape[1]:
            raise DimensionMismatchError("shape matrix must be square")
        if self.center.shape[0] != self.S.shape[0]:
            raise DimensionMismatchError("center/shape dimensions disagree")
        if not np.allclose(self.S, self.S.T, atol=1e-10):
            raise ValueError("shape matrix must be symmetric (tol 1e-10)")
        evals = np.linalg.eigvalsh(0.5 * (self.S + self.S.T))
        if evals[0] <= 0.0:
            raise ValueError(f"shape matrix must be PD (min eig {evals[0]:.3e})")
        if self.rho <= 0.0:
            raise ValueError("level rho must be positive")
        self.center.setflags(write=False)
        self.S.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        e = x - self.center
        if x.ndim == 1:
            return bool(e @ self.S @ e <= self.rho + tol)
        return np.einsum("ij,jk,ik->i", e, self.S, e) <= self.rho + tol

    def quad(self, x):
        """Quadratic form value (x-c)' S (x-c), vectorized over rows."""
        x = np.asarray(x, dtype=float)
        e = x - self.center
        if x.ndim == 1:
            return float(e @ self.S @ e)
        return np.einsum("ij,jk,ik->i", e, self.S, e)

    def boundary_points(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """k points uniformly mapped onto the boundary (for certificates)."""
        d = self.dim
        u = rng.standard_normal((k, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        # x = c + sqrt(rho) * S^{-1/2} u
        evals, vecs = np.linalg.eigh(self.S)
        half_inv = vecs @ np.diag(evals**-0.5) @ vecs.T
        return self.center + np.sqrt(self.rho) * (u @ half_inv.T)

    def support(self, a) -> float:
        """Support function max { a.x : x in set } minus the center offset."""
        a = _as_vector(a)
        return float(self.center @ a + np.sqrt(self.rho * a @ np.linalg.solve(self.S, a)))

    def to_json_dict(self) -> dict:
        return {"center": self.center.tolist(), "S": self.S.tolist(), "rho": self.rho}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Ellipsoid":
        return cls(np.array(d["center"], dtype=float), np.array(d["S"], dtype=float), d["rho"])


@dataclass(frozen=True)
class SupportTerm:
    """One ellipsoidal term of a tube, kept in support-ready form.

    ``gram`` is the matrix appearing directly under the square root of the
    support function, supp(a) = sqrt(rho * a' gram a).  For an ellipsoid
    {e : e' S e <= rho} this is gram = S^{-1}; images under a wide linear
    map K are stored as gram = K S^{-1} K' which may be singular, so the
    support never needs an inversion of the stored matrix.  ``shape`` keeps
    the original S when one exists (serialization, membership checks).
    """

    gram: np.ndarray
    rho: float
    shape: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "gram", _as_matrix(self.gram))
        object.__setattr__(self, "rho", float(self.rho))
        if self.shape is not None:
            object.__setattr__(self, "shape", _as_matrix(self.shape))
        if self.rho < 0.0:
            raise ValueError("term level must be nonnegative")
        if not np.allclose(self.gram, self.gram.T, atol=1e-9):
            raise ValueError("term gram matrix must be symmetric")
        self.gram.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    @classmethod
    def from_ellipsoid(cls, ell: Ellipsoid) -> "SupportTerm":
        gram = np.linalg.inv(ell.S)
        gram = 0.5 * (gram + gram.T)
        return cls(gram=gram, rho=ell.rho, shape=ell.S)


@dataclass(frozen=True)
class SupportSet:
    """Minkowski sum of ellipsoidal terms, represented by its support function.

    supp(a) = sum_i sqrt(rho_i * a' gram_i a).  Zero terms represent the
    degenerate point set {0} with supp == 0.
    """

    terms: tuple[SupportTerm, ...] = ()
    level: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        dims = {t.dim for t in self.terms}
        if len(dims) > 1:
            raise DimensionMismatchError(f"mixed term dimensions {dims}")

    @property
    def dim(self) -> int | None:
        return self.terms[0].dim if self.terms else None

    def support(self, a) -> float:
        a = _as_vector(a)
        total = 0.0
        for t in self.terms:
            q = float(a @ t.gram @ a)
            total += np.sqrt(max(t.rho * q, 0.0))
        return total

    def support_many(self, A: np.ndarray) -> np.ndarray:
        """Support values for each row of A."""
        A = _as_matrix(A)
        out = np.zeros(A.shape[0])
        for t in self.terms:
            q = np.einsum("ij,jk,ik->i", A, t.gram, A)
            out += np.sqrt(np.maximum(t.rho * q, 0.0))
        return out

    def boundary_samples(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """k points e_1 + ... + e_T with each e_i on its term's boundary.

        Only valid for terms built from ellipsoids (nonsingular grams).
        """
        if not self.terms:
            return np.zeros((k, 0))
        d = self.terms[0].dim
        out = np.zeros((k, d))
        for i, t in enumerate(self.terms):
            u = rng.standard_normal((k, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            evals, vecs = np.linalg.eigh(t.gram)
            evals = np.clip(evals, 0.0, None)
            half = vecs @ np.diag(np.sqrt(evals)) @ vecs.T
            out += np.sqrt(t.rho) * (u @ half.T)
        return out

    def to_json_dict(self) -> dict:
        terms = []
        for t in self.terms:
            if t.shape is not None:
                terms.append({"S": t.shape.tolist(), "rho": t.rho})
            else:
                terms.append({"gram": t.gram.tolist(), "rho": t.rho})
        return {"terms": terms}

    @classmethod
    def from_json_dict(cls, d: dict, level: float | None = None) -> "SupportSet":
        terms = []
        for td in d["terms"]:
            if "S" in td:
                terms.append(
                    SupportTerm.from_ellipsoid(
                        Ellipsoid(np.zeros(len(td["S"])), np.array(td["S"]), td["rho"])
                    )
                )
            else:
                terms.append(SupportTerm(gram=np.array(td["gram"]), rho=td["rho"]))
        return cls(terms=tuple(terms), level=level)

    @classmethod
    def from_ellipsoids(cls, *ells: Ellipsoid, level: float | None = None) -> "SupportSet":
        return cls(terms=tuple(SupportTerm.from_ellipsoid(e) for e in ells), level=level)


def pontryagin_tighten(poly: HPolytope, tube: SupportSet) -> HPolytope:
    """Shrink a polytope by a tube: { z : z + e in poly for all e in tube }.

    Each facet offset is reduced by the tube's support in the facet-normal
    direction, which is the exact erosion for halfspace constraints.
    """
    if tube.dim is not None and tube.dim != poly.dim:
        raise DimensionMismatchError(
            f"tube dimension {tube.dim} vs polytope dimension {poly.dim}"
        )
    if not tube.terms:
        return poly
    h_new = poly.h - tube.support_many(poly.H)
    try:
        return HPolytope(poly.H, h_new)
    except EmptyTighteningError:
        norms = np.linalg.norm(poly.H, axis=1)
        norms[norms <= 0.0] = 1.0
        worst = int(np.argmin(h_new / norms))
        raise EmptyTighteningError(
            f"tightened polytope is empty (worst facet {worst}); "
            "tube too large for the constraints",
            facet=worst,
        ) from None


def map_tube(K: np.ndarray, tube: SupportSet) -> SupportSet:
    """Image of a tube under a linear map K (e.g. feedback into input space).

    Each term maps to gram K gram K', kept as a possibly-singular quadratic
    form so wide maps (fewer rows than columns) need no inversion.
    """
    K = _as_matrix(K)
    if tube.dim is not None and K.shape[1] != tube.dim:
        raise DimensionMismatchError(
            f"map has {K.shape[1]} columns but tube dimension is {tube.dim}"
        )
    new_terms = []
    for t in tube.terms:
        g = K @ t.gram @ K.T
        new_terms.append(SupportTerm(gram=0.5 * (g + g.T), rho=t.rho))
    return SupportSet(terms=tuple(new_terms), level=tube.level)


def hull_membership(vertices, q, tol: float = 1e-7) -> bool:
    """Decide q in Conv(vertices) by a feasibility solve.

    Fast path: nonnegative least squares on the system stacked with the
    sum-to-one row; the renormalized solution is a containment certificate.
    If that certificate misses within tolerance, an exact QP (minimum
    distance to the hull) settles the question.  Tolerance absorbs
    degenerate vertex sets.
    """
    V = np.asarray(vertices, dtype=float)
    if V.ndim == 1:
        V = V.reshape(-1, 1) if np.isscalar(q) else V.reshape(1, -1)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if V.shape[1] != q.shape[0]:
        raise DimensionMismatchError("vertex/point dimensions disagree")
    dist = hull_distance(V, q, tol)
    return bool(dist <= tol)


def _nnls_hull_weights(V: np.ndarray, q: np.ndarray):
    """Certified convex weights and distance bound via penalized NNLS."""
    from scipy.optimize import nnls

    scale = max(np.max(np.abs(V)), np.max(np.abs(q)), 1.0)
    beta = 10.0 * scale
    A = np.vstack([V.T, beta * np.ones((1, V.shape[0]))])
    b = np.concatenate([q, [beta]])
    lam, _ = nnls(A, b)
    s = lam.sum()
    if s <= 1e-12:
        return None, np.inf
    lam = lam / s
    return lam, float(np.linalg.norm(V.T @ lam - q))


def hull_weights(V: np.ndarray, q: np.ndarray, tol: float = 1e-7):
    """Convex combination weights of q over the rows of V.

    Returns (lam, dist) where lam >= 0 sums to one and dist = ||V'lam - q||
    is the achieved distance (0 within tol iff q is in the hull).  The NNLS
    fast path already certifies interior points; a QP refines the rest.
    """
    V = np.asarray(V, dtype=float)
    q = np.asarray(q, dtype=float).reshape(-1)
    lam, ub = _nnls_hull_weights(V, q)
    if lam is not None and ub <= 0.5 * tol:
        return lam, ub
    # NNLS certificate inconclusive: solve min ||V' lam - q||^2 exactly.
    from .qp import QuadraticProgram, solve_qp

    k = V.shape[0]
    P = 2.0 * (V @ V.T)
    P = 0.5 * (P + P.T)
    qp = QuadraticProgram(
        P_cost=P,
        q_cost=-2.0 * (V @ q),
        A_eq=np.ones((1, k)),
        b_eq=np.array([1.0]),
        A_in=-np.eye(k),
        b_in=np.zeros(k),
    )
    rep = solve_qp(qp, tol=1e-10, max_iter=20000)
    if rep.status != "Optimal":
        return lam, (ub if np.isfinite(ub) else np.inf)
    lam_qp = np.clip(rep.x_opt, 0.0, None)
    s = lam_qp.sum()
    if s <= 1e-12:
        return lam, ub
    lam_qp = lam_qp / s
    d_qp = float(np.linalg.norm(V.T @ lam_qp - q))
    if d_qp < ub:
        return lam_qp, d_qp
    return lam, ub


def hull_distance(V: np.ndarray, q: np.ndarray, tol: float = 1e-7) -> float:
    """Distance from q to Conv(V) (rows of V are vertices)."""
    return hull_weights(V, q, tol)[1]


def box_vertices(poly: HPolytope) -> list[np.ndarray]:
    """All 2^d corners of an axis-aligned box given in halfspace form."""
    d = poly.dim
    lower = np.full(d, np.nan)
    upper = np.full(d, np.nan)
    for row, off in zip(poly.H, poly.h):
        nz = np.nonzero(row)[0]
        if nz.shape[0] != 1:
            raise NotABoxError(f"facet normal {row} is not axis-aligned")
        j = nz[0]
        c = row[j]
        if c > 0:
            bound = off / c
            upper[j] = bound if np.isnan(upper[j]) else min(upper[j], bound)
        else:
            bound = off / c
            lower[j] = bound if np.isnan(lower[j]) else max(lower[j], bound)
    if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
        raise NotABoxError("box must be bounded in every coordinate")
    corners = []
    for choice in itertools.product(*[(lo, hi) for lo, hi in zip(lower, upper)]):
        corners.append(np.array(choice, dtype=float))
    return corners
