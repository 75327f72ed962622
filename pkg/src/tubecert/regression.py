"""Bayesian linear regression of one-step dynamics and the model-error bound.

The dynamics x+ = theta' (x; u) + noise are inferred column by column with
independent Gaussian priors.  Confidence geometry follows from the posterior
precision: the vectorized parameter lives in an ellipsoid whose scaled major
axes give a polytopic outer approximation, and maximizing the induced
one-step prediction deviation over an outer operating box yields a single
radius bound on the model error.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .chisq import chi2_quantile
from .errors import DimensionMismatchError, IllConditionedError
from .geometry import Ellipsoid, HPolytope, box_vertices


@dataclass
class Dataset:
    """Transition records (state, input, successor)."""

    states: np.ndarray  # (N, n)
    inputs: np.ndarray  # (N, m)
    successors: np.ndarray  # (N, n)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.successors = np.atleast_2d(np.asarray(self.successors, dtype=float))
        N = self.states.shape[0]
        if self.inputs.shape[0] != N or self.successors.shape[0] != N:
            raise DimensionMismatchError("record counts disagree")
        if self.successors.shape[1] != self.states.shape[1]:
            raise DimensionMismatchError("successor dimension disagrees with state")
        if not np.all(np.isfinite(self.successors)):
            raise ValueError("successors must be finite")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.states.shape[0]

    @classmethod
    def empty(cls, n: int, m: int) -> "Dataset":
        return cls(np.zeros((0, n)), np.zeros((0, m)), np.zeros((0, n)))

    def regressors(self) -> np.ndarray:
        """Stacked feature rows (x_i; u_i), one per record."""
        return np.hstack([self.states, self.inputs])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = (
            [f"x{i+1}" for i in range(self.n)]
            + [f"u{i+1}" for i in range(self.m)]
            + [f"y{i+1}" for i in range(self.n)]
        )
        w.writerow(header)
        for x, u, y in zip(self.states, self.inputs, self.successors):
            w.writerow([repr(v) for v in np.concatenate([x, u, y])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        n = sum(1 for c in header if c.startswith("x"))
        m = sum(1 for c in header if c.startswith("u"))
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        if data.size == 0:
            return cls.empty(n, m)
        return cls(data[:, :n], data[:, n : n + m], data[:, n + m :])


@dataclass
class BLRPosterior:
    """Per-column Gaussian posterior over the parameter matrix.

    ``mean`` is (n+m, n); ``precisions[i]`` is the posterior precision of
    column i (an (n+m, n+m) PD matrix).
    """

    mean: np.ndarray
    precisions: list[np.ndarray]
    sigma_s: float
    prior_covs: list[np.ndarray]

    @property
    def n(self) -> int:
        return self.mean.shape[1]

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @property
    def m(self) -> int:
        return self.p - self.n

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "precisions": [C.tolist() for C in self.precisions],
            "sigma_s": self.sigma_s,
            "prior_covs": [S.tolist() for S in self.prior_covs],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BLRPosterior":
        return cls(
            mean=np.array(d["mean"], dtype=float),
            precisions=[np.array(C, dtype=float) for C in d["precisions"]],
            sigma_s=float(d["sigma_s"]),
            prior_covs=[np.array(S, dtype=float) for S in d["prior_covs"]],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s: str) -> "BLRPosterior":
        return cls.from_json_dict(json.loads(s))

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """k draws of the full parameter matrix, shape (k, p, n)."""
        draws = np.empty((k, self.p, self.n))
        for i, C in enumerate(self.precisions):
            cov = np.linalg.inv(C)
            cov = 0.5 * (cov + cov.T)
            draws[:, :, i] = rng.multivariate_normal(self.mean[:, i], cov, size=k)
        return draws


@dataclass
class ModelErrorBound:
    """Euclidean radius bound on the one-step model error over an outer box."""

    w_max: float
    p_m: float
    X_o: HPolytope
    U_o: HPolytope

    def __post_init__(self):
        if self.w_max < 0.0:
            raise ValueError("w_max must be nonnegative")
        if not 0.0 < self.p_m < 1.0:
            raise ValueError("p_m must be in (0, 1)")

    def ball(self, dim: int, floor: float = 1e-12) -> Ellipsoid:
        """The error set as a centred ball { w : w'w <= w_max^2 }."""
        r = max(self.w_max, floor)
        return Ellipsoid(np.zeros(dim), np.eye(dim), r**2)


def _prior_list(prior_covs, p: int, n: int) -> list[np.ndarray]:
    if isinstance(prior_covs, (list, tuple)):
        covs = [np.atleast_2d(np.asarray(S, dtype=float)) for S in prior_covs]
        if len(covs) != n:
            raise DimensionMismatchError(f"need {n} prior covariances, got {len(covs)}")
    else:
        S = np.atleast_2d(np.asarray(prior_covs, dtype=float))
        covs = [S.copy() for _ in range(n)]
    for S in covs:
        if S.shape != (p, p):
            raise DimensionMismatchError(f"prior covariance must be {p}x{p}")
    return covs


def fit_blr(data: Dataset, prior_covs, sigma_s: float) -> BLRPosterior:
    """Posterior over the parameter matrix given transition data.

    Column i of the parameter gets precision C_i = Phi'Phi / sigma_s^2 +
    prior_precision_i and mean C_i^{-1} Phi' y_i / sigma_s^2.  An empty
    dataset returns the prior (zero mean).
    """
    if sigma_s <= 0.0:
        raise ValueError("sigma_s must be positive")
    n, m = data.n, data.m
    p = n + m
    covs = _prior_list(prior_covs, p, n)
    Phi = data.regressors()
    G = Phi.T @ Phi if len(data) else np.zeros((p, p))
    mean = np.zeros((p, n))
    precisions = []
    for i in range(n):
        prior_prec = np.linalg.inv(covs[i])
        C = G / sigma_s**2 + prior_prec
        C = 0.5 * (C + C.T)
        cond = np.linalg.cond(C)
        if cond > 1e12:
            raise IllConditionedError(
                f"posterior precision for column {i} has condition number {cond:.3e}"
            )
        if len(data):
            mean[:, i] = np.linalg.solve(C, Phi.T @ data.successors[:, i] / sigma_s**2)
        precisions.append(C)
    return BLRPosterior(mean=mean, precisions=precisions, sigma_s=float(sigma_s), prior_covs=covs)


def nominal_matrices(post: BLRPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Expected dynamics matrices (A, B) from the posterior mean."""
    theta_t = post.mean.T  # (n, n+m)
    return theta_t[:, : post.n].copy(), theta_t[:, post.n :].copy()


def confidence_vertices(post: BLRPosterior, p_m: float) -> list[np.ndarray]:
    """Vertices of a polytopic outer approximation of the confidence region.

    The vectorized-parameter ellipsoid at level p_m has major semi-axes
    r/sqrt(lambda_k) along the precision eigenvectors; scaling those axis
    endpoints by sqrt(d) (d = parameter count) turns the inscribed
    cross-polytope into a circumscribed one.  Returns 2*d matrices.
    """
    if not 0.0 < p_m < 1.0:
        raise ValueError("p_m must be in (0, 1)")
    n, p = post.n, post.p
    d = n * p
    r = np.sqrt(chi2_quantile(d, p_m))
    scale = np.sqrt(d)
    out = []
    # block-diagonal precision: eigenvectors live inside single column blocks
    for i in range(n):
        evals, vecs = np.linalg.eigh(post.precisions[i])
        for lam, v in zip(evals, vecs.T):
            delta = scale * r / np.sqrt(lam) * v
            for sign in (+1.0, -1.0):
                theta = post.mean.copy()
                theta[:, i] = theta[:, i] + sign * delta
                out.append(theta)
    return out


def _check_box_containment(inner: HPolytope, outer: HPolytope, what: str) -> None:
    for v in box_vertices(inner):
        if not outer.contains(v, tol=1e-9):
            raise ValueError(f"outer {what} box does not contain the constraint box")


def model_error_bound(
    post: BLRPosterior,
    p_m: float,
    X_o: HPolytope,
    U_o: HPolytope,
    A: np.ndarray,
    B: np.ndarray,
    X: HPolytope | None = None,
    U: HPolytope | None = None,
) -> ModelErrorBound:
    """Radius bound on the one-step prediction error over the outer box.

    The maximal Euclidean deviation of any confidence-vertex model from the
    nominal (A, B) is attained at a corner of the box (convex norm), so the
    inner maximization is exact vertex enumeration.
    """
    if X is not None:
        _check_box_containment(X, X_o, "state")
    if U is not None:
        _check_box_containment(U, U_o, "input")
    xs = box_vertices(X_o)
    us = box_vertices(U_o)
    corners = np.array([np.concatenate([x, u]) for x in xs for u in us])  # (K, p)
    AB = np.hstack([np.atleast_2d(A), np.atleast_2d(B)])  # (n, p)
    w_max = 0.0
    for theta in confidence_vertices(post, p_m):
        D = theta.T - AB  # (n, p)
        errs = np.linalg.norm(corners @ D.T, axis=1)
        w_max = max(w_max, float(np.max(errs)))
    return ModelErrorBound(w_max=w_max, p_m=p_m, X_o=X_o, U_o=U_o)
