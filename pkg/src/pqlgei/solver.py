"""Proximal-Newton block coordinate descent for the penalized PQL objective.

Model matrices are ``Z`` (unpenalized covariates with intercept), the
exposure ``D`` (unpenalized), standardized genotypes ``G`` and their
exposure interactions ``D * G``. Each variant j forms a group
``(beta_j, gamma_j)`` with penalty

    (1 - rho) * lam * ||(beta_j, gamma_j)||_2 + rho * lam * |gamma_j|

and the random effect enters through its rotation ``delta = U' b`` with
ridge ``phi / Lambda``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data_model import Coefficients, Dataset, Family, get_family, impute_missing, standardize_genotypes
from .kinship import CovarianceEigen
from .varcomp import NullModel

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class InnerLoopError(RuntimeError):
    pass


@dataclass
class SolverOptions:
    tol_outer: float = 1e-6
    tol_cd: float = 1e-7
    tol_kkt: float = 1e-6
    max_outer: int = 100
    max_inner: int = 1000
    max_sweeps: int = 10000
    s_t: float = 1.0


@dataclass(frozen=True)
class PenaltySpec:
    lam: float
    rho: float = 0.0
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")

    def group_weights(self, p: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(p)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (p,) or np.any(w < 0):
            raise ValueError("group penalty weights must be a non-negative vector of length p")
        return w


@dataclass
class Design:
    """Model matrices in the layout the solver works with."""

    y: np.ndarray
    Z: np.ndarray
    D: np.ndarray
    G: np.ndarray
    family: Family
    prior_weights: np.ndarray
    variant_ids: list = field(default_factory=list)
    covariate_names: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)
    freqs: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.Z = np.asfortranarray(np.atleast_2d(self.Z), dtype=float)
        self.D = np.ascontiguousarray(self.D, dtype=float)
        self.G = np.asfortranarray(np.atleast_2d(self.G), dtype=float)
        self.DG = np.asfortranarray(self.D[:, None] * self.G)
        self.family = get_family(self.family)
        self.prior_weights = (np.ones_like(self.y) if self.prior_weights is None
                              else np.asarray(self.prior_weights, dtype=float))
        n = self.y.shape[0]
        if not self.variant_ids:
            self.variant_ids = [f"v{j}" for j in range(self.p)]
        if not self.covariate_names:
            self.covariate_names = ["intercept"] + [f"z{k}" for k in range(1, self.m)]
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(n)]
        # alpha is not identifiable when D is collinear with Z
        self.has_alpha = bool(np.any(self.D != 0)) and (
            np.linalg.matrix_rank(np.column_stack([self.Z, self.D])) > self.m)

    @classmethod
    def from_dataset(cls, data: Dataset, family="binomial", standardize: bool = True, freqs=None) -> "Design":
        G, _ = impute_missing(data.G)
        if standardize:
            G, freqs = standardize_genotypes(G, freqs, data.variant_ids)
        return cls(data.y, data.Z, data.D, G, get_family(family), data.prior_weights,
                   list(data.variant_ids), list(data.covariate_names), list(data.sample_ids), freqs)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    def subset(self, rows) -> "Design":
        rows = np.asarray(rows)
        return Design(self.y[rows], self.Z[rows], self.D[rows], self.G[rows], self.family,
                      self.prior_weights[rows], self.variant_ids, self.covariate_names,
                      [self.sample_ids[i] for i in rows], self.freqs)

    def fixed_part(self, theta, alpha, beta, gamma) -> np.ndarray:
        eta = self.Z @ theta + alpha * self.D
        nz = np.flatnonzero((beta != 0) | (gamma != 0))
        if nz.size:
            eta = eta + self.G[:, nz] @ beta[nz] + self.DG[:, nz] @ gamma[nz]
        return eta


@dataclass
class FitState:
    theta: np.ndarray
    alpha: float
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    eta: np.ndarray | None = None
    xb: np.ndarray | None = None
    mu: np.ndarray | None = None
    w: np.ndarray | None = None
    ytilde: np.ndarray | None = None
    active: np.ndarray | None = None
    s_t: float = 1.0
    lam: float = float("nan")
    rho: float = float("nan")
    objective: float = float("nan")
    n_outer: int = 0
    converged: bool = False
    kkt: dict | None = None
    history: list = field(default_factory=list)

    @property
    def coefficients(self) -> Coefficients:
        return Coefficients(self.theta, self.alpha, self.beta, self.gamma)

    def copy(self) -> "FitState":
        arrays = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        arrays["history"] = list(self.history)
        return FitState(**arrays)

    @classmethod
    def initial(cls, design: Design, null: NullModel | None = None) -> "FitState":
        theta = np.zeros(design.m) if null is None else np.array(null.theta0, dtype=float)
        alpha = 0.0 if null is None or not design.has_alpha else float(null.alpha0)
        return cls(theta, alpha, np.zeros(design.p), np.zeros(design.p), np.zeros(design.n))


def refresh(design: Design, eig: CovarianceEigen, state: FitState) -> FitState:
    """Recompute eta, mu, working weights and working response from the coefficients."""
    fam = design.family
    state.xb = design.fixed_part(state.theta, state.alpha, state.beta, state.gamma)
    state.eta = state.xb + eig.U @ state.delta
    state.mu = fam.linkinv(state.eta)
    state.w = fam.working_weights(state.mu, design.prior_weights)
    state.ytilde = state.eta + state.s_t * fam.mu_eta_inv(state.mu) * (design.y - state.mu)
    return state


def penalty_value(beta, gamma, penalty: PenaltySpec) -> float:
    pw = penalty.group_weights(beta.shape[0])
    return float(penalty.lam * np.sum(pw * ((1 - penalty.rho) * np.hypot(beta, gamma)
                                            + penalty.rho * np.abs(gamma))))


def smooth_objective(design: Design, eig: CovarianceEigen, phi: float, theta, alpha, beta, gamma, delta) -> float:
    """f(Theta; delta) = -sum ql_i + 0.5 delta' Lambda^-1 delta (quasi-likelihood scaled by 1/phi)."""
    eta = design.fixed_part(theta, alpha, beta, gamma) + eig.U @ delta
    mu = design.family.linkinv(eta)
    ql = design.family.quasi_loglik(design.y, mu, design.prior_weights) / phi
    return float(-ql + 0.5 * np.sum(delta ** 2 / eig.Lambda))


def smooth_gradients(design: Design, eig: CovarianceEigen, phi: float, theta, alpha, beta, gamma, delta):
    """Gradients of ``smooth_objective`` w.r.t. delta and (theta, alpha, beta, gamma)."""
    eta = design.fixed_part(theta, alpha, beta, gamma) + eig.U @ delta
    mu = design.family.linkinv(eta)
    fam = design.family
    # canonical link: d ql / d eta = a (y - mu) / (phi nu g') = a (y - mu) / phi
    score = design.prior_weights * (design.y - mu) / (fam.variance(mu) * fam.mu_eta_inv(mu)) / phi
    g_delta = -eig.U.T @ score + delta / eig.Lambda
    g_theta = -design.Z.T @ score
    g_alpha = -float(design.D @ score)
    g_beta = -design.G.T @ score
    g_gamma = -design.DG.T @ score
    return g_delta, (g_theta, g_alpha, g_beta, g_gamma)


def quasi_objective(design: Design, eig: CovarianceEigen, phi: float, state: FitState,
                    penalty: PenaltySpec) -> float:
    """Penalized objective on the scale of the coordinate updates.

    ``phi * f(Theta; delta) + g(Theta)``; for the binomial family with
    ``phi = 1`` this is the negative Bernoulli log-likelihood plus the
    random-effect ridge and the penalty. Means are clamped to
    [1e-10, 1 - 1e-10] before evaluation.
    """
    mu = design.family.linkinv(state.eta) if state.mu is None else state.mu
    ql = design.family.quasi_loglik(design.y, mu, design.prior_weights)
    ridge = 0.5 * phi * float(np.sum(state.delta ** 2 / eig.Lambda))
    return -ql + ridge + penalty_value(state.beta, state.gamma, penalty)


def _residual(design: Design, eig: CovarianceEigen, state: FitState) -> np.ndarray:
    return state.ytilde - state.xb - eig.U @ state.delta


def update_delta(design: Design, eig: CovarianceEigen, phi: float, state: FitState,
                 tol: float = 1e-7, max_sweeps: int = 10000) -> np.ndarray:
    """Coordinate descent for delta given the current working quantities.

    At convergence this is the generalized ridge WLS solution
    ``(U'WU + phi Lambda^-1)^-1 U'W (Ytilde - X Theta)``.
    """
    e = np.ascontiguousarray(_residual(design, eig, state))
    delta = np.ascontiguousarray(state.delta, dtype=float).copy()
    U = np.asfortranarray(eig.U)
    _kernels.delta_cd(U, np.ascontiguousarray(state.w), e, delta, phi / eig.Lambda, tol, max_sweeps)
    state.delta = delta
    return delta


def update_unpenalized(design: Design, state: FitState, eig: CovarianceEigen, sweeps: int = 1):
    """Closed-form WLS coordinate steps for each theta_k and then alpha."""
    w = state.w
    zz = (design.Z ** 2).T @ w
    for k in np.flatnonzero(zz <= 0):
        warnings.warn(f"covariate column {design.covariate_names[k]} has zero weighted sum of squares; skipped")
    e = np.ascontiguousarray(_residual(design, eig, state))
    theta = state.theta.copy()
    alpha, *_ = _kernels.bcd_sweeps(design.Z, design.D, design.G, design.DG, w, e, theta, float(state.alpha),
                                    state.beta.copy(), state.gamma.copy(), np.zeros(0, dtype=np.int64),
                                    np.ones(design.p), 1.0, 0.0, 1.0, 0.0, sweeps, 1e-12, 1,
                                    not design.has_alpha)
    state.theta = theta
    state.alpha = float(alpha)
    return theta, alpha


def soft_threshold(a, lam):
    return np.sign(a) * np.maximum(np.abs(a) - lam, 0.0)


def group_null_test(G_j, DG_j, r, w, penalty: PenaltySpec, s_t: float = 1.0, weight: float = 1.0) -> bool:
    """True when (beta_j, gamma_j) = 0 is optimal given the partial residual ``r``."""
    a = float(np.sum(w * G_j * r))
    c = float(np.sum(w * DG_j * r))
    lam = penalty.lam * s_t * weight
    return bool(_kernels.group_is_null(a, c, penalty.rho * lam, (1 - penalty.rho) * lam))


def update_group(j: int, design: Design, eig: CovarianceEigen, state: FitState, penalty: PenaltySpec,
                 tol: float = 1e-7, max_inner: int = 1000) -> tuple[float, float]:
    """Minimize the WLS surrogate over group j with all other blocks fixed."""
    e = _residual(design, eig, state)
    w = state.w
    g, dg = design.G[:, j], design.DG[:, j]
    b0, g0 = state.beta[j], state.gamma[j]
    r = e + g * b0 + dg * g0
    a = float(np.sum(w * g * r))
    c = float(np.sum(w * dg * r))
    gg, hh, gh = float(w @ g ** 2), float(w @ dg ** 2), float(w @ (g * dg))
    lam = penalty.lam * state.s_t * penalty.group_weights(design.p)[j]
    b, gm, it, status = _kernels.solve_group(a, c, gg, hh, gh, penalty.rho * lam, (1 - penalty.rho) * lam,
                                             b0, g0, tol, max_inner)
    if status == 2:
        raise InnerLoopError(f"group {j}: MM iterations did not settle after {max_inner} steps "
                             f"(beta={b:.6g}, gamma={gm:.6g}, a={a:.6g}, c={c:.6g})")
    xb = state.xb + g * (b - b0) + dg * (gm - g0)
    state.beta[j], state.gamma[j] = b, gm
    state.xb = xb
    return b, gm


def fit_single(design: Design, eig: CovarianceEigen, null: NullModel, penalty: PenaltySpec,
               warm_start: FitState | None = None, active=None,
               options: SolverOptions | None = None) -> FitState:
    """Fit one (lambda, rho) point.

    Each outer iteration rebuilds the working response, runs coordinate
    descent for delta, then block coordinate descent over theta, alpha and
    the groups in ``active`` (all groups when None). Groups outside
    ``active`` are held at zero.
    """
    opt = options or SolverOptions()
    phi = float(null.phi)
    state = warm_start.copy() if warm_start is not None else FitState.initial(design, null)
    state.s_t = opt.s_t
    groups = np.arange(design.p) if active is None else np.unique(np.asarray(active, dtype=np.int64))
    outside = np.setdiff1d(np.arange(design.p), groups, assume_unique=True)
    state.beta[outside] = 0.0
    state.gamma[outside] = 0.0
    if not design.has_alpha:
        state.alpha = 0.0
    pen = penalty.group_weights(design.p)
    ridge = phi / eig.Lambda
    U = np.asfortranarray(eig.U)
    refresh(design, eig, state)
    obj_prev = quasi_objective(design, eig, phi, state, penalty)
    eta_prev = state.eta.copy()
    rises = 0
    state.converged = False
    history = []
    for t in range(1, opt.max_outer + 1):
        e = np.ascontiguousarray(_residual(design, eig, state))
        _kernels.delta_cd(U, state.w, e, state.delta, ridge, opt.tol_cd, opt.max_sweeps)
        refresh(design, eig, state)
        e = np.ascontiguousarray(_residual(design, eig, state))
        theta = state.theta.copy()
        alpha, sweeps, worst, _ = _kernels.bcd_sweeps(
            design.Z, design.D, design.G, design.DG, state.w, e, theta, float(state.alpha),
            state.beta, state.gamma, groups, pen, penalty.lam, penalty.rho, state.s_t,
            opt.tol_cd, opt.max_sweeps, opt.tol_cd, opt.max_inner, not design.has_alpha)
        if worst == 2:
            raise InnerLoopError(f"MM group updates did not settle within {opt.max_inner} iterations "
                                 f"(lambda={penalty.lam:.6g}, rho={penalty.rho}, outer iteration {t})")
        state.theta = theta
        state.alpha = float(alpha)
        refresh(design, eig, state)
        obj = quasi_objective(design, eig, phi, state, penalty)
        history.append(obj)
        if obj > obj_prev + 0.1 * abs(obj_prev):
            rises += 1
            if rises >= 3:
                raise DivergenceError(
                    f"objective increased by more than 10% in 3 consecutive outer iterations at "
                    f"lambda={penalty.lam:.6g}; start the lambda grid closer to lambda_max or use a finer grid")
        else:
            rises = 0
        rel = abs(obj_prev - obj) / max(abs(obj), 1.0)
        d_eta = float(np.max(np.abs(state.eta - eta_prev)))
        obj_prev = obj
        eta_prev = state.eta.copy()
        if rel < opt.tol_outer and d_eta < math.sqrt(opt.tol_outer) * 1e-3:
            state.converged = True
            break
    state.n_outer = t
    state.objective = obj_prev
    state.lam, state.rho = penalty.lam, penalty.rho
    state.active = groups
    state.history = history
    state.kkt = kkt_report(design, eig, phi, state, penalty)
    return state


def _score(design: Design, state: FitState) -> np.ndarray:
    fam = design.family
    mu = state.mu
    return design.prior_weights * (design.y - mu) / (fam.variance(mu) * fam.mu_eta_inv(mu))


def kkt_report(design: Design, eig: CovarianceEigen, phi: float, state: FitState, penalty: PenaltySpec) -> dict:
    """Optimality residuals of a fitted state (scale of ``quasi_objective``).

    ``zero_slack`` is the minimum over zero groups of
    ``(1 - rho) lam w_j - sqrt(A_j^2 + S_{rho lam w_j}(C_j)^2)`` (must be >= -tol);
    ``active_resid`` is the max-norm stationarity residual of nonzero groups.
    """
    score = _score(design, state)
    A = design.G.T @ score
    C = design.DG.T @ score
    pen = penalty.group_weights(design.p)
    lam1 = penalty.rho * penalty.lam * pen
    lam2 = (1 - penalty.rho) * penalty.lam * pen
    nz = (state.beta != 0) | (state.gamma != 0)
    zero = ~nz
    slack = lam2[zero] - np.hypot(A[zero], soft_threshold(C[zero], lam1[zero]))
    resid = 0.0
    if nz.any():
        b, g = state.beta[nz], state.gamma[nz]
        nrm = np.hypot(b, g)
        rb = -A[nz] + lam2[nz] * b / nrm
        cg = -C[nz] + lam2[nz] * g / nrm
        rg = np.where(g != 0, cg + lam1[nz] * np.sign(g), np.sign(cg) * np.maximum(np.abs(cg) - lam1[nz], 0.0))
        resid = float(max(np.max(np.abs(rb)), np.max(np.abs(rg))))
    unpen = float(np.max(np.abs(design.Z.T @ score)))
    if design.has_alpha:
        unpen = max(unpen, abs(float(design.D @ score)))
    g_delta = float(np.max(np.abs(-eig.U.T @ score + phi * state.delta / eig.Lambda)))
    return dict(zero_slack=float(slack.min()) if slack.size else float("inf"), active_resid=resid,
                unpenalized_resid=unpen, delta_resid=g_delta,
                violators=np.flatnonzero(zero)[slack < -abs(0.0)] if slack.size else np.zeros(0, int))


def kkt_violators(design: Design, state: FitState, penalty: PenaltySpec, candidates, tol: float) -> np.ndarray:
    """Groups in ``candidates`` (held at zero) that violate the zero-group condition."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        return candidates
    score = _score(design, state)
    A = design.G[:, candidates].T @ score
    C = design.DG[:, candidates].T @ score
    pen = penalty.group_weights(design.p)[candidates]
    lhs = np.hypot(A, soft_threshold(C, penalty.rho * penalty.lam * pen))
    return candidates[lhs > (1 - penalty.rho) * penalty.lam * pen + tol]


def group_lambda_max(A, C, rho: float) -> np.ndarray:
    """Smallest lambda with A^2 + S_{rho lam}(C)^2 <= ((1-rho) lam)^2, elementwise."""
    A = np.abs(np.asarray(A, dtype=float))
    C = np.abs(np.asarray(C, dtype=float))
    if rho == 0:
        return np.hypot(A, C)
    lam1 = A / (1 - rho)
    out = lam1.copy()
    inner = lam1 * rho < C
    a, c = A[inner], C[inner]
    # root of (1 - 2 rho) lam^2 + 2 rho c lam - (a^2 + c^2) = 0 below c / rho
    disc = (1 - rho) ** 2 * c ** 2 + (1 - 2 * rho) * a ** 2
    out[inner] = (a ** 2 + c ** 2) / (rho * c + np.sqrt(np.maximum(disc, 0.0)))
    return out


def strong_rule_filter(design: Design, mu_prev, lam_prev: float, lam_k: float, rho: float,
                       weights=None) -> np.ndarray:
    """Indices of groups kept by the sequential strong rule at ``lam_k``."""
    if lam_k > lam_prev * (1 + 1e-12):
        raise ValueError("strong rule needs a non-increasing lambda sequence")
    r = design.prior_weights * (design.y - mu_prev)
    A = design.G.T @ r
    C = design.DG.T @ r
    pen = np.ones(design.p) if weights is None else np.asarray(weights, dtype=float)
    lhs = np.hypot(A, soft_threshold(C, rho * lam_prev * pen))
    return np.flatnonzero(lhs > (1 - rho) * (2 * lam_k - lam_prev) * pen)


@dataclass
class PathPoint:
    lam: float
    rho: float
    theta: np.ndarray | None = None
    alpha: float | None = None
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    delta: np.ndarray | None = None
    xb: np.ndarray | None = None
    mu: np.ndarray | None = None
    w: np.ndarray | None = None
    ytilde: np.ndarray | None = None
    objective: float = float("nan")
    n_outer: int = 0
    converged: bool = False
    kkt_max: float = float("nan")
    n_candidates: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def coefficients(self) -> Coefficients:
        return Coefficients(self.theta, self.alpha, self.beta, self.gamma)

    @classmethod
    def from_state(cls, st: FitState, n_candidates: int) -> "PathPoint":
        k = st.kkt or {}
        kmax = max(k.get("active_resid", 0.0), max(0.0, -k.get("zero_slack", 0.0)))
        return cls(st.lam, st.rho, st.theta.copy(), float(st.alpha), st.beta.copy(), st.gamma.copy(),
                   st.delta.copy(), st.xb.copy(), st.mu.copy(), st.w.copy(), st.ytilde.copy(), st.objective,
                   st.n_outer, st.converged, kmax, n_candidates)

    def to_state(self) -> FitState:
        return FitState(self.theta.copy(), float(self.alpha), self.beta.copy(), self.gamma.copy(),
                        self.delta.copy(), xb=self.xb, mu=self.mu, w=self.w, ytilde=self.ytilde,
                        lam=self.lam, rho=self.rho, objective=self.objective, converged=self.converged)


@dataclass
class PathResult:
    rho_grid: list
    lambdas: list
    lambda_max: list
    points: list
    null: NullModel
    eig: CovarianceEigen | None
    family: str
    variant_ids: list
    covariate_names: list
    sample_ids: list = field(default_factory=list)

    def point(self, rho_index: int, lambda_index: int) -> PathPoint:
        return self.points[rho_index][lambda_index]

    def iter_points(self):
        for r, pts in enumerate(self.points):
            for l, pt in enumerate(pts):
                yield r, l, pt


def lambda_grid(lam_max: float, n_lambda: int = 100, lambda_min_ratio: float | None = None,
                n: int | None = None, p: int | None = None) -> np.ndarray:
    """Geometric grid from ``lam_max`` down to ``lambda_min_ratio * lam_max``."""
    if n_lambda < 1:
        raise ValueError("grid size must be at least 1")
    if lambda_min_ratio is None:
        lambda_min_ratio = 1e-4 if (n is not None and p is not None and p < n) else 1e-2
    if n_lambda == 1:
        return np.array([lam_max])
    return lam_max * np.geomspace(1.0, lambda_min_ratio, n_lambda)


def null_fit(design: Design, eig: CovarianceEigen, null: NullModel, options: SolverOptions | None = None,
             weights=None) -> FitState:
    """PQL fit with every penalized group held at zero (unpenalized groups free)."""
    pen = np.ones(design.p) if weights is None else np.asarray(weights, dtype=float)
    free = np.flatnonzero(pen == 0)
    return fit_single(design, eig, null, PenaltySpec(1.0, 0.0, pen), active=free, options=options)


def compute_lambda_max(design: Design, state0: FitState, rho: float, weights=None) -> float:
    score = _score(design, state0)
    A = design.G.T @ score
    C = design.DG.T @ score
    pen = np.ones(design.p) if weights is None else np.asarray(weights, dtype=float)
    pos = pen > 0
    lm = group_lambda_max(A[pos], C[pos], rho) / pen[pos]
    out = float(lm.max()) if lm.size else 0.0
    if not out > 0:
        raise ValueError("lambda_max is zero: the null fit already satisfies every group condition")
    return out


def fit_path(design: Design, eig: CovarianceEigen, null: NullModel, rho_grid=(0.0, 0.5), n_lambda: int = 100,
             lambda_min_ratio: float | None = None, lambdas=None, strong_rule: bool = True,
             weights=None, options: SolverOptions | None = None, max_active: int | None = None) -> PathResult:
    """Solution path over a (lambda, rho) grid with warm starts along lambda.

    ``lambdas`` may fix the grid per rho (a sequence of arrays, one per rho);
    otherwise a geometric grid from lambda_max is used. Failed grid points
    carry the error message and the path continues from the last good fit.
    """
    opt = options or SolverOptions()
    pen = np.ones(design.p) if weights is None else np.asarray(weights, dtype=float)
    state0 = null_fit(design, eig, null, opt, pen)
    rho_grid = [float(r) for r in rho_grid]
    all_points, all_lams, lmaxes = [], [], []
    for r_i, rho in enumerate(rho_grid):
        lam_max = compute_lambda_max(design, state0, rho, pen)
        lams = (lambda_grid(lam_max, n_lambda, lambda_min_ratio, design.n, design.p) if lambdas is None
                else np.asarray(lambdas[r_i], dtype=float))
        lmaxes.append(lam_max)
        all_lams.append(lams)
        points = []
        prev = state0
        prev_lam = max(lam_max, float(lams[0]))
        ever = np.flatnonzero(pen == 0)
        prev_active = set()
        for l_i, lam in enumerate(lams):
            penalty = PenaltySpec(float(lam), rho, pen)
            try:
                if strong_rule:
                    keep = strong_rule_filter(design, prev.mu, prev_lam, float(lam), rho, pen)
                    cand = np.union1d(keep, ever).astype(np.int64)
                else:
                    cand = np.arange(design.p)
                while True:
                    st = fit_single(design, eig, null, penalty, warm_start=prev, active=cand, options=opt)
                    if not strong_rule:
                        break
                    rest = np.setdiff1d(np.arange(design.p), cand, assume_unique=True)
                    viol = kkt_violators(design, st, penalty, rest, opt.tol_kkt)
                    if viol.size == 0:
                        break
                    log.debug("rho=%g lambda[%d]: %d strong-rule violators added back", rho, l_i, viol.size)
                    cand = np.union1d(cand, viol).astype(np.int64)
                st.kkt = kkt_report(design, eig, null.phi, st, penalty)
                pt = PathPoint.from_state(st, int(cand.size))
                nz = np.flatnonzero((st.beta != 0) | (st.gamma != 0))
                ever = np.union1d(ever, nz).astype(np.int64)
                now = set(nz.tolist())
                if now != prev_active:
                    log.debug("rho=%g lambda[%d]=%.4g: active set %d -> %d", rho, l_i, lam,
                              len(prev_active), len(now))
                prev_active = now
                prev = st
                prev_lam = float(lam)
            except (DivergenceError, InnerLoopError, FloatingPointError, np.linalg.LinAlgError) as exc:
                log.warning("rho=%g lambda[%d]=%.4g failed: %s", rho, l_i, lam, exc)
                pt = PathPoint(float(lam), rho, error=str(exc))
            points.append(pt)
            if max_active is not None and pt.ok and np.count_nonzero(pt.beta) > max_active:
                for lam_rest in lams[l_i + 1:]:
                    points.append(PathPoint(float(lam_rest), rho, error="path stopped: max_active reached"))
                break
        all_points.append(points)
    return PathResult(rho_grid, all_lams, lmaxes, all_points, null, eig, design.family.name,
                      list(design.variant_ids), list(design.covariate_names), list(design.sample_ids))
