"""Variance components of the null working mixed model by AI-REML."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data_model import Dataset, Family, get_family

log = logging.getLogger(__name__)

TOL_VC = 1e-4
MAX_ITER_VC = 100
MAX_BACKTRACK = 10


class VarCompConvergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class NullModel:
    tau_g: float
    tau_d: float
    phi: float
    theta0: np.ndarray
    alpha0: float
    converged: bool = True
    n_iter: int = 0
    trace: list = field(default_factory=list)
    family: str = "binomial"

    @property
    def tau(self) -> np.ndarray:
        return np.array([self.tau_g, self.tau_d])


def null_design(data: Dataset) -> tuple[np.ndarray, bool]:
    """Null fixed-effect design [Z, D]; D is dropped when collinear with Z."""
    X = np.column_stack([data.Z, data.D])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        return data.Z.copy(), False
    return X, True


def _cov_parts(w, K, KD, with_phi):
    parts = []
    if with_phi:
        parts.append(("phi", np.diag(1.0 / w)))
    parts += [("tau_g", K), ("tau_d", KD)]
    return parts


def _build_V(params, w, K, KD, phi_fixed):
    tau_g, tau_d, phi = params
    V = tau_g * K + tau_d * KD
    V[np.diag_indices_from(V)] += phi / w
    return V


def _projection(V, X, Y):
    """P = V^-1 - V^-1 X (X' V^-1 X)^-1 X' V^-1 together with log-determinants."""
    cho = linalg.cho_factor(V, lower=True, check_finite=False)
    logdet_V = 2.0 * np.sum(np.log(np.diag(cho[0])))
    Vi = linalg.cho_solve(cho, np.eye(V.shape[0]), check_finite=False)
    ViX = Vi @ X
    XtViX = X.T @ ViX
    cx = linalg.cho_factor(XtViX, lower=True, check_finite=False)
    logdet_X = 2.0 * np.sum(np.log(np.diag(cx[0])))
    P = Vi - ViX @ linalg.cho_solve(cx, ViX.T, check_finite=False)
    P = 0.5 * (P + P.T)
    beta = linalg.cho_solve(cx, ViX.T @ Y, check_finite=False)
    return P, Vi, beta, logdet_V, logdet_X


def restricted_loglik(Y, X, w, K, KD, tau_g: float, tau_d: float, phi: float = 1.0) -> float:
    """REML log-likelihood of the working model Y = X b + e, Var(e) = phi W^-1 + tau_g K + tau_d KD."""
    Y = np.asarray(Y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != Y.shape[0]:
        X = X.T
    w = np.broadcast_to(np.asarray(w, dtype=float), Y.shape)
    V = _build_V((tau_g, tau_d, phi), w, np.asarray(K, float), np.asarray(KD, float), True)
    try:
        P, _, _, logdet_V, logdet_X = _projection(V, X, Y)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("working covariance is not positive definite") from exc
    n, q = X.shape
    return float(-0.5 * (logdet_V + logdet_X + Y @ P @ Y + (n - q) * np.log(2 * np.pi)))


def _irls_glm(X, y, family: Family, prior_weights=None, max_iter=50, tol=1e-10):
    a = np.ones_like(y) if prior_weights is None else prior_weights
    mu = family.clamp((a * y + 0.5) / (a + 1.0)) if family.name == "binomial" else np.full_like(y, y.mean())
    eta = family.link(mu)
    coef = np.zeros(X.shape[1])
    for _ in range(max_iter):
        w = family.working_weights(mu, a)
        z = eta + family.mu_eta_inv(mu) * (y - mu)
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        eta = X @ new
        mu = family.linkinv(eta)
        if np.max(np.abs(new - coef)) < tol * (1 + np.max(np.abs(new))):
            coef = new
            break
        coef = new
    return coef


def _identifiable(parts, with_phi):
    """Indices of components whose matrices are nonzero and linearly independent."""
    keep = []
    vecs = []
    for k, (name, M) in enumerate(parts):
        v = M.ravel()
        if not np.any(v):
            continue
        trial = np.array(vecs + [v])
        if np.linalg.matrix_rank(trial, tol=1e-10 * np.abs(trial).max() * trial.shape[1] ** 0.5) < len(vecs) + 1:
            continue
        vecs.append(v)
        keep.append(k)
    return keep


def fit_null_aireml(data: Dataset, kinship, family="binomial", estimate_phi: bool | None = None,
                    tol: float = TOL_VC, max_iter: int = MAX_ITER_VC, tau_init=None,
                    verbose: bool = False) -> NullModel:
    """Fit (tau_g, tau_d[, phi]) under beta = gamma = 0.

    Alternates PQL working-response construction with average-information
    REML steps on the working linear mixed model. Components that step
    below zero are clamped at 0 and removed from the AI system; a clamped
    component is released again if its score at the boundary is positive
    after convergence.
    """
    family = get_family(family)
    if estimate_phi is None:
        estimate_phi = family.estimate_dispersion
    K, KD = (kinship.K, kinship.KD) if hasattr(kinship, "K") else kinship
    K = np.asarray(K, dtype=float)
    KD = np.asarray(KD, dtype=float)
    y = data.y
    family.validate_response(y)
    a = np.ones_like(y) if data.prior_weights is None else data.prior_weights
    X, has_d = null_design(data)
    n, q = X.shape

    coef = _irls_glm(X, y, family, a)
    eta = X @ coef
    mu = family.linkinv(eta)
    w = family.working_weights(mu, a)
    Y = eta + family.mu_eta_inv(mu) * (y - mu)

    resid_var = float(np.var(Y - X @ coef, ddof=q))
    phi = resid_var if estimate_phi else 1.0
    if family.name == "binomial" and estimate_phi:
        phi = 1.0
    if tau_init is None:
        tau = np.array([0.1 * resid_var, 0.1 * resid_var])
    else:
        tau = np.asarray(tau_init, dtype=float).copy()
    params = np.array([tau[0], tau[1], phi])  # (tau_g, tau_d, phi)

    names = ["tau_g", "tau_d", "phi"]
    parts_all = _cov_parts(w, K, KD, estimate_phi)
    order = (["phi"] if estimate_phi else []) + ["tau_g", "tau_d"]
    ident = {order[k] for k in _identifiable(parts_all, estimate_phi)}
    free = [nm for nm in order if nm in ident]
    for nm in ("tau_g", "tau_d"):
        if nm not in ident:
            params[names.index(nm)] = 0.0
    boundary: set[str] = set()
    releases = 0
    trace = []
    converged = False
    b = np.zeros(n)

    def comp_matrix(nm, w_):
        if nm == "phi":
            return None  # diagonal 1/w, handled separately
        return K if nm == "tau_g" else KD

    for it in range(1, max_iter + 1):
        old = params.copy()
        active = [nm for nm in free if nm not in boundary]
        V = _build_V(params, w, K, KD, not estimate_phi)
        try:
            P, Vi, beta0, logdet_V, logdet_X = _projection(V, X, Y)
        except linalg.LinAlgError:
            raise VarCompConvergenceError("working covariance lost positive definiteness", trace)
        PY = P @ Y
        reml = -0.5 * (logdet_V + logdet_X + Y @ PY + (n - q) * np.log(2 * np.pi))

        def score_ai(act):
            VkPY = []
            score = np.empty(len(act))
            for k, nm in enumerate(act):
                if nm == "phi":
                    v = PY / w
                    trPV = np.sum(np.diag(P) / w)
                else:
                    M = comp_matrix(nm, w)
                    v = M @ PY
                    trPV = np.sum(P * M)
                VkPY.append(v)
                score[k] = 0.5 * (PY @ v - trPV)
            Vm = np.column_stack(VkPY) if VkPY else np.zeros((n, 0))
            AI = 0.5 * Vm.T @ P @ Vm
            return score, AI

        step_kind = "ai"
        if active:
            score, AI = score_ai(active)
            try:
                if np.linalg.cond(AI) > 1e12:
                    raise np.linalg.LinAlgError
                step = np.linalg.solve(AI, score)
            except np.linalg.LinAlgError:
                step_kind = "em"
                step = np.array([params[names.index(nm)] ** 2 * 2.0 * score[k] / n
                                 for k, nm in enumerate(active)])
            idx = [names.index(nm) for nm in active]
            scale = 1.0
            for _ in range(MAX_BACKTRACK):
                cand = params.copy()
                cand[idx] = params[idx] + scale * step
                ok = np.all(cand[idx] >= 0) and (not estimate_phi or cand[2] > 0)
                if ok and family.name == "gaussian":
                    try:
                        new_reml = restricted_loglik(Y, X, w, K, KD, *cand)
                    except np.linalg.LinAlgError:
                        new_reml = -np.inf
                    ok = new_reml >= reml - 1e-10 * abs(reml)
                if ok:
                    break
                scale *= 0.5
            else:
                cand = params.copy()
                cand[idx] = params[idx] + scale * step
            for k, nm in zip(idx, active):
                if cand[k] < 0 or (nm in ("tau_g", "tau_d") and cand[k] < tol * 1e-2 * max(resid_var, 1e-12)
                                   and step[active.index(nm)] < 0):
                    cand[k] = 0.0
                    if nm != "phi":
                        boundary.add(nm)
            if estimate_phi and cand[2] <= 0:
                cand[2] = old[2] * 0.5
            params = cand

        # refresh fixed effects, random effect and working quantities
        V = _build_V(params, w, K, KD, not estimate_phi)
        cho = linalg.cho_factor(V, lower=True, check_finite=False)
        ViX = linalg.cho_solve(cho, X, check_finite=False)
        coef_new = np.linalg.solve(X.T @ ViX, ViX.T @ Y)
        Vir = linalg.cho_solve(cho, Y - X @ coef_new, check_finite=False)
        b = params[0] * (K @ Vir) + params[1] * (KD @ Vir)
        eta = X @ coef_new + b
        trace.append(dict(iter=it, tau_g=params[0], tau_d=params[1], phi=params[2], reml=float(reml),
                          step=step_kind, boundary=sorted(boundary)))
        if verbose:
            log.info("AI-REML iter %d: tau_g=%.6g tau_d=%.6g phi=%.6g reml=%.6f (%s)",
                     it, params[0], params[1], params[2], reml, step_kind)
        if family.name != "gaussian":
            mu = family.linkinv(eta)
            w = family.working_weights(mu, a)
            Y = eta + family.mu_eta_inv(mu) * (y - mu)

        rel = np.max(np.abs(params - old) / (np.abs(params) + np.abs(old) + tol))
        rel_coef = np.max(np.abs(coef_new - coef) / (np.abs(coef_new) + np.abs(coef) + tol))
        coef = coef_new
        if 2 * max(rel, rel_coef) < tol:
            # boundary components with a positive score re-enter once
            if boundary and releases < 3:
                Vb = _build_V(params, w, K, KD, not estimate_phi)
                Pb = _projection(Vb, X, Y)[0]
                PYb = Pb @ Y
                back = []
                for nm in sorted(boundary):
                    M = comp_matrix(nm, w)
                    if 0.5 * (PYb @ M @ PYb - np.sum(Pb * M)) > 1e-8 * n:
                        back.append(nm)
                if back:
                    releases += 1
                    for nm in back:
                        boundary.discard(nm)
                        params[names.index(nm)] = 0.05 * max(resid_var, 1e-6)
                    continue
            converged = True
            break
    else:
        raise VarCompConvergenceError(f"AI-REML did not converge in {max_iter} iterations", trace)

    # with the components fixed, iterate the working model to its fixed point so the
    # fixed effects match the joint PQL solution
    if family.name != "gaussian":
        for _ in range(200):
            V = _build_V(params, w, K, KD, not estimate_phi)
            cho = linalg.cho_factor(V, lower=True, check_finite=False)
            ViX = linalg.cho_solve(cho, X, check_finite=False)
            coef_new = np.linalg.solve(X.T @ ViX, ViX.T @ Y)
            Vir = linalg.cho_solve(cho, Y - X @ coef_new, check_finite=False)
            eta = X @ coef_new + params[0] * (K @ Vir) + params[1] * (KD @ Vir)
            mu = family.linkinv(eta)
            w = family.working_weights(mu, a)
            Y = eta + family.mu_eta_inv(mu) * (y - mu)
            change = np.max(np.abs(coef_new - coef))
            coef = coef_new
            if change < 1e-12 * (1.0 + np.max(np.abs(coef))):
                break

    theta0 = coef[: data.m]
    alpha0 = float(coef[data.m]) if has_d else 0.0
    return NullModel(tau_g=float(params[0]), tau_d=float(params[1]), phi=float(params[2]),
                     theta0=theta0.copy(), alpha0=alpha0, converged=converged, n_iter=len(trace),
                     trace=trace, family=family.name)
