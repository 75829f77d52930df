"""K-fold cross-validation over the (lambda, rho) grid and out-of-sample prediction."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from .data_model import Family, get_family
from .kinship import eigendecompose
from .solver import Design, PathPoint, PathResult, SolverOptions, fit_path
from .varcomp import NullModel, fit_null_aireml

log = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """Rank-based area under the ROC curve (ties count one half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def deviance(y, mu, family="binomial") -> float:
    """Summed unit deviance; binomial means are clamped away from 0 and 1."""
    return float(np.sum(get_family(family).unit_deviance(np.asarray(y, dtype=float), mu)))


def predict_linear(point: PathPoint, null: NullModel, train: Design, test: Design,
                   K_train, KD_train, K_cross, KD_cross) -> np.ndarray:
    """Linear predictor for new samples.

    The random effect is the conditional mean given the training working
    response: ``Sigma_cross Sigma_train^-1 (Ytilde - X Theta)`` with
    ``Sigma_train = phi W^-1 + tau_g K + tau_d KD`` built from the training
    working weights of the fitted point.
    """
    fixed = test.fixed_part(point.theta, point.alpha, point.beta, point.gamma)
    if null.tau_g == 0 and null.tau_d == 0:
        return fixed
    S22 = null.tau_g * np.asarray(K_train) + null.tau_d * np.asarray(KD_train)
    S22[np.diag_indices_from(S22)] += null.phi / point.w
    S12 = null.tau_g * np.asarray(K_cross) + null.tau_d * np.asarray(KD_cross)
    resid = point.ytilde - point.xb
    try:
        cho = linalg.cho_factor(S22, lower=True, check_finite=False)
    except linalg.LinAlgError:
        ridge = 1e-8 * float(np.max(np.diag(S22)))
        log.warning("training covariance not positive definite; adding ridge %.3g", ridge)
        S22[np.diag_indices_from(S22)] += ridge
        cho = linalg.cho_factor(S22, lower=True, check_finite=False)
    return fixed + S12 @ linalg.cho_solve(cho, resid, check_finite=False)


def predict(point: PathPoint, null: NullModel, train: Design, test: Design,
            K_train, KD_train, K_cross, KD_cross) -> np.ndarray:
    eta = predict_linear(point, null, train, test, K_train, KD_train, K_cross, KD_cross)
    return test.family.linkinv(eta)


def make_folds(y, k: int, seed: int = 0, stratify: bool = True) -> np.ndarray:
    """Fold label per sample; binary responses are dealt out class by class."""
    y = np.asarray(y)
    n = y.shape[0]
    if not 2 <= k <= n:
        raise ValueError(f"number of folds must be in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if stratify and np.all((y == 0) | (y == 1)) and k < n:
        offset = 0
        for cls in (0, 1):
            idx = rng.permutation(np.flatnonzero(y == cls))
            folds[idx] = (np.arange(idx.size) + offset) % k
            offset += idx.size
    else:
        folds[rng.permutation(n)] = np.arange(n) % k
    return folds


@dataclass
class CVResult:
    rho_grid: list
    lambdas: np.ndarray
    folds: np.ndarray
    fold_deviance: np.ndarray
    fold_auc: np.ndarray
    mean_deviance: np.ndarray
    se_deviance: np.ndarray
    mean_auc: np.ndarray
    se_auc: np.ndarray
    best: tuple
    best_1se: tuple
    path: PathResult | None = None
    fold_errors: list = field(default_factory=list)

    @property
    def best_point(self) -> PathPoint:
        return self.path.point(*self.best)

    @property
    def best_1se_point(self) -> PathPoint:
        return self.path.point(*self.best_1se)


def _select(mean, se, lambdas):
    if not np.any(np.isfinite(mean)):
        raise RuntimeError("no grid point produced a finite cross-validation deviance")
    r, l = np.unravel_index(np.nanargmin(mean), mean.shape)
    thresh = mean[r, l] + (se[r, l] if np.isfinite(se[r, l]) else 0.0)
    # sparsest admissible point: largest lambda, ties broken towards the minimizing rho
    ok = np.isfinite(mean) & (mean <= thresh)
    best = None
    for rr, ll in zip(*np.nonzero(ok)):
        key = (lambdas[rr, ll], rr == r)
        if best is None or key > best[0]:
            best = (key, (int(rr), int(ll)))
    return (int(r), int(l)), best[1]


def _run_fold(f, design, kinship, family, folds, lambdas, rho_grid, strong_rule, options, cache_dir):
    train = np.flatnonzero(folds != f)
    test = np.flatnonzero(folds == f)
    d_tr = design.subset(train)
    d_te = design.subset(test)
    if np.ptp(d_tr.y) == 0:
        raise ValueError(f"fold {f}: training response is constant")
    K11, KD11, K21, KD21 = kinship.blocks(train, test)
    null = fit_null_aireml(d_tr, (K11, KD11), family)
    eig = eigendecompose(K11, KD11, null.tau_g, null.tau_d, cache_dir=cache_dir)
    path = fit_path(d_tr, eig, null, rho_grid, lambdas=lambdas, strong_rule=strong_rule, options=options)
    n_r, n_l = len(rho_grid), lambdas.shape[1]
    dev = np.full((n_r, n_l), np.nan)
    au = np.full((n_r, n_l), np.nan)
    for r, l, pt in path.iter_points():
        if not pt.ok:
            continue
        mu = predict(pt, null, d_tr, d_te, K11, KD11, K21, KD21)
        dev[r, l] = deviance(d_te.y, mu, design.family) / test.size
        if design.family.name == "binomial":
            au[r, l] = auc(mu, d_te.y)
    return dev, au


def kfold_cv(design: Design, kinship, family: str | Family | None = None, rho_grid=(0.0, 0.5),
             n_lambda: int = 100, lambda_min_ratio: float | None = None, k: int = 5, seed: int = 0,
             strong_rule: bool = True, options: SolverOptions | None = None, n_jobs: int = 1,
             cache_dir=None, full_path: PathResult | None = None, folds=None) -> CVResult:
    """Cross-validated deviance and AUC on a lambda grid shared by all folds.

    The grid comes from the full-data path. Each fold refits the null
    model and the spectrum on its training rows only; ``kinship`` must
    expose ``blocks(train, test)`` (``KinshipPair`` or ``KinshipPanel``).
    """
    family = design.family if family is None else get_family(family)
    if full_path is None:
        K, KD, _, _ = kinship.blocks(np.arange(design.n))
        null = fit_null_aireml(design, (K, KD), family)
        eig = eigendecompose(K, KD, null.tau_g, null.tau_d, cache_dir=cache_dir)
        full_path = fit_path(design, eig, null, rho_grid, n_lambda, lambda_min_ratio,
                             strong_rule=strong_rule, options=options)
    rho_grid = list(full_path.rho_grid)
    lambdas = np.vstack(full_path.lambdas)
    folds = make_folds(design.y, k, seed, family.name == "binomial") if folds is None else np.asarray(folds)
    k = int(folds.max()) + 1
    args = (design, kinship, family, folds, lambdas, rho_grid, strong_rule, options, cache_dir)
    if n_jobs != 1:
        from joblib import Parallel, delayed
        out = Parallel(n_jobs=n_jobs)(delayed(_run_fold)(f, *args) for f in range(k))
    else:
        out = [_run_fold(f, *args) for f in range(k)]
    dev = np.stack([o[0] for o in out])
    au = np.stack([o[1] for o in out])
    mean_dev = dev.mean(axis=0)
    se_dev = dev.std(axis=0, ddof=1) / np.sqrt(k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_auc = np.nanmean(au, axis=0)
        cnt = np.sum(np.isfinite(au), axis=0)
        se_auc = np.nanstd(au, axis=0, ddof=1) / np.sqrt(np.maximum(cnt, 1))
    best, best_1se = _select(mean_dev, se_dev, lambdas)
    return CVResult(rho_grid, lambdas, folds, dev, au, mean_dev, se_dev, mean_auc, se_auc,
                    best, best_1se, full_path)

