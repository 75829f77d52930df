"""Containers for samples, variants, coefficients and GLM families."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MU_EPS = 1e-10


class Family:
    """Exponential family with canonical link.

    Subclasses provide the inverse link, the derivative of the link
    ``g'(mu)``, the variance function ``nu(mu)`` and the per-observation
    quasi-likelihood (dispersion excluded).
    """

    name: str = ""
    estimate_dispersion: bool = True

    def linkinv(self, eta):
        raise NotImplementedError

    def link(self, mu):
        raise NotImplementedError

    def mu_eta_inv(self, mu):
        """Derivative of the link, g'(mu)."""
        raise NotImplementedError

    def variance(self, mu):
        raise NotImplementedError

    def clamp(self, mu):
        return mu

    def quasi_loglik(self, y, mu, prior_weights=None):
        """Sum of a_i * int_y^mu (y - t) / nu(t) dt (dispersion = 1)."""
        raise NotImplementedError

    def unit_deviance(self, y, mu):
        raise NotImplementedError

    def working_weights(self, mu, prior_weights=None):
        """w_i = a_i / (nu(mu_i) g'(mu_i)^2), dispersion excluded."""
        a = 1.0 if prior_weights is None else prior_weights
        return a / (self.variance(mu) * self.mu_eta_inv(mu) ** 2)

    def validate_response(self, y):
        pass

    def __repr__(self):
        return f"{type(self).__name__}()"


class Binomial(Family):
    name = "binomial"
    estimate_dispersion = False

    def linkinv(self, eta):
        return self.clamp(0.5 * (1.0 + np.tanh(0.5 * np.asarray(eta, dtype=float))))

    def link(self, mu):
        mu = self.clamp(np.asarray(mu, dtype=float))
        return np.log(mu) - np.log1p(-mu)

    def clamp(self, mu):
        return np.clip(mu, MU_EPS, 1.0 - MU_EPS)

    def mu_eta_inv(self, mu):
        return 1.0 / (mu * (1.0 - mu))

    def variance(self, mu):
        return mu * (1.0 - mu)

    def quasi_loglik(self, y, mu, prior_weights=None):
        mu = self.clamp(mu)
        a = 1.0 if prior_weights is None else prior_weights
        y = np.asarray(y, dtype=float)
        # -y log(y) - (1-y) log(1-y) vanishes for 0/1 responses
        sat = -(_xlogx(y) + _xlogx(1.0 - y))
        return float(np.sum(a * (y * np.log(mu) + (1.0 - y) * np.log1p(-mu) + sat)))

    def unit_deviance(self, y, mu):
        mu = self.clamp(np.asarray(mu, dtype=float))
        y = np.asarray(y, dtype=float)
        return 2.0 * (_xlogx(y) - y * np.log(mu) + _xlogx(1.0 - y) - (1.0 - y) * np.log1p(-mu))

    def validate_response(self, y):
        y = np.asarray(y)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("binomial family requires a 0/1 response")


class Gaussian(Family):
    name = "gaussian"
    estimate_dispersion = True

    def linkinv(self, eta):
        return np.asarray(eta, dtype=float)

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def mu_eta_inv(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def variance(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def quasi_loglik(self, y, mu, prior_weights=None):
        a = 1.0 if prior_weights is None else prior_weights
        return float(-0.5 * np.sum(a * (np.asarray(y) - mu) ** 2))

    def unit_deviance(self, y, mu):
        return (np.asarray(y, dtype=float) - mu) ** 2


def _xlogx(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


FAMILIES = {"binomial": Binomial, "gaussian": Gaussian}


def get_family(family: str | Family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[family.lower()]()
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class Dataset:
    """Phenotype, covariates, exposure and genotypes for n samples.

    ``Z`` carries the intercept as its first column. ``G`` holds allele
    counts in {0, 1, 2} (NaN marks a missing call until ``impute_missing``
    has been applied).
    """

    y: np.ndarray
    Z: np.ndarray
    D: np.ndarray
    G: np.ndarray
    sample_ids: Sequence[str] | None = None
    variant_ids: Sequence[str] | None = None
    covariate_names: Sequence[str] | None = None
    prior_weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if Z.shape[0] != y.shape[0] and Z.shape[1] == y.shape[0]:
            Z = Z.T
        D = np.asarray(self.D, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        n = y.shape[0]
        for name, arr in (("Z", Z), ("D", D), ("G", G)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if not np.allclose(Z[:, 0], 1.0):
            raise ValueError("first column of Z must be the intercept")
        if np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise ValueError("covariate matrix Z is not of full column rank")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z)) and np.all(np.isfinite(D))):
            raise ValueError("y, Z and D must be finite")
        sample_ids = list(self.sample_ids) if self.sample_ids is not None else [str(i) for i in range(n)]
        variant_ids = (
            list(self.variant_ids) if self.variant_ids is not None else [f"v{j}" for j in range(G.shape[1])]
        )
        if len(sample_ids) != n or len(variant_ids) != G.shape[1]:
            raise ValueError("id lists do not match data dimensions")
        names = (
            list(self.covariate_names)
            if self.covariate_names is not None
            else ["intercept"] + [f"z{k}" for k in range(1, Z.shape[1])]
        )
        pw = None if self.prior_weights is None else np.asarray(self.prior_weights, dtype=float)
        for k, v in dict(y=y, Z=Z, D=D, G=G, sample_ids=sample_ids, variant_ids=variant_ids,
                         covariate_names=names, prior_weights=pw).items():
            object.__setattr__(self, k, v)
        for arr in (y, Z, D, G):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows],
            Z=self.Z[rows],
            D=self.D[rows],
            G=self.G[rows],
            sample_ids=[self.sample_ids[i] for i in rows],
            variant_ids=self.variant_ids,
            covariate_names=self.covariate_names,
            prior_weights=None if self.prior_weights is None else self.prior_weights[rows],
        )


@dataclass
class Coefficients:
    theta: np.ndarray
    alpha: float
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.alpha = float(self.alpha)
        self.beta = np.asarray(self.beta, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.beta.shape != self.gamma.shape:
            raise ValueError("beta and gamma must have the same length")
        if not all(np.all(np.isfinite(v)) for v in (self.theta, self.alpha, self.beta, self.gamma)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def zeros(cls, m: int, p: int) -> "Coefficients":
        return cls(np.zeros(m), 0.0, np.zeros(p), np.zeros(p))

    def n_beta(self) -> int:
        return int(np.count_nonzero(self.beta))

    def n_gamma(self) -> int:
        return int(np.count_nonzero(self.gamma))

    def copy(self) -> "Coefficients":
        return Coefficients(self.theta.copy(), self.alpha, self.beta.copy(), self.gamma.copy())


def add_intercept(Z=None, n: int | None = None) -> np.ndarray:
    if Z is None:
        return np.ones((n, 1))
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    return np.column_stack([np.ones(Z.shape[0]), Z])


def impute_missing(G) -> tuple[np.ndarray, np.ndarray]:
    """Replace NaN genotype calls with the column mean of observed calls.

    Returns the completed matrix and the per-variant count of missing
    entries. Observed entries are copied unchanged.
    """
    G = np.array(G, dtype=float, copy=True)
    miss = np.isnan(G)
    counts = miss.sum(axis=0)
    if not counts.any():
        return G, counts
    n_obs = G.shape[0] - counts
    bad = np.flatnonzero(n_obs == 0)
    if bad.size:
        raise ValueError(f"variant column(s) {bad[:10].tolist()} have no observed genotypes")
    means = np.nansum(G, axis=0) / n_obs
    rows, cols = np.nonzero(miss)
    G[rows, cols] = means[cols]
    return G, counts


def allele_frequencies(G) -> np.ndarray:
    """Counted-allele frequency sum(g) / (2 n_observed), ignoring NaN."""
    G = np.asarray(G, dtype=float)
    n_obs = np.sum(~np.isnan(G), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.nansum(G, axis=0) / (2.0 * n_obs)


def standardize_genotypes(G, freqs=None, variant_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(G - 2p) / sqrt(2p(1-p))`` column-wise and the frequencies used.

    Frequencies are estimated from ``G`` when not supplied. Monomorphic
    variants (p in {0, 1}) cannot be standardized and raise ``ValueError``.
    """
    G = np.asarray(G, dtype=float)
    freqs = allele_frequencies(G) if freqs is None else np.asarray(freqs, dtype=float)
    if freqs.shape != (G.shape[1],):
        raise ValueError("need one allele frequency per variant")
    bad = np.flatnonzero(~((freqs > 0) & (freqs < 1)))
    if bad.size:
        j = int(bad[0])
        name = variant_ids[j] if variant_ids is not None else f"column {j}"
        raise ValueError(f"variant {name} is monomorphic (allele frequency {freqs[j]:g})")
    Gs = (G - 2.0 * freqs) / np.sqrt(2.0 * freqs * (1.0 - freqs))
    return Gs, freqs
