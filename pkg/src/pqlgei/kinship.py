"""Genetic similarity matrices, the exposure-masked matrix and their spectra."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data_model import standardize_genotypes

log = logging.getLogger(__name__)

PD_RELATIVE_FLOOR = 1e-8
# Eigenvalue used when both variance components are zero
ABSOLUTE_FLOOR = 1e-12


@dataclass(frozen=True)
class KinshipPair:
    K: np.ndarray
    KD: np.ndarray
    q: int = 0
    exposure_type: str = "binary"

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        KD = np.asarray(self.KD, dtype=float)
        if K.shape != KD.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("K and KD must be square matrices of the same size")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "KD", KD)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def blocks(self, train, test=None):
        """Training block (K11, KD11) and test-by-train cross blocks (K21, KD21)."""
        train = np.asarray(train)
        K11 = self.K[np.ix_(train, train)]
        KD11 = self.KD[np.ix_(train, train)]
        if test is None:
            return K11, KD11, None, None
        test = np.asarray(test)
        return K11, KD11, self.K[np.ix_(test, train)], self.KD[np.ix_(test, train)]


@dataclass
class KinshipPanel:
    """Raw genotypes of the kinship variant panel plus the exposure.

    Unlike ``KinshipPair``, blocks are recomputed from genotypes
    standardized with the training-row allele frequencies, so held-out
    samples do not influence the training kinship.
    """

    G: np.ndarray
    D: np.ndarray
    metric: Callable | None = None

    def blocks(self, train, test=None):
        train = np.asarray(train)
        Gtr = np.asarray(self.G, dtype=float)[train]
        freqs = _usable_freqs(Gtr)
        keep = (freqs > 0) & (freqs < 1)
        Gs_tr, _ = standardize_genotypes(Gtr[:, keep], freqs[keep])
        # missing calls sit at the training mean, i.e. 0 after centering
        Gs_tr = np.nan_to_num(Gs_tr)
        q = int(keep.sum())
        K11 = Gs_tr @ Gs_tr.T / q
        D = np.asarray(self.D, dtype=float)
        KD11 = build_kd(K11, D[train], self.metric)
        if test is None:
            return K11, KD11, None, None
        test = np.asarray(test)
        Gs_te, _ = standardize_genotypes(np.asarray(self.G, dtype=float)[test][:, keep], freqs[keep])
        Gs_te = np.nan_to_num(Gs_te)
        K21 = Gs_te @ Gs_tr.T / q
        KD21 = _mask_cross(K21, D[test], D[train], self.metric, D)
        return K11, KD11, K21, KD21

    def pair(self) -> KinshipPair:
        G = np.asarray(self.G, dtype=float)
        K, KD, _, _ = self.blocks(np.arange(G.shape[0]))
        freqs = _usable_freqs(G)
        q = int(np.sum((freqs > 0) & (freqs < 1)))
        return KinshipPair(K, KD, q=q, exposure_type=_exposure_type(self.D))


def _usable_freqs(G):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.nansum(G, axis=0) / (2.0 * np.sum(~np.isnan(G), axis=0))


@dataclass(frozen=True)
class CovarianceEigen:
    U: np.ndarray
    Lambda: np.ndarray
    ridge: float = 0.0
    tau_g: float = float("nan")
    tau_d: float = float("nan")

    @property
    def n(self) -> int:
        return self.Lambda.shape[0]

    def covariance(self) -> np.ndarray:
        return (self.U * self.Lambda) @ self.U.T

    @classmethod
    def floor(cls, n: int, value: float = ABSOLUTE_FLOOR) -> "CovarianceEigen":
        """Spectrum of a (numerically) absent random effect: U = I, Lambda = value."""
        return cls(np.eye(n), np.full(n, value), 0.0, 0.0, 0.0)


def compute_grm(Gs) -> np.ndarray:
    """Genetic relationship matrix ``Gs Gs' / q`` of standardized genotypes."""
    Gs = np.asarray(Gs, dtype=float)
    if Gs.ndim != 2 or Gs.shape[1] == 0:
        raise ValueError("compute_grm needs at least one variant")
    if np.isnan(Gs).any():
        raise ValueError("standardized genotypes contain missing values")
    K = Gs @ Gs.T / Gs.shape[1]
    return 0.5 * (K + K.T)


def default_metric(D) -> Callable:
    """|x - y| / (max D - min D), which maps into [0, 1]."""
    D = np.asarray(D, dtype=float)
    span = float(D.max() - D.min())

    def metric(a, b):
        if span == 0:
            return np.zeros(np.broadcast(a, b).shape)
        return np.abs(a - b) / span

    return metric


def _exposure_type(D) -> str:
    D = np.asarray(D)
    return "binary" if np.all((D == 0) | (D == 1)) else "continuous"


def _mask_cross(K, Drow, Dcol, metric, Dall):
    Drow = np.asarray(Drow, dtype=float)
    Dcol = np.asarray(Dcol, dtype=float)
    if metric is None and _exposure_type(Dall) == "binary":
        return K * (Drow[:, None] == Dcol[None, :])
    metric = metric or default_metric(Dall)
    d = np.asarray(metric(Drow[:, None], Dcol[None, :]), dtype=float)
    if np.any(d < -1e-12) or np.any(d > 1 + 1e-12):
        raise ValueError("exposure metric must take values in [0, 1]")
    return K * (1.0 - d)


def build_kd(K, D, metric: Callable | None = None) -> np.ndarray:
    """Exposure-masked kinship.

    Binary exposure keeps K_ij for pairs with equal exposure and zeroes
    the rest; continuous exposure scales K_ij by ``1 - d(D_i, D_j)``
    (``default_metric`` unless ``metric`` is given).
    """
    K = np.asarray(K, dtype=float)
    D = np.asarray(D, dtype=float).ravel()
    if D.shape[0] != K.shape[0]:
        raise ValueError("exposure length does not match K")
    KD = _mask_cross(K, D, D, metric, D)
    return 0.5 * (KD + KD.T)


def eigendecompose(K, KD, tau_g: float, tau_d: float, ridge_policy: str = "repair",
                   cache_dir=None) -> CovarianceEigen:
    """Spectral decomposition of ``tau_g K + tau_d KD``, eigenvalues descending.

    If the smallest eigenvalue falls below ``1e-8 * Lambda_1`` the smallest
    ridge restoring that floor is added (``ridge_policy="repair"``) or an
    error is raised (``"error"``). When both components are zero the
    random effect is absent and every eigenvalue is set to a tiny floor so
    the rotated effects are shrunk to zero.
    """
    if tau_g < 0 or tau_d < 0:
        raise ValueError("variance components must be non-negative")
    K = np.asarray(K, dtype=float)
    KD = np.asarray(KD, dtype=float)
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(KD))):
        raise ValueError("kinship matrices contain non-finite entries")
    n = K.shape[0]
    if tau_g + tau_d == 0:
        return CovarianceEigen.floor(n)
    key = None
    if cache_dir is not None:
        key = content_hash(K, KD, np.array([tau_g, tau_d]), ridge_policy.encode())
        cached = Path(cache_dir) / f"eigen_{key}.npz"
        if cached.exists():
            with np.load(cached) as z:
                return CovarianceEigen(z["U"], z["Lambda"], float(z["ridge"]), tau_g, tau_d)
    S = tau_g * K + tau_d * KD
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    vals = vals[::-1].copy()
    vecs = np.asfortranarray(vecs[:, ::-1])
    if vals[0] <= 0:
        raise ValueError("random-effect covariance has no positive eigenvalue")
    floor = PD_RELATIVE_FLOOR * vals[0]
    ridge = 0.0
    if vals[-1] <= floor:
        if ridge_policy == "error":
            raise np.linalg.LinAlgError(f"covariance not positive definite (min eigenvalue {vals[-1]:g})")
        ridge = floor - vals[-1]
        vals = vals + ridge
        # centered GRMs are rank deficient by construction, so this is routine
        log.info("random-effect covariance repaired with ridge %.3g", ridge)
    out = CovarianceEigen(vecs, vals, ridge, tau_g, tau_d)
    if key is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        np.savez(Path(cache_dir) / f"eigen_{key}.npz", U=out.U, Lambda=out.Lambda, ridge=out.ridge)
    return out


def top_pcs(K, k: int) -> np.ndarray:
    """Leading k eigenvectors of K scaled by the square root of their eigenvalue."""
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"number of PCs must be in [1, {n}], got {k}")
    vals, vecs = np.linalg.eigh(0.5 * (K + K.T))
    vals = vals[::-1][:k]
    vecs = vecs[:, ::-1][:, :k]
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def content_hash(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(str(part.shape).encode())
            h.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, bytes):
            h.update(part)
        else:
            h.update(repr(part).encode())
    return h.hexdigest()[:20]


def save_kinship(path, pair: KinshipPair, key: str = "") -> None:
    np.savez(path, K=pair.K, KD=pair.KD, q=pair.q, exposure_type=pair.exposure_type, key=key)


def load_kinship(path) -> tuple[KinshipPair, str]:
    with np.load(path, allow_pickle=False) as z:
        return KinshipPair(z["K"], z["KD"], int(z["q"]), str(z["exposure_type"])), str(z["key"])
