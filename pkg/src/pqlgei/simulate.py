"""Synthetic case-control data with structured populations and a benchmark harness."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .crossval import auc, kfold_cv, predict
from .data_model import Dataset, add_intercept, allele_frequencies, standardize_genotypes
from .kinship import KinshipPanel
from .solver import Design, SolverOptions

log = logging.getLogger(__name__)

LOGISTIC_VARIANCE = math.pi ** 2 / 3
# African, European, East Asian, ... shares of the reference panel
POPULATION_PROPORTIONS = (0.24, 0.13, 0.19, 0.20, 0.19, 0.04, 0.01)


@dataclass
class SimSpec:
    n: int = 400
    p: int = 1000
    n_causal: int = 100
    n_gei: int = 50
    h2_s: float = 0.2
    h2_sp: float = 0.1
    h2_g: float = 0.4
    h2_d: float = 0.2
    hierarchical: bool = True
    n_kinship: int = 2000
    population_proportions: tuple = POPULATION_PROPORTIONS
    fst: float = 0.05
    maf_low: float = 0.05
    maf_high: float = 0.5
    prevalence: float | None = None
    sex_effect: float = -math.log(1.3)
    age_effect: float = math.log(1.05)
    age_mean: float = 50.0
    age_sd: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.population_proportions = tuple(float(x) for x in self.population_proportions)
        if self.h2_s + self.h2_sp + self.h2_g + self.h2_d > 1 + 1e-12:
            raise ValueError("variance fractions must sum to at most 1")
        if min(self.h2_s, self.h2_sp, self.h2_g, self.h2_d) < 0:
            raise ValueError("variance fractions must be non-negative")
        if not (0 <= self.n_causal <= self.p and 0 <= self.n_gei <= self.p):
            raise ValueError("causal set sizes must lie in [0, p]")
        if self.hierarchical and self.n_gei > self.n_causal:
            raise ValueError("hierarchical scenario needs n_gei <= n_causal")
        if self.prevalence is not None and not 0 < self.prevalence < 1:
            raise ValueError("prevalence must lie in (0, 1)")

    @classmethod
    def null(cls, **kw) -> "SimSpec":
        """No genetic, polygenic or covariate signal and prevalence 0.5."""
        base = dict(h2_s=0.0, h2_sp=0.0, h2_g=0.0, h2_d=0.0, prevalence=0.5, sex_effect=0.0, age_effect=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, scenario: str = "hierarchical", **kw) -> "SimSpec":
        """Desk-scale settings: n = 400, p = 1000, 1% causal, half as many GEI effects.

        Per-effect signal is raised relative to the large-panel defaults so
        that selection is measurable at this sample size.
        """
        base = dict(n=400, p=1000, n_causal=10, n_gei=5, h2_s=0.4, h2_sp=0.4, h2_g=0.2, h2_d=0.0)
        base.update(kw)
        if scenario == "null":
            return cls.null(**{k: v for k, v in base.items() if not k.startswith("h2")})
        if scenario not in ("hierarchical", "anti-hierarchical"):
            raise ValueError(f"unknown scenario {scenario!r}")
        return cls(hierarchical=scenario == "hierarchical", **base)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SimSpec":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise KeyError(f"unknown simulation setting {key!r}")
            kw[key] = _parse_value(key, val)
        return cls(**kw)


def _parse_value(key, val):
    if key == "population_proportions":
        return tuple(float(x) for x in val.strip("()[] ").split(",") if x.strip())
    if key == "hierarchical":
        return val.lower() in ("1", "true", "yes")
    if key == "prevalence":
        return None if val in ("None", "") else float(val)
    if key in ("n", "p", "n_causal", "n_gei", "n_kinship", "seed"):
        return int(val)
    return float(val)


def simulate_genotypes(n: int, p: int, rng, proportions=POPULATION_PROPORTIONS, fst: float = 0.05,
                       maf_low: float = 0.05, maf_high: float = 0.5, populations=None):
    """Balding-Nichols genotypes for structured populations.

    Ancestral frequencies are U(maf_low, maf_high); each population draws
    Beta(f (1 - F) / F, (1 - f)(1 - F) / F) frequencies around them.
    Columns that come out monomorphic are redrawn. Returns (G, populations).
    """
    props = np.asarray(proportions, dtype=float)
    props = props / props.sum()
    if populations is None:
        populations = rng.choice(props.size, size=n, p=props)
    anc = rng.uniform(maf_low, maf_high, p)
    k = props.size
    G = np.empty((n, p), dtype=np.int8)
    todo = np.arange(p)
    while todo.size:
        a = anc[todo] * (1 - fst) / fst
        b = (1 - anc[todo]) * (1 - fst) / fst
        freqs = rng.beta(a, b, size=(k, todo.size))
        block = rng.binomial(2, freqs[populations]).astype(np.int8)
        G[:, todo] = block
        s = block.sum(axis=0)
        todo = todo[(s == 0) | (s == 2 * n)]
    return G, populations


def sample_effects(spec: SimSpec, rng):
    """Causal supports and effects: beta on S, gamma on S'.

    Effects are N(0, h2 * sigma^2 / |set|) with sigma^2 = pi^2 / 3.
    The hierarchical scenario draws S' inside S; otherwise S' is drawn
    independently of S.
    """
    S = np.sort(rng.choice(spec.p, spec.n_causal, replace=False))
    if spec.hierarchical:
        Sp = np.sort(rng.choice(S, spec.n_gei, replace=False))
    else:
        Sp = np.sort(rng.choice(spec.p, spec.n_gei, replace=False))
    beta = np.zeros(spec.p)
    gamma = np.zeros(spec.p)
    if spec.n_causal and spec.h2_s > 0:
        beta[S] = rng.normal(0.0, math.sqrt(spec.h2_s * LOGISTIC_VARIANCE / spec.n_causal), S.size)
    if spec.n_gei and spec.h2_sp > 0:
        gamma[Sp] = rng.normal(0.0, math.sqrt(spec.h2_sp * LOGISTIC_VARIANCE / spec.n_gei), Sp.size)
    return S, Sp, beta, gamma


def sample_polygenic(K, KD, h2_g: float, h2_d: float, rng) -> np.ndarray:
    """Draw from N(0, sigma^2 (h2_g K + h2_d KD)) through its eigendecomposition."""
    n = K.shape[0]
    S = LOGISTIC_VARIANCE * (h2_g * np.asarray(K) + h2_d * np.asarray(KD))
    if not np.any(S):
        return np.zeros(n)
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    if vals[0] < -1e-8 * max(vals[-1], 1.0):
        raise np.linalg.LinAlgError("polygenic covariance is not positive semi-definite")
    return vecs @ (np.sqrt(np.clip(vals, 0.0, None)) * rng.normal(size=n))


def simulate_phenotypes(spec: SimSpec, G, sex, age, K, KD, populations, beta, gamma, rng,
                        baseline=None):
    """Binary phenotype from the logistic model with a polygenic random effect.

    ``G`` holds the candidate genotypes (standardized here with the sample
    allele frequencies). Returns (y, linear predictor, baseline prevalences).
    """
    if baseline is None:
        k = int(np.max(populations)) + 1
        baseline = (np.full(k, spec.prevalence) if spec.prevalence is not None
                    else rng.uniform(0.1, 0.9, k))
    logit0 = np.log(baseline) - np.log1p(-baseline)
    eta = logit0[populations] + spec.sex_effect * sex + spec.age_effect * age / 10.0
    nz_b = np.flatnonzero(beta)
    nz_g = np.flatnonzero(gamma)
    cols = np.union1d(nz_b, nz_g)
    if cols.size:
        Gs, _ = standardize_genotypes(np.asarray(G, dtype=float)[:, cols])
        pos = {c: i for i, c in enumerate(cols)}
        eta = eta + Gs[:, [pos[j] for j in nz_b]] @ beta[nz_b]
        eta = eta + sex * (Gs[:, [pos[j] for j in nz_g]] @ gamma[nz_g])
    eta = eta + sample_polygenic(K, KD, spec.h2_g, spec.h2_d, rng)
    prob = 1.0 / (1.0 + np.exp(-eta))
    y = (rng.random(eta.shape[0]) < prob).astype(float)
    return y, eta, baseline


@dataclass
class SimData:
    spec: SimSpec
    G: np.ndarray
    G_kin: np.ndarray
    sex: np.ndarray
    age: np.ndarray
    populations: np.ndarray
    y: np.ndarray
    S: np.ndarray
    S_prime: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    baseline: np.ndarray

    def dataset(self, rows=None, variants=None) -> Dataset:
        rows = np.arange(self.y.size) if rows is None else np.asarray(rows)
        variants = np.arange(self.spec.p) if variants is None else np.asarray(variants)
        Z = add_intercept(self.age[rows, None])
        return Dataset(self.y[rows], Z, self.sex[rows], self.G[np.ix_(rows, variants)].astype(float),
                       sample_ids=[f"s{i}" for i in rows], variant_ids=[f"snp{j}" for j in variants],
                       covariate_names=["intercept", "age"])


def simulate_dataset(spec: SimSpec, rng=None) -> SimData:
    """One replicate: genotypes, kinship panel, covariates, effects and phenotype."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    G_all, pops = simulate_genotypes(spec.n, spec.p + spec.n_kinship, rng, spec.population_proportions,
                                     spec.fst, spec.maf_low, spec.maf_high)
    G, G_kin = G_all[:, : spec.p], G_all[:, spec.p:]
    sex = rng.binomial(1, 0.5, spec.n).astype(float)
    age = rng.normal(spec.age_mean, spec.age_sd, spec.n)
    K, KD, _, _ = KinshipPanel(G_kin, sex).blocks(np.arange(spec.n))
    S, Sp, beta, gamma = sample_effects(spec, rng)
    y, _, baseline = simulate_phenotypes(spec, G, sex, age, K, KD, pops, beta, gamma, rng)
    return SimData(spec, G, G_kin, sex, age, pops, y, S, Sp, beta, gamma, baseline)


@dataclass(frozen=True)
class SelectionMetrics:
    model_size: int
    fpr: float
    tpr: float
    fdr: float
    f1: float
    fdr_undefined: bool = False


def _metrics(selected: np.ndarray, truth: np.ndarray) -> SelectionMetrics:
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    size = int(selected.sum())
    tp = int(np.sum(selected & truth))
    fp = size - tp
    n_true = int(truth.sum())
    n_false = truth.size - n_true
    fpr = Fraction(fp, n_false) if n_false else Fraction(0)
    tpr = Fraction(tp, n_true) if n_true else Fraction(0)
    undefined = size == 0
    fdr = Fraction(fp, size) if size else Fraction(0)
    if tpr == 0 or fdr == 1:
        f1 = Fraction(0)
    else:
        f1 = 2 / (1 / (1 - fdr) + 1 / tpr)
    return SelectionMetrics(size, float(fpr), float(tpr), float(fdr), float(f1), undefined)


def selection_metrics(beta_hat, gamma_hat, S, S_prime) -> dict:
    """Model size, FPR, TPR, FDR and F1 for gamma, beta and the stacked (beta, gamma) vector.

    FDR of an empty model (0/0) is reported as 0 with ``fdr_undefined``
    set; F1 is 0 whenever TPR is 0 or FDR is 1.
    """
    beta_hat = np.asarray(beta_hat)
    gamma_hat = np.asarray(gamma_hat)
    p = beta_hat.size
    tb = np.zeros(p, dtype=bool)
    tb[np.asarray(S, dtype=int)] = True
    tg = np.zeros(p, dtype=bool)
    tg[np.asarray(S_prime, dtype=int)] = True
    sb = beta_hat != 0
    sg = gamma_hat != 0
    return {
        "gamma": _metrics(sg, tg),
        "beta": _metrics(sb, tb),
        "combined": _metrics(np.concatenate([sb, sg]), np.concatenate([tb, tg])),
    }


@dataclass
class BenchmarkConfig:
    """Harness settings for :func:`run_benchmark`.

    ``selection`` picks the reported model from the CV grid: ``"1se"`` takes
    the sparsest point within one standard error of the minimum deviance,
    ``"min"`` the minimum itself. The sparser rule is the harness default
    because selection metrics are scored on the chosen model.
    """

    n_replications: int = 20
    test_fraction: float = 0.2
    k: int = 3
    rho_grid: tuple = (0.0, 0.5)
    n_lambda: int = 20
    lambda_min_ratio: float = 0.1
    n_jobs: int = 1
    selection: str = "1se"

    def __post_init__(self):
        if self.selection not in ("min", "1se"):
            raise ValueError(f"selection must be 'min' or '1se', got {self.selection!r}")


@dataclass
class BenchmarkReport:
    spec: SimSpec
    config: BenchmarkConfig
    replications: list = field(default_factory=list)
    label: str = ""

    def ok(self) -> list:
        return [r for r in self.replications if r.get("error") is None]

    def summary(self) -> dict:
        """Mean of every metric over the successful replications."""
        ok = self.ok()
        out = {"n_ok": len(ok), "n_failed": len(self.replications) - len(ok)}
        if not ok:
            return out
        for target in ("gamma", "beta", "combined"):
            for name in ("model_size", "fpr", "tpr", "fdr", "f1"):
                out[f"{target}_{name}"] = float(np.mean([r[target][name] for r in ok]))
        vals = [r["test_auc"] for r in ok if np.isfinite(r["test_auc"])]
        out["test_auc"] = float(np.mean(vals)) if vals else float("nan")
        out["test_auc_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
        out["hierarchy_violations"] = int(sum(r["hierarchy_violations"] for r in ok))
        out["seconds"] = float(np.sum([r["seconds"] for r in ok]))
        return out

    def rows(self) -> list[dict]:
        s = self.summary()
        rows = []
        for target in ("gamma", "beta", "combined"):
            row = {"scenario": self.label, "target": target}
            for name in ("model_size", "fpr", "tpr", "fdr", "f1"):
                row[name] = s.get(f"{target}_{name}", float("nan"))
            row["auc"] = s.get("test_auc", float("nan"))
            row["replications"] = s["n_ok"]
            rows.append(row)
        return rows

    def write(self, path) -> None:
        write_report(path, [self])


def write_report(path, reports) -> None:
    """Delimited table with one row per scenario and target (gamma, beta, combined)."""
    cols = ["scenario", "target", "model_size", "fpr", "tpr", "fdr", "f1", "auc", "replications"]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for rep in reports:
            for row in rep.rows():
                fh.write("\t".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def run_replication(spec: SimSpec, config: BenchmarkConfig, seed: int, options: SolverOptions | None = None) -> dict:
    """Simulate, split, cross-validate on the training rows and score one replicate."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    sim = simulate_dataset(spec, rng)
    n = spec.n
    perm = rng.permutation(n)
    n_test = int(round(config.test_fraction * n))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    # variants that are monomorphic among training samples cannot be standardized
    freqs = allele_frequencies(sim.G[train].astype(float))
    usable = np.flatnonzero((freqs > 0) & (freqs < 1))
    design = Design.from_dataset(sim.dataset(train, usable), "binomial")
    panel = KinshipPanel(sim.G_kin[train], sim.sex[train])
    cv = kfold_cv(design, panel, "binomial", config.rho_grid, config.n_lambda, config.lambda_min_ratio,
                  k=config.k, seed=seed, options=options, n_jobs=config.n_jobs)
    r, l = cv.best if config.selection == "min" else cv.best_1se
    pt = cv.path.point(r, l)
    beta_hat = np.zeros(spec.p)
    gamma_hat = np.zeros(spec.p)
    beta_hat[usable] = pt.beta
    gamma_hat[usable] = pt.gamma
    metrics = selection_metrics(beta_hat, gamma_hat, sim.S, sim.S_prime)
    # test-set prediction with kinship standardized on the training rows
    K11, KD11, K21, KD21 = KinshipPanel(sim.G_kin, sim.sex).blocks(train, test)
    test_data = sim.dataset(test, usable)
    Gs_te, _ = standardize_genotypes(test_data.G, design.freqs)
    test_design = Design(test_data.y, test_data.Z, test_data.D, np.nan_to_num(Gs_te), "binomial", None)
    mu = predict(pt, cv.path.null, design, test_design, K11, KD11, K21, KD21)
    hier_viol = int(sum(np.count_nonzero((p_.gamma != 0) & (p_.beta == 0))
                        for _, _, p_ in cv.path.iter_points() if p_.ok))
    failed = int(sum(1 for _, _, p_ in cv.path.iter_points() if not p_.ok))
    return {
        "seed": seed,
        "error": None,
        "rho": cv.rho_grid[r],
        "lambda_index": int(l),
        "lambda": float(pt.lam),
        "tau_g": cv.path.null.tau_g,
        "tau_d": cv.path.null.tau_d,
        "test_auc": auc(mu, test_data.y),
        "hierarchy_violations": hier_viol,
        "failed_points": failed,
        "seconds": time.perf_counter() - t0,
        **{k: asdict(v) for k, v in metrics.items()},
    }


def run_benchmark(spec: SimSpec, config: BenchmarkConfig | None = None, label: str = "",
                  options: SolverOptions | None = None, progress=None) -> BenchmarkReport:
    """Replicate the simulation protocol; replicate i uses seed ``spec.seed + i``.

    Errors in a replicate are recorded in its row and do not stop the run.
    """
    config = config or BenchmarkConfig()
    report = BenchmarkReport(spec, config, label=label)
    for i in range(config.n_replications):
        seed = spec.seed + i
        try:
            row = run_replication(spec, config, seed, options)
        except Exception as exc:  # recorded, not fatal
            log.warning("replication %d failed: %s", i, exc)
            row = {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}
        report.replications.append(row)
        if progress is not None:
            progress(i, row)
    return report
