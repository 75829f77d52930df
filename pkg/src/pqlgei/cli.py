"""Command-line entry point: kinship, fit, cv, predict and simulate."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .crossval import kfold_cv, predict_linear
from .data_model import Dataset, add_intercept, get_family
from .io import BedTriplet, read_bed, read_table, write_bed, write_fit
from .kinship import KinshipPanel, content_hash, eigendecompose, load_kinship, save_kinship
from .simulate import BenchmarkConfig, SimSpec, run_benchmark, simulate_dataset, write_report
from .solver import Design, PathPoint, SolverOptions, fit_path
from .varcomp import NullModel, fit_null_aireml

log = logging.getLogger("pqlgei")

EXIT_ERROR = 1
EXIT_PARTIAL = 3


@dataclass
class RunConfig:
    command: str
    out: str
    bfile: str | None = None
    kinship_bfile: str | None = None
    kinship: str | None = None
    pheno: str | None = None
    pheno_name: str | None = None
    covar: str | None = None
    covar_names: list | None = None
    exposure: str | None = None
    family: str = "binomial"
    rho: list = field(default_factory=lambda: [0.0, 0.5])
    nlambda: int = 100
    lambda_min_ratio: float | None = None
    k: int = 5
    seed: int = 0
    threads: int = 1
    strong_rule: bool = True
    estimate_phi: bool | None = None
    ridge_policy: str = "repair"
    strict: bool = False
    cache: bool = True
    model: str | None = None
    rho_index: int | None = None
    lambda_index: int | None = None

    def validate(self) -> None:
        if self.command in ("kinship", "fit", "cv", "predict") and not self.bfile:
            raise ValueError("genotypes are required (--bfile or --bed/--bim/--fam)")
        if self.command in ("fit", "cv") and not self.pheno:
            raise ValueError("--pheno is required")
        if self.command in ("fit", "cv", "predict") and not self.exposure:
            raise ValueError("--exposure is required")
        if self.command == "predict" and not self.model:
            raise ValueError("--model is required")
        get_family(self.family)
        if any(not 0 <= r < 1 for r in self.rho):
            raise ValueError("--rho values must lie in [0, 1)")
        if self.nlambda < 1:
            raise ValueError("--nlambda must be at least 1")
        if self.lambda_min_ratio is not None and not 0 < self.lambda_min_ratio < 1:
            raise ValueError("--lambda-min-ratio must lie in (0, 1)")
        if self.k < 2:
            raise ValueError("--k must be at least 2")
        if self.threads < 1:
            raise ValueError("--threads must be at least 1")
        if self.ridge_policy not in ("repair", "error"):
            raise ValueError("--ridge-policy must be 'repair' or 'error'")

    def echo(self) -> str:
        lines = [f"version={__version__}"]
        lines += [f"{k}={v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"


def _bfile(args) -> str | None:
    if args.bfile:
        return args.bfile
    if args.bed:
        if not (args.bim and args.fam):
            raise ValueError("--bed needs --bim and --fam")
        return args.bed
    return None


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PQLGEI_THREADS")
    if env:
        return int(env)
    return max(1, min(os.cpu_count() or 1, 8))


def _triplet(prefix, args=None) -> BedTriplet:
    if args is not None and args.bed and prefix == args.bed:
        return BedTriplet(Path(args.bed), Path(args.bim), Path(args.fam))
    return BedTriplet.from_prefix(prefix)


def _load_inputs(cfg: RunConfig, args, need_pheno: bool = True):
    """Genotypes, kinship-panel genotypes, covariates, exposure and phenotype aligned by sample id."""
    trip = _triplet(cfg.bfile, args)
    samples = trip.samples()
    variants = [v["id"] for v in trip.variants()]
    G = read_bed(trip)
    covar_cols = None
    if cfg.covar_names is not None:
        covar_cols = list(cfg.covar_names) + [cfg.exposure]
    if cfg.covar is None:
        raise ValueError("--covar is required (it holds the exposure column)")
    cov = read_table(cfg.covar, columns=covar_cols, order=samples)
    if cfg.exposure not in cov:
        raise KeyError(f"exposure column {cfg.exposure!r} not found in {cfg.covar}")
    D = cov[cfg.exposure]
    names = [c for c in cov if c not in ("id", cfg.exposure)]
    Z = add_intercept(np.column_stack([cov[c] for c in names]) if names else None, n=len(samples))
    y = np.zeros(len(samples))
    if need_pheno:
        ph = read_table(cfg.pheno, columns=[cfg.pheno_name] if cfg.pheno_name else None, order=samples)
        cols = [c for c in ph if c != "id"]
        y = ph[cfg.pheno_name or cols[0]]
    if cfg.kinship_bfile and cfg.kinship_bfile != cfg.bfile:
        ktrip = _triplet(cfg.kinship_bfile)
        kidx = {s: i for i, s in enumerate(ktrip.samples())}
        missing = [s for s in samples if s not in kidx]
        if missing:
            raise KeyError(f"kinship panel lacks {len(missing)} sample(s), first: {missing[:10]}")
        Gk = read_bed(ktrip)[[kidx[s] for s in samples]]
    else:
        Gk = G
    data = Dataset(y, Z, D, G, sample_ids=samples, variant_ids=variants, covariate_names=["intercept"] + names)
    return data, Gk, trip


def _kinship_for(cfg: RunConfig, data: Dataset, Gk):
    panel = KinshipPanel(Gk, data.D)
    if cfg.kinship:
        pair, _ = load_kinship(cfg.kinship)
        if pair.n != data.n:
            raise ValueError(f"kinship file has {pair.n} samples, data has {data.n}")
        return pair, panel
    return panel.pair(), panel


def _cache_dir(cfg: RunConfig):
    return None if not cfg.cache else f"{cfg.out}.cache"


def _write_config(cfg: RunConfig) -> None:
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    with open(f"{cfg.out}.config.txt", "w") as fh:
        fh.write(cfg.echo())


def _report_failures(path, cfg: RunConfig) -> int:
    failed = [(r, l, pt.error) for r, l, pt in path.iter_points() if not pt.ok]
    if failed:
        log.warning("%d grid point(s) failed; first: rho index %d, lambda index %d: %s",
                    len(failed), *failed[0])
        return EXIT_PARTIAL if cfg.strict else 0
    return 0


def save_model(path, result, data: Dataset, Gk, null: NullModel, exposure: str, selected, freqs) -> None:
    """Everything predict needs: coefficients, training working quantities and the kinship panel."""
    pts = [pt for _, _, pt in result.iter_points()]
    ok = [pt.ok for pt in pts]

    def stack(attr, shape):
        return np.stack([getattr(pt, attr) if pt.ok else np.full(shape, np.nan) for pt in pts])

    n, p, m = data.n, data.p, data.m
    np.savez_compressed(
        path, family=result.family, tau=np.array([null.tau_g, null.tau_d]), phi=null.phi,
        rho_grid=np.array(result.rho_grid), lambdas=np.vstack(result.lambdas), ok=np.array(ok),
        theta=stack("theta", m), alpha=np.array([pt.alpha if pt.ok else np.nan for pt in pts]),
        beta=stack("beta", p), gamma=stack("gamma", p), w=stack("w", n), ytilde=stack("ytilde", n),
        xb=stack("xb", n), sample_ids=np.array(data.sample_ids), variant_ids=np.array(data.variant_ids),
        covariate_names=np.array(data.covariate_names), exposure=exposure, D=data.D,
        freqs=np.asarray(freqs), G_kin=np.nan_to_num(np.asarray(Gk, dtype=float), nan=-1).astype(np.int8),
        selected=np.array(selected))


def _load_model(path):
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def cmd_kinship(cfg: RunConfig, args) -> int:
    trip = _triplet(cfg.bfile, args)
    samples = trip.samples()
    out = Path(f"{cfg.out}.kinship.npz")
    ktrip = _triplet(cfg.kinship_bfile) if cfg.kinship_bfile else trip
    D = np.zeros(len(samples))
    if cfg.exposure:
        if not cfg.covar:
            raise ValueError("--exposure needs --covar")
        D = read_table(cfg.covar, columns=[cfg.exposure], order=samples)[cfg.exposure]
    key = content_hash(Path(ktrip.bed).read_bytes(), np.asarray(D, dtype=float), str(cfg.exposure))
    if cfg.cache and out.exists():
        pair, old_key = load_kinship(out)
        if old_key == key:
            print(f"kinship: reusing cached matrices {out} (key {key})")
            return 0
    Gk = read_bed(ktrip)
    panel = KinshipPanel(Gk, D)
    pair = panel.pair()
    save_kinship(out, pair, key)
    print(f"kinship: n={pair.n} q={pair.q} exposure={pair.exposure_type} -> {out} (key {key})")
    if cfg.pheno:
        data, _, _ = _load_inputs(cfg, args)
        null = fit_null_aireml(data, pair, cfg.family, cfg.estimate_phi)
        eig = eigendecompose(pair.K, pair.KD, null.tau_g, null.tau_d, cfg.ridge_policy, _cache_dir(cfg))
        print(f"null model: tau_g={null.tau_g:.6g} tau_d={null.tau_d:.6g} phi={null.phi:.6g}; "
              f"ridge repair {eig.ridge:.3g}")
    return 0


def _options() -> SolverOptions:
    return SolverOptions()


def cmd_fit(cfg: RunConfig, args) -> int:
    data, Gk, _ = _load_inputs(cfg, args)
    pair, _ = _kinship_for(cfg, data, Gk)
    design = Design.from_dataset(data, cfg.family)
    null = fit_null_aireml(design, pair, cfg.family, cfg.estimate_phi)
    eig = eigendecompose(pair.K, pair.KD, null.tau_g, null.tau_d, cfg.ridge_policy, _cache_dir(cfg))
    path = fit_path(design, eig, null, cfg.rho, cfg.nlambda, cfg.lambda_min_ratio,
                    strong_rule=cfg.strong_rule, options=_options())
    write_fit(f"{cfg.out}.path.tsv", path)
    last = (len(path.rho_grid) - 1, len(path.lambdas[-1]) - 1)
    save_model(f"{cfg.out}.model.npz", path, data, Gk, null, cfg.exposure, last, design.freqs)
    print(f"null model: tau_g={null.tau_g:.6g} tau_d={null.tau_d:.6g} phi={null.phi:.6g}")
    for r, rho in enumerate(path.rho_grid):
        sizes = [int(np.count_nonzero(pt.beta)) for pt in path.points[r] if pt.ok]
        print(f"rho={rho:g}: lambda_max={path.lambda_max[r]:.6g}, {len(path.points[r])} points, "
              f"max model size {max(sizes) if sizes else 0}")
    print(f"wrote {cfg.out}.path.tsv and {cfg.out}.model.npz")
    return _report_failures(path, cfg)


def cmd_cv(cfg: RunConfig, args) -> int:
    data, Gk, _ = _load_inputs(cfg, args)
    design = Design.from_dataset(data, cfg.family)
    pair, panel = _kinship_for(cfg, data, Gk)
    kin = pair if cfg.kinship else panel
    cv = kfold_cv(design, kin, cfg.family, cfg.rho, cfg.nlambda, cfg.lambda_min_ratio, cfg.k, cfg.seed,
                  cfg.strong_rule, _options(), cfg.threads, _cache_dir(cfg))
    write_fit(f"{cfg.out}.cv.tsv", cv.path, cv)
    save_model(f"{cfg.out}.model.npz", cv.path, data, Gk, cv.path.null, cfg.exposure, cv.best, design.freqs)
    for label, (r, l) in (("min deviance", cv.best), ("1-SE", cv.best_1se)):
        pt = cv.path.point(r, l)
        print(f"{label}: rho={cv.rho_grid[r]:g} lambda[{l}]={pt.lam:.6g} "
              f"deviance={cv.mean_deviance[r, l]:.6g} (se {cv.se_deviance[r, l]:.3g}) "
              f"n_beta={np.count_nonzero(pt.beta)} n_gamma={np.count_nonzero(pt.gamma)}")
    print(f"wrote {cfg.out}.cv.tsv and {cfg.out}.model.npz")
    return _report_failures(cv.path, cfg)


def model_point(model: dict, rho_index=None, lambda_index=None) -> tuple[PathPoint, int]:
    n_l = model["lambdas"].shape[1]
    r, l = (int(x) for x in model["selected"])
    r = r if rho_index is None else rho_index
    l = l if lambda_index is None else lambda_index
    flat = r * n_l + l
    if not model["ok"][flat]:
        raise ValueError(f"grid point (rho index {r}, lambda index {l}) failed during fitting")
    pt = PathPoint(float(model["lambdas"][r, l]), float(model["rho_grid"][r]), model["theta"][flat],
                   float(model["alpha"][flat]), model["beta"][flat], model["gamma"][flat], None,
                   model["xb"][flat], None, model["w"][flat], model["ytilde"][flat])
    return pt, flat


def predict_new(model: dict, G_new, Z_new, D_new, Gk_new, rho_index=None, lambda_index=None):
    """Linear predictor and mean for new samples from a saved model."""
    pt, _ = model_point(model, rho_index, lambda_index)
    freqs = model["freqs"]
    G_new = np.asarray(G_new, dtype=float)
    G_new = np.where(np.isnan(G_new), 2.0 * freqs, G_new)
    Gs = (G_new - 2.0 * freqs) / np.sqrt(2.0 * freqs * (1.0 - freqs))
    fam = str(model["family"])
    test = Design(np.zeros(G_new.shape[0]), Z_new, D_new, Gs, fam, None)
    Gk_train = model["G_kin"].astype(float)
    Gk_train[Gk_train < 0] = np.nan
    Gk_all = np.vstack([Gk_train, np.asarray(Gk_new, dtype=float)])
    D_all = np.concatenate([model["D"], np.asarray(D_new, dtype=float)])
    n_tr = Gk_train.shape[0]
    K11, KD11, K21, KD21 = KinshipPanel(Gk_all, D_all).blocks(np.arange(n_tr),
                                                              np.arange(n_tr, n_tr + G_new.shape[0]))
    tau = model["tau"]
    null = NullModel(float(tau[0]), float(tau[1]), float(model["phi"]), pt.theta, pt.alpha, family=fam)
    eta = predict_linear(pt, null, None, test, K11, KD11, K21, KD21)
    return eta, test.family.linkinv(eta)


def cmd_predict(cfg: RunConfig, args) -> int:
    model = _load_model(cfg.model)
    trip = _triplet(cfg.bfile, args)
    samples = trip.samples()
    vids = [v["id"] for v in trip.variants()]
    pos = {v: j for j, v in enumerate(vids)}
    missing = [v for v in model["variant_ids"] if v not in pos]
    if missing:
        raise KeyError(f"{len(missing)} model variant(s) absent from genotypes, first: {missing[:10]}")
    G = read_bed(trip, [pos[v] for v in model["variant_ids"]])
    names = [str(c) for c in model["covariate_names"][1:]]
    exposure = str(model["exposure"])
    cov = read_table(cfg.covar, columns=names + [exposure], order=samples)
    Z = add_intercept(np.column_stack([cov[c] for c in names]) if names else None, n=len(samples))
    if cfg.kinship_bfile and cfg.kinship_bfile != cfg.bfile:
        ktrip = _triplet(cfg.kinship_bfile)
        kidx = {s: i for i, s in enumerate(ktrip.samples())}
        Gk = read_bed(ktrip)[[kidx[s] for s in samples]]
    else:
        Gk = read_bed(trip)
    eta, mu = predict_new(model, G, Z, cov[exposure], Gk, cfg.rho_index, cfg.lambda_index)
    with open(f"{cfg.out}.pred.tsv", "w") as fh:
        fh.write("id\teta\tmu\n")
        for s, e, m in zip(samples, eta, mu):
            fh.write(f"{s}\t{float(e)!r}\t{float(m)!r}\n")
    print(f"predicted {len(samples)} sample(s) -> {cfg.out}.pred.tsv")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    spec = SimSpec.from_text(Path(args.config).read_text()) if args.config else SimSpec()
    over = {k: getattr(args, k) for k in ("n", "p", "n_causal", "n_gei", "h2_s", "h2_sp", "h2_g", "h2_d")
            if getattr(args, k) is not None}
    scenario = args.scenario
    if scenario == "null":
        spec = SimSpec.null(**{**asdict(spec), **over, "seed": cfg.seed})
    else:
        spec = SimSpec(**{**asdict(spec), **over, "seed": cfg.seed,
                          "hierarchical": scenario == "hierarchical"})
    if args.write_data:
        sim = simulate_dataset(spec)
        ids = [f"s{i}" for i in range(spec.n)]
        write_bed(cfg.out, sim.G, ids, [f"snp{j}" for j in range(spec.p)])
        write_bed(f"{cfg.out}.kin", sim.G_kin, ids, [f"kin{j}" for j in range(spec.n_kinship)])
        with open(f"{cfg.out}.pheno.tsv", "w") as fh:
            fh.write("IID\ty\n" + "".join(f"{s}\t{int(v)}\n" for s, v in zip(ids, sim.y)))
        with open(f"{cfg.out}.covar.tsv", "w") as fh:
            fh.write("IID\tage\tsex\n" + "".join(f"{s}\t{float(a)!r}\t{int(x)}\n" for s, a, x in zip(ids, sim.age, sim.sex)))
        with open(f"{cfg.out}.truth.tsv", "w") as fh:
            fh.write("variant\tbeta\tgamma\n")
            for j in np.flatnonzero((sim.beta != 0) | (sim.gamma != 0)):
                fh.write(f"snp{j}\t{float(sim.beta[j])!r}\t{float(sim.gamma[j])!r}\n")
        print(f"wrote simulated dataset {cfg.out}.bed/.bim/.fam, {cfg.out}.kin.*, pheno, covar and truth tables")
        return 0
    bcfg = BenchmarkConfig(n_replications=args.replications, k=cfg.k, rho_grid=tuple(cfg.rho),
                           n_lambda=cfg.nlambda, lambda_min_ratio=cfg.lambda_min_ratio or 0.1,
                           n_jobs=cfg.threads)
    rep = run_benchmark(spec, bcfg, label=scenario,
                        progress=lambda i, row: print(f"replication {i}: {row.get('error') or 'ok'}"))
    write_report(f"{cfg.out}.bench.tsv", [rep])
    s = rep.summary()
    print(f"{s['n_ok']} replication(s) ok, {s['n_failed']} failed -> {cfg.out}.bench.tsv")
    if s["n_ok"]:
        print(f"GEI F1={s['gamma_f1']:.3f} main F1={s['beta_f1']:.3f} test AUC={s['test_auc']:.3f}")
    return EXIT_PARTIAL if (cfg.strict and s["n_failed"]) else 0


COMMANDS = {"kinship": cmd_kinship, "fit": cmd_fit, "cv": cmd_cv, "predict": cmd_predict,
            "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pqlgei", description="Sparse mixed-model selection of gene-by-exposure effects")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--bfile", help="PLINK prefix of the candidate genotypes")
        p.add_argument("--bed")
        p.add_argument("--bim")
        p.add_argument("--fam")
        p.add_argument("--kinship-bfile", help="PLINK prefix of the kinship panel (default: --bfile)")
        p.add_argument("--kinship", help="kinship .npz written by the kinship command")
        p.add_argument("--pheno")
        p.add_argument("--pheno-name")
        p.add_argument("--covar")
        p.add_argument("--covar-names", help="comma-separated covariates to use (default: all but exposure)")
        p.add_argument("--exposure")
        p.add_argument("--family", default="binomial", choices=["binomial", "gaussian"])
        p.add_argument("--rho", default="0,0.5", help="comma-separated rho grid")
        p.add_argument("--nlambda", type=int, default=100)
        p.add_argument("--lambda-min-ratio", type=float)
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", required=True)
        p.add_argument("--strong-rule", dest="strong_rule", action="store_true", default=True)
        p.add_argument("--no-strong-rule", dest="strong_rule", action="store_false")
        p.add_argument("--estimate-phi", dest="estimate_phi", action="store_true", default=None)
        p.add_argument("--fix-phi", dest="estimate_phi", action="store_false")
        p.add_argument("--ridge-policy", default="repair", choices=["repair", "error"])
        p.add_argument("--strict", action="store_true")
        p.add_argument("--no-cache", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("kinship", help="compute K and the exposure-masked K"))
    common(sub.add_parser("fit", help="fit the solution path"))
    common(sub.add_parser("cv", help="cross-validate the path"))
    p = common(sub.add_parser("predict", help="predict new samples from a saved model"))
    p.add_argument("--model", required=True)
    p.add_argument("--rho-index", type=int)
    p.add_argument("--lambda-index", type=int)
    p = common(sub.add_parser("simulate", help="simulate data or run the benchmark"))
    p.add_argument("--config", help="key=value simulation settings")
    p.add_argument("--scenario", default="hierarchical", choices=["hierarchical", "anti-hierarchical", "null"])
    p.add_argument("--replications", type=int, default=2)
    p.add_argument("--write-data", action="store_true", help="write one dataset instead of benchmarking")
    for name, typ in (("n", int), ("p", int), ("n-causal", int), ("n-gei", int), ("h2-s", float),
                      ("h2-sp", float), ("h2-g", float), ("h2-d", float)):
        p.add_argument(f"--{name}", type=typ)
    return ap


def config_from_args(args) -> RunConfig:
    return RunConfig(
        command=args.command, out=args.out, bfile=_bfile(args), kinship_bfile=args.kinship_bfile,
        kinship=args.kinship, pheno=args.pheno, pheno_name=args.pheno_name, covar=args.covar,
        covar_names=args.covar_names.split(",") if args.covar_names else None, exposure=args.exposure,
        family=args.family, rho=[float(x) for x in args.rho.split(",") if x.strip()], nlambda=args.nlambda,
        lambda_min_ratio=args.lambda_min_ratio, k=args.k, seed=args.seed, threads=_threads(args),
        strong_rule=args.strong_rule, estimate_phi=args.estimate_phi, ridge_policy=args.ridge_policy,
        strict=args.strict, cache=not args.no_cache, model=getattr(args, "model", None),
        rho_index=getattr(args, "rho_index", None), lambda_index=getattr(args, "lambda_index", None))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = config_from_args(args)
        cfg.validate()
        _write_config(cfg)
        return COMMANDS[cfg.command](cfg, args)
    except (OSError, ValueError, KeyError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"pqlgei {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
