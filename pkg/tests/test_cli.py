from pathlib import Path

import numpy as np
import pytest

from pqlgei.cli import RunConfig, main
from pqlgei.crossval import predict_linear
from pqlgei.data_model import Dataset, add_intercept, standardize_genotypes
from pqlgei.io import BedTriplet, read_bed, read_fit, read_table, write_bed
from pqlgei.kinship import KinshipPanel, eigendecompose
from pqlgei.solver import Design, SolverOptions, fit_path
from pqlgei.varcomp import fit_null_aireml


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    (d / "sim.cfg").write_text("n=90\np=25\nn_causal=3\nn_gei=2\nh2_s=0.5\nh2_sp=0.3\nh2_g=0.1\n"
                               "h2_d=0.0\nn_kinship=120\n")
    assert main(["simulate", "--write-data", "--config", str(d / "sim.cfg"), "--seed", "3",
                 "--out", str(d / "all")]) == 0
    # split into 70 training and 20 new samples
    for prefix in ("all", "all.kin"):
        trip = BedTriplet.from_prefix(d / prefix)
        G = read_bed(trip)
        ids = trip.samples()
        vids = [v["id"] for v in trip.variants()]
        write_bed(d / prefix.replace("all", "tr"), G[:70], ids[:70], vids)
        write_bed(d / prefix.replace("all", "te"), G[70:], ids[70:], vids)
    return d


def _common(d, prefix="tr"):
    return ["--bfile", str(d / prefix), "--kinship-bfile", str(d / f"{prefix}.kin"), "--pheno",
            str(d / "all.pheno.tsv"), "--covar", str(d / "all.covar.tsv"), "--exposure", "sex"]


def test_simulate_outputs(simdir):
    for suffix in (".bed", ".bim", ".fam", ".kin.bed", ".pheno.tsv", ".covar.tsv", ".truth.tsv",
                   ".config.txt"):
        assert (simdir / f"all{suffix}").exists()
    truth = (simdir / "all.truth.tsv").read_text().splitlines()
    assert truth[0] == "variant\tbeta\tgamma" and len(truth) - 1 == 3
    cov = read_table(simdir / "all.covar.tsv")
    assert set(np.unique(cov["sex"])) <= {0.0, 1.0}


def test_fit_writes_path_and_model(simdir, capsys):
    out = simdir / "fit"
    rc = main(["fit", *_common(simdir), "--nlambda", "6", "--lambda-min-ratio", "0.1", "--out", str(out)])
    assert rc == 0
    summary, coefs = read_fit(f"{out}.path.tsv")
    assert len(summary) == 12 and {r["rho"] for r in summary} == {0.0, 0.5}
    assert all(r["error"] is None for r in summary)
    assert "rho=0.5: lambda_max=" in capsys.readouterr().out
    cfg = (simdir / "fit.config.txt").read_text()
    assert "nlambda=6" in cfg and "exposure=sex" in cfg


def test_cv_then_predict(simdir):
    out = simdir / "cv"
    assert main(["cv", *_common(simdir), "--nlambda", "5", "--lambda-min-ratio", "0.2", "--k", "3",
                 "--threads", "1", "--out", str(out)]) == 0
    summary, _ = read_fit(f"{out}.cv.tsv")
    assert all(np.isfinite(r["cv_deviance"]) for r in summary)
    pred = simdir / "pred"
    rc = main(["predict", "--bfile", str(simdir / "te"), "--kinship-bfile", str(simdir / "te.kin"),
               "--covar", str(simdir / "all.covar.tsv"), "--exposure", "sex", "--model", f"{out}.model.npz",
               "--out", str(pred)])
    assert rc == 0
    tab = read_table(f"{pred}.pred.tsv")
    assert list(tab["id"]) == BedTriplet.from_prefix(simdir / "te").samples()
    np.testing.assert_allclose(tab["mu"], 1 / (1 + np.exp(-tab["eta"])), rtol=1e-12)
    # an explicit grid point can be requested
    assert main(["predict", "--bfile", str(simdir / "te"), "--kinship-bfile", str(simdir / "te.kin"),
                 "--covar", str(simdir / "all.covar.tsv"), "--exposure", "sex", "--model", f"{out}.model.npz",
                 "--rho-index", "0", "--lambda-index", "0", "--out", str(pred)]) == 0


def test_kinship_cache(simdir, capsys):
    args = ["kinship", "--bfile", str(simdir / "tr"), "--covar", str(simdir / "all.covar.tsv"),
            "--exposure", "sex", "--out", str(simdir / "k")]
    assert main(args) == 0
    assert main(args) == 0
    assert "reusing cached" in capsys.readouterr().out
    # the cached matrices can stand in for the panel
    assert main(["fit", *_common(simdir), "--kinship", str(simdir / "k.kinship.npz"), "--nlambda", "3",
                 "--out", str(simdir / "fitk")]) == 0


def test_argument_errors(simdir, capsys):
    assert main(["fit", "--out", str(simdir / "x")]) == 1
    assert "genotypes are required" in capsys.readouterr().err
    assert main(["fit", *_common(simdir), "--rho", "1.5", "--out", str(simdir / "x")]) == 1
    assert main(["fit", *_common(simdir), "--pheno-name", "nope", "--out", str(simdir / "x")]) == 1
    with pytest.raises(SystemExit):
        main(["fit", *_common(simdir), "--family", "poisson", "--out", str(simdir / "x")])


def test_run_config_validation():
    cfg = RunConfig("simulate", "o")
    cfg.validate()
    with pytest.raises(ValueError, match="nlambda"):
        RunConfig("simulate", "o", nlambda=0).validate()
    with pytest.raises(ValueError, match="--k"):
        RunConfig("simulate", "o", k=1).validate()
    assert "family=binomial" in cfg.echo()


def test_threads_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("PQLGEI_THREADS", "3")
    main(["simulate", "--write-data", "--n", "20", "--p", "5", "--n-causal", "1", "--n-gei", "1",
          "--out", str(tmp_path / "s")])
    assert "threads=3" in (tmp_path / "s.config.txt").read_text()


def test_simulate_benchmark_mode(tmp_path):
    cfgfile = tmp_path / "b.cfg"
    cfgfile.write_text("n=100\np=20\nn_causal=2\nn_gei=1\nh2_s=0.5\nh2_sp=0.2\nh2_g=0.1\nh2_d=0\nn_kinship=80\n")
    rc = main(["simulate", "--config", str(cfgfile), "--replications", "1", "--nlambda", "4", "--k", "3",
               "--threads", "1", "--out", str(tmp_path / "b")])
    assert rc == 0
    lines = (tmp_path / "b.bench.tsv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("hierarchical\tgamma")


TOY = Path(__file__).resolve().parents[1] / "data" / "toy"


def _toy_args(prefix=TOY / "toy"):
    return ["--bfile", str(prefix), "--pheno", str(TOY / "toy.pheno.tsv"), "--covar", str(TOY / "toy.covar.tsv"),
            "--exposure", "sex", "--no-cache"]


def test_toy_fit_selects_variants_mid_path(tmp_path):
    out = tmp_path / "toy"
    assert main(["fit", *_toy_args(), "--nlambda", "20", "--out", str(out)]) == 0
    summary, _ = read_fit(f"{out}.path.tsv")
    mid = [r for r in summary if r["lambda_index"] == 10]
    assert all(r["n_beta"] > 0 for r in mid)


def test_toy_cv_is_deterministic(tmp_path, capsys):
    chosen = []
    for run in range(2):
        out = tmp_path / f"cv{run}"
        assert main(["cv", *_toy_args(), "--nlambda", "8", "--lambda-min-ratio", "0.1", "--k", "5",
                     "--seed", "11", "--threads", "1", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        chosen.append([line for line in text.splitlines() if line.startswith("min deviance")])
        model = np.load(f"{out}.model.npz")
        chosen[-1].append(tuple(model["selected"]))
    assert chosen[0] == chosen[1]


def test_cli_predict_equals_library(tmp_path):
    trip = BedTriplet.from_prefix(TOY / "toy")
    G = read_bed(trip)
    ids = trip.samples()
    vids = [v["id"] for v in trip.variants()]
    tr, te = np.arange(160), np.arange(160, 200)
    write_bed(tmp_path / "tr", G[tr], [ids[i] for i in tr], vids)
    write_bed(tmp_path / "te", G[te], [ids[i] for i in te], vids)
    assert main(["fit", *_toy_args(tmp_path / "tr"), "--nlambda", "10", "--out", str(tmp_path / "fit")]) == 0
    assert main(["predict", "--bfile", str(tmp_path / "te"), "--covar", str(TOY / "toy.covar.tsv"),
                 "--exposure", "sex", "--model", str(tmp_path / "fit.model.npz"), "--rho-index", "1",
                 "--lambda-index", "6", "--out", str(tmp_path / "pred")]) == 0
    cli_eta = read_table(tmp_path / "pred.pred.tsv")["eta"]

    # the same pipeline through the library API
    cov = read_table(TOY / "toy.covar.tsv", order=ids)
    y = read_table(TOY / "toy.pheno.tsv", order=ids)["y"]
    Z = add_intercept(cov["age"])
    data = Dataset(y[tr], Z[tr], cov["sex"][tr], G[tr])
    design = Design.from_dataset(data, "binomial")
    panel = KinshipPanel(G, cov["sex"])
    K, KD, K21, KD21 = panel.blocks(tr, te)
    null = fit_null_aireml(design, (K, KD), "binomial")
    eig = eigendecompose(K, KD, null.tau_g, null.tau_d)
    path = fit_path(design, eig, null, (0.0, 0.5), 10, strong_rule=True, options=SolverOptions())
    Gs_te, _ = standardize_genotypes(G[te], design.freqs)
    test = Design(np.zeros(te.size), Z[te], cov["sex"][te], Gs_te, "binomial", None)
    lib_eta = predict_linear(path.point(1, 6), null, design, test, K, KD, K21, KD21)
    np.testing.assert_array_equal(cli_eta, lib_eta)
