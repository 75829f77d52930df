import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from factories import design, eigen, fixed_null
from pqlgei.io import (BED_MAGIC, BedFormatError, BedTriplet, decode_bed_block, encode_bed_block, read_bed,
                       read_fit, read_table, write_bed, write_fit)
from pqlgei.solver import fit_path

genotype_matrices = st.tuples(st.integers(1, 37), st.integers(1, 6)).flatmap(
    lambda shape: arrays(float, shape, elements=st.sampled_from([0.0, 1.0, 2.0, np.nan])))


@given(genotype_matrices, st.booleans())
def test_encode_decode_roundtrip(G, count_a1):
    back = decode_bed_block(encode_bed_block(G, count_a1), G.shape[0], count_a1)
    np.testing.assert_array_equal(back, G)


def test_known_byte_layout():
    # samples: hom A1, missing, het, hom A2 -> codes 00, 01, 10, 11
    G = np.array([[2.0], [np.nan], [1.0], [0.0]])
    assert encode_bed_block(G).tolist() == [[0b11100100]]
    # padding bits of a 5-sample variant are zero
    assert encode_bed_block(np.full((5, 1), 2.0)).tolist() == [[0, 0]]


def test_encode_rejects_non_counts():
    with pytest.raises(ValueError):
        encode_bed_block(np.array([[0.5]]))


def test_read_bed_subset_and_ids(tmp_path):
    G = np.array([[0, 1, 2], [2, np.nan, 0], [1, 1, 1]], dtype=float)
    trip = write_bed(tmp_path / "x", G, ["a", "b", "c"], ["r1", "r2", "r3"])
    trip = BedTriplet.from_prefix(str(tmp_path / "x.bed"))
    assert trip.samples() == ["a", "b", "c"]
    assert [v["id"] for v in trip.variants()] == ["r1", "r2", "r3"]
    np.testing.assert_array_equal(read_bed(trip, [2, 0]), G[:, [2, 0]])
    np.testing.assert_array_equal(read_bed(trip, count_a1=False), 2 - G)
    with pytest.raises(IndexError):
        read_bed(trip, [3])


def test_read_bed_rejects_corruption(tmp_path):
    trip = write_bed(tmp_path / "x", np.zeros((5, 2)))
    raw = trip.bed.read_bytes()
    trip.bed.write_bytes(raw[:-1])
    with pytest.raises(BedFormatError, match="length"):
        read_bed(trip)
    trip.bed.write_bytes(b"\x00\x00\x01" + raw[3:])
    with pytest.raises(BedFormatError, match="magic"):
        read_bed(trip)
    trip.bed.write_bytes(BED_MAGIC[:2] + b"\x00" + raw[3:])
    with pytest.raises(BedFormatError, match="variant-major"):
        read_bed(trip)


def test_read_table_alignment(tmp_path):
    path = tmp_path / "pheno.tsv"
    path.write_text("FID\tIID\ty\tage\nf\ts1\t1\t40\nf\ts2\t0\t55.5\n")
    tab = read_table(path, order=["s2", "s1"])
    assert list(tab["id"]) == ["s2", "s1"]
    np.testing.assert_array_equal(tab["age"], [55.5, 40])
    with pytest.raises(KeyError, match="without a row"):
        read_table(path, order=["s3"])
    with pytest.raises(KeyError, match="not in header"):
        read_table(path, columns=["bmi"])


def test_read_table_csv_and_bad_values(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("id,x\na,1\nb,oops\n")
    with pytest.raises(ValueError, match="non-numeric"):
        read_table(path)


def test_write_read_fit(tmp_path):
    rng = np.random.default_rng(3)
    d = design(rng, 50, 6, signal=1.0)
    eig, _, _ = eigen(rng, d)
    path = fit_path(d, eig, fixed_null(d), (0.0, 0.5), n_lambda=5)
    write_fit(tmp_path / "fit.tsv", path)
    summary, coefs = read_fit(tmp_path / "fit.tsv")
    assert len(summary) == 10
    last = path.point(1, 4)
    assert summary[-1]["lambda"] == last.lam
    assert summary[-1]["n_beta"] == np.count_nonzero(last.beta)
    rows = [c for c in coefs if c["rho"] == 0.5 and c["lambda_index"] == 4 and c["effect"] == "beta"]
    got = {c["variant"]: c["value"] for c in rows}
    want = {path.variant_ids[j]: last.beta[j] for j in np.flatnonzero(last.beta)}
    assert got == want
