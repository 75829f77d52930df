"""PLINK 1 binary genotypes, delimited phenotype tables and fit reports."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

BED_MAGIC = bytes([0x6C, 0x1B, 0x01])

# 2-bit code (low bits first) -> count of the .bim A1 allele
_CODE_TO_A1 = np.array([2.0, np.nan, 1.0, 0.0])
_CODE_TO_A2 = np.array([0.0, np.nan, 1.0, 2.0])


class BedFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BedTriplet:
    bed: Path
    bim: Path
    fam: Path

    @classmethod
    def from_prefix(cls, prefix) -> "BedTriplet":
        prefix = str(prefix)
        for ext in (".bed", ".bim", ".fam"):
            if prefix.endswith(ext):
                prefix = prefix[: -len(ext)]
        return cls(Path(prefix + ".bed"), Path(prefix + ".bim"), Path(prefix + ".fam"))

    def samples(self) -> list[str]:
        return [row[1] for row in _read_whitespace(self.fam, 6)]

    def variants(self) -> list[dict]:
        rows = _read_whitespace(self.bim, 6)
        return [dict(chrom=r[0], id=r[1], cm=r[2], pos=r[3], a1=r[4], a2=r[5]) for r in rows]

    @property
    def n(self) -> int:
        return len(self.samples())

    @property
    def p(self) -> int:
        return len(self.variants())


def _read_whitespace(path, ncol: int) -> list[list[str]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < ncol:
                raise BedFormatError(f"{path}:{lineno}: expected {ncol} columns, found {len(parts)}")
            rows.append(parts)
    return rows


def read_bed(triplet: BedTriplet, variant_subset: Sequence[int] | None = None,
             count_a1: bool = True) -> np.ndarray:
    """Decode a variant-major .bed file into an n x p float matrix.

    Entries are the number of copies of the counted allele (A1 by default),
    NaN for missing calls.
    """
    n = triplet.n
    p = triplet.p
    bytes_per = (n + 3) // 4
    raw = Path(triplet.bed).read_bytes()
    if raw[:2] != BED_MAGIC[:2]:
        raise BedFormatError(f"{triplet.bed}: bad magic bytes {raw[:2].hex()}")
    if len(raw) < 3 or raw[2] != 0x01:
        raise BedFormatError(f"{triplet.bed}: only variant-major mode (0x01) is supported")
    expected = 3 + p * bytes_per
    if len(raw) != expected:
        raise BedFormatError(f"{triplet.bed}: length {len(raw)} bytes, expected {expected} for n={n}, p={p}")
    block = np.frombuffer(raw, dtype=np.uint8, offset=3).reshape(p, bytes_per)
    if variant_subset is not None:
        idx = np.asarray(variant_subset, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= p):
            raise IndexError(f"variant index out of range for p={p}")
        block = block[idx]
    return decode_bed_block(block, n, count_a1)


def decode_bed_block(block: np.ndarray, n: int, count_a1: bool = True) -> np.ndarray:
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    codes = (block[:, :, None] >> shifts) & 0b11
    codes = codes.reshape(block.shape[0], -1)[:, :n]
    table = _CODE_TO_A1 if count_a1 else _CODE_TO_A2
    return table[codes].T.copy()


def encode_bed_block(G: np.ndarray, count_a1: bool = True) -> np.ndarray:
    """Inverse of ``decode_bed_block``: n x p counts (NaN = missing) to p x ceil(n/4) bytes."""
    G = np.asarray(G, dtype=float)
    n, p = G.shape
    counts = G if count_a1 else 2.0 - G
    codes = np.full((p, 4 * ((n + 3) // 4)), 0, dtype=np.uint8)
    c = np.empty((p, n), dtype=np.uint8)
    gt = counts.T
    miss = np.isnan(gt)
    if np.any(~miss & ~np.isin(gt, (0.0, 1.0, 2.0))):
        raise ValueError("genotype counts must be 0, 1, 2 or NaN")
    c[gt == 2.0] = 0b00
    c[gt == 1.0] = 0b10
    c[gt == 0.0] = 0b11
    c[miss] = 0b01
    codes[:, :n] = c
    codes = codes.reshape(p, -1, 4)
    return (codes[:, :, 0] | (codes[:, :, 1] << 2) | (codes[:, :, 2] << 4) | (codes[:, :, 3] << 6)).astype(np.uint8)


def write_bed(prefix, G: np.ndarray, sample_ids: Sequence[str] | None = None,
              variant_ids: Sequence[str] | None = None, alleles=("A", "G"),
              chrom: str = "1", sex: Sequence[int] | None = None,
              phenotype: Sequence[float] | None = None) -> BedTriplet:
    """Write genotypes (counts of A1) as a PLINK 1 triplet."""
    G = np.asarray(G, dtype=float)
    n, p = G.shape
    trip = BedTriplet.from_prefix(prefix)
    sample_ids = list(sample_ids) if sample_ids is not None else [f"s{i}" for i in range(n)]
    variant_ids = list(variant_ids) if variant_ids is not None else [f"rs{j}" for j in range(p)]
    with open(trip.bed, "wb") as fh:
        fh.write(BED_MAGIC)
        fh.write(encode_bed_block(G).tobytes())
    with open(trip.bim, "w") as fh:
        for j, vid in enumerate(variant_ids):
            fh.write(f"{chrom}\t{vid}\t0\t{j + 1}\t{alleles[0]}\t{alleles[1]}\n")
    with open(trip.fam, "w") as fh:
        for i, sid in enumerate(sample_ids):
            sx = 0 if sex is None else int(sex[i])
            ph = -9 if phenotype is None else phenotype[i]
            fh.write(f"{sid}\t{sid}\t0\t0\t{sx}\t{ph}\n")
    return trip


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def read_table(path, columns: Sequence[str] | None = None, order: Sequence[str] | None = None,
               id_column: str | None = None) -> dict[str, np.ndarray]:
    """Read a delimited table with a header row.

    The id column is ``id_column`` if given, else ``IID`` when present,
    else the first column. Requested ``columns`` are coerced to float.
    When ``order`` is given the rows are aligned to it by id; ids in
    ``order`` without a table row raise ``KeyError``.

    Returns a dict with key ``"id"`` plus one array per column.
    """
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.strip():
            raise ValueError(f"{path}: empty file or missing header")
        delim = _sniff_delimiter(header)
        names = [h.strip() for h in header.rstrip("\r\n").split(delim)]
        reader = csv.reader(fh, delimiter=delim)
        rows = [r for r in reader if r and any(x.strip() for x in r)]
    if id_column is None:
        id_column = "IID" if "IID" in names else names[0]
    if id_column not in names:
        raise KeyError(f"{path}: id column {id_column!r} not in header {names}")
    id_pos = names.index(id_column)
    wanted = [c for c in names if c not in (id_column, "FID")] if columns is None else list(columns)
    missing_cols = [c for c in wanted if c not in names]
    if missing_cols:
        raise KeyError(f"{path}: column(s) {missing_cols} not in header {names}")
    ids = [r[id_pos].strip() for r in rows]
    out: dict[str, np.ndarray] = {}
    for c in wanted:
        k = names.index(c)
        vals = np.empty(len(rows))
        for i, r in enumerate(rows):
            cell = r[k].strip() if k < len(r) else ""
            try:
                vals[i] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric value {cell!r} at row {i + 2}, column {c!r}") from None
        out[c] = vals
    if order is not None:
        pos = {s: i for i, s in enumerate(ids)}
        unmatched = [s for s in order if s not in pos]
        if unmatched:
            raise KeyError(f"{path}: {len(unmatched)} sample id(s) without a row, first: {unmatched[:10]}")
        idx = np.array([pos[s] for s in order], dtype=int)
        out = {c: v[idx] for c, v in out.items()}
        ids = list(order)
    out["id"] = np.array(ids, dtype=object)
    return out


# ---------------------------------------------------------------- fit report

_SUMMARY_FIELDS = ["rho", "lambda_index", "lambda", "n_beta", "n_gamma", "model_size", "objective",
                   "n_outer", "converged", "kkt_max", "cv_deviance", "cv_deviance_se", "cv_auc",
                   "cv_auc_se", "error"]
_COEF_FIELDS = ["rho", "lambda_index", "lambda", "variant", "effect", "value"]


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "NA" if math.isnan(x) else repr(float(x))
    return str(x).replace("\t", " ").replace("\n", " ")


def write_fit(path, path_result, cv=None) -> None:
    """Write a path (and optional CV statistics) as a tab-separated report.

    Layout: a ``#summary`` block with one row per grid point (unpenalized
    effects appended as ``theta:<name>`` and ``alpha`` columns), followed by
    a ``#coefficients`` block with one row per nonzero beta/gamma.
    """
    cv_stats = {}
    if cv is not None:
        for r_i, rho in enumerate(cv.rho_grid):
            for l_i in range(cv.mean_deviance.shape[1]):
                cv_stats[(r_i, l_i)] = (cv.mean_deviance[r_i, l_i], cv.se_deviance[r_i, l_i],
                                        cv.mean_auc[r_i, l_i], cv.se_auc[r_i, l_i])
    names = list(path_result.covariate_names)
    lines = ["#summary", "\t".join(_SUMMARY_FIELDS + [f"theta:{c}" for c in names] + ["alpha"])]
    coef_lines = ["#coefficients", "\t".join(_COEF_FIELDS)]
    vids = path_result.variant_ids
    for r_i, rho in enumerate(path_result.rho_grid):
        for l_i, pt in enumerate(path_result.points[r_i]):
            dev, dev_se, auc_, auc_se = cv_stats.get((r_i, l_i), (None, None, None, None))
            nb = int(np.count_nonzero(pt.beta)) if pt.beta is not None else 0
            ng = int(np.count_nonzero(pt.gamma)) if pt.gamma is not None else 0
            row = [rho, l_i, pt.lam, nb, ng, nb + ng, pt.objective, pt.n_outer, pt.converged,
                   pt.kkt_max, dev, dev_se, auc_, auc_se, pt.error]
            theta = pt.theta if pt.theta is not None else [float("nan")] * len(names)
            alpha = pt.alpha if pt.alpha is not None else float("nan")
            lines.append("\t".join(_fmt(x) for x in row + list(theta) + [alpha]))
            if pt.beta is None:
                continue
            for j in np.flatnonzero((pt.beta != 0) | (pt.gamma != 0)):
                for eff, val in (("beta", pt.beta[j]), ("gamma", pt.gamma[j])):
                    if val != 0:
                        coef_lines.append("\t".join(_fmt(x) for x in (rho, l_i, pt.lam, vids[j], eff, val)))
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines + coef_lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write fit report to {path}: {exc}") from exc


def read_fit(path) -> tuple[list[dict], list[dict]]:
    """Parse a report written by ``write_fit`` into (summary rows, coefficient rows)."""
    blocks: dict[str, list[dict]] = {"summary": [], "coefficients": []}
    current = None
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                current = line[1:]
                header = None
                continue
            if header is None:
                header = line.split("\t")
                continue
            rec = {}
            for k, v in zip(header, line.split("\t")):
                if k in ("variant", "effect", "error"):
                    rec[k] = None if v == "NA" else v
                elif k in ("lambda_index", "n_beta", "n_gamma", "model_size", "n_outer", "converged"):
                    rec[k] = None if v == "NA" else int(v)
                else:
                    rec[k] = float("nan") if v == "NA" else float(v)
            blocks[current].append(rec)
    return blocks["summary"], blocks["coefficients"]


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
