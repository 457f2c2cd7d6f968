"""SNP quality control: missingness, round-mean imputation, MAF and HWE filters.

Genotypes use additive minor-allele dosage coding {0, 1, 2}; missing cells are
NaN in memory and the literal ``NA`` on disk.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

MISSING_TOKEN = "NA"


class GenotypeFormatError(ValueError):
    pass


@dataclass
class GenotypeMatrix:
    subjects: List[str]
    snps: List[str]
    values: np.ndarray  # n x m float, NaN = missing

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, m = self.values.shape
        if len(self.subjects) != n or len(self.snps) != m:
            raise GenotypeFormatError("identifier counts do not match the value matrix")
        if len(set(self.subjects)) != n:
            raise GenotypeFormatError("duplicate subject identifiers")
        if len(set(self.snps)) != m:
            raise GenotypeFormatError("duplicate SNP identifiers")
        obs = self.values[~np.isnan(self.values)]
        if not np.isin(obs, (0.0, 1.0, 2.0)).all():
            raise GenotypeFormatError("observed genotypes must be 0, 1 or 2")

    @property
    def shape(self):
        return self.values.shape

    def select(self, keep: Sequence[int]) -> "GenotypeMatrix":
        keep = list(keep)
        return GenotypeMatrix(list(self.subjects), [self.snps[j] for j in keep],
                              self.values[:, keep])


@dataclass
class QcReport:
    input_snps: int
    removed_missingness: int
    removed_maf: int
    removed_hwe: int
    imputed_cells: int
    surviving: int
    thresholds: Dict[str, float]
    removed_ids: Dict[str, List[str]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def filter_missingness(G: GenotypeMatrix, threshold: float = 0.95) -> Tuple[GenotypeMatrix, List[str]]:
    """Drop SNPs whose missing fraction is strictly greater than ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("missingness threshold must lie in (0, 1]")
    frac = np.isnan(G.values).mean(axis=0) if G.values.shape[0] else np.zeros(G.shape[1])
    drop = frac > threshold
    return G.select(np.flatnonzero(~drop)), [s for s, d in zip(G.snps, drop) if d]


def round_half_up(x):
    # dosages are non-negative, so half-up equals half-away-from-zero
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def column_round_means(values: np.ndarray) -> np.ndarray:
    observed = ~np.isnan(values)
    counts = observed.sum(axis=0)
    if (counts == 0).any():
        bad = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"column {bad} has no observed genotypes; filter it first")
    means = np.where(observed, values, 0.0).sum(axis=0) / counts
    return round_half_up(means)


def impute_round_mean(G: GenotypeMatrix) -> GenotypeMatrix:
    """Fill each missing cell with the rounded mean of its column's observed values."""
    fill = column_round_means(G.values)
    vals = np.where(np.isnan(G.values), fill[None, :], G.values)
    return GenotypeMatrix(list(G.subjects), list(G.snps), vals)


def maf(column) -> float:
    col = np.asarray(column, dtype=np.float64)
    if col.size == 0:
        raise ValueError("empty column")
    p = col.mean() / 2.0
    return float(min(p, 1.0 - p))


def genotype_counts(column) -> Tuple[int, int, int]:
    col = np.asarray(column)
    return int((col == 0).sum()), int((col == 1).sum()), int((col == 2).sum())


def hwe_p_value(n0: int, n1: int, n2: int) -> float:
    """Chi-square (1 dof) goodness-of-fit test against Hardy-Weinberg proportions."""
    n = n0 + n1 + n2
    if n <= 0:
        raise ValueError("all genotype counts are zero")
    p = (2.0 * n2 + n1) / (2.0 * n)
    expected = (n * (1 - p) ** 2, 2 * n * p * (1 - p), n * p ** 2)
    stat = sum((o - e) ** 2 / e for o, e in zip((n0, n1, n2), expected) if e > 0)
    if stat == 0.0:
        return 1.0
    return float(min(1.0, max(0.0, chi2.sf(stat, df=1))))


def qc_pipeline(G: GenotypeMatrix, missing_thr: float = 0.95, maf_thr: float = 0.05,
                hwe_thr: float = 1e-6) -> Tuple[GenotypeMatrix, QcReport]:
    """Missingness filter -> imputation -> MAF filter -> HWE filter, in that order."""
    n_in = G.shape[1]
    G1, miss_ids = filter_missingness(G, missing_thr)
    imputed = int(np.isnan(G1.values).sum())
    G2 = impute_round_mean(G1)

    mafs = [maf(G2.values[:, j]) for j in range(G2.shape[1])]
    keep = [j for j, f in enumerate(mafs) if not f < maf_thr]
    maf_ids = [G2.snps[j] for j, f in enumerate(mafs) if f < maf_thr]
    G3 = G2.select(keep)

    pvals = [hwe_p_value(*genotype_counts(G3.values[:, j])) for j in range(G3.shape[1])]
    keep = [j for j, p in enumerate(pvals) if not p < hwe_thr]
    hwe_ids = [G3.snps[j] for j, p in enumerate(pvals) if p < hwe_thr]
    G4 = G3.select(keep)

    report = QcReport(
        input_snps=n_in,
        removed_missingness=len(miss_ids),
        removed_maf=len(maf_ids),
        removed_hwe=len(hwe_ids),
        imputed_cells=imputed,
        surviving=G4.shape[1],
        thresholds={"missing": missing_thr, "maf": maf_thr, "hwe": hwe_thr},
        removed_ids={"missingness": miss_ids, "maf": maf_ids, "hwe": hwe_ids},
    )
    return G4, report


class GenotypeQC(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`qc_pipeline`.

    ``fit`` decides which SNP columns survive and the round-mean fill value of
    each; ``transform`` imputes with those values and keeps the survivors, so
    the same QC learned on a training cohort can be applied to new subjects.
    """

    def __init__(self, missing_thr=0.95, maf_thr=0.05, hwe_thr=1e-6):
        self.missing_thr = missing_thr
        self.maf_thr = maf_thr
        self.hwe_thr = hwe_thr

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        names = [f"snp{j}" for j in range(X.shape[1])]
        G = GenotypeMatrix([str(i) for i in range(X.shape[0])], names, X)
        out, report = qc_pipeline(G, self.missing_thr, self.maf_thr, self.hwe_thr)
        kept = set(out.snps)
        self.support_ = np.array([s in kept for s in names])
        fill = np.zeros(X.shape[1])
        survivors_missing = np.flatnonzero(np.isnan(X).mean(axis=0) <= self.missing_thr)
        fill[survivors_missing] = column_round_means(X[:, survivors_missing])
        self.fill_values_ = fill
        self.report_ = report
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} SNP columns, got {X.shape[1]}")
        X = np.where(np.isnan(X), self.fill_values_[None, :], X)
        return X[:, self.support_]

    def get_support(self):
        check_is_fitted(self, "support_")
        return self.support_.copy()


def read_genotype_file(path, delimiter: str = ",") -> GenotypeMatrix:
    """Parse a genotype table: header of SNP ids, first column subject ids."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows or len(rows[0]) < 2:
        raise GenotypeFormatError(f"{path}: missing header row with SNP identifiers")
    snps = [s.strip() for s in rows[0][1:]]
    subjects, data = [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(snps) + 1:
            raise GenotypeFormatError(f"{path}: line {i} has {len(row) - 1} cells, "
                                      f"expected {len(snps)}")
        subjects.append(row[0].strip())
        vals = []
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == MISSING_TOKEN:
                vals.append(math.nan)
            elif cell in ("0", "1", "2"):
                vals.append(float(cell))
            else:
                raise GenotypeFormatError(f"{path}: line {i}, column {snps[j]!r}: "
                                          f"invalid genotype {cell!r}")
        data.append(vals)
    values = np.array(data, dtype=np.float64).reshape(len(subjects), len(snps))
    return GenotypeMatrix(subjects, snps, values)


def write_genotype_file(G: GenotypeMatrix, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["subject_id"] + list(G.snps))
        for sid, row in zip(G.subjects, G.values):
            w.writerow([sid] + [MISSING_TOKEN if np.isnan(v) else str(int(v)) for v in row])
