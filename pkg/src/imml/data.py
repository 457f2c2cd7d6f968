"""Multimodal datasets: container, CSV I/O, synthetic generator and k-fold plans.

Feature files are comma-separated with a header row. The first column holds the
subject id; MRI columns are prefixed ``mri_`` and genetic columns ``gen_``.
Label files have two columns, ``subject_id`` and ``label``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import make_rng

log = logging.getLogger(__name__)

MRI_PREFIX = "mri_"
GEN_PREFIX = "gen_"


class DataFormatError(ValueError):
    pass


@dataclass
class MultimodalDataset:
    x_mri: np.ndarray
    x_gen: Optional[np.ndarray]
    y: np.ndarray
    ids: List[str]
    task: str = "regression"
    n_classes: int = 0
    latent: Optional[np.ndarray] = None  # only set by the synthetic generator
    dropped_labels: int = 0

    def __post_init__(self):
        self.x_mri = np.asarray(self.x_mri, dtype=np.float64)
        n = self.x_mri.shape[0]
        if self.x_gen is not None:
            self.x_gen = np.asarray(self.x_gen, dtype=np.float64)
            if self.x_gen.shape[0] != n:
                raise DataFormatError("MRI and genetic blocks have different row counts")
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.y.shape[0] != n or len(self.ids) != n:
            raise DataFormatError("labels/ids do not match the number of rows")
        if self.task == "classification":
            if self.n_classes < 2:
                self.n_classes = int(self.y.max()) + 1 if n else 0
            if n and (self.y.min() < 0 or self.y.max() >= self.n_classes
                      or not np.all(self.y == np.round(self.y))):
                raise DataFormatError(f"class labels must be integers in [0, {self.n_classes})")

    def __len__(self):
        return self.x_mri.shape[0]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultimodalDataset(
            self.x_mri[idx], None if self.x_gen is None else self.x_gen[idx], self.y[idx],
            [self.ids[i] for i in idx], self.task, self.n_classes,
            None if self.latent is None else self.latent[idx])


@dataclass
class SynthConfig:
    n: int = 1000
    m1: int = 40
    m2: int = 60
    latent_dim: int = 8
    shared_signal: float = 0.8
    noise_sd: float = 1.0
    seed: int = 0
    task: str = "regression"
    n_classes: int = 3

    def __post_init__(self):
        for name in ("n", "m1", "m2", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.shared_signal <= 1.0:
            raise ValueError("shared_signal must lie in [0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


def synth_generate(cfg: SynthConfig) -> MultimodalDataset:
    """Two noisy views of a shared Gaussian latent plus a label driven by it.

    ``x_mri = A u + e1``, ``x_gen = B (s u + (1 - s) w) + e2`` with ``w`` an
    independent latent, and ``y = c . u + e`` (or the argmax of ``C u + e``).
    """
    rng = make_rng(cfg.seed, "synth")
    L = cfg.latent_dim
    A = rng.standard_normal((cfg.m1, L)) / math.sqrt(L)
    B = rng.standard_normal((cfg.m2, L)) / math.sqrt(L)
    n_out = 1 if cfg.task == "regression" else cfg.n_classes
    C = rng.standard_normal((n_out, L)) / math.sqrt(L)

    u = rng.standard_normal((cfg.n, L))
    w = rng.standard_normal((cfg.n, L))
    x_mri = u @ A.T + cfg.noise_sd * rng.standard_normal((cfg.n, cfg.m1))
    s = cfg.shared_signal
    x_gen = (s * u + (1.0 - s) * w) @ B.T + cfg.noise_sd * rng.standard_normal((cfg.n, cfg.m2))
    out = u @ C.T + cfg.noise_sd * rng.standard_normal((cfg.n, n_out))
    if cfg.task == "regression":
        y = out[:, 0]
        n_classes = 0
    else:
        y = out.argmax(axis=1).astype(np.float64)
        n_classes = cfg.n_classes
    ids = [f"S{i:05d}" for i in range(cfg.n)]
    return MultimodalDataset(x_mri, x_gen, y, ids, cfg.task, n_classes, latent=u)


# --------------------------------------------------------------------------
# files

def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    return rows[0], rows[1:]


def _float(cell: str, path, line: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataFormatError(f"{path}: line {line}, column {col!r}: "
                              f"non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"{path}: line {line}, column {col!r}: non-finite value")
    return v


def load_dataset(features_path, labels_path=None, task: str = "regression",
                 n_classes: int = 0) -> MultimodalDataset:
    """Inner-join a feature table with a label table on subject id.

    Feature rows without a label are dropped; the count is logged and kept in
    ``dropped_labels``. Without a label file, labels are all zero.
    """
    header, rows = _read_rows(features_path)
    cols = [c.strip() for c in header[1:]]
    mri_idx = [j for j, c in enumerate(cols) if c.startswith(MRI_PREFIX)]
    gen_idx = [j for j, c in enumerate(cols) if c.startswith(GEN_PREFIX)]
    other = [c for c in cols if not c.startswith((MRI_PREFIX, GEN_PREFIX))]
    if other:
        raise DataFormatError(f"{features_path}: columns without mri_/gen_ prefix: {other[:5]}")
    if not mri_idx:
        raise DataFormatError(f"{features_path}: no mri_ columns")

    ids, feats = [], []
    seen = set()
    for i, row in enumerate(rows, start=2):
        if len(row) != len(cols) + 1:
            raise DataFormatError(f"{features_path}: line {i} has {len(row) - 1} cells, "
                                  f"expected {len(cols)}")
        sid = row[0].strip()
        if sid in seen:
            raise DataFormatError(f"{features_path}: duplicate subject id {sid!r}")
        seen.add(sid)
        ids.append(sid)
        feats.append([_float(c, features_path, i, cols[j]) for j, c in enumerate(row[1:])])
    X = np.array(feats, dtype=np.float64).reshape(len(ids), len(cols))

    if labels_path is None:
        labels = {sid: 0.0 for sid in ids}
    else:
        lheader, lrows = _read_rows(labels_path)
        labels = {}
        for i, row in enumerate(lrows, start=2):
            if len(row) != 2:
                raise DataFormatError(f"{labels_path}: line {i} must have 2 cells")
            sid = row[0].strip()
            if sid in labels:
                raise DataFormatError(f"{labels_path}: duplicate subject id {sid!r}")
            labels[sid] = _float(row[1], labels_path, i, lheader[1] if len(lheader) > 1 else "label")

    keep = [i for i, sid in enumerate(ids) if sid in labels]
    dropped = len(ids) - len(keep)
    if dropped:
        log.warning("dropped %d subject(s) without a label", dropped)
    X = X[keep]
    ds = MultimodalDataset(
        X[:, mri_idx], X[:, gen_idx] if gen_idx else None,
        np.array([labels[ids[i]] for i in keep]), [ids[i] for i in keep], task, n_classes)
    ds.dropped_labels = dropped
    return ds


def write_dataset(ds: MultimodalDataset, features_path, labels_path) -> None:
    m1 = ds.x_mri.shape[1]
    m2 = 0 if ds.x_gen is None else ds.x_gen.shape[1]
    with open(features_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id"] + [f"{MRI_PREFIX}{j}" for j in range(m1)]
                   + [f"{GEN_PREFIX}{j}" for j in range(m2)])
        for i, sid in enumerate(ds.ids):
            row = list(ds.x_mri[i]) + ([] if ds.x_gen is None else list(ds.x_gen[i]))
            w.writerow([sid] + [repr(float(v)) for v in row])
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label"])
        for sid, v in zip(ds.ids, ds.y):
            w.writerow([sid, str(int(v)) if ds.task == "classification" else repr(float(v))])


# --------------------------------------------------------------------------
# cross-validation

@dataclass
class FoldPlan:
    folds: List[np.ndarray] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int):
        """(train_indices, test_indices) for fold ``i``."""
        test = self.folds[i]
        train = np.concatenate([f for j, f in enumerate(self.folds) if j != i])
        return np.sort(train), np.sort(test)


def kfold_split(n: int, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then contiguous folds; the first ``n % k`` folds get one extra row."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = make_rng(seed, "folds").permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(perm[start:start + size])
        start += size
    return FoldPlan(folds)
