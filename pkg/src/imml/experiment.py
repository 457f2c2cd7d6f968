"""k-fold cross-validation over model kinds, including the four-row ablation grid."""
from __future__ import annotations

import csv
import math
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import MultimodalDataset, kfold_split
from .estimators import IncompleteMultimodalModel, MultimodalTeacher, UnimodalTransformer

KINDS = ("m", "u", "vanilla-transformer", "mlp-ablation", "unimodal-ablation")
GRID_KINDS = ("vanilla-transformer", "mlp-ablation", "m", "u")
REGRESSION_METRICS = ("rmse", "r2")
CLASSIFICATION_METRICS = ("accuracy", "precision", "recall", "f1")


def metric_names(task: str):
    return REGRESSION_METRICS if task == "regression" else CLASSIFICATION_METRICS


def run_fold(kinds: Sequence[str], train: MultimodalDataset, test: MultimodalDataset,
             params: Dict) -> Dict[str, Dict]:
    """Fit every requested kind on ``train`` and score it on ``test``.

    Kinds built on the transformer teacher share one teacher fit per fold.
    """
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown model kind {k!r}")
    out: Dict[str, Dict] = {}
    teacher = None
    if {"m", "u", "unimodal-ablation"} & set(kinds):
        teacher = MultimodalTeacher(**params).fit(train.x_mri, train.y, X_gen=train.x_gen)
    for kind in kinds:
        if kind == "m":
            est = teacher
            out[kind] = est.score_metrics(test.x_mri, test.y, X_gen=test.x_gen)
            continue
        if kind == "u":
            est = IncompleteMultimodalModel(**params).fit(train.x_mri, train.y,
                                                          X_gen=train.x_gen, teacher=teacher)
        elif kind == "unimodal-ablation":
            est = IncompleteMultimodalModel(**{**params, "alpha": 0.0, "beta": 0.0})
            est.fit(train.x_mri, train.y, X_gen=train.x_gen, teacher=teacher)
        elif kind == "mlp-ablation":
            est = IncompleteMultimodalModel(**{**params, "backbone": "mlp"})
            est.fit(train.x_mri, train.y, X_gen=train.x_gen)
        else:
            est = UnimodalTransformer(**params).fit(train.x_mri, train.y)
        out[kind] = est.score_metrics(test.x_mri, test.y)
    return out


def aggregate(values: Iterable[Optional[float]]) -> Dict[str, Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "sd": None}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()),
            "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}


def cross_validate(ds: MultimodalDataset, kinds: Sequence[str], params: Dict,
                   k: int = 5, seed: int = 0, jobs: int = 1) -> Dict:
    """Run ``kinds`` over a seeded k-fold plan; folds are reported in index order."""
    plan = kfold_split(len(ds), k, seed)

    def one(i):
        tr, te = plan.split(i)
        return run_fold(kinds, ds.subset(tr), ds.subset(te), params)

    if jobs > 1:
        from joblib import Parallel, delayed
        per_fold = Parallel(n_jobs=jobs)(delayed(one)(i) for i in range(plan.k))
    else:
        per_fold = [one(i) for i in range(plan.k)]

    names = metric_names(ds.task)
    summary = {}
    for kind in kinds:
        summary[kind] = {m: aggregate(f[kind][m] for f in per_fold) for m in names}
    folds = [{"fold": i, "test_size": int(len(plan.folds[i])),
              "metrics": {kind: {m: f[kind][m] for m in names} for kind in kinds}}
             for i, f in enumerate(per_fold)]
    return {"k": k, "seed": seed, "kinds": list(kinds), "folds": folds, "summary": summary}


def write_results_table(result: Dict, path, task: str) -> List[List]:
    """Flat CSV: one row per model kind, mean and sd columns per metric."""
    names = metric_names(task)
    header = ["kind"] + [f"{m}_{s}" for m in names for s in ("mean", "sd")]
    rows = []
    for kind in result["kinds"]:
        row = [kind]
        for m in names:
            agg = result["summary"][kind][m]
            row += ["" if agg["mean"] is None else repr(agg["mean"]),
                    "" if agg["sd"] is None else repr(agg["sd"])]
        rows.append(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return [header] + rows
