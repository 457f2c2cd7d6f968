"""Command-line entry point: ``imml {qc,synth,train,eval,cv}``.

Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration,
3 numerical failure during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from typing import Any, Dict, List, Optional

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, resolve_config
from .core import NonFiniteError
from .data import DataFormatError, SynthConfig, load_dataset, synth_generate, write_dataset
from .estimators import (IncompleteMultimodalModel, MultimodalTeacher, UnimodalTransformer,
                         load_estimator)
from .experiment import GRID_KINDS, cross_validate, write_results_table
from .qc import GenotypeFormatError, qc_pipeline, read_genotype_file, write_genotype_file
from .training import TrainConfig, TrainingDivergedError

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("imml")


class UsageError(ValueError):
    pass


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return raw


# -- argument wiring ---------------------------------------------------

_TRAIN_FLAGS = {f.name: f.type for f in fields(TrainConfig)}


def _add_hyperparams(p: argparse.ArgumentParser) -> None:
    types = {"int": int, "float": float, "str": str}
    for f in fields(TrainConfig):
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                       type=types.get(kind, str), help=f"override {f.name}")


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", dest="synth.n", type=int)
    p.add_argument("--m1", dest="synth.m1", type=int)
    p.add_argument("--m2", dest="synth.m2", type=int)
    p.add_argument("--latent-dim", dest="synth.latent_dim", type=int)
    p.add_argument("--shared-signal", dest="synth.shared_signal", type=float)
    p.add_argument("--noise-sd", dest="synth.noise_sd", type=float)


def _overrides(args: argparse.Namespace, extra: List[str] = ()) -> Dict[str, Any]:
    keys = list(_TRAIN_FLAGS) + [k for k in vars(args) if k.startswith("synth.")] + list(extra)
    return {k: getattr(args, k, None) for k in keys}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imml", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qc", help="genotype quality control")
    p.add_argument("--config", help="JSON with missing_thr, maf_thr, hwe_thr, input")
    p.add_argument("--input")
    p.add_argument("--output", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--missing-thr", dest="missing_thr", type=float)
    p.add_argument("--maf-thr", dest="maf_thr", type=float)
    p.add_argument("--hwe-thr", dest="hwe_thr", type=float)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--n-classes", dest="synth.n_classes", type=int)
    p.add_argument("--seed", type=int)
    _add_synth_flags(p)

    p = sub.add_parser("train", help="fit one model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--kind", choices=("m", "u", "vanilla-transformer", "mlp-ablation"))
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--teacher", help="M checkpoint; required for --kind u")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report JSON (default: <out>.json)")
    _add_hyperparams(p)

    p = sub.add_parser("eval", help="score a checkpoint on labelled data")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--out", required=True, help="metrics JSON")

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--config")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--synth", action="store_true", help="use synthetic data from the config")
    p.add_argument("--kind", choices=("m", "u", "vanilla-transformer", "mlp-ablation",
                                      "unimodal-ablation"))
    p.add_argument("--grid", action="store_true", help="run the four-row ablation grid")
    p.add_argument("--k-folds", dest="k_folds", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True, help="results JSON")
    p.add_argument("--table", help="CSV summary table")
    _add_hyperparams(p)
    _add_synth_flags(p)
    return parser


# -- commands ----------------------------------------------------------

def _cmd_qc(args) -> None:
    raw = _read_json(args.config) if args.config else {}
    allowed = {"input", "missing_thr", "maf_thr", "hwe_thr"}
    bad = set(raw) - allowed
    if bad:
        raise ConfigError(f"unknown qc config keys: {sorted(bad)}")
    cfg = {"input": None, "missing_thr": 0.95, "maf_thr": 0.05, "hwe_thr": 1e-6, **raw}
    for key in allowed:
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if not cfg["input"]:
        raise UsageError("qc needs --input")
    G = read_genotype_file(cfg["input"])
    out, report = qc_pipeline(G, cfg["missing_thr"], cfg["maf_thr"], cfg["hwe_thr"])
    write_genotype_file(out, args.output)
    _write_json(args.report, {"config": cfg, "report": report.to_dict()})
    log.info("qc: %d of %d SNPs kept", report.surviving, report.input_snps)


def _cmd_synth(args) -> None:
    cfg = resolve_config(args.config, {"task": args.task, "seed": args.seed,
                                       **{k: v for k, v in vars(args).items() if k.startswith("synth.")}})
    ds = synth_generate(cfg.synth)
    os.makedirs(args.out_dir, exist_ok=True)
    write_dataset(ds, os.path.join(args.out_dir, "features.csv"),
                  os.path.join(args.out_dir, "labels.csv"))
    _write_json(os.path.join(args.out_dir, "config.json"), cfg.to_dict())


def _load_data(cfg: ExperimentConfig, n_classes: Optional[int] = None):
    if not cfg.features or not cfg.labels:
        raise UsageError("--features and --labels are required")
    return load_dataset(cfg.features, cfg.labels, cfg.task,
                        n_classes if n_classes is not None else cfg.n_classes)


def _cmd_train(args) -> None:
    cfg = resolve_config(args.config, _overrides(args, ["kind", "features", "labels", "teacher"]))
    if cfg.kind == "unimodal-ablation":
        raise UsageError("train supports m, u, vanilla-transformer and mlp-ablation")
    params = cfg.estimator_params()
    teacher = None
    if cfg.kind == "u":
        if not cfg.teacher:
            raise UsageError("--kind u requires --teacher pointing at an M checkpoint")
        teacher = load_estimator(cfg.teacher)
        if not isinstance(teacher, MultimodalTeacher):
            raise UsageError(f"{cfg.teacher} is not an M checkpoint")
        if teacher.task != cfg.task:
            raise UsageError(f"teacher task {teacher.task!r} differs from {cfg.task!r}")
    ds = _load_data(cfg)
    if cfg.kind == "m":
        est = MultimodalTeacher(**params).fit(ds.x_mri, ds.y, X_gen=ds.x_gen)
    elif cfg.kind == "u":
        est = IncompleteMultimodalModel(**params).fit(ds.x_mri, ds.y, X_gen=ds.x_gen,
                                                      teacher=teacher)
    elif cfg.kind == "mlp-ablation":
        est = IncompleteMultimodalModel(**{**params, "backbone": "mlp"})
        est.fit(ds.x_mri, ds.y, X_gen=ds.x_gen)
    else:
        est = UnimodalTransformer(**params).fit(ds.x_mri, ds.y)
    est.save(args.out)
    report = {"config": cfg.to_dict(), "train": est.report_.to_dict(),
              "train_metrics": est.score_metrics(ds.x_mri, ds.y, X_gen=ds.x_gen)}
    _write_json(args.report or args.out + ".json", report)


def _cmd_eval(args) -> None:
    raw = _read_json(args.config) if args.config else {}
    bad = set(raw) - {"model", "features", "labels", "task"}
    if bad:
        raise ConfigError(f"unknown eval config keys: {sorted(bad)}")
    cfg = {"model": None, "features": None, "labels": None, "task": None, **raw}
    for key in ("model", "features", "labels", "task"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if not cfg["model"] or not cfg["features"] or not cfg["labels"]:
        raise UsageError("eval needs --model, --features and --labels")
    header, _ = load_checkpoint(cfg["model"])
    if cfg["task"] is None:
        cfg["task"] = header["task"]
    elif cfg["task"] != header["task"]:
        raise UsageError(f"checkpoint was trained for {header['task']!r}, "
                         f"labels declared as {cfg['task']!r}")
    est = load_estimator(cfg["model"])
    ds = load_dataset(cfg["features"], cfg["labels"], cfg["task"],
                      header["dims"]["n_classes"])
    metrics = est.score_metrics(ds.x_mri, ds.y, X_gen=ds.x_gen)
    _write_json(args.out, {"config": cfg, "kind": header["kind"], "n": len(ds),
                           "metrics": metrics})


def _cmd_cv(args) -> None:
    cfg = resolve_config(args.config, _overrides(args, ["kind", "features", "labels",
                                                        "k_folds", "jobs"]))
    if args.grid:
        cfg.grid = True
    if cfg.grid:
        kinds = list(GRID_KINDS)
    else:
        kinds = [cfg.kind]
    if args.synth or not cfg.features:
        ds = synth_generate(cfg.synth)
        source = "synth"
    else:
        ds = _load_data(cfg)
        source = "files"
    params = cfg.estimator_params()
    if ds.task == "classification":
        params["n_classes"] = ds.n_classes
    result = cross_validate(ds, kinds, params, k=cfg.k_folds, seed=cfg.seed, jobs=cfg.jobs)
    payload = {"config": cfg.to_dict(), "data": source, **result}
    _write_json(args.out, payload)
    if args.table:
        write_results_table(result, args.table, ds.task)


COMMANDS = {"qc": _cmd_qc, "synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval,
            "cv": _cmd_cv}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (TrainingDivergedError, NonFiniteError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, DataFormatError, GenotypeFormatError,
            CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
