"""Acceptance suite: one test per criterion.

Each test records ``criterion`` and ``detail`` properties; ``conftest.py``
prints a one-line PASS/FAIL summary per criterion at the end of the run.
"""
import copy
import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import params_as_function
from imml.backbone import FusionHead, TabularBackbone, task_loss
from imml.cli import main as cli
from imml.core import grad_check, make_rng
from imml.data import SynthConfig, synth_generate
from imml.distill import ema_update, kl_imitation
from imml.experiment import cross_validate
from imml.metrics import confusion_matrix, macro_classification_metrics, r2, rmse
from imml.qc import (GenotypeMatrix, filter_missingness, hwe_p_value, impute_round_mean, maf,
                     qc_pipeline)
from imml.sphere_gan import (EPS, center_loss, d_loss, decompose, distance_loss, g_loss, huber,
                             project_to_sphere, sphere_scores)
from imml.training import TrainConfig, UTrainer, pretrain_m

GRAD_TOL = 1e-5
KINK_MARGIN = 1e-3
N_INSTANCES = 100


@pytest.fixture
def report(record_property):
    def _report(criterion, ok, detail):
        record_property("criterion", criterion)
        record_property("detail", detail)
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return _report


# ---------------------------------------------------------------------------
# 1. gradient suite

def _instances(rng, draw, valid):
    out = []
    while len(out) < N_INSTANCES:
        inst = draw(rng)
        if valid(inst):
            out.append(inst)
    return out


def _far_from_guards(h, c):
    d = np.linalg.norm(h - c, axis=1)
    dev = np.abs(d - d.mean())
    return bool((d > EPS + KINK_MARGIN).all() and (np.abs(d - 1) > KINK_MARGIN).all()
                and (np.abs(dev - 1) > KINK_MARGIN).all() and (dev > KINK_MARGIN).all())


def _scores_safe(e, c, v):
    p = (e - c) / np.linalg.norm(e - c, axis=1, keepdims=True)
    vh = v / np.linalg.norm(v)
    par = np.abs(p @ vh)
    perp = np.linalg.norm(p - np.outer(p @ vh, vh), axis=1)
    return bool(np.linalg.norm(e - c, axis=1).min() > KINK_MARGIN and par.mean() > KINK_MARGIN
                and perp.mean() > KINK_MARGIN and perp.min() > KINK_MARGIN)


def _t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def _gradient_cases():
    rng = make_rng(2024, "acceptance/grad")
    cases = {}

    def backbone_case(r):
        m, d = 3, 4
        bb = TabularBackbone(m, d, n_layers=1, n_heads=2, dropout=0.0)
        bb.reset_parameters(r)
        head = FusionHead((d,), 1)
        head.reset_parameters(r)
        x, y = _t(r.normal(size=(3, m))), _t(r.normal(size=3))
        f, p0 = params_as_function(bb, lambda z: task_loss(head(z), y, "regression"), x)
        return f, p0

    cases["backbone+task loss"] = [backbone_case(rng) for _ in range(N_INSTANCES)]

    score_inst = _instances(rng, lambda r: (r.normal(size=(5, 3)), r.normal(size=3),
                                            r.normal(size=3), r.normal(size=5)),
                            lambda i: _scores_safe(*i[:3]))

    def score_fn(e, c, v, w):
        return (sphere_scores(project_to_sphere(e, c), v).scores * w).sum()

    cases["scores"] = []
    for k, (e, c, v, w) in enumerate(score_inst):
        et, ct, vt, wt = map(_t, (e, c, v, w))
        target = k % 3
        if target == 0:
            cases["scores"].append((lambda x, ct=ct, vt=vt, wt=wt: score_fn(x, ct, vt, wt), et))
        elif target == 1:
            cases["scores"].append((lambda x, et=et, vt=vt, wt=wt: score_fn(et, x, vt, wt), ct))
        else:
            cases["scores"].append((lambda x, et=et, ct=ct, wt=wt: score_fn(et, ct, x, wt), vt))

    for name, fn in (("d_loss", d_loss), ("g_loss", g_loss)):
        cases[name] = []
        for k in range(N_INSTANCES):
            r_, f_ = _t(rng.normal(size=6) * 2), _t(rng.normal(size=6) * 2)
            eta = float(rng.uniform(0.5, 2.0))
            if k % 2:
                cases[name].append((lambda x, f_=f_, eta=eta, fn=fn: fn(x, f_, eta), r_))
            else:
                cases[name].append((lambda x, r_=r_, eta=eta, fn=fn: fn(r_, x, eta), f_))

    sphere_inst = _instances(rng, lambda r: (r.normal(size=(6, 4)) * 1.5, r.normal(size=4)),
                             lambda i: _far_from_guards(*i))
    for name, fn in (("center_loss", center_loss), ("distance_loss", distance_loss)):
        cases[name] = []
        for k, (h, c) in enumerate(sphere_inst):
            ht, ct = _t(h), _t(c)
            if k % 2:
                cases[name].append((lambda x, ct=ct, fn=fn: fn(x, ct), ht))
            else:
                cases[name].append((lambda x, ht=ht, fn=fn: fn(ht, x), ct))

    cases["kl_imitation"] = []
    for _ in range(N_INSTANCES):
        s, t = _t(rng.normal(size=(4, 3)) * 2), _t(rng.normal(size=(4, 3)) * 2)
        temp = float(rng.uniform(0.5, 4.0))
        cases["kl_imitation"].append((lambda x, t=t, temp=temp: kl_imitation(x, t, temp), s))
    return cases


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    worst = {}
    for name, insts in _gradient_cases().items():
        assert len(insts) == N_INSTANCES
        worst[name] = max(grad_check(f, x, 1e-6) for f, x in insts)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    top = max(worst.values())
    report(1, not bad and elapsed < 60.0,
           f"{len(worst)} functions x {N_INSTANCES} instances, max error {top:.2e}, "
           f"{elapsed:.1f} s" + (f", failing {sorted(bad)}" if bad else ""))


# ---------------------------------------------------------------------------
# 2. closed-form identities

def test_criterion_2_closed_form_identities(report):
    checks = {}
    ln4 = 2 * math.log(2)
    rng = np.random.default_rng(7)
    for _ in range(20):
        s = _t(np.full(5, rng.normal()))
        checks.setdefault("d_loss equal scores", []).append(abs(d_loss(s, s.clone()).item() - ln4) <= 1e-9)
        checks.setdefault("g_loss equal scores", []).append(abs(g_loss(s, s.clone()).item() - ln4) <= 1e-9)
    checks["huber at 1"] = [huber(1.0) == 0.5, 0.5 * 1.0 ** 2 == 1.0 - 0.5 == 0.5,
                            huber(_t(1.0)).item() == 0.5]
    for _ in range(20):
        p = _t(rng.normal(size=(3, 5)))
        checks.setdefault("KL(P,P)", []).append(abs(kl_imitation(p, p.clone(), 2.0).item()) <= 1e-12)
    a, b = [_t(rng.normal(size=(3, 2)))], [_t(rng.normal(size=(3, 2)))]
    a1 = [a[0].clone()]
    ema_update(a1, b, 1.0)
    a0 = [a[0].clone()]
    ema_update(a0, b, 0.0)
    checks["ema endpoints"] = [torch.equal(a1[0], a[0]), torch.equal(a0[0], b[0])]
    failed = [k for k, v in checks.items() if not all(v)]
    report(2, not failed, "all identities hold" if not failed else f"failing {failed}")


# ---------------------------------------------------------------------------
# 3. sphere geometry

def test_criterion_3_sphere_geometry(report):
    rng = np.random.default_rng(11)
    norm_err, recon_err, orth_err = 0.0, 0.0, 0.0
    for _ in range(200):
        h, c, v = rng.normal(size=(8, 5)) * rng.uniform(0.1, 10), rng.normal(size=5), rng.normal(size=5)
        p = project_to_sphere(_t(h), _t(c))
        norm_err = max(norm_err, float((torch.linalg.vector_norm(p, dim=-1) - 1).abs().max()))
        par, perp = decompose(p, _t(v))
        recon_err = max(recon_err, float((par + perp - p).abs().max()))
        orth_err = max(orth_err, float((par * perp).sum(-1).abs().max()))
    sb = sphere_scores(_t([[0.6, 0.8], [0.8, 0.6]]), _t([1.0, 0.0]))
    expected = np.array([0.2 / 0.7, -0.2 / 0.7])
    example_err = float(np.abs(sb.scores.numpy() - expected).max())
    ok = norm_err <= 1e-9 and recon_err <= 1e-9 and orth_err <= 1e-9 and example_err <= 1e-9
    report(3, ok, f"unit-norm err {norm_err:.1e}, reconstruction err {recon_err:.1e}, "
                  f"orthogonality err {orth_err:.1e}, hand example err {example_err:.1e}")


# ---------------------------------------------------------------------------
# 4. routing exclusion

def test_criterion_4_routing_exclusion(report):
    ds = synth_generate(SynthConfig(n=40, m1=5, m2=6, latent_dim=3, seed=4))
    cfg = TrainConfig(d1=8, d2=8, n_layers=1, n_heads=2, d_sphere=3, epochs_m=1, seed=4,
                      task_weight=0.0, beta=0.0, alpha=1.0)
    teacher, _ = pretrain_m(ds, cfg)
    trainer = UTrainer(ds, copy.deepcopy(teacher), cfg)
    u = trainer.u

    def snap(mod):
        return {k: v.clone() for k, v in mod.state_dict().items()}

    before = {n: snap(getattr(u, n)) for n in ("mri_backbone", "head", "generator", "discriminator")}
    for idx in np.array_split(np.arange(40), 3):
        trainer.step(idx)
    changed = {n: any(not torch.equal(before[n][k], v) for k, v in getattr(u, n).state_dict().items())
               for n in before}
    ok = (not changed["mri_backbone"] and not changed["head"]
          and changed["generator"] and changed["discriminator"])
    report(4, ok, "parameters changed after 3 GAN-only steps: "
                  + ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in changed.items()))


# ---------------------------------------------------------------------------
# 5. QC oracle suite

def _chi2_1_sf(x):
    return math.erfc(math.sqrt(x / 2.0))


def _hwe_oracle(n0, n1, n2):
    n = n0 + n1 + n2
    p = (2 * n2 + n1) / (2 * n)
    expected = [n * (1 - p) ** 2, 2 * n * p * (1 - p), n * p ** 2]
    stat = sum((o - e) ** 2 / e for o, e in zip((n0, n1, n2), expected) if e > 0)
    return _chi2_1_sf(stat)


def _gm(cols, names=None):
    vals = np.column_stack([np.asarray(c, dtype=float) for c in cols])
    names = names or [f"rs{i}" for i in range(vals.shape[1])]
    return GenotypeMatrix([f"s{i}" for i in range(vals.shape[0])], names, vals)


def test_criterion_5_qc_oracles(report):
    NA = math.nan
    checks = {}
    # missingness: 96% missing removed, exactly 95% kept
    _, removed = filter_missingness(_gm([[NA] * 96 + [0] * 4, [NA] * 95 + [1] * 5]), 0.95)
    checks["missingness strict"] = removed == ["rs0"]
    # maf: exactly at threshold kept, just below removed
    _, rep = qc_pipeline(_gm([[0] * 90 + [1] * 10, [0] * 91 + [1] * 9]), hwe_thr=0.0)
    checks["maf strict"] = rep.removed_ids["maf"] == ["rs1"]
    # hwe: p exactly at threshold kept
    p_at = hwe_p_value(50, 0, 50)
    _, rep = qc_pipeline(_gm([[0] * 50 + [2] * 50]), maf_thr=0.0, hwe_thr=p_at)
    _, rep2 = qc_pipeline(_gm([[0] * 50 + [2] * 50]), maf_thr=0.0, hwe_thr=p_at * 1.0001)
    checks["hwe strict"] = rep.removed_hwe == 0 and rep2.removed_hwe == 1
    cases = [([0, 1, 2, NA], 1.0), ([0, 1, NA], 1.0), ([0, 0, 1, NA], 0.0), ([1, 2, NA, NA], 2.0),
             ([2, 2, NA], 2.0)]
    checks["round-mean imputation"] = all(impute_round_mean(_gm([c])).values[-1, 0] == f
                                          for c, f in cases)
    checks["maf arithmetic"] = (maf([0, 0, 1, 2]) == 0.375 and maf([1, 1]) == 0.5
                                and maf([2, 2, 2, 1]) == 1 - 7 / 8 and maf([0, 0]) == 0.0)
    rng = np.random.default_rng(5)
    hwe_err = 0.0
    for _ in range(200):
        n0, n1, n2 = (int(x) for x in rng.integers(0, 200, size=3))
        if n0 + n1 + n2 == 0:
            continue
        ref = _hwe_oracle(n0, n1, n2)
        got = hwe_p_value(n0, n1, n2)
        hwe_err = max(hwe_err, abs(got - ref) / max(ref, 1e-300))
    checks["hwe oracle"] = hwe_err <= 1e-9
    idem = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        vals = r.choice([0.0, 1.0, 2.0, NA], p=[0.4, 0.3, 0.2, 0.1], size=(60, 12))
        vals[0] = 0.0
        once, _ = qc_pipeline(_gm(list(vals.T)))
        twice, rep = qc_pipeline(once)
        idem &= np.array_equal(once.values, twice.values) and rep.removed_hwe == rep.removed_maf == 0
    checks["idempotence"] = bool(idem)
    failed = [k for k, v in checks.items() if not v]
    report(5, not failed, f"{len(checks)} checks, max HWE rel err {hwe_err:.1e}"
                          + (f", failing {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 6. metrics oracle suite

def _brute(pred, target, k):
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(pred, target):
        cm[t][p] += 1
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = cm[c][c]
        col = sum(cm[r][c] for r in range(k))
        row = sum(cm[c])
        pr = tp / col if col else 0.0
        rc = tp / row if row else 0.0
        prec.append(pr)
        rec.append(rc)
        f1.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    return cm, {"accuracy": sum(rec) / k, "precision": sum(prec) / k, "recall": sum(rec) / k,
                "f1": sum(f1) / k}


METRIC_FIXTURES = [
    ([0, 1, 2, 0, 1, 2], [0, 1, 2, 0, 1, 2], 3),
    ([0, 1, 0, 1], [0, 0, 1, 1], 2),
    ([0, 0, 0, 0], [0, 0, 1, 1], 2),
    ([0, 0, 1], [0, 0, 1], 3),
    ([2, 2, 2], [0, 1, 2], 3),
    ([1, 0, 2, 2, 1, 0, 0], [1, 1, 2, 0, 1, 0, 2], 3),
    ([0], [1], 2),
    ([3, 3, 1, 0, 2, 1], [3, 2, 1, 0, 2, 3], 4),
    ([0, 1, 1, 1, 1], [0, 0, 0, 0, 1], 2),
    ([2, 0, 1, 2, 0, 1, 2, 0], [2, 0, 1, 1, 0, 2, 2, 1], 3),
    ([1, 1, 1, 1], [1, 1, 1, 1], 2),
]


def test_criterion_6_metrics_oracles(report):
    mismatches = []
    zero_div_fixtures = 0
    for i, (p, t, k) in enumerate(METRIC_FIXTURES):
        cm, want = _brute(p, t, k)
        got = macro_classification_metrics(p, t, k)
        zero_div_fixtures += bool(got["zero_division"])
        if confusion_matrix(p, t, k).tolist() != cm:
            mismatches.append(f"cm#{i}")
        for name in want:
            if got[name] != want[name]:
                mismatches.append(f"{name}#{i}")
    rng = np.random.default_rng(3)
    for i in range(10):
        p, t = rng.normal(size=12), rng.normal(size=12)
        res = [a - b for a, b in zip(p.tolist(), t.tolist())]
        mean_t = sum(t.tolist()) / len(t)
        ss_res = sum(x * x for x in res)
        ss_tot = sum((x - mean_t) ** 2 for x in t.tolist())
        if not math.isclose(rmse(p, t), math.sqrt(ss_res / len(res)), rel_tol=1e-12):
            mismatches.append(f"rmse#{i}")
        if not math.isclose(r2(p, t), 1 - ss_res / ss_tot, rel_tol=1e-12):
            mismatches.append(f"r2#{i}")
    ok = not mismatches and len(METRIC_FIXTURES) >= 10 and zero_div_fixtures > 0
    report(6, ok, f"{len(METRIC_FIXTURES)} classification fixtures ({zero_div_fixtures} with "
                  f"zero-division classes), 10 regression fixtures"
                  + (f", mismatches {mismatches}" if mismatches else ""))


# ---------------------------------------------------------------------------
# 7. synthetic ordering experiment

ORDER_SEEDS = (0, 1, 2)
ORDER_PARAMS = dict(d1=16, d2=16, n_heads=2, n_layers=1, epochs_m=15, epochs_u=30)
ORDER_MARGIN = 0.03
ORDER_BUDGET_S = 600.0


def test_criterion_7_synthetic_ordering(report):
    t0 = time.perf_counter()
    means = {"m": [], "u": [], "unimodal-ablation": []}
    for seed in ORDER_SEEDS:
        ds = synth_generate(SynthConfig(n=1000, m1=40, m2=60, shared_signal=0.8, seed=seed))
        res = cross_validate(ds, list(means), {**ORDER_PARAMS, "seed": seed}, k=5, seed=seed)
        for kind in means:
            means[kind].append(res["summary"][kind]["rmse"]["mean"])
    elapsed = time.perf_counter() - t0
    m, u, a = (float(np.mean(means[k])) for k in ("m", "u", "unimodal-ablation"))
    rel = 1.0 - u / a
    ok = m <= u < a and rel >= ORDER_MARGIN and elapsed < ORDER_BUDGET_S
    report(7, ok, f"RMSE M {m:.4f}, U {u:.4f}, ablation {a:.4f}; U improves on ablation by "
                  f"{100 * rel:.2f}% (need >= {100 * ORDER_MARGIN:.0f}%); {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 8. CLI determinism

FAST = ["--d1", "8", "--d2", "8", "--n-layers", "1", "--n-heads", "2", "--d-sphere", "3",
        "--epochs-m", "2", "--epochs-u", "2", "--batch-size", "16"]


def _bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _json(path):
    with open(path) as fh:
        return json.load(fh)


def _rerun_config(src, dst):
    """Write the echoed config found in ``src`` as a standalone config file."""
    payload = _json(src)
    with open(dst, "w") as fh:
        json.dump(payload.get("config", payload), fh)
    return str(dst)


def test_criterion_8_cli_determinism(tmp_path, report):
    results = {}
    d1, d2 = tmp_path / "d1", tmp_path / "d2"
    assert cli(["synth", "--out-dir", str(d1), "--n", "40", "--m1", "4", "--m2", "5",
                "--latent-dim", "2", "--seed", "9"]) == 0
    assert cli(["synth", "--config", str(d1 / "config.json"), "--out-dir", str(d2)]) == 0
    results["synth"] = all(_bytes(d1 / f) == _bytes(d2 / f)
                           for f in ("features.csv", "labels.csv", "config.json"))

    geno = tmp_path / "g.csv"
    r = np.random.default_rng(0)
    rows = ["subject_id," + ",".join(f"rs{j}" for j in range(8))]
    for i in range(50):
        rows.append(f"s{i}," + ",".join("NA" if r.random() < 0.05 else str(int(r.integers(0, 3)))
                                        for _ in range(8)))
    geno.write_text("\n".join(rows) + "\n")
    assert cli(["qc", "--input", str(geno), "--output", str(tmp_path / "q1.csv"),
                "--report", str(tmp_path / "q1.json"), "--maf-thr", "0.1"]) == 0
    assert cli(["qc", "--config", _rerun_config(tmp_path / "q1.json", tmp_path / "qc_cfg.json"),
                "--output", str(tmp_path / "q2.csv"), "--report", str(tmp_path / "q2.json")]) == 0
    results["qc"] = (_bytes(tmp_path / "q1.csv") == _bytes(tmp_path / "q2.csv")
                     and _bytes(tmp_path / "q1.json") == _bytes(tmp_path / "q2.json"))

    io = ["--features", str(d1 / "features.csv"), "--labels", str(d1 / "labels.csv")]
    m1 = str(tmp_path / "m1.ckpt")
    assert cli(["train", "--kind", "m", *io, "--out", m1, *FAST]) == 0
    assert cli(["train", "--config", _rerun_config(m1 + ".json", tmp_path / "m_cfg.json"),
                "--out", str(tmp_path / "m2.ckpt")]) == 0
    u1 = str(tmp_path / "u1.ckpt")
    assert cli(["train", "--kind", "u", "--teacher", m1, *io, "--out", u1, *FAST]) == 0
    assert cli(["train", "--config", _rerun_config(u1 + ".json", tmp_path / "u_cfg.json"),
                "--out", str(tmp_path / "u2.ckpt")]) == 0

    def train_outputs(a, b):
        ra, rb = _json(a + ".json"), _json(b + ".json")
        for rep in (ra, rb):
            rep["train"].pop("wall_time")  # a measurement, not an output
        return _bytes(a) == _bytes(b) and ra == rb

    results["train m"] = train_outputs(m1, str(tmp_path / "m2.ckpt"))
    results["train u"] = train_outputs(u1, str(tmp_path / "u2.ckpt"))

    assert cli(["eval", "--model", u1, *io, "--out", str(tmp_path / "e1.json")]) == 0
    assert cli(["eval", "--config", _rerun_config(tmp_path / "e1.json", tmp_path / "e_cfg.json"),
                "--out", str(tmp_path / "e2.json")]) == 0
    results["eval"] = _bytes(tmp_path / "e1.json") == _bytes(tmp_path / "e2.json")

    cv = ["--n", "30", "--m1", "4", "--m2", "5", "--latent-dim", "2", *FAST,
          "--epochs-m", "1", "--epochs-u", "1", "--k-folds", "2"]
    assert cli(["cv", "--synth", "--kind", "u", *cv, "--out", str(tmp_path / "c1.json"),
                "--table", str(tmp_path / "c1.csv")]) == 0
    assert cli(["cv", "--config", _rerun_config(tmp_path / "c1.json", tmp_path / "c_cfg.json"),
                "--out", str(tmp_path / "c2.json"), "--table", str(tmp_path / "c2.csv")]) == 0
    results["cv"] = (_bytes(tmp_path / "c1.json") == _bytes(tmp_path / "c2.json")
                     and _bytes(tmp_path / "c1.csv") == _bytes(tmp_path / "c2.csv"))

    failed = [k for k, v in results.items() if not v]
    report(8, not failed, f"{len(results)} commands re-run from echoed config"
                          + (f", differing: {failed}" if failed else ", all bit-identical"))
