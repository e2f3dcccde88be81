"""Acceptance gate: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
collected into the terminal summary.
"""
import filecmp
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from loocmi import bounds as B
from loocmi import cli
from loocmi.datasets import generate
from loocmi.harness import ExperimentConfig, evaluate, load_config, prepare, run_sweep
from loocmi.numerics import CovSpec, c_n
from loocmi.oracle import exact_loo_ridge
from loocmi.trainers import TrainConfig, train_loo
from loocmi.verify import INFLUENCE_THRESHOLD, run_suite

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_criterion_01_bound_validity():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "blobs_logistic.ini")
    cfg = replace(cfg, test_size=2000, local_bound=False, weight_noise="isotropic")
    runs, worst, fails = 0, math.inf, 0
    for n in (50, 100, 200):
        for seed in cfg.seeds:
            art = prepare(cfg, n, seed)
            for sigma in (0.05, 0.1, 0.2):
                rep = evaluate(art, sigma, seed)
                margin = rep.gen_bound_predictions - (rep.gap["loo_gap"] - 3 * rep.gap["loo_std_err"])
                worst = min(worst, margin)
                fails += margin < 0
                runs += 1
    dt = time.perf_counter() - t0
    ok = runs >= 20 and fails == 0 and dt <= 600
    assert record(1, ok, f"runs={runs} violations={fails} min_margin={worst:.4g} time={dt:.1f}s")


def test_criterion_02_oracle_sandwich():
    t0 = time.perf_counter()
    checks = run_suite("sandwich")
    dt = time.perf_counter() - t0
    ok = all(c.passed for c in checks) and dt <= 120
    assert record(2, ok, "; ".join(c.line() for c in checks) + f" time={dt:.1f}s")


def test_criterion_03_jensen_tightness():
    checks = run_suite("jensen")
    assert record(3, all(c.passed for c in checks), "; ".join(c.line() for c in checks))


def test_criterion_04_two_point_mgf():
    t0 = time.perf_counter()
    checks = run_suite("lemma1")
    dt = time.perf_counter() - t0
    r = B.verify_lemma1(2, 1.0)
    ok = all(c.passed for c in checks) and abs(r["max_mgf"] - 1.543081) <= 1e-6 and dt <= 60
    assert record(4, ok, f"{len(checks)} checks, n=2 t=1 max_mgf={r['max_mgf']:.7f} at {r['argmax']} time={dt:.2f}s")


def test_criterion_05_fixtures():
    cases = [
        ("loo", B.loo_cmi_upper(np.array([[0.0], [2.0]]), CovSpec.isotropic(1.0)), 0.566219),
        ("floo", B.floo_cmi_upper(np.array([[[0.0], [0.0]], [[1.0], [1.0]]]), 1.0), 0.379885),
        ("gen", B.gen_bound_from_cmi(math.log(2), 2), 1.177410),
        ("thm5", B.stability_bounds(B.StabilityProfile(epsilon=1.0), CovSpec.diagonal([1.0]), 11).thm5,
         math.sqrt(4 * 1.1)),
        # recomputed: sqrt(4 (4/3) sqrt(4 (4 0.01 + 2 0.01)))
        ("thm6", B.stability_bounds(B.StabilityProfile(beta=0.1, beta1=0.1), CovSpec.isotropic(1.0), 4, K=1).thm6,
         1.616412),
        ("lemma5", B.stability_bounds(B.StabilityProfile(gamma=0.01, T=10), CovSpec.isotropic(1.0), 2, K=1).lemma5(1.0),
         2.0),
    ]
    errs = {name: abs(got - want) for name, got, want in cases}
    ok = all(e <= 1e-6 for e in errs.values())
    assert record(5, ok, " ".join(f"{k}_err={v:.2e}" for k, v in errs.items()))


def test_criterion_06_sherman_morrison():
    ds = generate("linear-regression", 0, 200, 5)
    tl = train_loo(ds, TrainConfig("ridge", lam=0.1))
    ex = exact_loo_ridge(ds, 0.1)
    rel = np.linalg.norm(tl.weights - ex.weights, axis=1) / np.linalg.norm(ex.weights, axis=1)
    ok = bool(np.all(rel <= 1e-6)) and ex.populated.all()
    assert record(6, ok, f"max_row_rel_diff={rel.max():.2e} rows={rel.size}")


def test_criterion_07_influence():
    checks = run_suite("influence")[:2]
    ok = all(c.passed for c in checks)
    assert record(7, ok, f"threshold={INFLUENCE_THRESHOLD}; " + "; ".join(c.line() for c in checks))


def test_criterion_08_sgd_stability():
    checks = run_suite("sgd")
    assert record(8, all(c.passed for c in checks), "; ".join(c.line() for c in checks))


def test_criterion_09_trends():
    cfg = load_config(CONFIGS / "blobs_logistic.ini")
    size = run_sweep(replace(cfg, local_bound=False), "size")
    sig = run_sweep(replace(cfg, n=(100,), local_bound=False), "sigma")
    ok = (size.verdicts["floo_gen_bound_non_increasing"] and sig.verdicts["floo_cmi_strictly_decreasing"]
          and sig.verdicts["noisy_test_error_non_decreasing"])
    fmt = lambda v: ",".join(f"{x:.4g}" for x in v)
    assert record(9, ok, f"floo_gen_bound(n)=[{fmt(size.aggregate['floo_gen_bound'])}] "
                         f"floo_cmi(sigma)=[{fmt(sig.aggregate['floo_cmi_upper'])}] "
                         f"noisy_err(sigma)=[{fmt(sig.aggregate['noisy_test_error'])}]")


def _tree_equal(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb or not fa:
        return False
    return all(filecmp.cmp(a / p, b / p, shallow=False) for p in fa)


def test_criterion_10_determinism_and_speed(tmp_path):
    cfg = str(CONFIGS / "ridge_small.ini")
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["sweep", "--config", cfg, "--axis", "size", "--out", str(out)]) == 0
        assert cli.main(["sweep", "--config", cfg, "--axis", "sigma", "--out", str(out)]) == 0
        assert cli.main(["train-loo", "--config", cfg, "--out", str(out / "train"), "--threads", "2"]) == 0
        assert cli.main(["report", str(out)]) == 0
    identical = _tree_equal(tmp_path / "a", tmp_path / "b")
    nfiles = sum(1 for p in (tmp_path / "a").rglob("*") if p.is_file())

    rng = np.random.default_rng(0)
    W = rng.normal(scale=0.05, size=(1000, 100))
    cov = CovSpec.diagonal(rng.uniform(0.5, 2.0, size=100))
    t0 = time.perf_counter()
    val = B.loo_cmi_upper(W, cov)
    dt = time.perf_counter() - t0
    ok = identical and dt < 2.0 and 0 <= val <= math.log(1000)
    assert record(10, ok, f"byte_identical={identical} files={nfiles} bound_time_n1000_K100={dt:.3f}s")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
