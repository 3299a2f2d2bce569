"""End-to-end acceptance checks.

Each criterion is one test that records a single PASS/FAIL line, printed in
the terminal summary. The Monte Carlo criteria take most of an hour on one
core; set ``AFTGOF_PROCESSES`` to spread replicates over several.
"""

import math
import os

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, random_dataset
from aftgof import estimate as est
from aftgof.data import SurvivalDataset, load_csv, standardize
from aftgof.estimate import draw_weights, fit, fit_perturbed
from aftgof.gof import p_value, run_test, run_tests
from aftgof.perturb import PathEngine
from aftgof.process import EvalGrid, Lattice, form_grid, link_grid, omnibus_grid
from aftgof.residual import build_frame, kaplan_meier
from aftgof.simulate import ScenarioConfig, replicate_rng, run_harness

ALPHA = 0.05
PROCESSES = int(os.environ.get("AFTGOF_PROCESSES", "1"))


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def mc_se(rate: float, reps: int) -> float:
    return math.sqrt(rate * (1 - rate) / reps)


@pytest.mark.slow
def test_type_one_error():
    reps = 500
    res = run_harness([ScenarioConfig("S1", 100, 0.0, 0.2)], reps=reps, K=200, seed=101,
                      processes=PROCESSES)
    bad = []
    worst = 0.0
    for c in res.cells:
        limit = ALPHA + 3 * mc_se(ALPHA, c.reps)
        worst = max(worst, c.rate)
        if c.rate > limit or c.failures > 0.1 * reps:
            bad.append(f"{c.test}/{c.estimator}/{'std' if c.standardized else 'unstd'}={c.rate:.3f}")
    rates = ", ".join(f"{c.test[:4]}-{c.estimator}-{'s' if c.standardized else 'u'} {c.rate:.3f}"
                      for c in res.cells)
    record(1, not bad, f"S1 n=100 null, 500 reps: {rates}; limit {ALPHA + 3 * mc_se(ALPHA, reps):.3f}")
    assert not bad, bad


@pytest.mark.slow
def test_omnibus_power_standardized_vs_raw():
    reps = 200
    res = run_harness([ScenarioConfig("S1", 300, 0.3, 0.2)], reps=reps, K=200, seed=202,
                      tests=("omnibus",), estimators=("mis",), processes=PROCESSES)
    std = res.cell(standardized=True).rate
    raw = res.cell(standardized=False).rate
    ok_std = abs(std - 0.733) <= 3 * mc_se(std, reps)
    ok_raw = abs(raw - 0.169) <= 3 * mc_se(raw, reps)
    ok_gap = std - raw >= 0.2
    record(2, ok_std and ok_raw and ok_gap,
           f"S1 n=300 gamma=0.3 omnibus mis: std {std:.3f} (target 0.733 +- {3 * mc_se(std, reps):.3f}), "
           f"unstd {raw:.3f} (target 0.169 +- {3 * mc_se(raw, reps):.3f}), gap {std - raw:.3f}")
    assert ok_std, std
    assert ok_raw, raw
    assert ok_gap, std - raw


@pytest.mark.slow
def test_scenario_two_form_power():
    res = run_harness([ScenarioConfig("S2", 500, 0.5, 0.2)], reps=100, K=200, seed=303,
                      tests=("form",), estimators=("mis",), standardized=(True,),
                      processes=PROCESSES)
    rate = res.cell().rate
    record(3, rate >= 0.98, f"S2 n=500 gamma=0.5 standardized form mis: {rate:.3f} (need >= 0.98)")
    assert rate >= 0.98


def _identity_failures(seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    out = []
    d = random_dataset(rng, 60, 2, ties=seed % 2 == 0)
    m = fit(d, "mis")
    fr = build_frame(d, m.beta)
    grid_t = np.concatenate([[0.0], fr.r, [np.inf]])
    if np.abs(fr.martingale(grid_t).sum(axis=0)).max() > 1e-10:
        out.append("martingale sum")
    inf_grid = EvalGrid(np.r_[fr.event_times, np.inf], np.full((1, 2), np.inf), "omnibus")
    if np.abs(Lattice(fr, inf_grid).observed().values).max() > 1e-10:
        out.append("W at infinite threshold")
    ones = type(draw_weights(d.n, 0, 0))(np.ones(d.n), 0, 0)
    for estimator in ("mis", "mns", "mls"):
        anchor = fit(d, estimator)
        star = fit_perturbed(d, estimator, ones, anchor)
        path = PathEngine(build_frame(d, anchor.beta), None, omnibus_grid(fr)).path(ones, star.beta)
        if np.abs(star.beta - anchor.beta).max() > 1e-8 or np.abs(path).max() > 1e-8:
            out.append(f"unit multipliers {estimator}")
    one = random_dataset(rng, 50, 1)
    a = run_test(one, "mis", "link", True, K=50, seed=seed)
    b = run_test(one, "mis", "form:1", True, K=50, seed=seed)
    if a.W_obs_sup != b.W_obs_sup or a.p_value != b.p_value or not np.array_equal(a.path_sups, b.path_sups):
        out.append("link vs form with one covariate")
    frl = build_frame(one, [0.2])
    if not np.array_equal(Lattice(frl, link_grid(frl.covariates)).observed().values,
                          Lattice(frl, form_grid(frl.covariates, 0)).observed().values):
        out.append("link vs form surfaces")
    for r in (a, b):
        l0 = int(np.sum(r.path_sups >= r.W_obs_sup))
        if r.p_value != l0 / r.K_effective or r.p_value != p_value(r.W_obs_sup, r.path_sups):
            out.append("p-value count")
    tests = ["omni", "link", "form:1"]
    x = run_tests(d, "mis", tests, (True, False), K=30, seed=seed)
    y = run_tests(d.with_time(d.time * 52.0), "mis", tests, (True, False), K=30, seed=seed)
    for u, v in zip(x, y):
        if (u.p_value != v.p_value or not math.isclose(u.W_obs_sup, v.W_obs_sup, rel_tol=1e-7)
                or not np.allclose(u.path_sups, v.path_sups, rtol=1e-6)):
            out.append(f"time rescaling {u.test}")
    return out


def test_exact_identities():
    failures = [f"seed {s}: {msg}" for s in range(4) for msg in _identity_failures(s)]
    record(4, not failures, "martingale sums, W(z=inf), unit multipliers, link=form, p=l0/K, "
           f"time rescaling on 4 datasets: {len(failures)} failures")
    assert not failures, failures


def test_oracles_small_n():
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(5000 + seed)
        p = int(rng.integers(1, 3))
        n = int(rng.integers(p + 2, 9))
        d = random_dataset(rng, n, p, ties=seed % 3 == 0)
        beta = rng.normal(size=p)
        args = (d.log_time, d.covariates, d.status, beta)
        checks = {
            "gehan_score": np.abs(est.gehan_score(d, beta) - oracles.gehan_score(*args)).max(),
            "smoothed_score": np.abs(est.smoothed_score(d, beta) - oracles.smoothed_score(*args)).max(),
            "gehan_loss": abs(est.gehan_loss(d, beta) - oracles.gehan_loss(*args)),
        }
        fr = build_frame(d, beta)
        knots, inc = oracles.nelson_aalen(fr.r, fr.delta)
        checks["nelson_aalen"] = max(np.abs(fr.event_times - knots).max(),
                                     np.abs(fr.na_increments - inc).max())
        kk, jumps = kaplan_meier(fr.r, fr.delta)
        cdf = np.cumsum(jumps)
        checks["kaplan_meier"] = max([abs(cdf[k] - oracles.kaplan_meier_cdf(fr.r, fr.delta, t))
                                      for k, t in enumerate(kk[:-1])] + [abs(cdf[-1] - 1.0)])
        w = rng.exponential(size=n) - 1.0
        zs = np.unique(fr.covariates, axis=0)
        ts = np.r_[fr.event_times, np.inf]
        got = Lattice(fr, EvalGrid(ts, zs, "omnibus")).term1(w)
        checks["term1"] = max(abs(got[a, b] - oracles.term1(fr.r, fr.delta, fr.covariates, w, t, z))
                              for a, t in enumerate(ts) for b, z in enumerate(zs))
        failures += [f"seed {seed} {k} {v:.2e}" for k, v in checks.items() if not v <= 1e-10]
    record(5, not failures, f"6 quantities vs brute-force oracles on 50 datasets (n <= 8): "
           f"{len(failures)} above 1e-10")
    assert not failures, failures


def test_finite_difference_derivatives():
    worst_jac = worst_grad = 0.0
    for seed in range(20):
        rng = np.random.default_rng(7000 + seed)
        d = random_dataset(rng, 30, 2)
        beta = rng.normal(size=2)
        h = 1e-6
        fd = np.column_stack([(est.smoothed_score(d, beta + h * e) - est.smoothed_score(d, beta - h * e))
                              / (2 * h) for e in np.eye(2)])
        worst_jac = max(worst_jac, np.abs(est.smoothed_jacobian(d, beta) - fd).max())
        h = 1e-7
        grad = np.array([(est.gehan_loss(d, beta + h * e) - est.gehan_loss(d, beta - h * e)) / (2 * h)
                         for e in np.eye(2)])
        worst_grad = max(worst_grad, np.abs(-grad - est.gehan_score(d, beta)).max())
    ok = worst_jac <= 1e-5 and worst_grad <= 1e-5
    record(6, ok, f"20 points: smoothed Jacobian max err {worst_jac:.1e}, "
           f"loss gradient max err {worst_grad:.1e} (tol 1e-5)")
    assert ok


def pbc_like(n: int, rng: np.random.Generator, tau: float = 7.6):
    """Liver-cohort-like data whose log survival time is linear in log bilirubin.

    Returns ``(time, status, covariates)`` with covariate columns age, edema,
    bilirubin, albumin and protime; about 57% of subjects are censored.
    """
    age = rng.normal(50, 10, n)
    edema = rng.choice([0.0, 0.5, 1.0], size=n, p=[0.85, 0.09, 0.06])
    bili = np.exp(rng.normal(0.35, 1.0, n))
    alb = rng.normal(3.5, 0.42, n)
    prot = rng.normal(10.7, 1.0, n)
    lt = (8.1 - 0.03 * (age - 50) - 0.6 * edema - 0.6 * np.log(bili) + 0.8 * (alb - 3.5)
          - 0.15 * (prot - 10.7) + 0.8 * rng.normal(size=n))
    lc = tau + 0.5 * rng.normal(size=n)
    return np.exp(np.minimum(lt, lc)), (lt <= lc).astype(float), np.column_stack([age, edema, bili, alb, prot])


@pytest.mark.slow
def test_bilirubin_workflow():
    reps, K = 100, 500
    raw_rej = log_rej = 0
    for r in range(reps):
        x, st, z = pbc_like(400, replicate_rng(404, r))
        raw, _ = standardize(SurvivalDataset(x, st, z, ("age", "edema", "bili", "albumin", "protime")))
        z2 = z.copy()
        z2[:, 2] = np.log(z2[:, 2])
        fixed, _ = standardize(SurvivalDataset(x, st, z2, ("age", "edema", "logbili", "albumin", "protime")))
        raw_rej += run_test(raw, "mis", "form:bili", True, K=K, seed=r).p_value < ALPHA
        log_rej += run_test(fixed, "mis", "form:logbili", True, K=K, seed=r).p_value < ALPHA
    ok = raw_rej / reps >= 0.8 and log_rej / reps < 0.10
    record(7, ok, f"n=400 K=500, 100 reps: form(bili) rejects {raw_rej / reps:.2f} (need >= 0.80), "
           f"form(log bili) rejects {log_rej / reps:.2f} (need < 0.10)")
    assert raw_rej / reps >= 0.8
    assert log_rej / reps < 0.10


PBC_CSV = os.environ.get("AFTGOF_PBC_CSV")
LOGBILI_REFERENCE = -0.574


@pytest.mark.skipif(not PBC_CSV, reason="set AFTGOF_PBC_CSV to a liver-cohort CSV to run")
def test_bilirubin_coefficients_on_supplied_data():
    cols = ["age", "edema", "bili", "albumin", "protime"]
    d = load_csv(PBC_CSV, "time", "status", cols)
    z = d.covariates.copy()
    z[:, 2] = np.log(z[:, 2])
    data, _ = standardize(SurvivalDataset(d.time, d.status, z, ("age", "edema", "logbili", "albumin", "protime")))
    m = fit(data, "mis")
    # the reference value is for log T = Z'b, the opposite sign of the coefficients here
    dev = abs(-m.beta[data.names.index("logbili")] - LOGBILI_REFERENCE)
    verdict = "PASS" if dev <= 0.05 else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion 7, supplied data: {verdict}  log bilirubin coefficient "
                            f"deviation {dev:.3f} (tol 0.05)")
    assert dev <= 0.05, m.beta
