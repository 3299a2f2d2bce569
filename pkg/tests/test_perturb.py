import numpy as np
import pytest

from aftgof import perturb
from aftgof.estimate import FittedModel, draw_weights, fit
from aftgof.perturb import (PathBundle, PathEngine, PathFailureError, bundles_from_fits,
                            generate_bundle, perturbed_fits, perturbed_path)
from aftgof.process import EvalGrid, Lattice, omnibus_grid
from aftgof.residual import build_frame, estimate_baseline_densities
from aftgof.simulate import ScenarioConfig, generate, replicate_rng


@pytest.fixture(scope="module")
def setup(request):
    d = generate(ScenarioConfig("S2", 120, 0.0, 0.2, seed=31))
    m = fit(d, "mis")
    fr = build_frame(d, m.beta)
    return d, m, fr, estimate_baseline_densities(fr), omnibus_grid(fr)


def test_unit_multipliers_give_zero_path(setup):
    d, m, fr, dens, grid = setup
    phi = draw_weights(d.n, 0, 0)
    ones = type(phi)(np.ones(d.n), 0, 0)
    surf = perturbed_path(d, m, fr, dens, grid, ones)
    assert np.all(surf.values == 0)


def test_path_deterministic(setup):
    d, m, fr, dens, grid = setup
    a = perturbed_path(d, m, fr, dens, grid, draw_weights(d.n, 4, 9)).values
    b = perturbed_path(d, m, fr, dens, grid, draw_weights(d.n, 4, 9)).values
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() > 0


@pytest.mark.parametrize("sensitivity", perturb.SENSITIVITIES)
def test_engine_terms_add_up(setup, sensitivity):
    d, m, fr, dens, grid = setup
    phi = draw_weights(d.n, 1, 2)
    star = np.asarray(m.beta) + 0.01
    eng = PathEngine(fr, dens, grid, sensitivity)
    t1, t2 = eng.terms(phi, star)
    np.testing.assert_allclose(eng.path(phi, star), t1 + t2)
    np.testing.assert_allclose(eng.estimation_term(np.zeros(d.p)), 0.0)
    np.testing.assert_allclose(eng.estimation_term(np.full(d.p, 0.02)), 2 * t2, rtol=1e-12)


def test_engine_rejects_bad_sensitivity(setup):
    d, m, fr, dens, grid = setup
    with pytest.raises(ValueError):
        PathEngine(fr, dens, grid, "other")
    with pytest.raises(ValueError):
        PathEngine(fr, None, grid, "density")


def test_bundle_determinism_and_sd(setup):
    d, m, fr, dens, grid = setup
    a = generate_bundle(d, m, fr, dens, grid, K=2, seed=3)
    b = generate_bundle(d, m, fr, dens, grid, K=2, seed=3)
    np.testing.assert_array_equal(a.pointwise_sd, b.pointwise_sd)
    assert a.K == a.K_effective == 2
    assert a.seeds == ((3, 0), (3, 1))


def test_sd_floor_on_degenerate_cell(setup):
    d, m, fr, dens, _ = setup
    low = fr.covariates.min(axis=0) - 1.0
    grid = EvalGrid(fr.event_times, np.vstack([low, np.median(fr.covariates, axis=0)]), "omnibus")
    bundle = generate_bundle(d, m, fr, dens, grid, K=20, seed=0)
    assert np.all(bundle.pointwise_sd[:, 0] == perturb.SD_FLOOR)
    assert np.all(bundle.pointwise_sd[:, 1] > perturb.SD_FLOOR)


def test_threads_do_not_change_results(setup):
    d, m, *_ = setup
    one = perturbed_fits(d, "mis", m, 12, 5, threads=1)
    many = perturbed_fits(d, "mis", m, 12, 5, threads=4)
    for a, b in zip(one, many):
        np.testing.assert_array_equal(a.fit.beta, b.fit.beta)


@pytest.mark.parametrize("estimator", ["mns", "mls"])
def test_other_estimators_produce_paths(estimator):
    d = generate(ScenarioConfig("S1", 100, 0.0, 0.2, seed=2))
    m = fit(d, estimator)
    fr = build_frame(d, m.beta)
    bundle = generate_bundle(d, m, fr, estimate_baseline_densities(fr), omnibus_grid(fr), 10, 0)
    assert bundle.K_effective >= 9
    assert np.all(np.isfinite(bundle.values))


def test_failed_fits_dropped_or_fatal(setup, monkeypatch):
    d, m, fr, dens, grid = setup
    real = perturb.fit_perturbed

    def flaky(data, est, phi, anchor, scheme):
        res = real(data, est, phi, anchor, scheme)
        if phi.path_index % every == 0:
            return FittedModel(res.estimator, res.beta, 1.0, 50, False, res.names, "stuck")
        return res

    monkeypatch.setattr(perturb, "fit_perturbed", flaky)
    every = 20
    fits = perturbed_fits(d, "mis", m, 40, 0)
    (bundle,) = bundles_from_fits(d, fr, dens, [grid], fits)
    assert bundle.failed == (0, 20)
    assert bundle.K == 40 and bundle.K_effective == 38
    every = 5
    with pytest.raises(PathFailureError, match="stuck"):
        bundles_from_fits(d, fr, dens, [grid], perturbed_fits(d, "mis", m, 40, 0))


def test_bundle_sups():
    vals = np.arange(12.0).reshape(3, 2, 2) - 6
    b = PathBundle(EvalGrid([1.0, 2.0], [[0.0], [1.0]], "omnibus"), vals, ((0, 0),) * 3, ())
    np.testing.assert_array_equal(b.sups, [6, 2, 5])
    np.testing.assert_allclose(b.pointwise_sd, vals.std(axis=0, ddof=1))


@pytest.mark.slow
def test_path_spread_matches_sampling_spread():
    cfg = ScenarioConfig("S1", 300, 0.0, 0.2).calibrated()
    # the cell at the median failure residual exp(4) and the median covariate 2
    grid = EvalGrid([np.exp(4.0)], [[2.0]], "omnibus")
    observed = []
    for r in range(200):
        d = generate(cfg, replicate_rng(99, r))
        fr = build_frame(d, fit(d, "mis").beta)
        observed.append(Lattice(fr, grid).observed().values[0, 0])
    d = generate(cfg, replicate_rng(5, 0))
    m = fit(d, "mis")
    fr = build_frame(d, m.beta)
    bundle = generate_bundle(d, m, fr, estimate_baseline_densities(fr), grid, K=500, seed=1)
    ratio = bundle.pointwise_sd[0, 0] / np.std(observed, ddof=1)
    assert 0.8 <= ratio <= 1.2
