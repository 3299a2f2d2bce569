import csv
import json

import numpy as np
import pytest

from aftgof.gof import p_value, parse_test, run_all_forms, run_test, run_tests
from aftgof.simulate import ScenarioConfig, generate


@pytest.fixture(scope="module")
def s1():
    return generate(ScenarioConfig("S1", 100, 0.0, 0.2, seed=12))


@pytest.fixture(scope="module")
def s2():
    return generate(ScenarioConfig("S2", 100, 0.3, 0.2, seed=13))


def test_p_value_arithmetic():
    sups = np.r_[np.full(50, 2.0), np.full(450, 1.0)]
    assert p_value(1.5, sups) == pytest.approx(0.10)
    assert p_value(0.5, np.r_[np.full(325, 2.0), np.zeros(175)]) == pytest.approx(0.65)
    assert p_value(2.0, [2.0, 1.0]) == 0.5
    assert p_value(9.0, [2.0, 1.0]) == 0.0


def test_parse_test():
    names = ("age", "bili")
    assert parse_test("omni", names) == ("omnibus", None)
    assert parse_test("link", names) == ("link", None)
    assert parse_test("form:bili", names) == ("form", 1)
    assert parse_test("form:1", names) == ("form", 0)
    assert parse_test(("form", 1), names) == ("form", 1)
    for bad in ("form:x", "form:3", "other"):
        with pytest.raises(ValueError):
            parse_test(bad, names)


def test_link_equals_form_for_one_covariate(s1):
    a = run_test(s1, "mis", "link", True, K=60, seed=4)
    b = run_test(s1, "mis", "form:z", True, K=60, seed=4)
    assert a.W_obs_sup == b.W_obs_sup
    assert a.p_value == b.p_value
    np.testing.assert_array_equal(a.path_sups, b.path_sups)


def test_report_fields(s2):
    reps = run_tests(s2, "mis", ["omni", "link", "form:z2"], (True, False), K=40, seed=1)
    assert [r.test for r in reps] == ["omnibus"] * 2 + ["link"] * 2 + ["form:z2"] * 2
    assert [r.standardized for r in reps] == [True, False] * 3
    for r in reps:
        assert r.K == r.K_effective == 40
        assert r.p_value == p_value(r.W_obs_sup, r.path_sups)
        d = json.loads(r.to_json())
        assert set(d) >= {"test", "W_obs_sup", "p_value", "K_effective", "path_sups", "plot_payload"}
        assert len(d["plot_payload"]["paths"]) == 40


def test_deterministic(s2):
    a = run_test(s2, "mis", "omni", True, K=30, seed=8)
    b = run_test(s2, "mis", "omni", True, K=30, seed=8)
    assert a.to_json() == b.to_json()
    c = run_test(s2, "mis", "omni", True, K=30, seed=9)
    assert not np.array_equal(a.path_sups, c.path_sups)


def test_time_rescaling_invariance(s2):
    a = run_tests(s2, "mis", ["omni", "link", "form:z1"], (True, False), K=30, seed=2)
    b = run_tests(s2.with_time(s2.time * 37.5), "mis", ["omni", "link", "form:z1"],
                  (True, False), K=30, seed=2)
    for x, y in zip(a, b):
        assert x.W_obs_sup == pytest.approx(y.W_obs_sup, rel=1e-7)
        np.testing.assert_allclose(x.path_sups, y.path_sups, rtol=1e-6)
        assert x.p_value == y.p_value


def test_path_relabeling_invariance(s1, rng):
    r = run_test(s1, "mis", "omni", False, K=50, seed=0)
    assert p_value(r.W_obs_sup, rng.permutation(r.path_sups)) == r.p_value


def test_all_forms(s2):
    reps = run_all_forms(s2, "mis", True, K=20, seed=0)
    assert len(reps) == s2.p
    assert [r.test for r in reps] == ["form:z1", "form:z2"]


def test_plot_csv(tmp_path, s2):
    for test in ("omni", "link"):
        r = run_test(s2, "mis", test, True, K=20, seed=0)
        path = tmp_path / f"{test}.csv"
        r.write_plot_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0][0] == "path_id"
        ids = {row[0] for row in rows[1:]}
        assert ids == {"obs"} | {str(k) for k in range(1, 21)}


@pytest.mark.parametrize("estimator", ["mns", "mls"])
def test_other_estimators(s1, estimator):
    r = run_test(s1, estimator, "omni", True, K=20, seed=0)
    assert 0 <= r.p_value <= 1 and r.estimator == estimator


def test_quadratic_effect_detected():
    d = generate(ScenarioConfig("S2", 300, 0.5, 0.2, seed=5))
    r = run_test(d, "mis", "form:z2", True, K=200, seed=0)
    assert r.p_value < 0.05
