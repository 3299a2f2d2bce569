"""Simulation scenarios, censoring calibration and the rejection-rate harness.

Scenario ``S1``: ``log T = 4 - Z - gamma Z^2 + eps`` with ``Z ~ N(2, 1)``.
Scenario ``S2``: ``log T = 4 - Z1 - Z2 - gamma Z2^2 + eps`` with
``Z1 ~ Bernoulli(0.5)`` and ``Z2 ~ N(2, 1)``. In both ``eps ~ N(0, 1)`` and
``log C ~ N(tau, 1)``, with ``tau`` chosen to hit a target censoring rate.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .data import DataError, SurvivalDataset
from .estimate import ConvergenceError, IdentifiabilityError
from .gof import run_tests
from .perturb import PathFailureError

log = logging.getLogger(__name__)

SCENARIOS = ("S1", "S2")
ALPHA = 0.05
CALIBRATION_DRAWS = 100_000
CALIBRATION_TOL = 0.005
HARNESS_TESTS = ("omnibus", "link", "form")
HARNESS_ESTIMATORS = ("mns", "mis")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "S1"
    n: int = 100
    gamma: float = 0.0
    target_censoring: float = 0.2
    tau: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0 <= self.target_censoring < 1:
            raise ValueError("target_censoring must lie in [0, 1)")
        if self.tau is not None and np.isnan(self.tau):
            raise ValueError("tau must not be NaN")

    def calibrated(self) -> "ScenarioConfig":
        if self.tau is not None:
            return self
        return replace(self, tau=calibrate_tau(self.scenario, self.gamma, self.target_censoring))

    @property
    def focal_covariate(self) -> int:
        """Index of the covariate that carries the quadratic term."""
        return 0 if self.scenario == "S1" else 1


def _log_failure(scenario: str, gamma: float, n: int, rng: np.random.Generator):
    if scenario == "S1":
        z = rng.normal(2.0, 1.0, n)
        lt = 4.0 - z - gamma * z * z + rng.normal(size=n)
        return z[:, None], lt
    z1 = (rng.random(n) < 0.5).astype(float)
    z2 = rng.normal(2.0, 1.0, n)
    lt = 4.0 - z1 - z2 - gamma * z2 * z2 + rng.normal(size=n)
    return np.column_stack([z1, z2]), lt


def generate(config: ScenarioConfig, rng: np.random.Generator | None = None) -> SurvivalDataset:
    """Draw one dataset; ``rng`` defaults to a generator seeded by ``config.seed``."""
    config = config.calibrated()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    z, lt = _log_failure(config.scenario, config.gamma, config.n, rng)
    lc = config.tau + rng.normal(size=config.n)
    status = (lt <= lc).astype(float)
    names = ("z",) if config.scenario == "S1" else ("z1", "z2")
    return SurvivalDataset(np.exp(np.minimum(lt, lc)), status, z, names)


def censoring_fraction(scenario: str, gamma: float, tau: float,
                       draws: int = CALIBRATION_DRAWS, seed: int = 12345) -> float:
    """Monte Carlo censoring rate; common random numbers make it monotone in ``tau``."""
    rng = np.random.default_rng(seed)
    _, lt = _log_failure(scenario, gamma, draws, rng)
    xi = rng.normal(size=draws)
    return float(np.mean(tau + xi < lt))


@lru_cache(maxsize=None)
def calibrate_tau(scenario: str, gamma: float, target_censoring: float,
                  lo: float = -30.0, hi: float = 40.0) -> float:
    """Bisect ``tau`` until the simulated censoring rate is within 0.005 of the target.

    A target of 0 returns ``inf`` (no censoring).
    """
    if target_censoring == 0:
        return float("inf")
    if not 0 < target_censoring < 1:
        raise ValueError("target censoring must lie in (0, 1)")
    f_lo = censoring_fraction(scenario, gamma, lo)
    f_hi = censoring_fraction(scenario, gamma, hi)
    if not f_hi < target_censoring < f_lo:
        raise ValueError(
            f"cannot bracket censoring {target_censoring} in tau [{lo}, {hi}] "
            f"(rates {f_hi:.3f}..{f_lo:.3f})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = censoring_fraction(scenario, gamma, mid)
        if abs(f - target_censoring) < CALIBRATION_TOL:
            return mid
        if f > target_censoring:
            lo = mid
        else:
            hi = mid
    raise ValueError("censoring calibration did not converge")


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


@dataclass(frozen=True)
class _Job:
    config: ScenarioConfig
    rep: int
    seed: int
    K: int
    tests: tuple
    estimators: tuple
    standardized: tuple
    grid_cap: int | None
    sensitivity: str = "difference"


def _test_label(test: str, config: ScenarioConfig):
    return ("form", config.focal_covariate) if test == "form" else test


def run_replicate(job: _Job) -> dict:
    """p-values for every (test, estimator, standardized) of one replicate; None marks a failure."""
    cfg = job.config
    data = generate(cfg, replicate_rng(job.seed, job.rep))
    out = {}
    for est in job.estimators:
        try:
            reports = run_tests(data, est, [_test_label(t, cfg) for t in job.tests],
                                job.standardized, job.K, seed=job.seed + 7919 * job.rep + 1,
                                grid_cap=job.grid_cap, sensitivity=job.sensitivity)
        except (ConvergenceError, PathFailureError, DataError, IdentifiabilityError,
                np.linalg.LinAlgError) as exc:
            log.warning("replicate %d, %s failed: %s", job.rep, est, exc)
            for t in job.tests:
                for s in job.standardized:
                    out[(t, est, bool(s))] = None
            continue
        it = iter(reports)
        for t in job.tests:
            for s in job.standardized:
                out[(t, est, bool(s))] = next(it).p_value
    return out


@dataclass
class CellResult:
    scenario: str
    n: int
    gamma: float
    target_censoring: float
    test: str
    estimator: str
    standardized: bool
    rejections: int
    reps: int
    failures: int

    @property
    def rate(self) -> float:
        return self.rejections / self.reps if self.reps else float("nan")

    @property
    def mc_se(self) -> float:
        p = self.rate
        return float(np.sqrt(p * (1 - p) / self.reps)) if self.reps else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(rate=self.rate, mc_se=self.mc_se)
        return d


@dataclass
class HarnessResult:
    cells: list[CellResult]
    reps: int
    K: int
    seed: int
    p_values: dict = field(default_factory=dict, repr=False)

    def cell(self, **match) -> CellResult:
        hits = [c for c in self.cells if all(getattr(c, k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} cells match {match}")
        return hits[0]

    def summary(self) -> dict:
        return {"reps": self.reps, "K": self.K, "seed": self.seed, "alpha": ALPHA,
                "cells": [c.to_dict() for c in self.cells]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(), **kw)

    def table_csv(self) -> str:
        """Rejection rates with rows ``gamma x test`` and columns ``estimator x n x censoring``."""
        def col(c):
            return f"{c.estimator}{'' if c.standardized else '_unstd'}_n{c.n}_c{round(100 * c.target_censoring)}"
        cols = list(dict.fromkeys(col(c) for c in self.cells))
        rows: dict = {}
        for c in self.cells:
            rows.setdefault((c.scenario, c.gamma, c.test), {})[col(c)] = c.rate
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "gamma", "test"] + cols)
        for (sc, g, t), vals in rows.items():
            w.writerow([sc, g, t] + [f"{vals[k]:.3f}" if k in vals else "" for k in cols])
        return buf.getvalue()


def run_harness(configs, reps: int = 200, K: int = 200, seed: int = 0,
                tests=HARNESS_TESTS, estimators=HARNESS_ESTIMATORS, standardized=(True, False),
                grid_cap: int | None = 200, processes: int = 1,
                sensitivity: str = "difference") -> HarnessResult:
    """Rejection rates at level 0.05 for every cell of ``configs``.

    Replicate ``r`` of every cell draws its data from ``(seed, r)`` so results
    do not depend on ``processes``.
    """
    if reps < 100:
        log.warning("reps = %d gives a coarse Monte Carlo standard error", reps)
    configs = [c.calibrated() for c in configs]
    tests, estimators, standardized = tuple(tests), tuple(estimators), tuple(bool(s) for s in standardized)
    cells, pvals = [], {}
    for cfg in configs:
        jobs = [_Job(cfg, r, seed, K, tests, estimators, standardized, grid_cap, sensitivity)
                for r in range(reps)]
        if processes > 1:
            with ProcessPoolExecutor(max_workers=processes) as pool:
                results = list(pool.map(run_replicate, jobs, chunksize=max(1, reps // (4 * processes))))
        else:
            results = [run_replicate(j) for j in jobs]
        for t in tests:
            for est in estimators:
                for s in standardized:
                    ps = [res[(t, est, s)] for res in results]
                    ok = [p for p in ps if p is not None]
                    pvals[(cfg.scenario, cfg.n, cfg.gamma, cfg.target_censoring, t, est, s)] = ps
                    cells.append(CellResult(cfg.scenario, cfg.n, cfg.gamma, cfg.target_censoring,
                                            t, est, s, int(sum(p < ALPHA for p in ok)),
                                            len(ok), len(ps) - len(ok)))
    return HarnessResult(cells, reps, K, seed, pvals)
