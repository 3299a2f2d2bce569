"""Supremum tests built on the residual process and its resampled null paths."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import SurvivalDataset
from .estimate import ConvergenceError, FittedModel, fit, usable
from .perturb import SENSITIVITIES, PathBundle, bundles_from_fits, perturbed_fits
from .process import DEFAULT_GRID_CAP, EvalGrid, Lattice, form_grid, link_grid, omnibus_grid
from .residual import build_frame, estimate_baseline_densities

log = logging.getLogger(__name__)

DEFAULT_K = 500
MIN_K_WARNING = 50
PLOT_PATHS = 50


def parse_test(test, names) -> tuple[str, int | None]:
    """Normalize a test label to ``(kind, q)``.

    Accepts ``"omnibus"``/``"omni"``, ``"link"``, ``("form", q)`` and
    ``"form:<name or 1-based index>"``.
    """
    if isinstance(test, tuple):
        kind, q = test
        return _check_kind(kind, q, len(names))
    test = str(test)
    if test in ("omni", "omnibus"):
        return "omnibus", None
    if test == "link":
        return "link", None
    if test.startswith("form:") or test.startswith("form(") and test.endswith(")"):
        key = test[5:].rstrip(")") if test.startswith("form:") else test[5:-1]
        if key in names:
            return "form", list(names).index(key)
        if key.isdigit() and 1 <= int(key) <= len(names):
            return "form", int(key) - 1
        raise ValueError(f"unknown covariate {key!r} in test {test!r}")
    raise ValueError(f"unknown test {test!r}; use omni, link or form:<covariate>")


def _check_kind(kind, q, p):
    if kind == "form":
        if q is None or not 0 <= q < p:
            raise ValueError(f"form test needs a covariate index in [0, {p})")
        return "form", int(q)
    if kind in ("omni", "omnibus"):
        return "omnibus", None
    if kind == "link":
        return "link", None
    raise ValueError(f"unknown test kind {kind!r}")


def p_value(observed: float, path_sups) -> float:
    """Fraction of null suprema at least as large as the observed one."""
    path_sups = np.asarray(path_sups, dtype=float)
    return float(np.count_nonzero(path_sups >= observed)) / path_sups.size


@dataclass
class GofReport:
    test: str
    estimator: str
    standardized: bool
    W_obs_sup: float
    path_sups: np.ndarray
    p_value: float
    K: int
    K_effective: int
    beta: np.ndarray
    seed: int
    plot_payload: dict = field(default_factory=dict, repr=False)

    def to_dict(self, include_plot: bool = True) -> dict:
        d = {
            "test": self.test,
            "estimator": self.estimator,
            "standardized": self.standardized,
            "W_obs_sup": self.W_obs_sup,
            "p_value": self.p_value,
            "K": self.K,
            "K_effective": self.K_effective,
            "seed": self.seed,
            "beta": [float(b) for b in self.beta],
            "path_sups": [float(s) for s in self.path_sups],
        }
        if include_plot:
            d["plot_payload"] = self.plot_payload
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def plot_rows(self) -> list[tuple[str, int, float]]:
        """Tidy ``(path_id, x, value)`` rows; ``path_id`` is ``obs`` or ``1..50``."""
        pl = self.plot_payload
        rows = [("obs", int(x), float(v)) for x, v in zip(pl["x"], pl["observed"])]
        for k, path in enumerate(pl["paths"], start=1):
            rows.extend((str(k), int(x), float(v)) for x, v in zip(pl["x"], path))
        return rows

    def write_plot_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", self.plot_payload["x_label"], "value"])
            w.writerows((pid, x, repr(v)) for pid, x, v in self.plot_rows())


def build_grid(frame, kind: str, q: int | None, grid_cap: int | None) -> EvalGrid:
    if kind == "omnibus":
        return omnibus_grid(frame, grid_cap)
    if kind == "link":
        return link_grid(frame.covariates)
    return form_grid(frame.covariates, q)


def _plot_payload(frame, grid: EvalGrid, observed: np.ndarray, paths: np.ndarray) -> dict:
    """Observed and first null paths along the display axis.

    Omnibus paths run over the ranks of the log residuals at the threshold
    column where the observed surface peaks; link and form paths run over
    the rank of the threshold (link thresholds ordered by ``z' beta``).
    """
    if grid.kind == "omnibus":
        col = int(np.unravel_index(np.argmax(np.abs(observed)), observed.shape)[1])
        r_sorted = frame.r[frame.order]
        x = np.searchsorted(r_sorted, grid.t_grid, side="left") + 1
        return {"x_label": "rank_of_log_residual", "x": x.tolist(),
                "z": grid.z_grid[col].tolist(),
                "observed": observed[:, col].tolist(),
                "paths": paths[:PLOT_PATHS, :, col].tolist()}
    if grid.kind == "link":
        order = np.argsort(grid.z_grid @ frame.beta, kind="stable")
    else:
        order = np.arange(grid.z_grid.shape[0])
    return {"x_label": "z_rank", "x": list(range(1, order.size + 1)),
            "observed": observed[0, order].tolist(),
            "paths": paths[:PLOT_PATHS, 0][:, order].tolist()}


def _report(frame, anchor, label, grid, observed, bundle: PathBundle, standardized, seed):
    if standardized:
        sd = bundle.pointwise_sd
        obs = observed / sd
        paths = bundle.values / sd
    else:
        obs, paths = observed, bundle.values
    obs_sup = float(np.max(np.abs(obs)))
    sups = np.abs(paths).max(axis=(1, 2))
    return GofReport(
        test=label, estimator=anchor.estimator, standardized=standardized,
        W_obs_sup=obs_sup, path_sups=sups, p_value=p_value(obs_sup, sups),
        K=bundle.K, K_effective=bundle.K_effective, beta=np.asarray(anchor.beta),
        seed=seed, plot_payload=_plot_payload(frame, grid, obs, paths),
    )


def run_tests(data: SurvivalDataset, estimator: str = "mis", tests=("omnibus",),
              standardized=(True,), K: int = DEFAULT_K, seed: int = 0,
              grid_cap: int | None = DEFAULT_GRID_CAP, distribution: str = "exponential",
              threads: int = 1, anchor: FittedModel | None = None,
              scheme: str = "martingale", sensitivity: str = "difference") -> list[GofReport]:
    """Run several tests on one fit and one set of K perturbed fits.

    Reports come back in ``tests`` order, each once per ``standardized`` flag.
    ``sensitivity`` picks how the effect of estimating ``beta`` enters the
    paths (see :mod:`aftgof.perturb`).
    """
    if sensitivity not in SENSITIVITIES:
        raise ValueError(f"sensitivity must be one of {SENSITIVITIES}")
    if K < MIN_K_WARNING:
        log.warning("K = %d resampled paths is small; at least %d is recommended", K, MIN_K_WARNING)
    parsed = [parse_test(t, data.names) for t in tests]
    if anchor is None:
        anchor = fit(data, estimator)
    if not usable(anchor):
        raise ConvergenceError(f"{anchor.estimator} fit did not converge: {anchor.message}")
    frame = build_frame(data, anchor.beta)
    dens = estimate_baseline_densities(frame) if sensitivity == "density" else None
    grids = [build_grid(frame, kind, q, grid_cap) for kind, q in parsed]
    fits = perturbed_fits(data, anchor.estimator, anchor, K, seed, distribution, threads, scheme)
    bundles = bundles_from_fits(data, frame, dens, grids, fits, sensitivity)
    reports = []
    for grid, bundle in zip(grids, bundles):
        observed = Lattice(frame, grid).observed().values
        label = grid.label if grid.kind != "form" else f"form:{data.names[grid.q]}"
        for std in standardized:
            reports.append(_report(frame, anchor, label, grid, observed, bundle, bool(std), seed))
    return reports


def run_test(data: SurvivalDataset, estimator: str = "mis", test="omnibus",
             standardized: bool = True, K: int = DEFAULT_K, seed: int = 0, **kw) -> GofReport:
    return run_tests(data, estimator, (test,), (standardized,), K, seed, **kw)[0]


def run_all_forms(data: SurvivalDataset, estimator: str = "mis", standardized: bool = True,
                  K: int = DEFAULT_K, seed: int = 0, **kw) -> list[GofReport]:
    """One functional-form report per covariate, all from the same perturbed fits."""
    tests = [("form", q) for q in range(data.p)]
    return run_tests(data, estimator, tests, (standardized,), K, seed, **kw)
