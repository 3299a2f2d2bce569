"""Multiplier-resampled null paths of the residual process.

Each path is

    W*(t, z) = n^-1/2 sum_i w_i int_0^t (pi_i(z) - E_pi(s, z)) dM_i(s)
               + eta(t, z)' (beta* - beta)

with ``w_i = phi_i - 1`` and ``beta*`` the root of the perturbed estimating
equation (see :func:`aftgof.estimate.fit_perturbed`). The second term
mimics how estimating ``beta`` moves the observed process, so ``beta* - beta``
plays the role of ``beta - beta_0`` and ``eta`` is the derivative of the
observed surface in ``beta``.

``eta`` comes from central differences of the observed surface by default
(``sensitivity="difference"``). ``sensitivity="density"`` instead builds it
from kernel estimates of the baseline residual densities
(:meth:`aftgof.process.Lattice.term2` and :meth:`~aftgof.process.Lattice.term3`).
That version pools the residual density over subjects and drifts when the
censoring of residuals depends on the covariates.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset
from .estimate import FittedModel, PerturbationWeights, draw_weights, fit_perturbed, usable
from .process import EvalGrid, Lattice, ProcessSurface
from .residual import BaselineDensities, ResidualFrame

log = logging.getLogger(__name__)

SD_FLOOR = 1e-10
MAX_FAILED_FRACTION = 0.10
SENSITIVITIES = ("difference", "density")


class PathFailureError(RuntimeError):
    """Too many perturbed fits failed to converge."""


@dataclass(frozen=True)
class PerturbedFit:
    weights: PerturbationWeights
    fit: FittedModel | None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.fit is not None and usable(self.fit)


def _one_fit(data, estimator, anchor, seed, index, distribution, scheme) -> PerturbedFit:
    phi = draw_weights(data.n, seed, index, distribution)
    try:
        res = fit_perturbed(data, estimator, phi, anchor, scheme)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        return PerturbedFit(phi, None, str(exc))
    if not np.all(np.isfinite(res.beta)):
        return PerturbedFit(phi, None, "non-finite coefficients")
    return PerturbedFit(phi, res, "" if res.converged else res.message)


def perturbed_fits(data: SurvivalDataset, estimator: str, anchor: FittedModel, K: int,
                   seed: int, distribution: str = "exponential", threads: int = 1,
                   scheme: str = "martingale") -> list[PerturbedFit]:
    """Solve the K perturbed equations; results depend only on ``(seed, index)``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    job = lambda k: _one_fit(data, estimator, anchor, seed, k, distribution, scheme)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, range(K)))
    return [job(k) for k in range(K)]


class PathEngine:
    """Evaluates perturbed paths for one anchor fit on one grid."""

    def __init__(self, frame: ResidualFrame, dens: BaselineDensities | None, grid: EvalGrid,
                 sensitivity: str = "difference"):
        if sensitivity not in SENSITIVITIES:
            raise ValueError(f"sensitivity must be one of {SENSITIVITIES}")
        if sensitivity == "density" and dens is None:
            raise ValueError("the density sensitivity needs baseline density estimates")
        self.lattice = Lattice(frame, grid, dens if sensitivity == "density" else None)
        self.frame = frame
        self.grid = grid
        self.sensitivity = sensitivity
        self.eta = self.lattice.difference_sensitivity() if sensitivity == "difference" else None

    def estimation_term(self, beta_diff: np.ndarray) -> np.ndarray:
        """Linear effect of moving the coefficients by ``beta_diff`` on the surface."""
        if self.eta is not None:
            return self.eta @ beta_diff
        return self.lattice.term2(beta_diff) + self.lattice.term3(beta_diff)

    def terms(self, phi, beta_star) -> tuple[np.ndarray, np.ndarray]:
        """``(resampled martingale term, estimation term)`` of one path."""
        w = np.asarray(getattr(phi, "phi", phi), dtype=float) - 1.0
        d = np.asarray(beta_star, dtype=float) - self.frame.beta
        return self.lattice.term1(w), self.estimation_term(d)

    def path(self, phi, beta_star) -> np.ndarray:
        t1, t2 = self.terms(phi, beta_star)
        return t1 + t2


def perturbed_path(data: SurvivalDataset, anchor_fit: FittedModel, frame: ResidualFrame,
                   dens: BaselineDensities | None, grid: EvalGrid,
                   phi: PerturbationWeights, scheme: str = "martingale",
                   sensitivity: str = "difference") -> ProcessSurface:
    """One resampled surface; raises if the perturbed fit does not converge."""
    res = fit_perturbed(data, anchor_fit.estimator, phi, anchor_fit, scheme)
    if not usable(res):
        raise RuntimeError(f"perturbed fit did not converge: {res.message}")
    values = PathEngine(frame, dens, grid, sensitivity).path(phi, res.beta)
    return ProcessSurface(grid, values)


@dataclass(frozen=True)
class PathBundle:
    """K resampled surfaces on one grid (failed paths already dropped).

    ``values`` has shape ``(K_effective, |t|, |z|)``. ``seeds`` holds the
    ``(seed, path_index)`` of each kept path and ``failed`` the indices dropped.
    """

    grid: EvalGrid
    values: np.ndarray
    seeds: tuple[tuple[int, int], ...]
    failed: tuple[int, ...]

    @property
    def K(self) -> int:
        return self.values.shape[0] + len(self.failed)

    @property
    def K_effective(self) -> int:
        return self.values.shape[0]

    @property
    def surfaces(self) -> list[ProcessSurface]:
        return [ProcessSurface(self.grid, v) for v in self.values]

    @property
    def pointwise_sd(self) -> np.ndarray:
        if self.K_effective < 2:
            return np.full(self.values.shape[1:], SD_FLOOR)
        return np.maximum(self.values.std(axis=0, ddof=1), SD_FLOOR)

    @property
    def sups(self) -> np.ndarray:
        return np.abs(self.values).max(axis=(1, 2))

    def standardized_sups(self, sd: np.ndarray | None = None) -> np.ndarray:
        sd = self.pointwise_sd if sd is None else sd
        return np.abs(self.values / sd).max(axis=(1, 2))


def _check_failures(fits: list[PerturbedFit]) -> list[int]:
    failed = [k for k, f in enumerate(fits) if not f.ok]
    if failed:
        log.warning("%d of %d perturbed fits failed and were excluded", len(failed), len(fits))
    if len(failed) > MAX_FAILED_FRACTION * len(fits):
        reasons = sorted({fits[k].error or "not converged" for k in failed})
        raise PathFailureError(
            f"{len(failed)} of {len(fits)} perturbed fits failed (limit "
            f"{MAX_FAILED_FRACTION:.0%}): {'; '.join(reasons[:3])}")
    return failed


def bundles_from_fits(data: SurvivalDataset, frame: ResidualFrame,
                      dens: BaselineDensities | None, grids: list[EvalGrid],
                      fits: list[PerturbedFit], sensitivity: str = "difference") -> list[PathBundle]:
    """Build one bundle per grid from a shared set of perturbed fits."""
    failed = _check_failures(fits)
    kept = [f for f in fits if f.ok]
    out = []
    for grid in grids:
        engine = PathEngine(frame, dens, grid, sensitivity)
        vals = np.empty((len(kept),) + grid.shape)
        for k, f in enumerate(kept):
            vals[k] = engine.path(f.weights, f.fit.beta)
        seeds = tuple((f.weights.seed, f.weights.path_index) for f in kept)
        out.append(PathBundle(grid, vals, seeds, tuple(failed)))
    return out


def generate_bundle(data: SurvivalDataset, anchor_fit: FittedModel, frame: ResidualFrame,
                    dens: BaselineDensities | None, grid: EvalGrid, K: int, seed: int,
                    distribution: str = "exponential", threads: int = 1,
                    scheme: str = "martingale", sensitivity: str = "difference") -> PathBundle:
    fits = perturbed_fits(data, anchor_fit.estimator, anchor_fit, K, seed, distribution,
                          threads, scheme)
    return bundles_from_fits(data, frame, dens, [grid], fits, sensitivity)[0]
