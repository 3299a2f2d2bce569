"""Residual-scale counting processes, martingale residuals and baseline densities.

All processes are indexed by the exp-scale residual ``R_i = X_i exp(Z_i' beta)``
so that integrals start at 0 and the densities multiply ``t`` directly. Ranks,
risk sets and jump sizes are identical on the log scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, SurvivalDataset

_INV_SQRT_2PI = 0.3989422804014327


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with value ``values[k]`` on ``[knots[k], knots[k+1])``."""

    knots: np.ndarray
    values: np.ndarray
    left: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], self.left)
        return out if out.ndim else float(out)

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(self.values, prepend=self.left)


def _event_groups(values: np.ndarray, status: np.ndarray, weights: np.ndarray):
    """Distinct event values with weighted event counts and risk-set sizes.

    ``risk[k]`` sums the weights of subjects with ``values >= knots[k]``.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    ev = status[order] == 1
    knots, first = np.unique(v[ev], return_index=True)
    counts = np.add.reduceat(w[ev], first) if knots.size else np.zeros(0)
    suffix = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    risk = suffix[np.searchsorted(v, knots, side="left")]
    return knots, counts, risk


def kaplan_meier(values, status, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Kaplan-Meier jump locations and sizes of the distribution of ``values``.

    Optional ``weights`` multiply both event and risk counts. When the largest
    observation is censored the leftover mass is placed at that largest value,
    so the returned jumps always sum to one.
    """
    values = np.asarray(values, dtype=float)
    status = np.asarray(status, dtype=float)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    knots, d, y = _event_groups(values, status, weights)
    surv = np.cumprod(1.0 - d / y)
    jumps = -np.diff(surv, prepend=1.0)
    tail = surv[-1] if surv.size else 1.0
    vmax = values.max()
    if tail > 0:
        if knots.size and knots[-1] == vmax:
            jumps[-1] += tail
        else:
            knots = np.append(knots, vmax)
            jumps = np.append(jumps, tail)
    return knots, jumps


def _kde(points, weights, bandwidth, t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    u = (t[:, None] - points[None, :]) / bandwidth
    return (np.exp(-0.5 * u * u) @ weights) * (_INV_SQRT_2PI / bandwidth)


def _weighted_quantile(x, w, q):
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    # the slack keeps equal weights from flipping the pick on rounding
    return x[order][np.minimum(np.searchsorted(cw, q - 1e-12, side="left"), x.size - 1)]


def silverman_bandwidth(points, weights=None) -> float:
    """``0.9 min(sd, IQR/1.34) m^(-1/5)`` with ``m`` the effective sample size."""
    x = np.asarray(points, dtype=float)
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    mean = w @ x
    sd = np.sqrt(w @ (x - mean) ** 2)
    iqr = _weighted_quantile(x, w, 0.75) - _weighted_quantile(x, w, 0.25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    m = 1.0 / np.sum(w * w)
    return float(0.9 * spread * m ** -0.2)


@dataclass(frozen=True)
class BaselineDensities:
    """Gaussian-kernel estimates of the residual densities on the exp scale.

    ``f0`` targets the failure-time residual (events, KM-weighted); ``g0``
    targets the observed-time residual (all subjects).
    """

    f_points: np.ndarray
    f_weights: np.ndarray
    g_points: np.ndarray
    bandwidths: tuple[float, float]

    def f0(self, t):
        return _kde(self.f_points, self.f_weights, self.bandwidths[0], t)

    def g0(self, t):
        w = np.full(self.g_points.size, 1.0 / self.g_points.size)
        return _kde(self.g_points, w, self.bandwidths[1], t)


@dataclass(frozen=True)
class ResidualFrame:
    """Residuals at a fixed ``beta`` with their Nelson-Aalen summaries.

    ``event_times`` are the distinct event residuals ``s_k``; ``y_counts`` and
    ``event_counts`` are the risk-set size and number of events there, and
    ``na_increments = event_counts / y_counts``. ``mhat`` holds ``M_i(inf)``.
    """

    beta: np.ndarray
    r: np.ndarray
    delta: np.ndarray
    covariates: np.ndarray
    order: np.ndarray
    event_times: np.ndarray
    event_counts: np.ndarray
    y_counts: np.ndarray
    na_increments: np.ndarray
    mhat: np.ndarray

    @property
    def n(self) -> int:
        return self.r.size

    @property
    def log_r(self) -> np.ndarray:
        return np.log(self.r)

    @property
    def delta_ordered(self) -> np.ndarray:
        return self.delta[self.order]

    def cumulative_hazard(self) -> StepFunction:
        return StepFunction(self.event_times, np.cumsum(self.na_increments))

    def martingale(self, t) -> np.ndarray:
        """``M_i(t)`` for every subject (rows) at each ``t`` (columns)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lam = self.cumulative_hazard()
        counted = (self.delta[:, None] == 1) & (self.r[:, None] <= t[None, :])
        return counted - lam(np.minimum(self.r[:, None], t[None, :]))


def residuals(data: SurvivalDataset, beta) -> np.ndarray:
    """Exp-scale residuals ``X_i exp(Z_i' beta)``."""
    beta = np.asarray(beta, dtype=float)
    return np.exp(data.log_time + data.covariates @ beta)


def build_frame(data: SurvivalDataset, beta) -> ResidualFrame:
    beta = np.array(beta, dtype=float)
    return frame_from_residuals(residuals(data, beta), data.status, data.covariates, beta)


def frame_from_residuals(r, delta, covariates, beta) -> ResidualFrame:
    """Frame for given exp-scale residuals (``beta`` is only recorded)."""
    r = np.asarray(r, dtype=float)
    knots, d, y = _event_groups(r, delta, np.ones_like(r))
    dlam = d / y
    lam = StepFunction(knots, np.cumsum(dlam))
    mhat = delta - lam(r)
    return ResidualFrame(
        beta=np.array(beta, dtype=float), r=r, delta=delta, covariates=covariates,
        order=np.argsort(r, kind="stable"), event_times=knots, event_counts=d,
        y_counts=y, na_increments=dlam, mhat=mhat,
    )


def km_residual_cdf(frame: ResidualFrame, weights=None) -> StepFunction:
    """Kaplan-Meier estimate of the residual CDF (exp scale)."""
    knots, jumps = kaplan_meier(frame.r, frame.delta, weights)
    return StepFunction(knots, np.minimum(np.cumsum(jumps), 1.0))


def estimate_baseline_densities(frame: ResidualFrame) -> BaselineDensities:
    ev = frame.delta == 1
    if ev.sum() < 2:
        raise DataError("at least two events are needed to estimate baseline densities")
    knots, jumps = kaplan_meier(frame.r, frame.delta)
    # Spread each KM jump evenly over the tied events at that residual; mass the
    # KM places on a censored maximum has no event to sit on and is renormalized.
    r_ev = frame.r[ev]
    pos = np.searchsorted(knots, r_ev)
    mult = np.bincount(pos, minlength=knots.size)
    f_weights = jumps[pos] / mult[pos]
    f_weights = f_weights / f_weights.sum()
    h_f = silverman_bandwidth(r_ev, f_weights)
    h_g = silverman_bandwidth(frame.r)
    return BaselineDensities(r_ev, f_weights, frame.r.copy(), (h_f, h_g))
