"""Cumulative sums of martingale residuals over a (t, z) lattice.

The observed process is ``W(t, z) = n^-1/2 sum_i pi_i(z) M_i(t)`` with
``pi_i(z) = I(Z_i <= z)`` componentwise. Everything here is evaluated with
suffix sums in residual order, so one lattice costs ``O((n + m) |z|)`` rather
than ``O(n m |z|)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .residual import BaselineDensities, ResidualFrame, frame_from_residuals

KINDS = ("omnibus", "link", "form")
DEFAULT_GRID_CAP = 200
DIFFERENCE_STEP = 1.0


def indicator_weight(z_i, z) -> int:
    """``prod_q I(Z_iq <= z_q)``; infinite thresholds always pass."""
    return int(np.all(np.asarray(z_i, dtype=float) <= np.asarray(z, dtype=float)))


@dataclass(frozen=True)
class EvalGrid:
    """Evaluation lattice. ``t_grid`` is ``[inf]`` for the link and form tests."""

    t_grid: np.ndarray
    z_grid: np.ndarray
    kind: str
    q: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"grid kind must be one of {KINDS}")
        t = np.atleast_1d(np.asarray(self.t_grid, dtype=float))
        z = np.asarray(self.z_grid, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "z_grid", z)

    @property
    def shape(self) -> tuple[int, int]:
        return self.t_grid.size, self.z_grid.shape[0]

    @property
    def label(self) -> str:
        return f"form({self.q + 1})" if self.kind == "form" else self.kind


def form_grid(covariates: np.ndarray, q: int) -> EvalGrid:
    """Thresholds at the distinct observed values of covariate ``q``; others infinite."""
    covariates = np.asarray(covariates, dtype=float)
    vals = np.unique(covariates[:, q])
    z = np.full((vals.size, covariates.shape[1]), np.inf)
    z[:, q] = vals
    return EvalGrid(np.array([np.inf]), z, "form", q)


def link_grid(covariates: np.ndarray) -> EvalGrid:
    """Thresholds at the distinct observed covariate vectors (sorted)."""
    return EvalGrid(np.array([np.inf]), np.unique(np.asarray(covariates, float), axis=0), "link")


def omnibus_grid(frame: ResidualFrame, cap: int | None = DEFAULT_GRID_CAP) -> EvalGrid:
    """Event residuals crossed with covariate thresholds.

    Thresholds are the distinct observed covariate vectors; when there are more
    than ``cap`` of them, ``cap`` vectors of covariate-wise empirical quantiles
    at evenly spaced levels are used instead. ``cap=None`` keeps the full grid.
    """
    z = np.unique(frame.covariates, axis=0)
    if cap is not None and z.shape[0] > cap:
        levels = (np.arange(cap) + 0.5) / cap
        srt = np.sort(frame.covariates, axis=0)
        pos = np.minimum((levels * frame.n).astype(int), frame.n - 1)
        z = np.unique(srt[pos], axis=0)
    return EvalGrid(frame.event_times.copy(), z, "omnibus")


@dataclass(frozen=True)
class ProcessSurface:
    grid: EvalGrid
    values: np.ndarray

    @property
    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class RiskSetFunction:
    """Left-continuous function ``t -> sum_i c_i I(R_i >= t)`` (and ratios of two)."""

    r_sorted: np.ndarray
    suffix: np.ndarray
    denominator: np.ndarray | None = None

    def __call__(self, t):
        idx = np.searchsorted(self.r_sorted, np.asarray(t, dtype=float), side="left")
        num = self.suffix[idx]
        if self.denominator is None:
            return num
        den = self.denominator[idx]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _pi_matrix(covariates: np.ndarray, z_grid: np.ndarray) -> np.ndarray:
    return np.all(covariates[:, None, :] <= z_grid[None, :, :], axis=2).astype(float)


def _suffix(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    out[:-1] = np.cumsum(a[::-1], axis=0)[::-1]
    return out


def pi_risk_averages(frame: ResidualFrame, z) -> tuple[RiskSetFunction, RiskSetFunction]:
    """``S_pi(t, z) = sum_i pi_i(z) Y_i(t)`` and ``E_pi = S_pi / S_0`` (0 where ``S_0 = 0``)."""
    pi = _pi_matrix(frame.covariates, np.atleast_2d(np.asarray(z, float)))[:, 0]
    r_sorted = frame.r[frame.order]
    s_pi = _suffix(pi[frame.order])
    s_0 = _suffix(np.ones(frame.n))
    return RiskSetFunction(r_sorted, s_pi), RiskSetFunction(r_sorted, s_pi, s_0)


def pi_density_terms(frame: ResidualFrame, dens: BaselineDensities, z):
    """Return callables ``t -> f_pi(t, z)`` and ``t -> g_pi(t, z)`` (rows are t, columns covariates)."""
    pi = _pi_matrix(frame.covariates, np.atleast_2d(np.asarray(z, float)))[:, 0]
    a = (frame.delta * pi) @ frame.covariates / frame.n
    b = pi @ frame.covariates / frame.n

    def f_pi(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (dens.f0(t) * t)[:, None] * a[None, :]

    def g_pi(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (dens.g0(t) * t)[:, None] * b[None, :]

    return f_pi, g_pi


class Lattice:
    """Precomputed pieces for evaluating processes of one frame on one grid.

    Holds the indicator matrix in residual order, the at-risk sums ``S_pi``
    at each event residual and the map from ``t_grid`` to event counts.
    """

    def __init__(self, frame: ResidualFrame, grid: EvalGrid,
                 dens: BaselineDensities | None = None):
        self.frame = frame
        self.grid = grid
        n = frame.n
        order = frame.order
        self.r_sorted = frame.r[order]
        self.pi = _pi_matrix(frame.covariates, grid.z_grid)
        self.pi_sorted = self.pi[order]
        self.at = np.searchsorted(self.r_sorted, frame.event_times, side="left")
        # events grouped by distinct residual, in sorted order
        ev_sorted = np.flatnonzero(frame.delta[order] == 1)
        self.ev_sorted = ev_sorted
        self.ev_starts = np.searchsorted(self.r_sorted[ev_sorted], frame.event_times, side="left")
        self.dlam = frame.na_increments
        self.y = frame.y_counts
        self.pi_suffix = _suffix(self.pi_sorted)
        self.s_pi = self.pi_suffix[self.at]
        self.e_pi = self.s_pi / self.y[:, None]
        self.t_count = np.searchsorted(frame.event_times, grid.t_grid, side="right")
        self.sqrt_n = np.sqrt(n)
        self.dens = dens
        if dens is not None:
            t = grid.t_grid
            finite = np.isfinite(t)
            f0t = np.zeros(t.size)
            f0t[finite] = dens.f0(t[finite]) * t[finite]
            self.f0t = f0t
            s = frame.event_times
            self.g_cum = self._at_t(np.cumsum(dens.g0(s) * s * self.dlam))
            # centred so paths do not move when a constant is added to a covariate
            z = frame.covariates - frame.covariates.mean(axis=0)
            self.a_z = self.pi.T @ (frame.delta[:, None] * z) / n
            self.b_z = self.pi.T @ z / n
            self.a_all = frame.delta @ z / n
            self.b_all = z.mean(axis=0)
            self.f_cum, self.g_pi_cum = self._hazard_derivative_integrals(dens)

    def _hazard_derivative_integrals(self, dens):
        """``int_0^t E_pi d(f0(s) s)`` and ``int_0^t E_pi g0(s) s dLambda(s)`` on the grid.

        ``E_pi`` is constant on each gap between sorted residuals and keeps its
        last value beyond the largest one, where ``f0(s) s`` falls to zero.
        """
        n = self.frame.n
        rs = self.r_sorted
        h = dens.f0(rs) * rs
        dh = np.diff(h, prepend=0.0)
        first = np.searchsorted(rs, rs, side="left")
        e_all = self.pi_suffix[first] / (n - first)[:, None]
        cum = np.concatenate([np.zeros((1, e_all.shape[1])), np.cumsum(e_all * dh[:, None], 0)])
        t = self.grid.t_grid
        c = np.searchsorted(rs, t, side="left")
        h_t = np.zeros(t.size)
        fin = np.isfinite(t)
        h_t[fin] = dens.f0(t[fin]) * t[fin]
        h_prev = np.where(c > 0, h[np.maximum(c - 1, 0)], 0.0)
        f_cum = cum[c] + e_all[np.minimum(c, n - 1)] * (h_t - h_prev)[:, None]
        s = self.frame.event_times
        g_cum = self._at_t(np.cumsum(self.e_pi * (dens.g0(s) * s * self.dlam)[:, None], axis=0))
        return f_cum, g_cum

    def _at_t(self, cum: np.ndarray) -> np.ndarray:
        """Pick cumulative sums over events at each ``t_grid`` point (zero before the first event)."""
        padded = np.concatenate([np.zeros((1,) + cum.shape[1:]), cum], axis=0)
        return padded[self.t_count]

    def _weighted_increments(self, w_sorted: np.ndarray) -> np.ndarray:
        """``sum_i w_i pi_i(z) dM_i(s_k)`` for each event residual ``s_k``."""
        p = w_sorted[:, None] * self.pi_sorted
        events = np.add.reduceat(p[self.ev_sorted], self.ev_starts, axis=0)
        at_risk = _suffix(p)[self.at]
        return events - self.dlam[:, None] * at_risk

    def observed(self) -> ProcessSurface:
        inc = self._weighted_increments(np.ones(self.frame.n))
        return ProcessSurface(self.grid, self._at_t(np.cumsum(inc, axis=0)) / self.sqrt_n)

    def term1(self, w: np.ndarray) -> np.ndarray:
        """``n^-1/2 sum_i w_i int_0^t (pi_i(z) - E_pi(s, z)) dM_i(s)``."""
        w_sorted = np.asarray(w, dtype=float)[self.frame.order]
        inc = self._weighted_increments(w_sorted)
        dn = np.add.reduceat(w_sorted[self.ev_sorted], self.ev_starts)
        du = dn - self.dlam * _suffix(w_sorted)[self.at]
        inc -= self.e_pi * du[:, None]
        return self._at_t(np.cumsum(inc, axis=0)) / self.sqrt_n

    def difference_sensitivity(self, step: float = DIFFERENCE_STEP) -> np.ndarray:
        """Central differences of the observed surface in each coefficient.

        Returns shape ``(|t|, |z|, p)``. Coefficient ``k`` moves by
        ``step / (sqrt(n) sd(Z_k))`` along the centred covariate, so the result
        does not depend on where the covariates are located and scales with
        their units. The step is wide enough to average over many rank
        changes and shrinks with ``n``.
        """
        fr = self.frame
        zc = fr.covariates - fr.covariates.mean(axis=0)
        sd = fr.covariates.std(axis=0)
        out = np.zeros(self.grid.shape + (zc.shape[1],))
        for k in range(zc.shape[1]):
            if not sd[k] > 0:
                continue
            h = step / (self.sqrt_n * sd[k])
            side = []
            for sign in (1.0, -1.0):
                moved = frame_from_residuals(fr.r * np.exp(sign * h * zc[:, k]), fr.delta,
                                             fr.covariates, fr.beta)
                side.append(Lattice(moved, self.grid).observed().values)
            out[..., k] = (side[0] - side[1]) / (2.0 * h)
        return out

    def term2(self, beta_diff: np.ndarray) -> np.ndarray:
        """``-n^1/2 (f_pi(t, z) + int_0^t g_pi dLambda)' beta_diff`` with ``beta_diff = beta* - beta``."""
        ad = self.a_z @ beta_diff
        bd = self.b_z @ beta_diff
        return -self.sqrt_n * (self.f0t[:, None] * ad[None, :] + self.g_cum[:, None] * bd[None, :])

    def term3(self, beta_diff: np.ndarray) -> np.ndarray:
        """``-n^-1/2 int_0^t S_pi(s, z) d(Lambda(s; beta*) - Lambda(s; beta))``, linearized.

        Differentiating ``sum_i M_i(t; beta) = 0`` in ``beta`` gives
        ``n^-1 int_0^t S_0 dkappa = -(f(t) + int_0^t g dLambda)`` with ``pi = 1``,
        so the Nelson-Aalen derivative ``kappa`` comes from the same kernel
        estimates as :meth:`term2` and the two terms cancel at ``z = inf``.
        """
        ad = self.a_all @ beta_diff
        bd = self.b_all @ beta_diff
        return self.sqrt_n * (self.f_cum * ad + self.g_pi_cum * bd)

    def term3_stieltjes(self, frame_star: ResidualFrame) -> np.ndarray:
        """Same quantity as an exact Stieltjes sum against the refitted Nelson-Aalen.

        ``frame_star`` holds residuals at ``beta*``; each measure is summed at its
        own jump points. Noisy in the right tail where risk sets are small.
        """
        own = self._at_t(np.cumsum(self.s_pi * self.dlam[:, None], axis=0))
        s_star = frame_star.event_times
        idx = np.searchsorted(self.r_sorted, s_star, side="left")
        cum = np.cumsum(self.pi_suffix[idx] * frame_star.na_increments[:, None], axis=0)
        cnt = np.searchsorted(s_star, self.grid.t_grid, side="right")
        star = np.concatenate([np.zeros((1, cum.shape[1])), cum], axis=0)[cnt]
        return (own - star) / self.sqrt_n


def observed_process(frame: ResidualFrame, grid: EvalGrid) -> ProcessSurface:
    """``W(t, z) = n^-1/2 sum_i pi_i(z) M_i(t)`` on ``grid``."""
    return Lattice(frame, grid).observed()
