"""Rank-based and least-squares estimators of the semiparametric AFT model.

The model is ``log T = -Z' beta + eps`` with residuals ``e_i(beta) = log X_i + Z_i' beta``.
Three estimators are provided:

``mns``
    Root of the non-smooth Gehan score, found by minimizing its convex
    piecewise-linear potential (Nelder-Mead polish from the ``mis`` solution).
``mis``
    Root of the induced-smoothed Gehan score, by Newton's method.
``mls``
    Fixed point of the least-squares map with Kaplan-Meier imputation of the
    censored log times, started from the ``mis`` solution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import kernels
from .data import SurvivalDataset
from .residual import _event_groups, kaplan_meier

log = logging.getLogger(__name__)

ESTIMATORS = ("mns", "mis", "mls")
SCHEMES = ("martingale", "weighted")

MIS_TOL = 1e-8
MNS_XTOL = 1e-8
MLS_TOL = 1e-6
MLS_MAX_ITER = 50


class IdentifiabilityError(ValueError):
    """Covariates do not identify beta (constant or collinear columns)."""


class ConvergenceError(RuntimeError):
    pass


def _check_estimator(estimator: str) -> str:
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    return estimator


def check_identifiable(data: SurvivalDataset) -> None:
    zc = data.covariates - data.covariates.mean(axis=0)
    rank = np.linalg.matrix_rank(zc)
    if rank < data.p:
        raise IdentifiabilityError(
            f"covariate matrix has rank {rank} < p = {data.p} after centring; "
            "beta is not identifiable (constant or collinear columns)")


def usable(model: "FittedModel") -> bool:
    """Whether a fit can anchor or enter the tests.

    ``mls`` iterates that hit the iteration cap still count when finite:
    every iterate of the least-squares map started from a consistent
    estimator is itself consistent, and the discontinuous map can cycle
    between nearby points instead of settling.
    """
    if not np.all(np.isfinite(model.beta)):
        return False
    return model.converged or model.estimator == "mls"


def log_residuals(data: SurvivalDataset, beta) -> np.ndarray:
    return data.log_time + data.covariates @ np.asarray(beta, dtype=float)


def _event_weights(data: SurvivalDataset, weights) -> np.ndarray:
    if weights is None:
        return data.status.copy()
    return data.status * np.asarray(weights, dtype=float)


def _suffix_sums(e: np.ndarray, *columns: np.ndarray):
    """For each i, sums over {j : e_j >= e_i} of each column (ties included)."""
    order = np.argsort(e, kind="stable")
    es = e[order]
    start = np.searchsorted(es, e, side="left")
    out = []
    for col in columns:
        cs = col[order]
        suf = np.cumsum(cs[::-1], axis=0)[::-1]
        suf = np.concatenate([suf, np.zeros((1,) + cs.shape[1:])], axis=0)
        out.append(suf[start])
    return out


def gehan_score(data: SurvivalDataset, beta, weights=None) -> np.ndarray:
    """``n^-1 sum_i sum_j w_i delta_i (Z_i - Z_j) I(e_j >= e_i)``."""
    e = log_residuals(data, beta)
    w = _event_weights(data, weights)
    z = data.covariates
    count, zsum = _suffix_sums(e, np.ones(data.n), z)
    return (w @ (count[:, None] * z - zsum)) / data.n


def gehan_loss(data: SurvivalDataset, beta, weights=None) -> float:
    """Convex potential ``n^-1 sum_i sum_j w_i delta_i max(e_j - e_i, 0)``.

    Its negative gradient is :func:`gehan_score` wherever it is differentiable.
    """
    e = log_residuals(data, beta)
    w = _event_weights(data, weights)
    count, esum = _suffix_sums(e, np.ones(data.n), e)
    return float(w @ (esum - count * e)) / data.n


def pair_inverse_scale(data: SurvivalDataset) -> np.ndarray:
    """``1 / r_ij`` with ``r_ij^2 = |Z_i - Z_j|^2 / n``; zero where ``Z_i = Z_j``.

    Cached on the dataset since it depends only on the covariates.
    """
    cached = getattr(data, "_inv_r", None)
    if cached is not None:
        return cached
    d2 = np.zeros((data.n, data.n))
    for col in data.covariates.T:
        d2 += (col[:, None] - col[None, :]) ** 2
    with np.errstate(divide="ignore"):
        inv = np.where(d2 > 0, np.sqrt(data.n / np.where(d2 > 0, d2, 1.0)), 0.0)
    inv = np.ascontiguousarray(inv)
    object.__setattr__(data, "_inv_r", inv)
    return inv


def smoothed_score(data: SurvivalDataset, beta, weights=None, scale: float = 1.0) -> np.ndarray:
    """Induced-smoothed Gehan score ``n^-1 sum sum w_i delta_i (Z_i - Z_j) Phi((e_j - e_i)/r_ij)``.

    ``scale`` multiplies every ``r_ij``; as it shrinks the score approaches
    :func:`gehan_score` away from ties.
    """
    e = log_residuals(data, beta)
    inv_r = pair_inverse_scale(data)
    if scale != 1.0:
        inv_r = inv_r / scale
    s, _ = kernels.smoothed_score_jac(e, data.covariates, inv_r,
                                      _event_weights(data, weights), False)
    return s


def smoothed_jacobian(data: SurvivalDataset, beta, weights=None) -> np.ndarray:
    """Analytic Jacobian of :func:`smoothed_score` (negative semi-definite)."""
    e = log_residuals(data, beta)
    _, jac = kernels.smoothed_score_jac(e, data.covariates, pair_inverse_scale(data),
                                        _event_weights(data, weights), True)
    return jac


@dataclass
class FittedModel:
    estimator: str
    beta: np.ndarray
    score_norm: float
    iterations: int
    converged: bool
    names: tuple[str, ...] = field(default=())
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "beta": [float(b) for b in self.beta],
            "names": list(self.names),
            "score_norm_at_solution": float(self.score_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        return cls(d["estimator"], np.asarray(d["beta"], dtype=float),
                   d["score_norm_at_solution"], d["iterations"], d["converged"],
                   tuple(d.get("names", ())), d.get("message", ""))


@dataclass(frozen=True)
class PerturbationWeights:
    """Multipliers with mean 1 and variance 1, reproducible from (seed, path_index)."""

    phi: np.ndarray
    seed: int
    path_index: int


MULTIPLIERS = ("exponential", "mammen", "normal")
_MAMMEN_LOW = (3.0 - np.sqrt(5.0)) / 2.0
_MAMMEN_HIGH = (3.0 + np.sqrt(5.0)) / 2.0
_MAMMEN_P_LOW = (np.sqrt(5.0) + 1.0) / (2.0 * np.sqrt(5.0))


def path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def draw_weights(n: int, seed: int, path_index: int,
                 distribution: str = "exponential") -> PerturbationWeights:
    """Draw the multipliers for one resampling path.

    ``exponential`` is unit-rate; ``mammen`` is the positive two-point law
    ``1 + V`` with Mammen's ``V``; ``normal`` is ``1 + N(0, 1)``. All have
    mean 1 and variance 1; only the first two keep every weight positive.
    """
    rng = path_rng(seed, path_index)
    if distribution == "exponential":
        phi = rng.standard_exponential(n)
    elif distribution == "mammen":
        phi = np.where(rng.random(n) < _MAMMEN_P_LOW, _MAMMEN_LOW, _MAMMEN_HIGH)
    elif distribution == "normal":
        phi = 1.0 + rng.standard_normal(n)
    else:
        raise ValueError(f"unknown multiplier distribution {distribution!r}")
    phi.setflags(write=False)
    return PerturbationWeights(phi, int(seed), int(path_index))


def ols_init(data: SurvivalDataset) -> np.ndarray:
    """Negated OLS slope of log X on Z (with intercept), ignoring censoring."""
    zc = data.covariates - data.covariates.mean(axis=0)
    y = data.log_time - data.log_time.mean()
    slope, *_ = np.linalg.lstsq(zc, y, rcond=None)
    return -slope


def _newton_smoothed(data, w, beta0, tol=MIS_TOL, max_iter=50, offset=None):
    """Newton iteration with step halving on the norm of ``score - offset``."""
    z = data.covariates
    inv_r = pair_inverse_scale(data)
    base_e = data.log_time

    def evaluate(beta, jac=True):
        s, j = kernels.smoothed_score_jac(base_e + z @ beta, z, inv_r, w, jac)
        return (s if offset is None else s - offset), j

    beta = np.array(beta0, dtype=float)
    s, jac = evaluate(beta)
    norm = float(np.linalg.norm(s))
    it = 0
    while norm >= tol and it < max_iter:
        it += 1
        try:
            step = -np.linalg.solve(jac, s)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            # gradient step on the smoothed loss (the score is its negative gradient)
            curv = float(-s @ jac @ s)
            step = s * (s @ s / curv) if curv > 0 else s
        lam = 1.0
        for _ in range(40):
            trial = beta + lam * step
            s_new, jac_new = evaluate(trial)
            norm_new = float(np.linalg.norm(s_new))
            if norm_new < norm:
                break
            lam *= 0.5
        else:
            return beta, norm, it, False, "line search failed"
        beta, s, jac, norm = trial, s_new, jac_new, norm_new
    converged = norm < tol
    return beta, norm, it, converged, "" if converged else "maximum iterations reached"


def _nelder_mead_gehan(data, weights, beta0):
    fun = lambda b: gehan_loss(data, b, weights)  # noqa: E731
    beta0 = np.asarray(beta0, dtype=float)
    p = beta0.size
    h = np.maximum(0.05 * np.abs(beta0), 1e-3)
    simplex = np.vstack([beta0, beta0 + np.diag(h)])
    res = optimize.minimize(
        fun, beta0, method="Nelder-Mead",
        options={"initial_simplex": simplex, "xatol": MNS_XTOL, "fatol": np.inf,
                 "maxiter": 1000 * p, "maxfev": 2000 * p},
    )
    beta = res.x if res.fun <= fun(beta0) else beta0
    return np.asarray(beta, dtype=float), int(res.nit), bool(res.success), str(res.message)


def conditional_expectation(data: SurvivalDataset, beta, weights=None) -> np.ndarray:
    """Imputed log failure times ``T_i*(beta)``.

    Events keep ``log X_i``. A censored subject gets the Kaplan-Meier mean of
    the residual distribution beyond ``e_i`` minus ``Z_i' beta``; with no KM
    mass beyond ``e_i`` (censored maximum) the residual itself is used.
    """
    beta = np.asarray(beta, dtype=float)
    e = log_residuals(data, beta)
    knots, jumps = kaplan_meier(e, data.status, weights)
    tail_mass = np.concatenate([np.cumsum(jumps[::-1])[::-1], [0.0]])
    tail_moment = np.concatenate([np.cumsum((knots * jumps)[::-1])[::-1], [0.0]])
    pos = np.searchsorted(knots, e, side="right")
    mass = tail_mass[pos]
    with np.errstate(invalid="ignore", divide="ignore"):
        tail_mean = np.where(mass > 0, tail_moment[pos] / np.where(mass > 0, mass, 1.0), e)
    imputed = tail_mean - data.covariates @ beta
    return np.where(data.status == 1, data.log_time, imputed)


def least_squares_map(data: SurvivalDataset, b, weights=None) -> np.ndarray:
    """One step ``L(b)`` of the least-squares iteration.

    With multipliers the normal equations are weighted and centred at the
    weighted means.
    """
    t = conditional_expectation(data, b, weights)
    z = data.covariates
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=float)
    zbar = (w @ z) / w.sum()
    tbar = (w @ t) / w.sum()
    zc = z - zbar
    lhs = (zc * w[:, None]).T @ zc
    rhs = (zc * w[:, None]).T @ (tbar - t)
    return np.linalg.solve(lhs, rhs)


def _least_squares(data, weights, beta0):
    beta = np.asarray(beta0, dtype=float)
    for m in range(1, MLS_MAX_ITER + 1):
        new = least_squares_map(data, beta, weights)
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < MLS_TOL:
            return beta, m, True, ""
    return beta, MLS_MAX_ITER, False, "maximum iterations reached"


def fit(data: SurvivalDataset, estimator: str = "mis", init=None) -> FittedModel:
    """Estimate beta with the chosen estimator.

    Raises :class:`IdentifiabilityError` for constant or collinear covariates.
    Non-convergence is flagged on the returned model, not raised.
    """
    _check_estimator(estimator)
    check_identifiable(data)
    beta0 = ols_init(data) if init is None else np.asarray(init, dtype=float)
    beta, norm, it, ok, msg = _newton_smoothed(data, data.status.copy(), beta0)
    if estimator == "mis":
        return FittedModel("mis", beta, norm, it, ok, data.names, msg)
    if not ok:
        log.warning("smoothed start for %s did not converge: %s", estimator, msg)
    if estimator == "mns":
        beta, nit, ok2, msg2 = _nelder_mead_gehan(data, None, beta)
        norm = float(np.linalg.norm(gehan_score(data, beta)))
        return FittedModel("mns", beta, norm, nit, ok2, data.names, "" if ok2 else msg2)
    beta, m, ok2, msg2 = _least_squares(data, None, beta)
    norm = float(np.max(np.abs(least_squares_map(data, beta) - beta)))
    return FittedModel("mls", beta, norm, m, ok2, data.names, msg2)


def _martingale_integral(data: SurvivalDataset, beta, weights, integrand) -> np.ndarray:
    """``sum_i w_i int h(s) (Z_i - Zbar(s)) dM_i(s)`` on the log-residual scale.

    ``Zbar(s)`` is the risk-set mean of the covariates and ``M_i`` uses the
    Nelson-Aalen estimate at ``beta``. ``integrand(knots, risk)`` returns ``h``
    at the distinct event residuals.
    """
    e = log_residuals(data, beta)
    z = data.covariates
    n = data.n
    knots, d, y = _event_groups(e, data.status, np.ones(n))
    h = integrand(e, knots, y)
    order = np.argsort(e, kind="stable")
    es = e[order]
    at = np.searchsorted(es, knots, side="left")

    def suffix(a):
        return np.concatenate([np.cumsum(a[::-1], axis=0)[::-1], np.zeros((1,) + a.shape[1:])])

    zbar = suffix(z[order])[at] / y[:, None]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    ev = np.flatnonzero(data.status == 1)
    k = np.searchsorted(knots, e[ev])
    jumps = ((w[ev] * h[k])[:, None] * (z[ev] - zbar[k])).sum(axis=0)
    ws = w[order]
    sw = suffix(ws)[at]
    swz = suffix(ws[:, None] * z[order])[at]
    comp = ((h * d / y)[:, None] * (swz - zbar * sw[:, None])).sum(axis=0)
    return jumps - comp


def gehan_martingale_score(data: SurvivalDataset, beta, weights=None) -> np.ndarray:
    """Gehan score written as ``sum_i w_i int psi (Z_i - Zbar) dM_i`` with ``psi = S_0 / n``.

    With unit weights the compensator part vanishes and this equals
    :func:`gehan_score` exactly.
    """
    return _martingale_integral(data, beta, weights, lambda e, knots, y: y / data.n)


def mean_residual_life(e, status, at) -> np.ndarray:
    """Kaplan-Meier ``E(eps | eps > s) - s`` at the points ``at`` (0 with no mass beyond)."""
    knots, jumps = kaplan_meier(e, status)
    tail_mass = np.concatenate([np.cumsum(jumps[::-1])[::-1], [0.0]])
    tail_moment = np.concatenate([np.cumsum((knots * jumps)[::-1])[::-1], [0.0]])
    pos = np.searchsorted(knots, at, side="right")
    mass = tail_mass[pos]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mass > 0, tail_moment[pos] / np.where(mass > 0, mass, 1.0) - at, 0.0)


def ls_martingale_score(data: SurvivalDataset, beta, weights=None) -> np.ndarray:
    """Least-squares score as ``sum_i w_i int (Z_i - Zbar(s)) (s - m(s)) dM_i(s)``.

    ``m(s)`` is the Kaplan-Meier conditional mean of the residual beyond ``s``.
    """
    def integrand(e, knots, y):
        return -mean_residual_life(e, data.status, knots)
    return _martingale_integral(data, beta, weights, integrand)


def perturbation_offset(data: SurvivalDataset, estimator: str, beta, w) -> np.ndarray:
    """Multiplier-perturbed martingale score at ``beta`` with weights ``w = phi - 1``."""
    if estimator == "mls":
        return ls_martingale_score(data, beta, w)
    return gehan_martingale_score(data, beta, w)


def _nelder_mead_tilted(data, u, beta0):
    """Minimize ``G(beta) - u' beta``; its stationary point solves ``gehan_score = -u``."""
    fun = lambda b: gehan_loss(data, b) - float(u @ b)  # noqa: E731
    beta0 = np.asarray(beta0, dtype=float)
    p = beta0.size
    h = np.maximum(0.05 * np.abs(beta0), 1e-3)
    simplex = np.vstack([beta0, beta0 + np.diag(h)])
    res = optimize.minimize(
        fun, beta0, method="Nelder-Mead",
        options={"initial_simplex": simplex, "xatol": MNS_XTOL, "fatol": np.inf,
                 "maxiter": 1000 * p, "maxfev": 2000 * p},
    )
    beta = res.x if res.fun <= fun(beta0) else beta0
    return np.asarray(beta, dtype=float), int(res.nit), bool(res.success), str(res.message)


def _least_squares_shifted(data, shift, beta0):
    beta = np.asarray(beta0, dtype=float)
    for m in range(1, MLS_MAX_ITER + 1):
        new = least_squares_map(data, beta) - shift
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < MLS_TOL:
            return beta, m, True, ""
    return beta, MLS_MAX_ITER, False, "maximum iterations reached"


def fit_perturbed(data: SurvivalDataset, estimator: str, phi: PerturbationWeights | np.ndarray,
                  anchor: FittedModel, scheme: str = "martingale") -> FittedModel:
    """Solve the multiplier-perturbed estimating equation, starting at ``anchor``.

    ``scheme="martingale"`` (default) solves ``U(beta) = -U_phi`` where ``U_phi``
    is the score's martingale representation at the anchor with each
    subject's contribution multiplied by ``phi_i - 1``. ``scheme="weighted"``
    multiplies the event terms of the estimating equation itself by ``phi_i``
    (weighted Kaplan-Meier and normal equations for ``mls``). Both return the
    anchor when ``phi`` is identically one.
    """
    _check_estimator(estimator)
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    w = np.asarray(getattr(phi, "phi", phi), dtype=float)
    if np.all(w == 1.0):
        # unperturbed equation: the anchor is already its root
        return replace(anchor, beta=np.array(anchor.beta, dtype=float), message="multipliers all one")
    if scheme == "weighted":
        return _fit_weighted(data, estimator, w, anchor)
    u = perturbation_offset(data, estimator, anchor.beta, w - 1.0)
    if estimator in ("mis", "mns"):
        beta, norm, it, ok, msg = _newton_smoothed(data, data.status.copy(), anchor.beta, offset=-u)
        if estimator == "mis":
            return FittedModel("mis", beta, norm, it, ok, data.names, msg)
        start = anchor.beta
        obj = lambda b: gehan_loss(data, b) - float(u @ b)  # noqa: E731
        if obj(beta) < obj(start):
            start = beta
        beta, nit, ok2, msg2 = _nelder_mead_tilted(data, u, start)
        norm = float(np.linalg.norm(gehan_score(data, beta) + u))
        return FittedModel("mns", beta, norm, it + nit, ok2, data.names, "" if ok2 else msg2)
    zc = data.covariates - data.covariates.mean(axis=0)
    shift = np.linalg.solve(zc.T @ zc, u)
    beta, m, ok, msg = _least_squares_shifted(data, shift, anchor.beta)
    norm = float(np.max(np.abs(least_squares_map(data, beta) - shift - beta)))
    return FittedModel("mls", beta, norm, m, ok, data.names, msg)


def _fit_weighted(data, estimator, w, anchor):
    if estimator in ("mis", "mns"):
        beta, norm, it, ok, msg = _newton_smoothed(data, data.status * w, anchor.beta)
        if estimator == "mis":
            return FittedModel("mis", beta, norm, it, ok, data.names, msg)
        # polish from whichever start has the lower weighted loss
        start = anchor.beta
        if gehan_loss(data, beta, w) < gehan_loss(data, start, w):
            start = beta
        beta, nit, ok2, msg2 = _nelder_mead_gehan(data, w, start)
        norm = float(np.linalg.norm(gehan_score(data, beta, w)))
        return FittedModel("mns", beta, norm, it + nit, ok2, data.names, "" if ok2 else msg2)
    beta, m, ok, msg = _least_squares(data, w, anchor.beta)
    norm = float(np.max(np.abs(least_squares_map(data, beta, w) - beta)))
    return FittedModel("mls", beta, norm, m, ok, data.names, msg)
