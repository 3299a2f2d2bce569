# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise kernel for the induced-smoothed Gehan score."""

import numpy as np

from libc.math cimport erfc, exp

cdef double SATURATE = 8.5
cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def smoothed_score_jac(const double[::1] e, const double[:, ::1] z,
                       const double[:, ::1] inv_r, const double[::1] w,
                       bint jacobian=True):
    """Return ``(score, jac)`` of the weighted induced-smoothed Gehan score.

    ``w`` already folds in the event indicator (``w[i] = delta[i] * phi[i]``).
    ``inv_r[i, j]`` is ``1 / r_ij``, zero for identical covariate rows.
    Each unordered pair is visited once: ``Phi(-x) = 1 - Phi(x)`` and the
    density term is symmetric.
    """
    cdef Py_ssize_t n = e.shape[0]
    cdef Py_ssize_t p = z.shape[1]
    score_arr = np.zeros(p)
    jac_arr = np.zeros((p, p))
    cdef double[::1] score = score_arr
    cdef double[:, ::1] jac = jac_arr
    cdef Py_ssize_t i, j, a, b
    cdef double wi, wj, ir, x, cdf, dens, coef, da
    cdef double[64] d
    if p > 64:
        raise ValueError("at most 64 covariates are supported by the compiled kernel")
    with nogil:
        for i in range(n):
            wi = w[i]
            for j in range(i + 1, n):
                wj = w[j]
                if wi == 0.0 and wj == 0.0:
                    continue
                ir = inv_r[i, j]
                if ir == 0.0:
                    continue
                x = (e[j] - e[i]) * ir
                if x > SATURATE:
                    cdf = 1.0
                    dens = 0.0
                elif x < -SATURATE:
                    cdf = 0.0
                    dens = 0.0
                else:
                    cdf = 0.5 * erfc(-x * INV_SQRT2)
                    dens = exp(-0.5 * x * x) * INV_SQRT_2PI * ir
                # (i, j) contributes w_i d Phi(x); (j, i) contributes -w_j d (1 - Phi(x))
                coef = wi * cdf - wj * (1.0 - cdf)
                for a in range(p):
                    d[a] = z[i, a] - z[j, a]
                    score[a] += coef * d[a]
                if jacobian and dens != 0.0:
                    dens = dens * (wi + wj)
                    for a in range(p):
                        da = d[a] * dens
                        for b in range(p):
                            jac[a, b] -= da * d[b]
    score_arr /= n
    jac_arr /= n
    return score_arr, jac_arr
