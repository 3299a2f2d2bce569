"""Numpy implementation of the pairwise kernels (used when the extension is absent)."""

import numpy as np
from scipy.special import ndtr

SATURATE = 8.5
_INV_SQRT_2PI = 0.3989422804014327
_BLOCK = 256


def smoothed_score_jac(e, z, inv_r, w, jacobian=True):
    """Return ``(score, jac)`` of the weighted induced-smoothed Gehan score.

    Same contract as the compiled kernel: ``w[i] = delta[i] * phi[i]`` and
    ``inv_r[i, j] = 1 / r_ij`` with zeros on identical covariate rows.
    """
    e = np.asarray(e, dtype=float)
    z = np.asarray(z, dtype=float)
    n, p = z.shape
    score = np.zeros(p)
    jac = np.zeros((p, p))
    rows = np.flatnonzero(w != 0)
    for start in range(0, rows.size, _BLOCK):
        idx = rows[start:start + _BLOCK]
        ir = inv_r[idx]
        x = (e[None, :] - e[idx, None]) * ir
        cdf = ndtr(x)
        cdf[x > SATURATE] = 1.0
        cdf[(x < -SATURATE) | (ir == 0)] = 0.0
        wi = w[idx]
        wc = wi[:, None] * cdf
        # sum_j (z_i - z_j) cdf_ij, weighted by w_i
        score += (wc.sum(axis=1) @ z[idx]) - (wc.sum(axis=0) @ z)
        if jacobian:
            dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI * ir
            dens[np.abs(x) > SATURATE] = 0.0
            q = wi[:, None] * dens
            zi = z[idx]
            row = q.sum(axis=1)
            col = q.sum(axis=0)
            cross = zi.T @ q @ z
            jac -= (zi.T * row) @ zi - cross - cross.T + (z.T * col) @ z
    return score / n, jac / n
