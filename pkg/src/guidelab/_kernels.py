"""Numba kernels for mixture evaluation.

The mixture score is the inner loop of training targets, metric grids, and
outlier calibration, so it is compiled. Everything runs in log space: per
point we shift by the max component log term before exponentiating, which
keeps responsibilities finite even when the density itself underflows.
"""
from __future__ import annotations

import numpy as np
from numba import njit

LOG_2PI = float(np.log(2.0 * np.pi))


@njit(cache=True)
def mixture_eval(x, sigma, log_w, mu, cov):
    """Score and log density of a packed Gaussian mixture smoothed by sigma.

    x       : (B, 2) query points
    sigma   : (B,) per-point noise level, >= 0
    log_w   : (N,) component log weights, normalized
    mu      : (N, 2) component means
    cov     : (N, 3) component covariances packed as (a, b, c) for [[a,b],[b,c]]

    Returns (B, 4): score_x, score_y, log_density, degenerate_flag.
    The flag is 1.0 when every component term underflowed to -inf; the score
    then falls back to the nearest component (Mahalanobis if finite, else
    Euclidean) so callers always get a finite direction.
    """
    B = x.shape[0]
    N = log_w.shape[0]
    out = np.empty((B, 4))
    lN = np.empty(N)
    us = np.empty(N)
    vs = np.empty(N)

    for p in range(B):
        px = x[p, 0]
        py = x[p, 1]
        s2 = sigma[p] * sigma[p]
        m = -np.inf
        best_quad = np.inf
        best_quad_i = 0
        best_eucl = np.inf
        best_eucl_i = 0
        for i in range(N):
            a = cov[i, 0] + s2
            b = cov[i, 1]
            c = cov[i, 2] + s2
            det = a * c - b * b
            dx = px - mu[i, 0]
            dy = py - mu[i, 1]
            # inverse of [[a,b],[b,c]] applied to (dx, dy)
            u = (c * dx - b * dy) / det
            v = (a * dy - b * dx) / det
            quad = dx * u + dy * v
            li = log_w[i] - 0.5 * (quad + np.log(det)) - LOG_2PI
            lN[i] = li
            us[i] = u
            vs[i] = v
            if li > m:
                m = li
            if quad < best_quad:
                best_quad = quad
                best_quad_i = i
            e2 = dx * dx + dy * dy
            if e2 < best_eucl:
                best_eucl = e2
                best_eucl_i = i
        if not np.isfinite(m):
            # all terms underflowed or overflowed; steer toward the nearest
            # component instead of returning NaN
            i = best_quad_i if np.isfinite(best_quad) else best_eucl_i
            a = cov[i, 0] + s2
            b = cov[i, 1]
            c = cov[i, 2] + s2
            det = a * c - b * b
            dx = mu[i, 0] - px
            dy = mu[i, 1] - py
            out[p, 0] = (c * dx - b * dy) / det
            out[p, 1] = (a * dy - b * dx) / det
            out[p, 2] = -np.inf
            out[p, 3] = 1.0
            continue
        z = 0.0
        gx = 0.0
        gy = 0.0
        for i in range(N):
            r = np.exp(lN[i] - m)
            z += r
            gx -= r * us[i]
            gy -= r * vs[i]
        out[p, 0] = gx / z
        out[p, 1] = gy / z
        out[p, 2] = m + np.log(z)
        out[p, 3] = 0.0
    return out
