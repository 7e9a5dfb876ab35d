"""Compiled inner loops.

Every kernel walks the time grid once; they are the only O(L) loops in the
package.  All matrices are tiny (n, K of order a few), so matrix products
are hand-rolled loops rather than BLAS calls.  Kernels return ``-1`` on
success or the offending grid index on numerical failure; callers raise.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _riccati_rhs(I, a, A, b, D, kI, ka, M1):
    # kI = -(A^T I + I A) + I D I,  ka = -A^T a + I D a + I b
    n = I.shape[0]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += I[i, k] * D[k, j]
            M1[i, j] = s
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += -A[k, i] * I[k, j] - I[i, k] * A[k, j] + M1[i, k] * I[k, j]
            kI[i, j] = s
    for i in range(n):
        s = 0.0
        for k in range(n):
            s += -A[k, i] * a[k] + M1[i, k] * a[k] + I[i, k] * b[k]
        ka[i] = s


@njit(cache=True)
def backward_info_filter(h, mode_cell, A, b, D, obs_slot, sx_inv, sx_inv_x,
                         I_out, a_out, I_plus, a_plus):
    """Backward sweep of the information filter with observation resets.

    ``mode_cell[l]`` is the mode on cell ``[t_l, t_{l+1})``; ``obs_slot[l]``
    is the observation number at grid index ``l`` or -1.  ``I_out``/``a_out``
    receive reset-inclusive values, ``I_plus``/``a_plus`` the right limits
    at observation indices.  One classical RK4 step per cell, integrating
    from t_{l+1} down to t_l; the precision is symmetrized after each step.
    """
    L = mode_cell.shape[0]
    n = A.shape[1]
    I = np.zeros((n, n))
    a = np.zeros(n)
    kI1 = np.zeros((n, n)); kI2 = np.zeros((n, n))
    kI3 = np.zeros((n, n)); kI4 = np.zeros((n, n))
    ka1 = np.zeros(n); ka2 = np.zeros(n); ka3 = np.zeros(n); ka4 = np.zeros(n)
    It = np.zeros((n, n)); at = np.zeros(n); M1 = np.zeros((n, n))

    k_obs = obs_slot[L]
    if k_obs >= 0:
        I_plus[k_obs] = I
        a_plus[k_obs] = a
        for i in range(n):
            for j in range(n):
                I[i, j] += sx_inv[i, j]
            a[i] += sx_inv_x[k_obs, i]
    I_out[L] = I
    a_out[L] = a

    for l in range(L - 1, -1, -1):
        z = mode_cell[l]
        Az = A[z]; bz = b[z]; Dz = D[z]
        _riccati_rhs(I, a, Az, bz, Dz, kI1, ka1, M1)
        for i in range(n):
            for j in range(n):
                It[i, j] = I[i, j] - 0.5 * h * kI1[i, j]
            at[i] = a[i] - 0.5 * h * ka1[i]
        _riccati_rhs(It, at, Az, bz, Dz, kI2, ka2, M1)
        for i in range(n):
            for j in range(n):
                It[i, j] = I[i, j] - 0.5 * h * kI2[i, j]
            at[i] = a[i] - 0.5 * h * ka2[i]
        _riccati_rhs(It, at, Az, bz, Dz, kI3, ka3, M1)
        for i in range(n):
            for j in range(n):
                It[i, j] = I[i, j] - h * kI3[i, j]
            at[i] = a[i] - h * ka3[i]
        _riccati_rhs(It, at, Az, bz, Dz, kI4, ka4, M1)
        for i in range(n):
            for j in range(n):
                I[i, j] -= (h / 6.0) * (kI1[i, j] + 2.0 * kI2[i, j]
                                        + 2.0 * kI3[i, j] + kI4[i, j])
            a[i] -= (h / 6.0) * (ka1[i] + 2.0 * ka2[i] + 2.0 * ka3[i] + ka4[i])
        for i in range(n):
            for j in range(i + 1, n):
                m = 0.5 * (I[i, j] + I[j, i])
                I[i, j] = m
                I[j, i] = m
        ok = True
        for i in range(n):
            if not np.isfinite(a[i]):
                ok = False
            for j in range(n):
                if not np.isfinite(I[i, j]):
                    ok = False
        if not ok:
            return l
        k_obs = obs_slot[l]
        if k_obs >= 0:
            I_plus[k_obs] = I
            a_plus[k_obs] = a
            for i in range(n):
                for j in range(n):
                    I[i, j] += sx_inv[i, j]
                a[i] += sx_inv_x[k_obs, i]
        I_out[l] = I
        a_out[l] = a
    return -1


@njit(cache=True)
def euler_maruyama_prior(h, mode_cell, A, b, Q, y0, eps, y_out):
    """Euler-Maruyama step of the prior diffusion along a fixed mode path."""
    L = mode_cell.shape[0]
    n = y0.shape[0]
    sqh = np.sqrt(h)
    y = y0.copy()
    y_out[0] = y
    yn = np.zeros(n)
    for l in range(L):
        z = mode_cell[l]
        for i in range(n):
            d = b[z, i]
            noise = 0.0
            for k in range(n):
                d += A[z, i, k] * y[k]
                noise += Q[z, i, k] * eps[l, k]
            yn[i] = y[i] + h * d + sqh * noise
        for i in range(n):
            if not np.isfinite(yn[i]):
                return l
            y[i] = yn[i]
        y_out[l + 1] = y
    return -1


@njit(cache=True)
def euler_maruyama_posterior(h, mode_cell, A, b, D, Q, I_drift, a_drift,
                             y0, eps, y_out):
    """Euler-Maruyama step of the observation-conditioned diffusion.

    Drift on cell l is ``(A - D I_l) y + b + D a_l`` with ``I_l``, ``a_l``
    the right-limit filter values at the cell's left endpoint.
    """
    L = mode_cell.shape[0]
    n = y0.shape[0]
    sqh = np.sqrt(h)
    y = y0.copy()
    y_out[0] = y
    yn = np.zeros(n)
    grad = np.zeros(n)
    for l in range(L):
        z = mode_cell[l]
        # grad = -I_l y + a_l
        for i in range(n):
            g = a_drift[l, i]
            for k in range(n):
                g -= I_drift[l, i, k] * y[k]
            grad[i] = g
        for i in range(n):
            d = b[z, i]
            noise = 0.0
            for k in range(n):
                d += A[z, i, k] * y[k] + D[z, i, k] * grad[k]
                noise += Q[z, i, k] * eps[l, k]
            yn[i] = y[i] + h * d + sqh * noise
        for i in range(n):
            if not np.isfinite(yn[i]):
                return l
            y[i] = yn[i]
        y_out[l + 1] = y
    return -1


@njit(cache=True)
def ks_filter(h, y, A, b, D_inv, rates, p0, p_out):
    """Euler scheme for the mode filter driven by the diffusion path.

    Per step: master-equation transport plus the innovation term
    ``p(z) (f_z - fbar)^T D_inv(z) (dy - fbar h)``; negatives are clamped
    to zero and the vector renormalized.  Returns the step index if the
    filter degenerates to the zero vector.
    """
    Lp1 = y.shape[0]
    L = Lp1 - 1
    n = y.shape[1]
    K = p0.shape[0]
    p = np.zeros(K)
    ssum = 0.0
    for z in range(K):
        p[z] = p0[z]
        ssum += p0[z]
    for z in range(K):
        p[z] /= ssum
    p_out[0] = p

    f = np.zeros((K, n))
    fbar = np.zeros(n)
    innov = np.zeros(n)
    pn = np.zeros(K)
    for l in range(L):
        for z in range(K):
            for i in range(n):
                s = b[z, i]
                for k in range(n):
                    s += A[z, i, k] * y[l, k]
                f[z, i] = s
        for i in range(n):
            s = 0.0
            for z in range(K):
                s += p[z] * f[z, i]
            fbar[i] = s
        for i in range(n):
            innov[i] = (y[l + 1, i] - y[l, i]) - fbar[i] * h
        for z in range(K):
            trans = 0.0
            for zp in range(K):
                trans += rates[zp, z] * p[zp]
            lik = 0.0
            for i in range(n):
                s = 0.0
                for k in range(n):
                    s += D_inv[z, i, k] * innov[k]
                lik += (f[z, i] - fbar[i]) * s
            pn[z] = p[z] + trans * h + p[z] * lik
        ssum = 0.0
        for z in range(K):
            if pn[z] < 0.0 or not np.isfinite(pn[z]):
                pn[z] = 0.0
            ssum += pn[z]
        if ssum <= 0.0:
            return l
        for z in range(K):
            p[z] = pn[z] / ssum
        p_out[l + 1] = p
    return -1
