"""numba-compiled inner loops.

Signatures match :mod:`stratcast.kernels.numpy_impl` exactly; outputs are
written into caller-owned buffers.
"""
import math

import numpy as np
from numba import njit

# disease-state axis, duplicated from core to keep the kernels self-contained
_S, _E1, _E2, _I1, _I2, _RP, _RM, _W, _WS = 0, 1, 2, 3, 4, 5, 6, 7, 8


@njit(cache=True, nogil=True)
def simulate_region(x0, beta, cidx, cmat, pi, vacc, wane, sigma, gamma, rho, dt,
                    states, infections):
    K = beta.shape[0]
    A = x0.shape[0]
    D = x0.shape[1]
    states[0] = x0
    ip = np.empty(A)
    lam0 = np.empty(A)
    vac_out = np.zeros((A, D, 9))
    frac = np.empty(9)
    for k in range(K):
        x = states[k]
        y = states[k + 1]
        for a in range(A):
            tot = 0.0
            for q in range(D):
                tot += x[a, q, _I1] + x[a, q, _I2]
            ip[a] = tot
        c = cmat[cidx[k]]
        for a in range(A):
            haz = 0.0
            for b in range(A):
                haz += c[a, b] * ip[b]
            lam0[a] = -math.expm1(-beta[k] * haz)
        w = wane[k]
        for a in range(A):
            for q in range(D):
                lam_dt = (1.0 - pi[k, a, q]) * lam0[a] * dt
                v = vacc[k, a, q] * dt
                frac[_S] = lam_dt
                frac[_E1] = sigma
                frac[_E2] = sigma
                frac[_I1] = gamma
                frac[_I2] = gamma
                frac[_RP] = rho
                frac[_RM] = w
                frac[_W] = w
                frac[_WS] = lam_dt
                # proportional rescale when outflows exceed occupancy
                for s in range(9):
                    tot = frac[s] + v
                    if tot > 1.0:
                        frac[s] = frac[s] / tot
                        vac_out[a, q, s] = x[a, q, s] * (v / tot)
                    else:
                        vac_out[a, q, s] = x[a, q, s] * v
                inf_s = x[a, q, _S] * frac[_S]
                inf_w = x[a, q, _WS] * frac[_WS]
                f_e1 = x[a, q, _E1] * frac[_E1]
                f_e2 = x[a, q, _E2] * frac[_E2]
                f_i1 = x[a, q, _I1] * frac[_I1]
                f_i2 = x[a, q, _I2] * frac[_I2]
                f_rp = x[a, q, _RP] * frac[_RP]
                f_rm = x[a, q, _RM] * frac[_RM]
                f_w = x[a, q, _W] * frac[_W]
                infections[k, a, q, 0] = inf_s
                infections[k, a, q, 1] = inf_w
                y[a, q, _S] = x[a, q, _S] - inf_s
                y[a, q, _E1] = x[a, q, _E1] + inf_s + inf_w - f_e1
                y[a, q, _E2] = x[a, q, _E2] + f_e1 - f_e2
                y[a, q, _I1] = x[a, q, _I1] + f_e2 - f_i1
                y[a, q, _I2] = x[a, q, _I2] + f_i1 - f_i2
                y[a, q, _RP] = x[a, q, _RP] + f_i2 - f_rp
                y[a, q, _RM] = x[a, q, _RM] + f_rp - f_rm
                y[a, q, _W] = x[a, q, _W] + f_rm - f_w
                y[a, q, _WS] = x[a, q, _WS] + f_w - inf_w
        for a in range(A):
            for q in range(D):
                for s in range(9):
                    y[a, q, s] -= vac_out[a, q, s]
                    if q > 0:
                        y[a, q, s] += vac_out[a, q - 1, s]


@njit(cache=True, nogil=True)
def convolve_delay(x, f, out):
    K = x.shape[0]
    A = x.shape[1]
    L = f.shape[0]
    out[:] = 0.0
    for l in range(K):
        hi = K - l
        if hi > L:
            hi = L
        for j in range(hi):
            w = f[j]
            for a in range(A):
                out[l + j, a] += w * x[l, a]


@njit(cache=True, nogil=True)
def nb_loglik(y, mu, eta):
    total = 0.0
    lg_eta = math.lgamma(eta)
    for i in range(y.shape[0]):
        m = mu[i]
        yi = y[i]
        if m <= 0.0:
            if yi > 0.0:
                return -np.inf
            continue
        total += (math.lgamma(yi + eta) - lg_eta - math.lgamma(yi + 1.0)
                  + eta * (math.log(eta) - math.log(eta + m))
                  + yi * (math.log(m) - math.log(eta + m)))
    return total


@njit(cache=True, nogil=True)
def spectral_radius(M, tol, max_iter):
    n = M.shape[0]
    shift = 0.0
    for i in range(n):
        for j in range(n):
            if M[i, j] > shift:
                shift = M[i, j]
    if shift == 0.0:
        return 0.0, 0.0, 0
    x = np.ones(n)
    y = np.empty(n)
    est = 0.0
    err = np.inf
    for it in range(1, max_iter + 1):
        # x > 0 with max(x) == 1 here
        lo = np.inf
        hi = 0.0
        est = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += M[i, j] * x[j]
            y[i] = acc
            ratio = acc / x[i]
            if ratio < lo:
                lo = ratio
            if ratio > hi:
                hi = ratio
            if acc > est:
                est = acc
        resid = 0.0
        for i in range(n):
            d = abs(y[i] - est * x[i])
            if d > resid:
                resid = d
        err = min(hi - lo, resid)
        if err <= tol * est:
            return est, err, it
        norm = 0.0
        for i in range(n):
            y[i] += shift * x[i]
            if y[i] > norm:
                norm = y[i]
        for i in range(n):
            x[i] = y[i] / norm
    return est, err, max_iter
