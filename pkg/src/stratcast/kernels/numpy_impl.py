"""Pure-numpy versions of the inner loops, vectorised over (age, dose).

Used when numba is unavailable or ``STRATCAST_BACKEND=numpy``.
"""
import numpy as np
from scipy.special import gammaln

_S, _E1, _E2, _I1, _I2, _RP, _RM, _W, _WS = range(9)


def simulate_region(x0, beta, cidx, cmat, pi, vacc, wane, sigma, gamma, rho, dt,
                    states, infections):
    K = beta.shape[0]
    A, D, _ = x0.shape
    states[0] = x0
    frac = np.empty((A, D, 9))
    for k in range(K):
        x = states[k]
        ip = x[:, :, _I1].sum(axis=1) + x[:, :, _I2].sum(axis=1)
        lam0 = -np.expm1(-beta[k] * (cmat[cidx[k]] @ ip))
        lam_dt = (1.0 - pi[k]) * lam0[:, None] * dt
        v = vacc[k] * dt
        frac[:, :, _S] = lam_dt
        frac[:, :, _E1] = sigma
        frac[:, :, _E2] = sigma
        frac[:, :, _I1] = gamma
        frac[:, :, _I2] = gamma
        frac[:, :, _RP] = rho
        frac[:, :, _RM] = wane[k]
        frac[:, :, _W] = wane[k]
        frac[:, :, _WS] = lam_dt
        tot = frac + v[:, :, None]
        over = tot > 1.0
        scale = np.where(over, 1.0 / np.where(over, tot, 1.0), 1.0)
        frac *= scale
        vac_out = x * (v[:, :, None] * scale)
        out = x * frac
        infections[k, :, :, 0] = out[:, :, _S]
        infections[k, :, :, 1] = out[:, :, _WS]
        y = states[k + 1]
        y[:, :, _S] = x[:, :, _S] - out[:, :, _S]
        y[:, :, _E1] = x[:, :, _E1] + out[:, :, _S] + out[:, :, _WS] - out[:, :, _E1]
        y[:, :, _E2] = x[:, :, _E2] + out[:, :, _E1] - out[:, :, _E2]
        y[:, :, _I1] = x[:, :, _I1] + out[:, :, _E2] - out[:, :, _I1]
        y[:, :, _I2] = x[:, :, _I2] + out[:, :, _I1] - out[:, :, _I2]
        y[:, :, _RP] = x[:, :, _RP] + out[:, :, _I2] - out[:, :, _RP]
        y[:, :, _RM] = x[:, :, _RM] + out[:, :, _RP] - out[:, :, _RM]
        y[:, :, _W] = x[:, :, _W] + out[:, :, _RM] - out[:, :, _W]
        y[:, :, _WS] = x[:, :, _WS] + out[:, :, _W] - out[:, :, _WS]
        y -= vac_out
        y[:, 1:] += vac_out[:, :-1]


def convolve_delay(x, f, out):
    K = x.shape[0]
    for a in range(x.shape[1]):
        out[:, a] = np.convolve(x[:, a], f)[:K]


def nb_loglik(y, mu, eta):
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    zero = mu <= 0.0
    if np.any(zero & (y > 0.0)):
        return -np.inf
    y = y[~zero]
    mu = mu[~zero]
    return float(np.sum(gammaln(y + eta) - gammaln(eta) - gammaln(y + 1.0)
                        + eta * (np.log(eta) - np.log(eta + mu))
                        + y * (np.log(mu) - np.log(eta + mu))))


def spectral_radius(M, tol, max_iter):
    M = np.asarray(M, dtype=float)
    shift = M.max(initial=0.0)
    if shift == 0.0:
        return 0.0, 0.0, 0
    x = np.ones(M.shape[0])
    est, err = 0.0, np.inf
    for it in range(1, max_iter + 1):
        y = M @ x
        ratio = y / x
        est = y.max()
        err = min(ratio.max() - ratio.min(), np.abs(y - est * x).max())
        if err <= tol * est:
            return float(est), float(err), it
        y += shift * x
        x = y / y.max()
    return float(est), float(err), max_iter
