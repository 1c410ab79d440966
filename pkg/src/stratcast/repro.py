"""Next-generation matrices and reproduction numbers.

The contact matrix used here, ``C~[a, b] = m_a C[a, b] / N_b``, is the same
per-pair rate the dynamics use, so the normalising constant cancels in the
ratio ``R0 * rho(NGM_k) / rho(NGM_0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .core import S, WS


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def dominant_eigenvalue(M, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Spectral radius of a nonnegative square matrix by shifted power iteration.

    Stops when either the Collatz-Wielandt bracket or the eigen-residual
    falls below ``tol`` relative to the estimate.
    """
    M = np.ascontiguousarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(M)) or np.any(M < 0):
        raise ValueError("matrix must be finite and nonnegative")
    value, err, it = kernels.spectral_radius(M, tol, max_iter)
    if it >= max_iter and err > tol * value:
        raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations "
                               f"(residual {err:.3g})", residual=err)
    return float(value)


def effective_susceptibles(state, pi):
    """``sum_q (1 - pi_q) (S_q + Ws_q)`` over the dose axis.

    ``state`` has trailing shape ``(A, D, 9)`` and ``pi`` trailing ``(A, D)``.
    """
    state = np.asarray(state, dtype=float)
    return np.sum((1.0 - np.asarray(pi, dtype=float)) * (state[..., S] + state[..., WS]), axis=-1)


def contact_tilde(contacts, modifiers, populations):
    """Per-pair contact rate ``m_a C[a, b] / N_b`` (works on stacks of matrices)."""
    contacts = np.asarray(contacts, dtype=float)
    populations = np.asarray(populations, dtype=float)
    return np.asarray(modifiers, dtype=float)[:, None] * contacts / populations[None, :]


def ngm(beta, susceptibles, ctilde, d_I):
    """Next-generation matrix ``beta S~_a C~[a, b] d_I``."""
    return beta * np.asarray(susceptibles, dtype=float)[:, None] * ctilde * d_I


# --------------------------------------------------------------------------
# growth rate <-> R0

def _generation_transform(rho: float, sigma: float, gamma: float) -> float:
    """``sum_n P(infectious n steps after infection) rho**-n`` for the E2 I2 chain.

    Stage exit probabilities per step are ``sigma`` (latent) and ``gamma``
    (infectious); a new infection enters E1 one step after it is generated.
    """
    a_e = 1.0 / (1.0 - (1.0 - sigma) / rho)
    a_i = 1.0 / (1.0 - (1.0 - gamma) / rho)
    return a_e * a_e * (sigma / rho) ** 2 * a_i * (1.0 + gamma * a_i / rho)


def r0_from_growth(psi: float, d_L: float, d_I: float, dt: float = 0.5) -> float:
    """Basic reproduction number implied by an exponential growth rate.

    Solves the discrete-time Euler-Lotka relation of the half-day
    two-stage latent / two-stage infectious chain, so a run normalised to
    this R0 grows at exactly ``psi`` per day in its linear phase.
    """
    if d_L <= 0 or d_I <= 0 or dt <= 0:
        raise ValueError("durations and dt must be positive")
    sigma, gamma = 2.0 * dt / d_L, 2.0 * dt / d_I
    rho = math.exp(psi * dt)
    if rho - 1.0 + min(sigma, gamma) <= 0:
        raise ValueError(f"growth rate {psi} too negative for the stage structure")
    transform = _generation_transform(rho, sigma, gamma)
    return d_I / (dt * transform / rho)


def growth_from_r0(r0: float, d_L: float, d_I: float, dt: float = 0.5) -> float:
    """Inverse of :func:`r0_from_growth` by bracketing root-finding."""
    if r0 <= 0:
        raise ValueError("R0 must be positive")
    sigma, gamma = 2.0 * dt / d_L, 2.0 * dt / d_I
    lo = math.log(max(1.0 - min(sigma, gamma), 1e-12) + 1e-9) / dt
    hi = 1.0
    while r0_from_growth(hi, d_L, d_I, dt) < r0:
        hi *= 2.0
        if hi > 1e3:
            raise ConvergenceError("no growth rate bracket for R0")
    return brentq(lambda p: r0_from_growth(p, d_L, d_I, dt) - r0, lo, hi, xtol=1e-14, rtol=1e-14)


# --------------------------------------------------------------------------
# reproduction-number series

@dataclass
class Normaliser:
    """``R0`` implied by growth and the spectral radius of the initial NGM."""

    r0: float
    rstar0: float

    @property
    def factor(self) -> float:
        return self.r0 / self.rstar0


def normaliser(psi, d_L, d_I, dt, beta0, susceptibles0, ctilde0) -> Normaliser:
    r0 = r0_from_growth(psi, d_L, d_I, dt)
    rstar0 = dominant_eigenvalue(ngm(beta0, susceptibles0, ctilde0, d_I))
    if rstar0 <= 0:
        raise ValueError("initial next-generation matrix has zero spectral radius")
    return Normaliser(r0, rstar0)


def effective_R(beta_k, susceptibles_k, ctilde_k, d_I, norm: Normaliser) -> float:
    return norm.factor * dominant_eigenvalue(ngm(beta_k, susceptibles_k, ctilde_k, d_I))


def control_R(beta_k, populations, ctilde_k, d_I, norm: Normaliser) -> float:
    """Reproduction number with the susceptible pool reset to full population."""
    return norm.factor * dominant_eigenvalue(ngm(beta_k, populations, ctilde_k, d_I))


def baseline_R(beta_k, populations, ctilde0, d_I, norm: Normaliser) -> float:
    """Full susceptibility and the initial contact matrix; varies only through beta."""
    return norm.factor * dominant_eigenvalue(ngm(beta_k, populations, ctilde0, d_I))


def age_specific_R(beta_k, susceptibles_k, ctilde_k, d_I, norm: Normaliser):
    """``(R0/R*0) d_I beta (C~ S~)_a`` for every age."""
    return norm.factor * d_I * beta_k * (np.asarray(ctilde_k) @ np.asarray(susceptibles_k, dtype=float))


@dataclass
class RSeries:
    effective: np.ndarray    # (K,)
    control: np.ndarray      # (K,)
    baseline: np.ndarray     # (K,)
    age_specific: np.ndarray  # (K, A)


def reproduction_series(states, pi, beta, cidx, ctilde, populations, d_I, norm: Normaliser,
                        every: int = 1) -> RSeries:
    """All four variants at steps ``0, every, 2*every, ... < K``."""
    K = len(beta)
    ks = np.arange(0, K, every)
    sus = effective_susceptibles(states[ks], pi[ks])
    f = norm.factor
    eff = np.empty(ks.size)
    ctl = np.empty(ks.size)
    base = np.empty(ks.size)
    c0 = ctilde[cidx[0]]
    rho_base = dominant_eigenvalue(ngm(1.0, populations, c0, d_I))
    cache: dict[int, float] = {}
    for i, k in enumerate(ks):
        c = ctilde[cidx[k]]
        eff[i] = f * dominant_eigenvalue(ngm(beta[k], sus[i], c, d_I))
        j = int(cidx[k])
        if j not in cache:
            cache[j] = dominant_eigenvalue(ngm(1.0, populations, c, d_I))
        ctl[i] = f * beta[k] * cache[j]
        base[i] = f * beta[k] * rho_base
    age = f * d_I * beta[ks, None] * np.einsum("kab,kb->ka", ctilde[cidx[ks]], sus)
    return RSeries(eff, ctl, base, age)
