"""Convergence diagnostics: split R-hat and effective sample size."""
from __future__ import annotations

import numpy as np


def _split(chains: np.ndarray) -> np.ndarray:
    """Halve each chain, giving ``(2 m, n // 2)``."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    n = chains.shape[1] // 2
    return np.concatenate([chains[:, :n], chains[:, chains.shape[1] - n:]], axis=0)


def split_rhat(chains) -> float:
    """Potential scale reduction of a scalar over chains of shape ``(m, n)``."""
    x = _split(chains)
    m, n = x.shape
    if n < 2:
        return float("nan")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def autocorrelation(x) -> np.ndarray:
    """Normalised autocorrelation of a 1-d series via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    return acf / acf[0] if acf[0] > 0 else np.zeros(n)


def ess(chains) -> float:
    """Effective sample size with Geyer's initial monotone positive-sequence truncation."""
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = np.array([autocorrelation(c) * c.var() for c in x])
    W = x.var(axis=1, ddof=1).mean()
    if W == 0:
        return float(m * n)
    var_plus = W * (n - 1) / n + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sums of adjacent pairs, truncated at the first negative and made monotone
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    pairs = pairs[: neg[0]] if neg.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(m * n / max(tau, 1.0 / np.log10(max(m * n, 10))))


def summarise(samples: np.ndarray, names: list[str]) -> list[dict]:
    """Per-parameter mean, sd, quantiles, split R-hat and ESS; ``samples`` is ``(chains, draws, dim)``."""
    samples = np.asarray(samples, dtype=float)
    out = []
    for j, name in enumerate(names):
        s = samples[:, :, j]
        q = np.quantile(s, [0.025, 0.5, 0.975])
        out.append({"name": name, "mean": float(s.mean()), "sd": float(s.std()),
                    "q2.5": float(q[0]), "q50": float(q[1]), "q97.5": float(q[2]),
                    "rhat": split_rhat(s), "ess": ess(s)})
    return out
