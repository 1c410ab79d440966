"""Wall-clock comparison of the numba and numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--ages 8] [--doses 5] [--days 400] [--repeat 20]

Prints the median time per call of each kernel under both backends, the
speed-up, and the largest absolute difference between their outputs.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from stratcast.kernels import get_backend


def _inputs(A: int, D: int, days: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    dt = 0.5
    K = int(days / dt)
    x0 = np.zeros((A, D, 9))
    x0[:, 0, 0] = rng.uniform(1e5, 1e6, A)
    x0[:, 0, 3] = 10.0
    x0[:, 0, 0] -= 10.0
    cmat = rng.uniform(0.0, 1.0, (3, A, A)) * 1e-6
    cidx = np.repeat(np.arange(3), K // 3 + 1)[:K].astype(np.int64)
    beta = np.exp(np.cumsum(rng.normal(0, 0.01, K)))
    pi = np.tile(np.linspace(0, 0.8, D), (K, A, 1))
    vacc = np.zeros((K, A, D))
    vacc[:, :, :-1] = 0.002
    wane = np.full(K, dt * 2 / 534.0)
    conv_x = rng.uniform(0, 100, (K, A))
    conv_f = rng.gamma(2.0, 1.0, 60)
    conv_f /= conv_f.sum()
    y = rng.poisson(50, 5000).astype(float)
    mu = rng.uniform(10, 100, 5000)
    M = rng.uniform(0, 1, (A, A))
    return dict(x0=x0, beta=beta, cidx=cidx, cmat=cmat, pi=pi, vacc=vacc, wane=wane, dt=dt, K=K,
                conv_x=conv_x, conv_f=conv_f, y=y, mu=mu, M=M)


def _calls(impl, p):
    A, D = p["x0"].shape[:2]
    states = np.empty((p["K"] + 1, A, D, 9))
    infections = np.empty((p["K"], A, D, 2))
    conv_out = np.empty_like(p["conv_x"])

    def sim():
        impl.simulate_region(p["x0"], p["beta"], p["cidx"], p["cmat"], p["pi"], p["vacc"], p["wane"],
                             2 * p["dt"] / 2.0, 2 * p["dt"] / 4.0, p["dt"] / 12.0, p["dt"], states, infections)
        return states

    def conv():
        impl.convolve_delay(p["conv_x"], p["conv_f"], conv_out)
        return conv_out

    return {"simulate_region": sim, "convolve_delay": conv,
            "nb_loglik": lambda: np.asarray(impl.nb_loglik(p["y"], p["mu"], 10.0)),
            "spectral_radius": lambda: np.asarray(impl.spectral_radius(p["M"], 1e-10, 100000))}


def _time(fn, repeat: int) -> float:
    fn()  # warm-up, includes compilation for numba
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ages", type=int, default=8)
    ap.add_argument("--doses", type=int, default=5)
    ap.add_argument("--days", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    p = _inputs(args.ages, args.doses, args.days)
    fast, slow = _calls(get_backend("numba"), p), _calls(get_backend("numpy"), p)
    print(f"{'kernel':<18}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}{'max |diff|':>14}")
    for name in fast:
        a = np.array(fast[name](), copy=True)
        b = np.array(slow[name](), copy=True)
        tf, ts = _time(fast[name], args.repeat), _time(slow[name], args.repeat)
        print(f"{name:<18}{tf * 1e3:>12.3f}{ts * 1e3:>12.3f}{ts / tf:>10.1f}{np.max(np.abs(a - b)):>14.3g}")


if __name__ == "__main__":
    main()
