"""Adaptive Metropolis with global scaling, one global block then regional blocks.

The target exposes ``blocks`` (index arrays into the unconstrained vector,
block 0 global, the rest mutually independent given block 0), ``init(z)``
returning per-part log-densities and ``update(z, block, parts)`` returning the
parts after block ``block`` changed.  The log posterior is ``parts.sum()``.

All random numbers are drawn in a fixed order (global block, then every
regional block in region order) before any regional evaluation, so the chain
is bit-identical whatever the number of worker threads.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

log = logging.getLogger(__name__)


@dataclass
class AMGSSettings:
    target_accept: float = 0.234
    exponent: float = 0.6
    epsilon: float = 1e-6
    warm_start: int = 500
    init_scale: float = 0.01
    keep_initial_cov: bool = False   # never switch a supplied initial covariance to the empirical one
    joint_every: int = 0             # extra whole-vector update every n iterations (0: none)


@dataclass
class BlockAdaptation:
    """Running moments and global log-scale of one block.

    During the first ``warm_start`` iterations the proposal is isotropic,
    ``exp(lam) * init_scale**2 * I``; afterwards it is
    ``exp(lam) * (cov + epsilon * I)`` with ``lam`` restarted at
    ``log(2.38**2 / d)``.
    """

    dim: int
    lam: float = 0.0
    n: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None
    i: int = 0           # adaptation steps taken in the current phase
    accepted: int = 0
    proposed: int = 0
    warm: bool = True
    init_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros((self.dim, self.dim))

    @classmethod
    def start(cls, dim: int, init_cov: np.ndarray | None = None) -> "BlockAdaptation":
        """Fresh state; a supplied warm-start covariance starts at the optimal scale."""
        if init_cov is None:
            return cls(dim)
        return cls(dim, lam=math.log(2.38 ** 2 / max(dim, 1)), init_cov=np.asarray(init_cov, dtype=float))

    @property
    def cov(self) -> np.ndarray:
        """Empirical covariance of the recorded states (ddof = 1)."""
        if self.n < 2:
            return np.zeros((self.dim, self.dim))
        return self.m2 / (self.n - 1)

    def proposal_cov(self, s: AMGSSettings) -> np.ndarray:
        eye = np.eye(self.dim)
        if self.warm:
            if self.init_cov is not None:
                return math.exp(self.lam) * self.init_cov
            return math.exp(self.lam) * s.init_scale ** 2 * eye
        return math.exp(self.lam) * (self.cov + s.epsilon * eye)

    def record(self, x: np.ndarray):
        """Welford update of the running mean and scatter matrix."""
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + np.outer(delta, x - self.mean)

    def adapt(self, accept_prob: float, s: AMGSSettings):
        self.i += 1
        self.lam += self.i ** (-s.exponent) * (accept_prob - s.target_accept)

    def end_warm_start(self):
        self.warm = False
        self.lam = math.log(2.38 ** 2 / max(self.dim, 1))
        self.i = 0

    def to_arrays(self, prefix: str) -> dict:
        return {f"{prefix}_scalars": np.array([self.lam, self.n, self.i, self.accepted, self.proposed,
                                               float(self.warm)]),
                f"{prefix}_mean": self.mean, f"{prefix}_m2": self.m2,
                f"{prefix}_init_cov": np.zeros((0, 0)) if self.init_cov is None else self.init_cov}

    @classmethod
    def from_arrays(cls, d: dict, prefix: str) -> "BlockAdaptation":
        lam, n, i, acc, prop, warm = d[f"{prefix}_scalars"]
        mean = np.array(d[f"{prefix}_mean"])
        init = np.array(d[f"{prefix}_init_cov"])
        return cls(mean.size, float(lam), int(n), mean, np.array(d[f"{prefix}_m2"]), int(i),
                   int(acc), int(prop), bool(warm), init if init.size else None)


def propose(x: np.ndarray, cov: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """``x + chol(cov) @ noise``; falls back to an eigen square root if not PD."""
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh((cov + cov.T) / 2)
        L = V * np.sqrt(np.clip(w, 0.0, None))
    return x + L @ noise


@dataclass
class Chain:
    """Thinned samples of one chain plus per-iteration diagnostics."""

    names: list[str]
    samples: list = field(default_factory=list)     # unconstrained z
    log_post: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)  # (iteration, block, acceptance rate, log-posterior)

    def arrays(self):
        return (np.array(self.samples).reshape(-1, len(self.names)), np.array(self.log_post),
                np.array(self.iterations, dtype=np.int64))


class AMGSSampler:
    """Block adaptive Metropolis sampler over an unconstrained target."""

    def __init__(self, target, z0, seed: int = 0, settings: AMGSSettings | None = None,
                 threads: int = 1, names: list[str] | None = None, init_covs: list | None = None,
                 joint_cov: np.ndarray | None = None):
        self.target = target
        self.settings = settings or AMGSSettings()
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.z = np.array(z0, dtype=float)
        self.parts = np.asarray(target.init(self.z), dtype=float)
        if not np.isfinite(self.parts.sum()):
            raise ValueError("initial point has zero posterior density")
        self.blocks = [np.asarray(b, dtype=np.int64) for b in target.blocks]
        init_covs = init_covs or [None] * len(self.blocks)
        self.adapt = [BlockAdaptation.start(len(b), c) for b, c in zip(self.blocks, init_covs)]
        self.joint = None
        if self.settings.joint_every:
            if joint_cov is None:
                raise ValueError("joint_every needs a whole-vector proposal covariance")
            self.joint = BlockAdaptation.start(self.z.size, joint_cov)
        self.iteration = 0
        self.adapting = True
        self.threads = max(int(threads), 1)
        self.chain = Chain(names or [f"x{i}" for i in range(self.z.size)])

    @property
    def log_post(self) -> float:
        return float(self.parts.sum())

    # ------------------------------------------------------------ one iteration
    def _accept(self, b: int, z_new, parts_new, u: float):
        old = self.parts.sum()
        new = parts_new.sum()
        log_alpha = new - old if np.isfinite(new) else -math.inf
        prob = math.exp(min(log_alpha, 0.0)) if log_alpha > -math.inf else 0.0
        ad = self.adapt[b]
        ad.proposed += 1
        accepted = u < prob
        if accepted:
            ad.accepted += 1
        return accepted, prob

    def _after(self, b: int, prob: float):
        ad = self.adapt[b]
        if not self.adapting:
            return
        ad.record(self.z[self.blocks[b]])
        ad.adapt(prob, self.settings)
        keep = self.settings.keep_initial_cov and ad.init_cov is not None
        if ad.warm and ad.n >= self.settings.warm_start and not keep:
            ad.end_warm_start()

    def step(self):
        """One global-block update followed by all regional blocks."""
        s = self.settings
        nb = len(self.blocks)
        noise = [self.rng.standard_normal(len(b)) for b in self.blocks[:1]]
        u0 = self.rng.random()
        # global block
        b0 = self.blocks[0]
        if b0.size:
            z_new = self.z.copy()
            z_new[b0] = propose(self.z[b0], self.adapt[0].proposal_cov(s), noise[0])
            parts_new = self._evaluate(z_new, 0, self.parts)
            acc, prob = self._accept(0, z_new, parts_new, u0)
            if acc:
                self.z, self.parts = z_new, parts_new
            self._after(0, prob)
        # regional blocks: draw everything first, evaluate (possibly in parallel), merge in order
        if nb > 1:
            draws = [(self.rng.standard_normal(len(self.blocks[b])), self.rng.random()) for b in range(1, nb)]
            proposals = []
            for b in range(1, nb):
                idx = self.blocks[b]
                z_new = self.z.copy()
                if idx.size:
                    z_new[idx] = propose(self.z[idx], self.adapt[b].proposal_cov(s), draws[b - 1][0])
                proposals.append(z_new)
            jobs = [(b, proposals[b - 1]) for b in range(1, nb) if self.blocks[b].size]
            if self.threads > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(self.threads) as pool:
                    results = list(pool.map(lambda j: self._evaluate(j[1], j[0], self.parts), jobs))
            else:
                results = [self._evaluate(z, b, self.parts) for b, z in jobs]
            base = self.parts.copy()
            for (b, z_new), parts_new in zip(jobs, results):
                trial = base.copy()
                trial[b] = parts_new[b]
                acc, prob = self._accept(b, z_new, trial, draws[b - 1][1])
                if acc:
                    idx = self.blocks[b]
                    self.z[idx] = z_new[idx]
                    self.parts[b] = parts_new[b]
                self._after(b, prob)
        if self.joint is not None and self.iteration % s.joint_every == 0:
            self._joint_step()
        self.iteration += 1

    def _joint_step(self):
        """Whole-vector Metropolis update with a fixed shape and adapted scale.

        Moves along directions that couple the global and regional blocks,
        which the block updates can only follow in small steps.
        """
        ad = self.joint
        noise = self.rng.standard_normal(self.z.size)
        u = self.rng.random()
        z_new = propose(self.z, ad.proposal_cov(self.settings), noise)
        parts_new = self._evaluate(z_new, 0, self.parts)
        new, old = parts_new.sum(), self.parts.sum()
        log_alpha = new - old if np.isfinite(new) else -math.inf
        prob = math.exp(min(log_alpha, 0.0)) if log_alpha > -math.inf else 0.0
        ad.proposed += 1
        if u < prob:
            ad.accepted += 1
            self.z, self.parts = z_new, parts_new
        if self.adapting:
            ad.adapt(prob, self.settings)

    def _evaluate(self, z, b, parts):
        try:
            return np.asarray(self.target.update(z, b, parts), dtype=float)
        except Exception as exc:  # a failed simulation is a rejection
            log.warning("iteration %d block %d: evaluation failed (%s); rejected", self.iteration, b, exc)
            out = np.array(parts, dtype=float)
            out[b] = -math.inf
            return out

    # ------------------------------------------------------------ driving
    def run(self, n_iter: int, burn_in: int = 0, thin: int = 1, adapt_after_burn_in: bool = True,
            checkpoint: Path | None = None, checkpoint_every: int = 0, stop_at: int | None = None) -> Chain:
        """Advance to ``n_iter`` total iterations, recording every ``thin``-th after burn-in.

        ``stop_at`` interrupts the run early (for checkpoint tests); calling
        ``run`` again with the same arguments continues where it stopped.
        """
        end = n_iter if stop_at is None else min(stop_at, n_iter)
        while self.iteration < end:
            if self.iteration >= burn_in and not adapt_after_burn_in:
                self.adapting = False
            self.step()
            it = self.iteration
            if it > burn_in and (it - burn_in) % thin == 0:
                self.chain.samples.append(self.z.copy())
                self.chain.log_post.append(self.log_post)
                self.chain.iterations.append(it)
                for b, ad in enumerate(self.adapt + ([self.joint] if self.joint is not None else [])):
                    rate = ad.accepted / ad.proposed if ad.proposed else float("nan")
                    self.chain.diagnostics.append((it, b, rate, self.log_post))
            if checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
                self.save(checkpoint)
        return self.chain

    def acceptance_rates(self) -> np.ndarray:
        return np.array([a.accepted / a.proposed if a.proposed else np.nan for a in self.adapt])

    def joint_acceptance(self) -> float:
        ad = self.joint
        return ad.accepted / ad.proposed if ad is not None and ad.proposed else float("nan")

    # ------------------------------------------------------------ checkpoints
    def save(self, path):
        path = Path(path)
        arrays = {"z": self.z, "parts": self.parts,
                  "meta": np.array([self.iteration, int(self.adapting), self.seed]),
                  "rng": np.array(json.dumps(self.rng.bit_generator.state)),
                  "chain_samples": np.array(self.chain.samples).reshape(-1, self.z.size),
                  "chain_log_post": np.array(self.chain.log_post),
                  "chain_iterations": np.array(self.chain.iterations, dtype=np.int64),
                  "chain_diag": np.array(self.chain.diagnostics, dtype=float).reshape(-1, 4)}
        for b, ad in enumerate(self.adapt):
            arrays.update(ad.to_arrays(f"block{b}"))
        if self.joint is not None:
            arrays.update(self.joint.to_arrays("joint"))
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)

    @classmethod
    def resume(cls, path, target, settings: AMGSSettings | None = None, threads: int = 1,
               names: list[str] | None = None) -> "AMGSSampler":
        d = dict(np.load(path, allow_pickle=False))
        self = cls.__new__(cls)
        self.target = target
        self.settings = settings or AMGSSettings()
        self.z = d["z"]
        self.parts = d["parts"]
        it, adapting, seed = d["meta"]
        self.iteration, self.adapting, self.seed = int(it), bool(adapting), int(seed)
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = json.loads(str(d["rng"]))
        self.blocks = [np.asarray(b, dtype=np.int64) for b in target.blocks]
        self.adapt = [BlockAdaptation.from_arrays(d, f"block{b}") for b in range(len(self.blocks))]
        self.joint = BlockAdaptation.from_arrays(d, "joint") if "joint_scalars" in d else None
        if self.settings.joint_every and self.joint is None:
            raise ValueError("checkpoint has no joint-update state but joint_every is set")
        self.threads = max(int(threads), 1)
        self.chain = Chain(names or [f"x{i}" for i in range(self.z.size)])
        self.chain.samples = list(d["chain_samples"])
        self.chain.log_post = list(d["chain_log_post"])
        self.chain.iterations = list(d["chain_iterations"])
        self.chain.diagnostics = [(int(r[0]), int(r[1]), r[2], r[3]) for r in d["chain_diag"]]
        return self


# ---------------------------------------------------------------- initialisation

def find_map(log_density, z0, free: np.ndarray | None = None, maxiter: int = 300) -> np.ndarray:
    """Mode of ``log_density`` over the ``free`` coordinates by L-BFGS-B with numerical gradients."""
    z0 = np.array(z0, dtype=float)
    idx = np.flatnonzero(np.ones(z0.size, bool) if free is None else free)

    def neg(x):
        z = z0.copy()
        z[idx] = x
        v = log_density(z)
        return -v if np.isfinite(v) else 1e300

    if maxiter <= 0 or idx.size == 0:
        return z0
    res = minimize(neg, z0[idx], method="L-BFGS-B", options={"maxiter": maxiter})
    out = z0.copy()
    out[idx] = res.x
    if not neg(res.x) <= neg(z0[idx]):
        return z0
    return out


def hessian(log_density, z, idx, h: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of ``log_density`` over coordinates ``idx``."""
    z = np.asarray(z, dtype=float)
    idx = np.asarray(idx)
    n = idx.size
    f0 = log_density(z)
    step = np.eye(z.size)[idx] * h
    fp = np.array([log_density(z + step[i]) for i in range(n)])
    fm = np.array([log_density(z - step[i]) for i in range(n)])
    H = np.empty((n, n))
    for i in range(n):
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / h ** 2
        for j in range(i):
            fpp = log_density(z + step[i] + step[j])
            fmm = log_density(z - step[i] - step[j])
            H[i, j] = H[j, i] = (fpp - fp[i] - fp[j] + 2.0 * f0 - fm[i] - fm[j] + fmm) / (2.0 * h ** 2)
    return H


def covariance_from_hessian(H, floor: float = 1e-8, h: float = 1e-3) -> np.ndarray:
    """Inverse of ``-H`` with eigenvalues floored at ``floor`` times the largest.

    A non-finite Hessian gives ``h * I``.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if not np.all(np.isfinite(H)):
        return np.eye(n) * h
    w, V = np.linalg.eigh(-(H + H.T) / 2.0)
    w = np.maximum(w, floor * max(w.max(), floor))
    return (V / w) @ V.T


def curvature_covariance(log_density, z, idx, h: float = 1e-3, floor: float = 1e-8) -> np.ndarray:
    """Inverse negative Hessian of ``log_density`` over coordinates ``idx`` by central differences.

    Eigenvalues of the negative Hessian are floored at ``floor`` times the
    largest so that the result is always a valid covariance.
    """
    return covariance_from_hessian(hessian(log_density, z, idx, h), floor, h)


def block_sparse_hessian(part, z, blocks, h: float = 1e-3) -> np.ndarray:
    """Full Hessian of ``sum_b part(z, b)`` when part ``b > 0`` depends only on blocks 0 and ``b``.

    Part 0 depends only on block 0.  Cross terms between regional blocks are
    exactly zero, so the cost is one small Hessian per block instead of one
    over the whole vector.
    """
    z = np.asarray(z, dtype=float)
    H = np.zeros((z.size, z.size))
    g = np.asarray(blocks[0])
    if g.size:
        H[np.ix_(g, g)] += hessian(lambda x: part(x, 0), z, g, h)
    for b in range(1, len(blocks)):
        idx = np.concatenate([g, np.asarray(blocks[b])]).astype(np.int64)
        if idx.size:
            H[np.ix_(idx, idx)] += hessian(lambda x, b=b: part(x, b), z, idx, h)
    return H


class GaussianTarget:
    """Correlated multivariate normal in one block; used for calibration."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)
        self.blocks = [np.arange(self.mean.size)]

    def log_density(self, z) -> float:
        d = np.asarray(z) - self.mean
        return float(-0.5 * d @ self.prec @ d)

    def init(self, z):
        return np.array([self.log_density(z)])

    def update(self, z, block, parts):
        return self.init(z)

    def part(self, z, block) -> float:
        return self.log_density(z)
