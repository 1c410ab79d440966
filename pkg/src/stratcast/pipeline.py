"""Run orchestration: fitting, chain files and manifests."""
from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import Dataset
from .diagnostics import summarise
from .inference import AMGSSampler, AMGSSettings, block_sparse_hessian, covariance_from_hessian, find_map
from .model import Model, ModelTarget

log = logging.getLogger(__name__)


@dataclass
class FitResult:
    """Posterior draws of every chain on the constrained scale."""

    model: Model
    names: list[str]
    samples: np.ndarray        # (chains, draws, dim)
    log_post: np.ndarray       # (chains, draws)
    acceptance: np.ndarray     # (chains, blocks)
    diagnostics: list = field(default_factory=list)  # (chain, iteration, block, rate, log-posterior)
    seed: int = 0
    start: np.ndarray | None = None
    seconds: float = 0.0
    joint_acceptance: np.ndarray | None = None  # (chains,) when whole-vector updates ran

    def draws(self) -> np.ndarray:
        """All chains stacked, ``(n, dim)``."""
        return self.samples.reshape(-1, self.samples.shape[-1])


def settings_from(cfg: RunConfig) -> AMGSSettings:
    m = cfg.mcmc
    return AMGSSettings(target_accept=m.target_accept, exponent=m.adapt_exponent, epsilon=m.epsilon,
                        warm_start=m.warm_start, init_scale=m.init_scale,
                        keep_initial_cov=m.curvature == "throughout", joint_every=m.joint_every)


def initial_point(model: Model, target: ModelTarget, maxiter: int, sweeps: int = 3) -> np.ndarray:
    """Block-coordinate posterior mode starting from the default parameters.

    Regional blocks are optimised before the global block.  The walk scale
    is excluded because the joint density is unbounded as it shrinks towards
    a flat walk; it is set to the root-mean-square of the fitted weekly
    steps instead.
    """
    layout = model.layout
    z = model.to_z(model.default_theta())
    if maxiter <= 0:
        return z
    order = list(range(1, len(target.blocks))) + [0]
    sb = layout.slices["sigma_beta"]
    for _ in range(sweeps):
        for b in order:
            idx = target.blocks[b]
            free = np.zeros(z.size, dtype=bool)
            free[idx] = True
            free[sb] = False
            if not free.any():
                continue
            parts = target.init(z)
            z = find_map(lambda x, b=b, p=parts: float(np.sum(target.update(x, b, p))), z, free, maxiter)
        if layout.free[sb].all():
            theta = model.to_theta(z)
            steps = [np.diff(np.concatenate([[0.0], layout.get(theta, f"log_beta[{r}]")]))
                     for r in range(model.n_regions) if f"log_beta[{r}]" in layout.slices]
            if steps:
                rms = float(np.sqrt(np.mean(np.concatenate(steps) ** 2)))
                theta[sb] = min(max(rms, 0.005), 0.5)
                z = model.to_z(theta)
    return z


def local_curvature(target: ModelTarget, z) -> tuple[list[np.ndarray], np.ndarray]:
    """Conditional covariance of every block and the joint covariance at ``z``.

    Both come from one block-sparse Hessian of the log posterior: a block's
    conditional covariance inverts its diagonal sub-block, the joint one
    inverts the whole matrix.
    """
    H = block_sparse_hessian(target.part, z, target.blocks)
    blocks = [covariance_from_hessian(H[np.ix_(idx, idx)]) if idx.size else np.zeros((0, 0))
              for idx in target.blocks]
    return blocks, covariance_from_hessian(H)


def fit(cfg: RunConfig, ds: Dataset, seed: int = 0, threads: int = 1, out_dir: Path | None = None,
        model: Model | None = None) -> FitResult:
    """Posterior sampling with the configured number of chains.

    Chain ``c`` uses the ``c``-th child of ``SeedSequence(seed)``.
    """
    t0 = time.time()
    model = model or Model(cfg, ds)
    target = ModelTarget(model)
    m = cfg.mcmc
    z0 = initial_point(model, target, m.map_maxiter if m.map_init else 0)
    init_covs, joint_cov = None, None
    if m.curvature != "off" or m.joint_every:
        covs, joint_cov = local_curvature(target, z0)
        init_covs = covs if m.curvature != "off" else None
    seeds = np.random.SeedSequence(seed).spawn(m.chains)
    samples, logp, acc, diag, joint = [], [], [], [], []
    for c, ss in enumerate(seeds):
        chain_seed = int(ss.generate_state(1)[0])
        ckpt = out_dir / f"checkpoint_{c}.npz" if (out_dir is not None and m.checkpoint_every) else None
        if ckpt is not None and ckpt.exists():
            sampler = AMGSSampler.resume(ckpt, target, settings_from(cfg), threads, model.layout.names)
        else:
            sampler = AMGSSampler(target, z0, chain_seed, settings_from(cfg), threads, model.layout.names,
                                  init_covs, joint_cov)
        chain = sampler.run(m.iterations, burn_in=m.burn_in, thin=m.thin,
                            adapt_after_burn_in=m.adapt_after_burn_in, checkpoint=ckpt,
                            checkpoint_every=m.checkpoint_every)
        z, lp, _ = chain.arrays()
        samples.append(np.array([model.to_theta(x) for x in z]).reshape(-1, model.layout.size))
        logp.append(lp)
        acc.append(sampler.acceptance_rates())
        joint.append(sampler.joint_acceptance())
        diag.extend((c, *row) for row in chain.diagnostics)
        log.info("chain %d: acceptance %s", c, np.round(sampler.acceptance_rates(), 3))
    n = min(len(s) for s in samples)
    return FitResult(model, model.layout.names, np.array([s[:n] for s in samples]),
                     np.array([lp[:n] for lp in logp]), np.array(acc), diag, seed,
                     model.to_theta(z0), time.time() - t0, np.array(joint) if m.joint_every else None)


# ---------------------------------------------------------------- files

def manifest(cfg: RunConfig, kind: str, seed: int | None = None, **extra) -> dict:
    return {"kind": kind, "code_version": __version__, "config_hash": cfg.config_hash(), "seed": seed,
            "python": platform.python_version(), **extra}


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def write_chain(result: FitResult, cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "chain.npz", samples=result.samples, log_post=result.log_post,
             acceptance=result.acceptance, start=result.start)
    layout = result.model.layout
    write_json(out / "manifest.json", manifest(
        cfg, "chain", result.seed, names=result.names, blocks=layout.block_of(),
        chains=int(result.samples.shape[0]), draws=int(result.samples.shape[1]),
        fixed=sorted(layout.fixed), seconds=round(result.seconds, 2),
        acceptance=result.acceptance.tolist(),
        joint_acceptance=None if result.joint_acceptance is None else result.joint_acceptance.tolist(),
        config=cfg.resolved()))
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", "block", "acceptance_rate", "log_posterior"])
        names = layout.block_names() + ["joint"]
        for c, it, b, rate, lp in result.diagnostics:
            w.writerow([c, it, names[b], f"{rate:.6g}", f"{lp:.10g}"])
    rows = summarise(result.samples, result.names)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return out


def read_chain(chain_dir, model: Model) -> FitResult:
    chain_dir = Path(chain_dir)
    meta = json.loads((chain_dir / "manifest.json").read_text())
    if meta["config_hash"] != model.cfg.config_hash():
        log.warning("chain was produced with a different configuration (hash %s)", meta["config_hash"][:12])
    d = np.load(chain_dir / "chain.npz")
    if d["samples"].shape[-1] != model.layout.size:
        raise ValueError("chain does not match the model's parameter layout")
    return FitResult(model, meta["names"], d["samples"], d["log_post"], d["acceptance"], [], meta["seed"],
                     d["start"])
