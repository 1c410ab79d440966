"""Flat parameter vectors with named slices, block structure and transforms.

The sampler works on an unconstrained vector: positive quantities on the
log scale (optionally after subtracting a support offset), unit-interval
quantities on the logit scale.  ``log_jacobian`` returns the log absolute
determinant of d(constrained)/d(unconstrained) so that densities defined on
the constrained scale can be evaluated in the unconstrained space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

IDENTITY, LOG, LOGIT = "identity", "log", "logit"


@dataclass
class Entry:
    name: str
    size: int
    transform: str
    offset: float = 0.0
    region: int | None = None  # None for global entries
    shape: tuple[int, ...] = ()


@dataclass
class ParameterLayout:
    """Ordered named entries of the flat vector.

    Global entries come first, then each region's entries in region order,
    so every block is a contiguous slice.
    """

    entries: list[Entry] = field(default_factory=list)
    fixed: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._build()

    def _build(self):
        self.slices: dict[str, slice] = {}
        start = 0
        for e in self.entries:
            self.slices[e.name] = slice(start, start + e.size)
            start += e.size
        self.size = start
        self.transform_code = np.zeros(self.size, dtype=np.int8)
        self.offset = np.zeros(self.size)
        codes = {IDENTITY: 0, LOG: 1, LOGIT: 2}
        for e in self.entries:
            self.transform_code[self.slices[e.name]] = codes[e.transform]
            self.offset[self.slices[e.name]] = e.offset
        self.names = []
        for e in self.entries:
            if e.size == 1 and not e.shape:
                self.names.append(e.name)
            else:
                for i in range(e.size):
                    idx = np.unravel_index(i, e.shape or (e.size,))
                    self.names.append(f"{e.name}[{','.join(str(j) for j in idx)}]")
        self.free = np.ones(self.size, dtype=bool)
        for name in self.fixed:
            self.free[self.slices[name]] = False
        self.n_regions = 1 + max((e.region for e in self.entries if e.region is not None), default=-1)

    def add(self, entry: Entry):
        self.entries.append(entry)
        self._build()

    def entry(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def get(self, theta, name):
        e = self.entry(name)
        v = theta[self.slices[name]]
        return float(v[0]) if e.size == 1 and not e.shape else v.reshape(e.shape or (e.size,))

    def set(self, theta, name, value):
        theta[self.slices[name]] = np.asarray(value, dtype=float).ravel()

    def apply_fixed(self, theta):
        for name, value in self.fixed.items():
            self.set(theta, name, value)
        return theta

    # ---------------------------------------------------------------- blocks
    def block_indices(self) -> list[np.ndarray]:
        """Free indices of the global block followed by one block per region."""
        blocks = []
        glob = np.concatenate([np.arange(self.slices[e.name].start, self.slices[e.name].stop)
                               for e in self.entries if e.region is None] or [np.zeros(0, int)])
        blocks.append(glob[self.free[glob]].astype(np.int64))
        for r in range(self.n_regions):
            idx = np.concatenate([np.arange(self.slices[e.name].start, self.slices[e.name].stop)
                                  for e in self.entries if e.region == r] or [np.zeros(0, int)])
            blocks.append(idx[self.free[idx]].astype(np.int64))
        return blocks

    def block_names(self) -> list[str]:
        return ["global"] + [f"region{r}" for r in range(self.n_regions)]

    def block_of(self) -> list[str]:
        """Block label for every entry of the flat vector."""
        out = []
        for e in self.entries:
            label = "global" if e.region is None else f"region{e.region}"
            out.extend([label] * e.size)
        return out

    # ------------------------------------------------------------ transforms
    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        z = theta.copy()
        c = self.transform_code
        lg = c == 1
        z[lg] = np.log(theta[lg] - self.offset[lg])
        lt = c == 2
        z[lt] = logit(theta[lt])
        return z

    def to_constrained(self, z):
        z = np.asarray(z, dtype=float)
        theta = z.copy()
        c = self.transform_code
        lg = c == 1
        theta[lg] = np.exp(z[lg]) + self.offset[lg]
        lt = c == 2
        theta[lt] = expit(z[lt])
        return theta

    def log_jacobian(self, z, index=None) -> float:
        """``log |d theta / d z|`` summed over ``index`` (default: all free entries)."""
        z = np.asarray(z, dtype=float)
        if index is None:
            index = np.flatnonzero(self.free)
        c = self.transform_code[index]
        zi = z[index]
        out = np.sum(zi[c == 1])
        lt = zi[c == 2]
        # log(expit(z) * (1 - expit(z))) = -softplus(-z) - softplus(z)
        out += -np.sum(np.logaddexp(0.0, -lt) + np.logaddexp(0.0, lt))
        return float(out)


def build_layout(n_regions: int, age_bands, n_modifiers: int, n_beta_steps: int,
                 n_severity_changepoints: int, assays, fixed: dict | None = None) -> ParameterLayout:
    """Standard layout: disease/observation globals then per-region blocks."""
    A = len(age_bands)
    entries = [
        Entry("d_I", 1, LOG, offset=2.0),
        Entry("d_R", 1, LOG, offset=1.0),
        Entry("eta", 1, LOG),
        Entry("sigma_beta", 1, LOG),
    ]
    for assay in assays:
        entries.append(Entry(f"sens[{assay}]", 1, LOGIT))
        entries.append(Entry(f"spec[{assay}]", 1, LOGIT))
    entries.append(Entry("p0", A, LOGIT, shape=(A,)))
    if n_severity_changepoints:
        entries.append(Entry("zeta", A * n_severity_changepoints, IDENTITY,
                             shape=(A, n_severity_changepoints)))
    for r in range(n_regions):
        entries.append(Entry(f"psi[{r}]", 1, LOG, region=r))
        entries.append(Entry(f"I0[{r}]", 1, LOG, region=r))
        entries.append(Entry(f"m[{r}]", n_modifiers, LOG, region=r, shape=(n_modifiers,)))
        if n_beta_steps:
            entries.append(Entry(f"log_beta[{r}]", n_beta_steps, IDENTITY, region=r,
                                 shape=(n_beta_steps,)))
    return ParameterLayout(entries, {k: np.asarray(v, dtype=float) for k, v in (fixed or {}).items()})
