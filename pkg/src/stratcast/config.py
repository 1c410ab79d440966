"""Run configuration: YAML file validated into typed settings.

Unknown keys are rejected and every validation error is reported with the
line of the offending key in the source file.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import (BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator,
                      model_validator)

from .core import Calendar
from .priors import BetaPrior, GammaPrior, PriorSet, default_assays

DayLike = Union[int, _dt.date]


class ConfigError(ValueError):
    """Invalid configuration, with the source line where known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        super().__init__(message)
        self.line = line
        self.field = field

    def to_dict(self) -> dict:
        return {"error": "ConfigError", "message": str(self), "line": self.line, "field": self.field}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)


class GammaSpec(_Strict):
    shape: float = Field(gt=0)
    rate: float = Field(gt=0)


class BetaSpec(_Strict):
    a: float = Field(gt=0)
    b: float = Field(gt=0)


class AssaySpec(_Strict):
    sens: BetaSpec
    spec: BetaSpec


class PriorsConfig(_Strict):
    d_I: GammaSpec = GammaSpec(shape=1.43, rate=0.549)
    d_R: GammaSpec = GammaSpec(shape=32.2, rate=2.6)
    psi: GammaSpec = GammaSpec(shape=31.36, rate=224.0)
    eta: GammaSpec = GammaSpec(shape=1.0, rate=0.2)
    sigma_beta: GammaSpec = GammaSpec(shape=1.0, rate=100.0)
    assays: dict[str, AssaySpec] = Field(default_factory=lambda: {
        k: AssaySpec(sens=BetaSpec(a=v["sens"].a, b=v["sens"].b), spec=BetaSpec(a=v["spec"].a, b=v["spec"].b))
        for k, v in default_assays().items()})
    m_log_mean: float = 0.0
    m_log_sd: float = Field(0.5, gt=0)
    zeta_sd: float = Field(10.0, gt=0)
    I0_range: tuple[float, float] = (1.0, 1e6)
    p0_mean: Union[float, list[float]] = 0.02
    p0_logit_sd: float = Field(1.0, gt=0)

    @field_validator("I0_range")
    @classmethod
    def _range(cls, v):
        if not 0 < v[0] < v[1]:
            raise ValueError("I0_range must satisfy 0 < lo < hi")
        return v

    def build(self) -> PriorSet:
        return PriorSet(
            d_I=GammaPrior(self.d_I.shape, self.d_I.rate, offset=2.0),
            d_R=GammaPrior(self.d_R.shape, self.d_R.rate, offset=1.0),
            psi=GammaPrior(self.psi.shape, self.psi.rate),
            eta=GammaPrior(self.eta.shape, self.eta.rate),
            sigma_beta=GammaPrior(self.sigma_beta.shape, self.sigma_beta.rate),
            assays={k: {"sens": BetaPrior(v.sens.a, v.sens.b), "spec": BetaPrior(v.spec.a, v.spec.b)}
                    for k, v in self.assays.items()},
            m_log_mean=self.m_log_mean, m_log_sd=self.m_log_sd, zeta_sd=self.zeta_sd,
            I0_range=tuple(self.I0_range), p0_mean=np.asarray(self.p0_mean, dtype=float),
            p0_logit_sd=self.p0_logit_sd)


class DelaySpec(_Strict):
    mean_days: Optional[float] = Field(None, gt=0)
    sd_days: Optional[float] = Field(None, gt=0)
    lag_days: Optional[list[float]] = None
    mass: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_form(self):
        gamma = self.mean_days is not None and self.sd_days is not None
        table = self.lag_days is not None and self.mass is not None
        if gamma == table:
            raise ValueError("give either mean_days and sd_days, or lag_days and mass")
        if table and len(self.lag_days) != len(self.mass):
            raise ValueError("lag_days and mass must have equal length")
        return self


class SeverityConfig(_Strict):
    kind: Literal["admissions", "deaths"] = "admissions"
    changepoints: list[DayLike] = Field(default_factory=list)
    window_days: float = Field(30.0, gt=0)
    delay: DelaySpec = DelaySpec(mean_days=10.0, sd_days=5.0)
    age_groups: Optional[dict[str, list[str]]] = None


class WaningStage(_Strict):
    start: DayLike
    mean_days: float = Field(gt=0)


class EfficacyEra(_Strict):
    start: DayLike
    end: Optional[DayLike] = None
    pi_mrna: list[float]
    pi_az: list[float]
    alpha_mrna: list[float]
    alpha_az: list[float]

    @field_validator("pi_mrna", "pi_az", "alpha_mrna", "alpha_az")
    @classmethod
    def _unit(cls, v):
        if any(not 0.0 <= x <= 1.0 for x in v):
            raise ValueError("efficacies must lie in [0, 1]")
        return v


class BetaWalkConfig(_Strict):
    start: DayLike = 21
    interval_days: int = Field(7, gt=0)


class LagConfig(_Strict):
    serology_days: int = 25
    vaccination_days: int = 21


class StreamToggles(_Strict):
    counts: bool = True
    serology: bool = True
    prevalence: bool = True


class SerologyConfig(_Strict):
    eligible_bands: Optional[list[str]] = None


class PrevalenceConfig(_Strict):
    thin_days: int = Field(14, gt=0)
    floor: float = Field(1e-6, gt=0)
    age_groups: Optional[dict[str, list[str]]] = None
    truncate_days: int = Field(0, ge=0)


class MCMCConfig(_Strict):
    iterations: int = Field(20000, ge=0)
    burn_in: int = Field(10000, ge=0)
    thin: int = Field(10, ge=1)
    chains: int = Field(1, ge=1)
    target_accept: float = Field(0.234, gt=0, lt=1)
    adapt_exponent: float = Field(0.6, gt=0.5, le=1.0)
    epsilon: float = Field(1e-6, ge=0)
    warm_start: int = Field(500, ge=0)
    init_scale: float = Field(0.01, gt=0)
    adapt_after_burn_in: bool = False
    map_init: bool = True
    map_maxiter: int = Field(300, ge=0)
    curvature: Literal["off", "warm_start", "throughout"] = "off"
    walk_coordinates: Literal["log_beta", "log_baseline_r"] = "log_beta"
    joint_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)


class AnalysisConfig(_Strict):
    counterfactual_cutoff: Optional[DayLike] = None
    r_every_days: int = Field(7, ge=1)
    peak_window_days: int = Field(14, ge=0)
    snapshot_days: list[DayLike] = Field(default_factory=list)
    max_samples: int = Field(200, ge=1)


class RunConfig(_Strict):
    start_date: _dt.date
    horizon_days: int = Field(gt=0)
    dt: float = Field(0.5, gt=0)
    max_dose: int = Field(4, ge=0)
    regions: list[str]
    age_bands: list[str]
    latent_period: float = Field(2.0, gt=0)
    data_dir: str = "data"
    modifier_index: Optional[list[int]] = None
    waning: list[WaningStage] = Field(default_factory=lambda: [WaningStage(start=0, mean_days=534.0)])
    efficacy: list[EfficacyEra] = Field(default_factory=list)
    beta_walk: BetaWalkConfig = BetaWalkConfig()
    severity: SeverityConfig = SeverityConfig()
    lags: LagConfig = LagConfig()
    streams: StreamToggles = StreamToggles()
    serology: SerologyConfig = SerologyConfig()
    prevalence: PrevalenceConfig = PrevalenceConfig()
    priors: PriorsConfig = PriorsConfig()
    fixed: dict[str, Union[float, list[float]]] = Field(default_factory=dict)
    mcmc: MCMCConfig = MCMCConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @field_validator("dt")
    @classmethod
    def _integer_steps(cls, v):
        inv = 1.0 / v
        if abs(inv - round(inv)) > 1e-9:
            raise ValueError(f"1/dt must be an integer (got dt = {v})")
        return v

    @field_validator("regions", "age_bands")
    @classmethod
    def _unique(cls, v):
        if not v:
            raise ValueError("must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("names must be unique")
        return v

    @model_validator(mode="after")
    def _cross_checks(self):
        A = len(self.age_bands)
        if self.modifier_index is not None:
            if len(self.modifier_index) != A:
                raise ValueError("modifier_index needs one entry per age band")
            used = sorted(set(self.modifier_index))
            if used != list(range(len(used))):
                raise ValueError("modifier_index must use consecutive indices from 0")
        eras = sorted(self.efficacy, key=lambda e: self.day(e.start))
        for e in eras:
            for name in ("pi_mrna", "pi_az", "alpha_mrna", "alpha_az"):
                if len(getattr(e, name)) != self.max_dose:
                    raise ValueError(f"efficacy {name} needs max_dose = {self.max_dose} values")
            if e.end is not None and self.day(e.end) <= self.day(e.start):
                raise ValueError(f"efficacy era starting {e.start} ends before it starts")
        for a, b in zip(eras, eras[1:]):
            end = self.day(a.end) if a.end is not None else None
            if end is None or end > self.day(b.start):
                raise ValueError(f"efficacy eras starting {a.start} and {b.start} overlap")
        starts = [self.day(w.start) for w in self.waning]
        if any(y <= x for x, y in zip(starts, starts[1:])):
            raise ValueError("waning stages must have strictly increasing start days")
        for bands in (self.severity.age_groups or {}).values():
            for b in bands:
                if b not in self.age_bands:
                    raise ValueError(f"unknown age band {b!r} in severity.age_groups")
        for b in self.serology.eligible_bands or []:
            if b not in self.age_bands:
                raise ValueError(f"unknown age band {b!r} in serology.eligible_bands")
        return self

    # ------------------------------------------------------------ helpers
    @property
    def data_path(self) -> Path:
        p = Path(self.data_dir)
        return p if p.is_absolute() else self._base_dir / p

    def calendar(self) -> Calendar:
        return Calendar(self.start_date, self.horizon_days)

    def day(self, value: DayLike) -> int:
        if isinstance(value, _dt.datetime):
            value = value.date()
        if isinstance(value, _dt.date):
            return (value - self.start_date).days
        if isinstance(value, str) and "-" in value.strip()[1:]:
            return (_dt.date.fromisoformat(value.strip()) - self.start_date).days
        return int(value)

    @property
    def n_modifiers(self) -> int:
        return len(self.age_bands) if self.modifier_index is None else max(self.modifier_index) + 1

    @property
    def modifier_map(self) -> np.ndarray:
        if self.modifier_index is None:
            return np.arange(len(self.age_bands))
        return np.asarray(self.modifier_index)

    def beta_change_days(self) -> np.ndarray:
        """Days on which a new weekly log-beta value takes effect."""
        first = self.day(self.beta_walk.start)
        return np.arange(max(first, 1), self.horizon_days, self.beta_walk.interval_days)

    def severity_groups(self) -> dict[str, list[str]]:
        return self.severity.age_groups or {b: [b] for b in self.age_bands}

    def prevalence_groups(self) -> dict[str, list[str]]:
        return self.prevalence.age_groups or {b: [b] for b in self.age_bands}

    def eligible_bands(self) -> list[str]:
        return self.serology.eligible_bands or list(self.age_bands)

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- loading

def _node_line(root, loc) -> int | None:
    """1-based line of the deepest YAML node reachable along ``loc``."""
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    line = k.start_mark.line + 1
                    nxt = v
                    break
            if nxt is None:
                break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> RunConfig:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: malformed YAML: {exc}",
                          line=mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping", line=1)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
        line = _node_line(root, loc)
        where = ".".join(str(p) for p in loc) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        more = f" (+{len(exc.errors()) - 1} more)" if len(exc.errors()) > 1 else ""
        raise ConfigError(f"{source}:{line}: {where}: {msg}{more}", line=line, field=where) from None
    if base_dir is not None:
        cfg._base_dir = Path(base_dir).resolve()
    return cfg


def load_config(path) -> RunConfig:
    """Read and validate a YAML run configuration; data_dir resolves relative to the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    return parse_config(path.read_text(), str(path), base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.resolved(), sort_keys=False)
