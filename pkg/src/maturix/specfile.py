"""Model specification files (TOML or JSON) for the command-line tool.

Example::

    [model]
    kind = "continuous"
    lam = 5.0
    rho = 0.2
    mu = 0.04

    [killing]
    profile = "drug"
    gamma = 0.3
    delta = 0.3

Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .explicit_model import ContinuousModel, PartialKilling
from .fitting import DrugKinetics
from .rates import Constant, ExpTerm, PiecewiseExponential, RateSchedule

__all__ = ["ModelSpecFile", "load_spec", "SpecError"]


class SpecError(ValueError):
    """The specification file is unreadable or fails validation."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelBlock(_Strict):
    kind: Literal["continuous", "catenary"] = "continuous"
    n: Optional[int] = Field(default=None, ge=2)
    lam: float = Field(gt=0)
    rho: float = Field(gt=0)
    mu: float = Field(ge=0)
    # input switched on at this time (omit for an input active on all of R)
    lam_start: Optional[float] = None


class KillingBlock(_Strict):
    profile: Literal["none", "drug", "pulse"] = "none"
    gamma: float = Field(default=0.0, ge=0)
    delta: float = Field(default=0.0, ge=0, lt=1)
    n0: Optional[int] = Field(default=None, ge=1)
    # pulse: amplitude * (exp(-(t - start)/slow) - exp(-(t - start)/fast)) for t >= start
    pulse_start: float = 0.0
    pulse_slow: float = Field(default=10.0, gt=0)
    pulse_fast: float = Field(default=2.0, gt=0)
    pulse_amplitude: float = Field(default=1.0, ge=0)


class KineticsBlock(_Strict):
    a_kin: float = Field(default=1.86, gt=0)
    b_kin: float = Field(default=0.51, gt=0)
    n_doses: int = Field(default=5, ge=1)
    dose_interval: float = Field(default=24.0, gt=0)
    infusion_duration: float = Field(default=0.5, gt=0)


class EvaluateBlock(_Strict):
    quantity: Literal["mean_count", "q_infinity", "catenary"] = "mean_count"
    start: float = 0.0
    m0: int = Field(default=0, ge=0)
    include_q: bool = False


class SimulationBlock(_Strict):
    seed: int = Field(default=0, ge=0, lt=2**64)
    replicas: int = Field(default=10000, ge=1)
    start: float = 0.0
    m0: int = Field(default=0, ge=0)
    at: Optional[float] = None


class OutputBlock(_Strict):
    path: Optional[str] = None


class ModelSpecFile(_Strict):
    model: ModelBlock
    killing: KillingBlock = KillingBlock()
    kinetics: KineticsBlock = KineticsBlock()
    evaluate: EvaluateBlock = EvaluateBlock()
    simulation: SimulationBlock = SimulationBlock()
    output: OutputBlock = OutputBlock()

    @model_validator(mode="after")
    def _consistent(self):
        if self.model.kind == "catenary":
            if self.model.n is None:
                raise ValueError("catenary models need model.n")
            if self.killing.n0 is not None and self.killing.n0 > self.model.n - 1:
                raise ValueError("killing.n0 must be at most model.n - 1")
        return self

    # -- builders --------------------------------------------------------------

    def kinetics_obj(self) -> DrugKinetics:
        return DrugKinetics(**self.kinetics.model_dump())

    def q_schedule(self) -> Optional[RateSchedule]:
        k = self.killing
        if k.profile == "none":
            return None
        if k.profile == "drug":
            return self.kinetics_obj().schedule()
        a, s = k.pulse_amplitude, k.pulse_start
        return PiecewiseExponential(
            (
                ExpTerm(s, math.inf, 0.0, a, 1.0 / k.pulse_slow, s),
                ExpTerm(s, math.inf, 0.0, -a, 1.0 / k.pulse_fast, s),
            )
        )

    def continuous(self) -> ContinuousModel:
        m = self.model
        start = -math.inf if m.lam_start is None else m.lam_start
        q = self.q_schedule()
        g = None if q is None else PartialKilling(self.killing.gamma, self.killing.delta, q)
        return ContinuousModel(m.rho, Constant(m.lam, start), Constant(m.mu), g)

    def params(self) -> dict:
        m, k = self.model, self.killing
        out = {"lam": m.lam, "rho": m.rho, "mu": m.mu, "gamma": k.gamma}
        if m.kind == "catenary":
            out["n0"] = k.n0 if k.n0 is not None else 1
        else:
            out["delta"] = k.delta
        return out


def load_spec(path) -> tuple[ModelSpecFile, str]:
    """Parse and validate a spec file; returns ``(spec, sha256 of the bytes)``."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise SpecError(f"cannot read {p}: {exc}") from exc
    digest = hashlib.sha256(raw).hexdigest()
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise SpecError(f"{p}: {exc}") from exc
    try:
        spec = ModelSpecFile.model_validate(data)
    except ValueError as exc:
        raise SpecError(f"{p}: {exc}") from exc
    return spec, digest
