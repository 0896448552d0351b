"""Experiment configuration: strict JSON in, validated objects out.

An empty JSON object yields the full model problem (L = 2 pi, eight
population scales, 280,000 replicates each). Unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .crdme import CRDMEProblem
from .mfm import SolverSettings, SpectralFields
from .model import Mesh, ReactionNetwork, build_mesh, reversible_binding_network, periodic_distance

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "config_from_dict",
    "config_hash",
    "echo_config",
    "provenance_line",
]

SPECIES = ("A", "B", "C")
EXECUTION_KEYS = {"workers", "output_dir"}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class DomainConfig(_Strict):
    L: float = Field(2 * math.pi, gt=0)
    N: int = Field(128, ge=3, description="voxels of the lattice process")


class SpeciesConfig(_Strict):
    D: float = Field(gt=0)
    radius: float = Field(ge=0)


def _default_species():
    return {"A": SpeciesConfig(D=0.25, radius=0.05),
            "B": SpeciesConfig(D=0.25, radius=0.05),
            "C": SpeciesConfig(D=0.5, radius=0.1)}


class PotentialConfig(_Strict):
    kappa: float = Field(200.0, ge=0)
    cutoff_factor: float = Field(3.0, gt=0)


class ReactionConfig(_Strict):
    lam: float = Field(1.0, ge=0)
    mu: float = Field(0.05, ge=0)
    sigma: float = Field(0.15, gt=0)


class ProfileConfig(_Strict):
    """Initial shape of one species, scaled to total molar mass ``mass``.

    ``gaussian``: ``exp(-width |x - center|^2)`` with periodic distance.
    ``tabulated``: values on a uniform grid over ``[0, L)``, periodically
    linearly interpolated to any mesh.
    """

    kind: Literal["gaussian", "tabulated"] = "gaussian"
    center: float = 0.0
    width: float = Field(5.0, gt=0)
    values: list[float] | None = None
    mass: float = Field(0.5, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "tabulated":
            if not self.values or len(self.values) < 2:
                raise ValueError("tabulated profile needs at least two values")
            if min(self.values) < 0:
                raise ValueError("tabulated values must be nonnegative")
        return self

    def evaluate(self, x: np.ndarray, L: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            return np.exp(-self.width * periodic_distance(x, self.center, L) ** 2)
        v = np.asarray(self.values, dtype=float)
        grid = np.arange(len(v) + 1) * (L / len(v))
        return np.interp(np.mod(x, L), grid, np.append(v, v[0]))


def _default_initial():
    return {"A": ProfileConfig(center=0.75 * math.pi), "B": ProfileConfig(center=1.25 * math.pi)}


class SolverConfig(_Strict):
    dt_max: float = Field(1e-4, gt=0)
    dt_min: float = Field(1e-7, gt=0)
    newton_tol: float = Field(1e-10, gt=0)
    newton_max_iters: int = Field(12, ge=1)
    positivity_tol: float = Field(1e-8, gt=0)
    N: int = Field(512, ge=4)
    krylov_rtol: float = Field(1e-3, gt=0)
    krylov_restart: int = Field(20, ge=1)
    krylov_maxiter: int = Field(4, ge=1)
    fd_epsilon: float = Field(1e-7, gt=0)
    convolution: Literal["fft", "dense"] = "fft"
    reaction_cutoff: float = Field(1e-17, ge=0, lt=1)
    dt_growth: float = Field(2.0, ge=1)


class ExperimentConfig(_Strict):
    domain: DomainConfig = DomainConfig()
    species: dict[str, SpeciesConfig] = Field(default_factory=_default_species)
    potentials: PotentialConfig = PotentialConfig()
    reactions: ReactionConfig = ReactionConfig()
    initial: dict[str, ProfileConfig] = Field(default_factory=_default_initial)
    gamma: list[int] = Field(default_factory=lambda: [50, 100, 150, 200, 250, 350, 500, 1000],
                             min_length=1)
    replicates: int = Field(280_000, ge=1)
    t_end: float = Field(40.0, ge=0)
    record_count: int = Field(81, ge=1)
    record_times: list[float] | None = None
    snapshot_times: list[float] = Field(default_factory=lambda: [4.0])
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1)
    compare_no_potential: bool = True
    output_dir: str = "results"
    solver: SolverConfig = SolverConfig()

    @field_validator("gamma")
    @classmethod
    def _positive_gamma(cls, v):
        for g in v:
            if g <= 0:
                raise ValueError(f"population scale must be positive, got {g}")
        return v

    @field_validator("species")
    @classmethod
    def _species_names(cls, v):
        if set(v) != set(SPECIES):
            raise ValueError(f"species must be exactly {list(SPECIES)}")
        return v

    @field_validator("initial")
    @classmethod
    def _initial_names(cls, v):
        extra = set(v) - set(SPECIES)
        if extra:
            raise ValueError(f"unknown species in initial profiles: {sorted(extra)}")
        return v

    @model_validator(mode="after")
    def _times(self):
        if self.record_times is not None:
            rt = self.record_times
            if not rt:
                raise ValueError("record_times must not be empty")
            if any(b < a for a, b in zip(rt, rt[1:])) or rt[0] < 0 or rt[-1] > self.t_end:
                raise ValueError("record_times must be sorted and lie in [0, t_end]")
        for t in self.snapshot_times:
            if not 0 <= t <= self.t_end:
                raise ValueError("snapshot_times must lie in [0, t_end]")
        if self.solver.dt_min > self.solver.dt_max:
            raise ValueError("solver.dt_min must not exceed solver.dt_max")
        if self.solver.N % 2:
            raise ValueError("solver.N must be even")
        return self

    # -- builders -----------------------------------------------------------

    def network(self, kappa: float | None = None) -> ReactionNetwork:
        sp = self.species
        return reversible_binding_network(
            kappa=self.potentials.kappa if kappa is None else kappa,
            lam=self.reactions.lam, mu=self.reactions.mu, sigma=self.reactions.sigma,
            L=self.domain.L, D=tuple(sp[s].D for s in SPECIES),
            radii=tuple(sp[s].radius for s in SPECIES),
            cutoff_factor=self.potentials.cutoff_factor)

    def mesh(self) -> Mesh:
        return build_mesh(self.domain.L, self.domain.N)

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(**self.solver.model_dump())

    def record_grid(self) -> np.ndarray:
        if self.record_times is not None:
            return np.asarray(self.record_times, dtype=float)
        return np.linspace(0.0, self.t_end, self.record_count)

    def output_grid(self) -> np.ndarray:
        """Record grid merged with the snapshot times."""
        return np.union1d(self.record_grid(), np.asarray(self.snapshot_times, dtype=float))

    def initial_fields(self, N: int | None = None) -> SpectralFields:
        N = self.solver.N if N is None else N
        L = self.domain.L
        x = np.arange(N) * (L / N)
        vals = np.zeros((3, N))
        for k, s in enumerate(SPECIES):
            prof = self.initial.get(s)
            if prof is None or prof.mass == 0:
                continue
            p = prof.evaluate(x, L)
            tot = p.sum() * L / N
            if not tot > 0:
                raise ConfigError(f"initial.{s}: profile is identically zero")
            vals[k] = prof.mass * p / tot
        return SpectralFields(vals, 0.0, L)

    def crdme_problem(self, gamma: int, kappa: float | None = None) -> CRDMEProblem:
        L = self.domain.L
        profiles, pops = {}, {}
        for s, prof in self.initial.items():
            n = int(round(prof.mass * gamma))
            if n == 0:
                continue
            profiles[s] = (lambda x, p=prof: p.evaluate(x, L))
            pops[s] = n
        return CRDMEProblem(self.network(kappa), self.mesh(), int(gamma), self.t_end,
                            init_profiles=profiles, populations=pops)

    def experiment_dict(self) -> dict:
        """Everything that determines results; worker count and output location do not."""
        return self.model_dump(mode="json", exclude=EXECUTION_KEYS)

    def canonical_json(self) -> str:
        return json.dumps(self.experiment_dict(), sort_keys=True, separators=(",", ":"))


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid configuration: " + "; ".join(lines)


def config_from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    try:
        # strict mode would reject a JSON integer for a float field; the
        # JSON validator accepts it while still refusing strings and bools
        return ExperimentConfig.model_validate_json(json.dumps(data))
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {p}: {err.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {p} is not valid JSON: {err}") from None
    return config_from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.canonical_json().encode()).hexdigest()[:16]


def provenance_line(cfg: ExperimentConfig) -> str:
    return f"pbsrdd {__version__} config {config_hash(cfg)}"


def echo_config(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the fully expanded config to ``out_dir/config.json``.

    Execution settings (worker count, output directory) are left out so the
    echo is identical however the run was distributed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg.experiment_dict(), indent=2, sort_keys=True) + "\n")
    return path
