"""Particle-versus-mean-field comparison runs and their CSV outputs.

Output directory layout written by :func:`run_study`::

    config.json                     fully expanded configuration
    mfm_masses.csv                  time,mass_A,mass_B,mass_C
    mfm_masses_kappa0.csv           same, without pair potentials (optional)
    mfm_fields.csv                  time,x,A,B,C at the snapshot times
    crdme_g<gamma>_masses.csv       time,mass_A,mass_B,mass_C,se_A,se_B,se_C
    crdme_g<gamma>_fields.csv       time,x,A,B,C mean voxel concentrations
    crdme_g<gamma>_errors.csv       time,particle,meanfield,abs_error,se
    study_summary.csv               gamma,sup_error,sup_time,replicates,seed
    *.svg                           one plot per panel

Every CSV starts with a ``# pbsrdd <version> config <hash>`` line.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig, echo_config, provenance_line
from .crdme import EnsembleStats, run_ensemble
from .mfm import MeanFieldModel, MFMResult, solve, write_fields_csv, write_masses_csv

__all__ = [
    "GridMismatchError",
    "SeriesComparison",
    "compare_series",
    "gamma_seed",
    "run_meanfield",
    "run_particles",
    "GammaResult",
    "StudyResult",
    "run_study",
    "read_csv",
]

log = logging.getLogger(__name__)


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesComparison:
    errors: np.ndarray
    sup_error: float
    sup_index: int
    sup_time: float | None = None


def compare_series(particle, meanfield, times=None, meanfield_times=None) -> SeriesComparison:
    """Pointwise ``|particle - meanfield|`` with its maximum and where it occurs.

    If both time grids are given they must agree exactly.
    """
    p = np.asarray(particle, dtype=float)
    m = np.asarray(meanfield, dtype=float)
    if p.shape != m.shape or p.ndim != 1:
        raise GridMismatchError(f"series shapes differ: {p.shape} vs {m.shape}")
    if times is not None and meanfield_times is not None:
        if not np.array_equal(np.asarray(times, float), np.asarray(meanfield_times, float)):
            raise GridMismatchError("series are recorded on different time grids")
    if times is not None and len(times) != len(p):
        raise GridMismatchError("time grid length does not match the series")
    err = np.abs(p - m)
    k = int(np.argmax(err)) if len(err) else 0
    t = None if times is None or not len(err) else float(np.asarray(times)[k])
    return SeriesComparison(err, float(err[k]) if len(err) else 0.0, k, t)


def gamma_seed(seed: int, gamma: int) -> int:
    """Base seed of the replicate streams for one population scale."""
    return int(np.random.SeedSequence([int(seed), int(gamma)]).generate_state(1, np.uint64)[0])


def run_meanfield(cfg: ExperimentConfig, kappa: float | None = None,
                  progress: Callable[[float], None] | None = None) -> MFMResult:
    model = MeanFieldModel(cfg.network(kappa), cfg.domain.L, cfg.solver_settings())
    return solve(model, cfg.initial_fields(), cfg.t_end, cfg.output_grid(), progress=progress)


def run_particles(cfg: ExperimentConfig, gamma: int, replicates: int | None = None,
                  workers: int | None = None, progress=None) -> EnsembleStats:
    return run_ensemble(cfg.crdme_problem(gamma), cfg.replicates if replicates is None else replicates,
                        gamma_seed(cfg.seed, gamma), cfg.output_grid(),
                        workers=cfg.workers if workers is None else workers, progress=progress)


@dataclass
class GammaResult:
    gamma: int
    stats: EnsembleStats
    comparison: SeriesComparison
    se: np.ndarray              # standard error of the particle series on the record grid

    @property
    def sup_error(self) -> float:
        return self.comparison.sup_error

    @property
    def sup_se(self) -> float:
        return float(self.se[self.comparison.sup_index])


@dataclass
class StudyResult:
    config: ExperimentConfig
    times: np.ndarray
    meanfield: MFMResult
    meanfield_no_potential: MFMResult | None
    gammas: list[GammaResult] = field(default_factory=list)
    out_dir: Path | None = None

    def by_gamma(self, gamma: int) -> GammaResult:
        for g in self.gammas:
            if g.gamma == gamma:
                return g
        raise KeyError(gamma)


def _num(v) -> str:
    return repr(float(v))


def _writer(path: Path, cfg: ExperimentConfig, header: Sequence[str]):
    fh = open(path, "w", newline="")
    fh.write(f"# {provenance_line(cfg)}\n")
    w = csv.writer(fh)
    w.writerow(header)
    return fh, w


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and float rows of a CSV written by this package (comments skipped)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header = rows[0]
    return header, np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))


def _write_gamma(out: Path, cfg: ExperimentConfig, res: GammaResult, record_mask, grid, mf_C):
    g = res.gamma
    st = res.stats
    mm, se = st.molar_mass, st.molar_mass_se
    fh, w = _writer(out / f"crdme_g{g}_masses.csv", cfg,
                    ["time", "mass_A", "mass_B", "mass_C", "se_A", "se_B", "se_C"])
    with fh:
        for k, t in enumerate(grid):
            w.writerow([_num(t)] + [_num(v) for v in mm[k]] + [_num(v) for v in se[k]])
    conc = st.mean_concentration
    x = np.arange(cfg.domain.N) * (cfg.domain.L / cfg.domain.N)
    fh, w = _writer(out / f"crdme_g{g}_fields.csv", cfg, ["time", "x", "A", "B", "C"])
    with fh:
        for t in cfg.snapshot_times:
            k = int(np.searchsorted(grid, t))
            for i in range(len(x)):
                w.writerow([_num(t), _num(x[i])] + [_num(v) for v in conc[k, :, i]])
    cidx = st.species("C")
    rec_t = grid[record_mask]
    fh, w = _writer(out / f"crdme_g{g}_errors.csv", cfg,
                    ["time", "particle", "meanfield", "abs_error", "se"])
    with fh:
        for k, t in enumerate(rec_t):
            w.writerow([_num(t), _num(mm[record_mask][k, cidx]), _num(mf_C[k]),
                        _num(res.comparison.errors[k]), _num(res.se[k])])


def _write_summary(out: Path, cfg: ExperimentConfig, results: list[GammaResult]):
    fh, w = _writer(out / "study_summary.csv", cfg, ["gamma", "sup_error", "sup_time", "replicates", "seed"])
    with fh:
        for r in results:
            w.writerow([r.gamma, _num(r.sup_error), _num(r.comparison.sup_time),
                        r.stats.replicates, cfg.seed])


def run_study(cfg: ExperimentConfig, out_dir=None, workers: int | None = None,
              plots: bool = True, progress: Callable[[str], None] | None = None) -> StudyResult:
    """Mean-field solve once, one particle ensemble per population scale.

    CSVs are flushed after each population scale so a partial sweep
    leaves usable results behind.
    """
    say = progress or (lambda msg: log.info(msg))
    out = Path(cfg.output_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    grid = cfg.output_grid()
    rec = cfg.record_grid()
    record_mask = np.isin(grid, rec)
    comments = [provenance_line(cfg)]

    say(f"mean-field solve (kappa={cfg.potentials.kappa})")
    mf = run_meanfield(cfg)
    write_masses_csv(mf, out / "mfm_masses.csv", comments)
    snap = np.isin(mf.times, cfg.snapshot_times)
    write_fields_csv(MFMResult(mf.times[snap], mf.fields[snap], mf.x, mf.settings, mf.steps,
                               mf.rejected_steps), out / "mfm_fields.csv", comments)
    mf0 = None
    if cfg.compare_no_potential and cfg.potentials.kappa != 0:
        say("mean-field solve (kappa=0)")
        mf0 = run_meanfield(cfg, kappa=0.0)
        write_masses_csv(mf0, out / "mfm_masses_kappa0.csv", comments)
    mf_C = mf.molar_mass_C[record_mask]

    result = StudyResult(cfg, rec, mf, mf0, out_dir=out)
    for g in cfg.gamma:
        say(f"particle ensemble gamma={g}, {cfg.replicates} replicates")
        st = run_particles(cfg, g, workers=workers)
        cidx = st.species("C")
        part = st.molar_mass[record_mask, cidx]
        se = st.molar_mass_se[record_mask, cidx]
        cmp = compare_series(part, mf_C, rec)
        gr = GammaResult(g, st, cmp, se)
        result.gammas.append(gr)
        _write_gamma(out, cfg, gr, record_mask, grid, mf_C)
        _write_summary(out, cfg, result.gammas)
        say(f"gamma={g}: sup error {cmp.sup_error:.6f} at t={cmp.sup_time}")
    if not cfg.gamma:
        _write_summary(out, cfg, [])
    if plots:
        from .plotting import render_study_plots
        render_study_plots(out)
    return result
