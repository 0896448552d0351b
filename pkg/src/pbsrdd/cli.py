"""Command line entry point ``pbsrdd``.

Verbs::

    pbsrdd run      [--model mfm|crdme]   one model, no comparison
    pbsrdd study                          mean field vs particles over gamma
    pbsrdd validate                       quick oracle suite
    pbsrdd plot     --out DIR             re-emit SVGs from a study directory

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 validation failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, config_from_dict, echo_config, parse_config, provenance_line
from .mfm import NegativeFieldError, SolverStallError, write_fields_csv, write_masses_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VALIDATION = 4

log = logging.getLogger("pbsrdd")


def _parse_gamma_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"--gamma expects a comma-separated list of integers, got {text!r}") from None


def load_config(args) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied and revalidated."""
    if args.config:
        data = parse_config(args.config).model_dump(mode="json")
    else:
        data = ExperimentConfig().model_dump(mode="json")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.workers is not None:
        data["workers"] = args.workers
    if args.replicates is not None:
        data["replicates"] = args.replicates
    if args.gamma is not None:
        data["gamma"] = _parse_gamma_list(args.gamma)
    if args.out is not None:
        data["output_dir"] = args.out
    return config_from_dict(data)


def _cmd_run(args, cfg: ExperimentConfig) -> int:
    from .study import run_meanfield, run_particles
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    comments = [provenance_line(cfg)]
    if args.model == "mfm":
        res = run_meanfield(cfg)
        write_masses_csv(res, out / "mfm_masses.csv", comments)
        write_fields_csv(res, out / "mfm_fields.csv", comments)
        print(f"mean field: C(t_end) = {res.molar_mass_C[-1]:.8f}; {res.steps} steps -> {out}")
        return EXIT_OK
    from .crdme import simulate_trajectory, replicate_generator, write_snapshots_csv
    from .study import gamma_seed
    for g in cfg.gamma:
        if cfg.replicates == 1:
            traj = simulate_trajectory(cfg.crdme_problem(g), replicate_generator(gamma_seed(cfg.seed, g), 0),
                                       cfg.output_grid())
            write_snapshots_csv(traj, out / f"crdme_g{g}_trajectory.csv", comments)
            print(f"gamma={g}: C(t_end) = {traj.molar_masses()[-1, 2]:.6f} ({traj.status})")
            continue
        st = run_particles(cfg, g)
        mm, se = st.molar_mass, st.molar_mass_se
        path = out / f"crdme_g{g}_masses.csv"
        with open(path, "w", newline="") as fh:
            fh.write(f"# {comments[0]}\n")
            fh.write("time,mass_A,mass_B,mass_C,se_A,se_B,se_C\n")
            for k, t in enumerate(st.times):
                fh.write(",".join(repr(float(v)) for v in [t, *mm[k], *se[k]]) + "\n")
        print(f"gamma={g}: C(t_end) = {mm[-1, 2]:.6f} +- {se[-1, 2]:.6f} -> {path}")
    return EXIT_OK


def _cmd_study(args, cfg: ExperimentConfig) -> int:
    from .study import run_study
    res = run_study(cfg, progress=lambda m: print(m, flush=True))
    for g in res.gammas:
        print(f"gamma={g.gamma}: sup error {g.sup_error:.6f} (se {g.sup_se:.6f}) at t={g.comparison.sup_time}")
    print(f"results in {res.out_dir}")
    return EXIT_OK


def _cmd_validate(args, cfg: ExperimentConfig) -> int:
    from .validation import run_validation
    reps = args.replicates if args.replicates is not None else 20_000
    results = run_validation(reps, report=lambda line: print(line, flush=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def _cmd_plot(args, cfg: ExperimentConfig) -> int:
    from .plotting import render_study_plots
    out = Path(args.out or cfg.output_dir)
    for p in render_study_plots(out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (defaults: the model problem)")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, help="worker processes for ensembles")
    common.add_argument("--out", help="output directory")
    common.add_argument("--replicates", type=int, help="replicates per population scale")
    common.add_argument("--gamma", help="comma-separated population scales, e.g. 50,200")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pbsrdd", description="interacting reaction-drift-diffusion: "
                                "lattice particle simulations and their mean-field limit")
    p.add_argument("--version", action="version", version=f"pbsrdd {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", parents=[common], help="run one model")
    r.add_argument("--model", choices=("mfm", "crdme"), default="mfm")
    sub.add_parser("study", parents=[common], help="particle vs mean-field sweep over gamma")
    sub.add_parser("validate", parents=[common], help="quick oracle suite")
    sub.add_parser("plot", parents=[common], help="re-emit SVG plots from a study directory")
    return p


_COMMANDS = {"run": _cmd_run, "study": _cmd_study, "validate": _cmd_validate, "plot": _cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return _COMMANDS[args.verb](args, cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverStallError, NegativeFieldError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
