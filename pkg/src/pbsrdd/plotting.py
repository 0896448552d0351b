"""SVG panels rebuilt from the CSV files of a study directory."""
from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .study import read_csv  # noqa: E402

__all__ = ["render_study_plots"]

_RC = {"svg.hashsalt": "pbsrdd", "svg.fonttype": "path", "figure.figsize": (6.4, 4.2)}


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _gamma_files(out: Path, suffix: str) -> list[tuple[int, Path]]:
    found = []
    for p in out.glob(f"crdme_g*_{suffix}.csv"):
        m = re.fullmatch(rf"crdme_g(\d+)_{suffix}\.csv", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def render_study_plots(out_dir) -> list[Path]:
    """Write ``molar_mass.svg``, ``errors.svg``, ``sup_error.svg`` and one
    ``snapshot_t<time>.svg`` per snapshot time found. Returns the paths."""
    out = Path(out_dir)
    if not (out / "mfm_masses.csv").exists():
        raise FileNotFoundError(f"{out / 'mfm_masses.csv'} not found")
    written = []
    with matplotlib.rc_context(_RC):
        _, mf = read_csv(out / "mfm_masses.csv")
        fig, ax = plt.subplots()
        ax.plot(mf[:, 0], mf[:, 3], color="black", lw=2, label="mean field")
        if (out / "mfm_masses_kappa0.csv").exists():
            _, mf0 = read_csv(out / "mfm_masses_kappa0.csv")
            ax.plot(mf0[:, 0], mf0[:, 3], color="black", ls="--", label="mean field, no potentials")
        for g, p in _gamma_files(out, "masses"):
            _, d = read_csv(p)
            ax.plot(d[:, 0], d[:, 3], lw=1, label=f"particles, gamma={g}")
        ax.set_xlabel("t")
        ax.set_ylabel("molar mass of C")
        ax.legend(fontsize=8)
        _save(fig, out / "molar_mass.svg")
        written.append(out / "molar_mass.svg")

        errs = _gamma_files(out, "errors")
        if errs:
            fig, ax = plt.subplots()
            for g, p in errs:
                _, d = read_csv(p)
                ax.plot(d[:, 0], d[:, 3], lw=1, label=f"gamma={g}")
            ax.set_xlabel("t")
            ax.set_ylabel("|particle - mean field|")
            ax.legend(fontsize=8)
            _save(fig, out / "errors.svg")
            written.append(out / "errors.svg")

        if (out / "study_summary.csv").exists():
            _, s = read_csv(out / "study_summary.csv")
            if len(s):
                fig, ax = plt.subplots()
                ax.plot(s[:, 0], s[:, 1], marker="o", color="black")
                ax.set_xlabel("gamma")
                ax.set_ylabel("sup error")
                _save(fig, out / "sup_error.svg")
                written.append(out / "sup_error.svg")

        if (out / "mfm_fields.csv").exists():
            _, mff = read_csv(out / "mfm_fields.csv")
            fields = {g: read_csv(p)[1] for g, p in _gamma_files(out, "fields")}
            for t in np.unique(mff[:, 0]):
                fig, ax = plt.subplots()
                sel = mff[:, 0] == t
                ax.plot(mff[sel, 1], mff[sel, 4], color="black", lw=2, label="mean field")
                for g, d in fields.items():
                    s2 = d[:, 0] == t
                    ax.plot(d[s2, 1], d[s2, 4], lw=1, label=f"particles, gamma={g}")
                ax.set_xlabel("x")
                ax.set_ylabel(f"C(x, t={t:g})")
                ax.legend(fontsize=8)
                path = out / f"snapshot_t{t:g}.svg"
                _save(fig, path)
                written.append(path)
    return written
