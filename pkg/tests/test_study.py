import numpy as np
import pytest

from pbsrdd.config import config_from_dict, config_hash
from pbsrdd.plotting import render_study_plots
from pbsrdd.study import GridMismatchError, compare_series, gamma_seed, read_csv, run_study

TINY = {"gamma": [10, 20], "replicates": 8, "t_end": 2.0, "record_count": 5, "snapshot_times": [1.0],
        "domain": {"N": 16}, "solver": {"N": 64, "dt_max": 0.01}}


def test_compare_series_examples():
    c = compare_series([0.1, 0.25, 0.3], [0.1, 0.2, 0.31], [0.0, 1.0, 2.0])
    np.testing.assert_allclose(c.errors, [0.0, 0.05, 0.01])
    assert c.sup_error == pytest.approx(0.05)
    assert (c.sup_index, c.sup_time) == (1, 1.0)
    assert compare_series([1.0], [1.0]).sup_time is None


def test_compare_series_rejects_mismatched_grids():
    with pytest.raises(GridMismatchError):
        compare_series([1.0, 2.0], [1.0])
    with pytest.raises(GridMismatchError):
        compare_series([1.0, 2.0], [1.0, 2.0], [0.0, 1.0], [0.0, 1.5])
    with pytest.raises(GridMismatchError):
        compare_series([1.0, 2.0], [1.0, 2.0], [0.0])


def test_gamma_seed_deterministic_and_distinct():
    assert gamma_seed(0, 50) == gamma_seed(0, 50)
    seeds = {gamma_seed(s, g) for s in range(3) for g in (50, 100, 200)}
    assert len(seeds) == 9
    assert 0 <= gamma_seed(2**64 - 1, 1000) < 2**64


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    cfg = config_from_dict(TINY)
    return run_study(cfg, out_dir=out, workers=1, progress=lambda m: None), out


def test_study_writes_every_output(study):
    _, out = study
    names = {p.name for p in out.iterdir()}
    expect = {"config.json", "mfm_masses.csv", "mfm_masses_kappa0.csv", "mfm_fields.csv", "study_summary.csv",
              "molar_mass.svg", "errors.svg", "sup_error.svg", "snapshot_t1.svg"}
    for g in (10, 20):
        expect |= {f"crdme_g{g}_masses.csv", f"crdme_g{g}_fields.csv", f"crdme_g{g}_errors.csv"}
    assert names == expect


def test_csv_provenance_and_contents(study):
    res, out = study
    h = config_hash(res.config)
    for p in out.glob("*.csv"):
        assert p.read_text().splitlines()[0].endswith(h)
    header, rows = read_csv(out / "study_summary.csv")
    assert header == ["gamma", "sup_error", "sup_time", "replicates", "seed"]
    assert rows[:, 0].tolist() == [10, 20]
    assert rows[:, 3].tolist() == [8, 8]
    _, err = read_csv(out / "crdme_g10_errors.csv")
    np.testing.assert_allclose(err[:, 3], np.abs(err[:, 1] - err[:, 2]), rtol=1e-15)
    assert err[:, 3].max() == pytest.approx(res.by_gamma(10).sup_error)
    _, mf = read_csv(out / "mfm_masses.csv")
    assert mf[:, 0].tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    _, fields = read_csv(out / "crdme_g20_fields.csv")
    assert fields.shape == (16, 5) and set(fields[:, 0]) == {1.0}


def test_particle_masses_conserved_in_study(study):
    res, _ = study
    for g in res.gammas:
        mm = g.stats.molar_mass
        np.testing.assert_allclose(mm[:, 0] + mm[:, 2], 0.5, atol=1e-15)
    with pytest.raises(KeyError):
        res.by_gamma(30)


def test_study_bytes_independent_of_workers(study, tmp_path):
    _, out = study
    run_study(config_from_dict(dict(TINY, workers=2)), out_dir=tmp_path, progress=lambda m: None)
    for p in out.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_plots_need_a_study_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        render_study_plots(tmp_path)
