import math

import numpy as np
import pytest

from pbsrdd import oracle
from pbsrdd.mfm import (
    MeanFieldModel,
    NegativeFieldError,
    SolverSettings,
    SolverStallError,
    SpectralFields,
    gaussian_bumps,
    imex_step,
    reaction_rhs,
    solve,
    transport_apply,
    write_fields_csv,
    write_masses_csv,
)
from pbsrdd.model import KernelSpec, ReactionNetwork, ReactionSpec, reversible_binding_network

L = 2 * math.pi


def model(N=64, kappa=200.0, dt_max=1e-3, **kw):
    return MeanFieldModel(reversible_binding_network(kappa=kappa, **kw), settings=SolverSettings(N=N, dt_max=dt_max))


def smooth_fields(N, seed=0):
    rng = np.random.default_rng(seed)
    x = np.arange(N) * (L / N)
    return np.array([0.2 + 0.1 * np.sin(x + p) + 0.05 * rng.random(N) for p in (0.0, 1.0, 2.0)])


# -- settings and fields -----------------------------------------------------

@pytest.mark.parametrize("kw", [dict(dt_min=1.0, dt_max=0.1), dict(N=63), dict(N=2), dict(convolution="x"),
                                dict(newton_tol=0.0), dict(reaction_cutoff=1.0), dict(dt_growth=0.5),
                                dict(krylov_restart=0)])
def test_settings_rejected(kw):
    with pytest.raises(ValueError):
        SolverSettings(**kw)


def test_fields_shape_and_masses():
    with pytest.raises(ValueError):
        SpectralFields(np.zeros((2, 8)))
    f = gaussian_bumps(128)
    np.testing.assert_allclose(f.masses, [0.5, 0.5, 0.0], atol=1e-15)
    assert f.coefficients.shape == (3, 65)
    assert f.h == pytest.approx(L / 128)


def test_unsupported_network_rejected():
    k = KernelSpec(0.15, L)
    net = reversible_binding_network()
    swap = ReactionNetwork(net.species, (ReactionSpec(("A", "B"), ("C", "C"), 1.0, k),), net.potentials)
    with pytest.raises(ValueError):
        MeanFieldModel(swap)


# -- transport ---------------------------------------------------------------

def test_transport_of_sine_without_potentials():
    m = model(kappa=0)
    x = m.x
    vals = np.array([np.sin(x), np.sin(2 * x), np.cos(x)])
    for s, (D, expect) in enumerate(zip(m.D, [-np.sin(x), -4 * np.sin(2 * x), -np.cos(x)])):
        np.testing.assert_allclose(transport_apply(s, vals, m), D * expect, atol=1e-12)


def test_transport_of_constant_is_zero():
    m = model()
    vals = np.full((3, 64), 0.3)
    for s in range(3):
        np.testing.assert_allclose(transport_apply(s, SpectralFields(vals), m), 0.0, atol=1e-12)


def test_transport_conserves_mass():
    m = model()
    vals = smooth_fields(64)
    for s in range(3):
        assert abs(transport_apply(s, vals, m).sum()) < 1e-11


def test_drift_fft_and_dense_agree():
    fft = model()
    dense = MeanFieldModel(reversible_binding_network(), settings=SolverSettings(N=64, convolution="dense"))
    vals = smooth_fields(64, 2)
    np.testing.assert_allclose(fft.potentials(vals), dense.potentials(vals), atol=1e-12)
    np.testing.assert_allclose(fft.drift(vals), dense.drift(vals), atol=1e-12)
    for s in range(3):
        np.testing.assert_allclose(transport_apply(s, vals, fft), transport_apply(s, vals, dense), atol=1e-10)


# -- reactions ---------------------------------------------------------------

def test_uniform_reactions_match_wellmixed_rates():
    m = model(kappa=0, N=128)
    a, b, c = 0.08, 0.05, 0.03
    out = reaction_rhs(np.array([np.full(128, a), np.full(128, b), np.full(128, c)]), m)
    r = m.lam * a * b - m.mu * c
    np.testing.assert_allclose(out[0], -r, rtol=1e-12)
    np.testing.assert_allclose(out[1], -r, rtol=1e-12)
    np.testing.assert_allclose(out[2], r, rtol=1e-12)


@pytest.mark.parametrize("kappa", [0.0, 200.0])
def test_reactions_match_dense_quadrature(kappa):
    m = model(kappa=kappa)
    vals = smooth_fields(64, 1)
    dense = oracle.dense_reaction_rhs(vals, m.network, L)
    assert np.abs(reaction_rhs(vals, m) - dense).max() <= 1e-12 * np.abs(dense).max()


def test_reactions_conserve_complex_masses():
    m = model()
    out = reaction_rhs(smooth_fields(64, 3), m)
    assert abs(out[0].sum() + out[2].sum()) < 1e-14
    assert abs(out[1].sum() + out[2].sum()) < 1e-14


def test_no_reactions_gives_zero():
    m = model(lam=0.0, mu=0.0)
    assert not reaction_rhs(smooth_fields(64), m).any()


# -- time stepping -----------------------------------------------------------

def test_implicit_diffusion_step_per_mode():
    m = model(kappa=0, lam=0.0, mu=0.0, dt_max=0.1)
    x = m.x
    f = SpectralFields(np.array([1 + np.cos(3 * x), 1 + np.sin(x), 2 + np.cos(5 * x)]))
    new, used = imex_step(f, 0.1, m)
    assert used == 0.1 and new.t == pytest.approx(0.1)
    expect = np.array([1 + np.cos(3 * x) / (1 + 0.1 * m.D[0] * 9),
                       1 + np.sin(x) / (1 + 0.1 * m.D[1]),
                       2 + np.cos(5 * x) / (1 + 0.1 * m.D[2] * 25)])
    np.testing.assert_allclose(new.values, expect, atol=1e-13)


def test_imex_step_argument_checks():
    m = model()
    f = gaussian_bumps(64)
    with pytest.raises(ValueError):
        imex_step(f, 0.0, m)
    with pytest.raises(ValueError):
        imex_step(f, 0.01, m)


def test_solve_t_end_zero_returns_initial():
    m = model()
    f = gaussian_bumps(64)
    res = solve(m, f, 0.0, [0.0])
    np.testing.assert_array_equal(res.fields[0], f.values)
    assert res.steps == 0


def test_solve_output_time_checks():
    m = model()
    with pytest.raises(ValueError):
        solve(m, gaussian_bumps(64), 1.0, [0.5, 0.2])
    with pytest.raises(ValueError):
        solve(m, gaussian_bumps(64), 1.0, [0.0, 2.0])
    with pytest.raises(ValueError):
        solve(m, gaussian_bumps(32), 1.0)


def test_solve_lands_on_output_times():
    m = model()
    res = solve(m, gaussian_bumps(64), 0.0123, [0.0, 0.0051, 0.0123])
    assert res.times.tolist() == [0.0, 0.0051, 0.0123]
    assert res.steps == 14


def test_shift_equivariance():
    m = model(N=128)
    f = gaussian_bumps(128)
    g = SpectralFields(np.roll(f.values, 17, axis=1))
    a = solve(m, f, 0.1).fields[-1]
    b = solve(m, g, 0.1).fields[-1]
    np.testing.assert_allclose(np.roll(a, 17, axis=1), b, atol=1e-12)


def test_species_swap_symmetry():
    """A and B have identical parameters: exchanging them commutes with the flow."""
    m = model(N=128)
    f = SpectralFields(smooth_fields(128, 4))
    g = SpectralFields(f.values[[1, 0, 2]])
    a = solve(m, f, 0.1).fields[-1]
    b = solve(m, g, 0.1).fields[-1]
    np.testing.assert_allclose(a[[1, 0, 2]], b, atol=1e-12)


def test_reflection_symmetry():
    m = model(N=128)
    f = SpectralFields(smooth_fields(128, 5))
    refl = np.roll(f.values[:, ::-1], 1, axis=1)  # x_i -> x_{-i}
    a = solve(m, f, 0.1).fields[-1]
    b = solve(m, SpectralFields(refl), 0.1).fields[-1]
    np.testing.assert_allclose(np.roll(a[:, ::-1], 1, axis=1), b, atol=1e-12)


def test_masses_conserved_short_run():
    m = model(N=128)
    res = solve(m, gaussian_bumps(128), 1.0, np.linspace(0, 1, 11))
    M = res.masses
    assert np.ptp(M[:, 0] + M[:, 2]) < 1e-12
    assert np.ptp(M[:, 1] + M[:, 2]) < 1e-12
    assert (res.fields > -1e-12).all()


def test_molar_mass_regression_value():
    """Frozen output of this solver (N=512, dt=1e-3) at t=1."""
    m = model(N=512)
    assert solve(m, gaussian_bumps(512), 1.0).molar_mass_C[-1] == pytest.approx(0.00477234, abs=5e-8)


def test_spatial_self_convergence():
    """Second order in h: the harmonic pair potential has a kink at its cutoff."""
    vals = {}
    for N in (128, 256, 512):
        vals[N] = solve(model(N=N), gaussian_bumps(N), 1.0).molar_mass_C[-1]
    e1 = abs(vals[128] - vals[256])
    e2 = abs(vals[256] - vals[512])
    assert 3.0 < e1 / e2 < 5.0
    assert e2 < 1e-5


def test_negative_field_reported():
    m = model(kappa=0, lam=0.0, mu=0.0)
    vals = np.full((3, 64), 0.1)
    vals[0, 10] = -0.5
    with pytest.raises(NegativeFieldError, match="species A"):
        imex_step(SpectralFields(vals), 1e-3, m)


def test_solver_stall_reported():
    st = SolverSettings(N=64, dt_max=1e-3, dt_min=5e-4, newton_tol=1e-300, newton_max_iters=1)
    m = MeanFieldModel(reversible_binding_network(), settings=st)
    with pytest.raises(SolverStallError, match="solver stall"):
        imex_step(gaussian_bumps(64), 1e-3, m)


def test_csv_writers(tmp_path):
    m = model(N=32, kappa=0)
    res = solve(m, gaussian_bumps(32), 0.01, [0.0, 0.01])
    write_masses_csv(res, tmp_path / "m.csv", ["c1"])
    write_fields_csv(res, tmp_path / "f.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[:2] == ["# c1", "time,mass_A,mass_B,mass_C"]
    assert len(lines) == 4
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + 2 * 32
