import math

import numpy as np
import pytest

from pbsrdd.model import (
    AcceptanceForm,
    InconsistentExclusionError,
    KernelSpec,
    Mesh,
    PlacementRule,
    PotentialTable,
    ReactionSpec,
    SpeciesSpec,
    SystemScale,
    TabulatedPair,
    acceptance_from_delta,
    acceptance_probability,
    acceptance_probability_meanfield,
    backward_placement_distribution,
    build_mesh,
    energy_change,
    interaction_energy,
    kernel_eval,
    kernel_normalization,
    reversible_binding_network,
    periodic_distance,
    sample_forward_placement,
)

L = 2 * math.pi
NAMES = ("A", "B", "C")


@pytest.fixture(scope="module")
def net():
    return reversible_binding_network()


def lattice_weights(N, gamma, **placed):
    c = np.zeros((3, N))
    for name, voxels in placed.items():
        for i in voxels:
            c[NAMES.index(name), i] += 1
    return c / gamma


# -- geometry ----------------------------------------------------------------

def test_periodic_distance_examples():
    assert periodic_distance(0.1, 6.2, L) == pytest.approx(L - 6.1, abs=1e-14)
    assert periodic_distance(0.1, 6.2, L) == pytest.approx(0.18319, abs=1e-5)
    assert periodic_distance(1.3, 1.3, L) == 0.0
    assert periodic_distance(0.0, L / 2, L) == pytest.approx(L / 2)


def test_periodic_distance_wraps_inputs():
    assert periodic_distance(0.1 + L, -0.1, L) == pytest.approx(0.2)
    assert periodic_distance(-3 * L + 1.0, 1.0, L) == pytest.approx(0.0, abs=1e-12)


def test_mesh_nodes_and_wrap():
    m = build_mesh(L, 4)
    np.testing.assert_allclose(m.nodes, [0, math.pi / 2, math.pi, 3 * math.pi / 2])
    assert m.h == pytest.approx(math.pi / 2)
    assert build_mesh(L, 512).h == pytest.approx(L / 512)
    assert m.wrap(5) == m.wrap(1)
    assert m.voxel_of(L - 1e-9) == 0


def test_mesh_rejects_too_few_voxels():
    with pytest.raises(ValueError):
        build_mesh(L, 2)
    with pytest.raises(ValueError):
        Mesh(L, 1)
    with pytest.raises(ValueError):
        Mesh(-1.0, 5)


# -- potentials --------------------------------------------------------------

def test_harmonic_pair_examples(net):
    t = net.potentials
    assert t.pair("A", "B", 0.3) == pytest.approx(0.0, abs=1e-28)
    assert t.pair("A", "B", 1.0) == 0.0
    assert t.pair("A", "B", 0.0) == pytest.approx(18.0)
    assert t.pair("C", "C", 0.1) == pytest.approx(200 * 0.5**2)
    assert reversible_binding_network(kappa=0).potentials.pair("C", "C", 0.0) == 0.0


def test_pair_symmetric_and_cutoff(net):
    t = net.potentials
    r = np.linspace(0, 1, 101)
    for a in NAMES:
        for b in NAMES:
            np.testing.assert_array_equal(t.pair(a, b, r), t.pair(b, a, r))
            assert np.all(t.pair(a, b, r[r >= t.cutoff(a, b)]) == 0)


def test_tabulated_pair_overrides_harmonic():
    tab = TabulatedPair(lambda r: 1.0 - r, 1.0)
    t = PotentialTable({"A": 0.05, "B": 0.05}, kappa=200, tabulated={("A", "B"): tab})
    assert t.pair("B", "A", 0.25) == pytest.approx(0.75)
    assert t.pair("A", "B", 1.5) == 0.0
    assert t.pair("A", "A", 0.0) == pytest.approx(200 * 0.09)
    assert t.pair_derivative("A", "B", 0.5) == pytest.approx(-1.0, rel=1e-6)


def test_negative_kappa_rejected():
    with pytest.raises(ValueError):
        PotentialTable({"A": 0.1}, kappa=-1.0)


def test_species_spec_validation():
    with pytest.raises(ValueError):
        SpeciesSpec("A", 0.0)
    with pytest.raises(ValueError):
        SpeciesSpec("A", 1.0, -0.1)


# -- kernel ------------------------------------------------------------------

def test_kernel_peak_and_normalisation():
    k = KernelSpec(0.15, L)
    assert k.Z == pytest.approx(1.0, abs=1e-12)
    assert kernel_eval(1.0, 1.0, k) == pytest.approx(1 / math.sqrt(2 * math.pi * 0.15**2), rel=1e-12)
    assert kernel_eval(1.0, 1.0, k) == pytest.approx(2.6596, abs=1e-4)
    assert kernel_eval(0.2, 6.1, k) == kernel_eval(6.1, 0.2, k)


def test_kernel_normalisation_quadrature_converged():
    assert abs(kernel_normalization(0.15, L, 8192) - kernel_normalization(0.15, L, 4096)) < 1e-12


def test_kernel_normalisation_wide_limit():
    sigma = 200.0
    assert kernel_normalization(sigma, L) == pytest.approx(L / math.sqrt(2 * math.pi * sigma**2), rel=1e-4)


def test_kernel_normalisation_rejects_bad_input():
    with pytest.raises(ValueError):
        kernel_normalization(0.0, L)
    with pytest.raises(ValueError):
        kernel_normalization(0.1, L, 32)


@pytest.mark.parametrize("N", [64, 128, 512])
def test_kernel_discrete_marginal(N):
    m = build_mesh(L, N)
    k = KernelSpec(0.15, L)
    for y in m.nodes[:: N // 8]:
        assert abs(m.h * kernel_eval(m.nodes, y, k).sum() - 1) < 1e-10


# -- reactions ---------------------------------------------------------------

def test_reaction_forms_from_stoichiometry():
    k = KernelSpec(0.15, L)
    assert ReactionSpec(("A", "B"), ("C",), 1.0, k).acceptance_form is AcceptanceForm.BINDING
    assert ReactionSpec(("C",), ("A", "B"), 1.0, k).acceptance_form is AcceptanceForm.UNBINDING
    assert ReactionSpec(("A", "B"), ("C", "D"), 1.0, k).placement is PlacementRule.IDENTITY_PAIR
    assert ReactionSpec(("A",), ("B",), 1.0).acceptance_form is AcceptanceForm.NONE


def test_reaction_spec_rejects_inconsistencies():
    k = KernelSpec(0.15, L)
    with pytest.raises(ValueError):
        ReactionSpec(("A", "B"), ("C",), 1.0, k, acceptance_form="unbinding")
    with pytest.raises(ValueError):
        ReactionSpec(("A",), (), 1.0)
    with pytest.raises(ValueError):
        ReactionSpec(("A", "B"), ("C",), 1.0)
    with pytest.raises(ValueError):
        ReactionSpec(("A", "B"), ("C",), 1.0, k, placement="boltzmann_backward")
    with pytest.raises(ValueError):
        ReactionSpec(("A",), ("B",), -1.0)


# -- energies ----------------------------------------------------------------

def test_interaction_energy_examples(net):
    t = net.potentials
    nodes = build_mesh(L, 64).nodes
    w = lattice_weights(64, 100, B=[10, 10])
    assert interaction_energy("A", nodes[10], w, nodes, NAMES, t, L) == pytest.approx(0.36)
    far = lattice_weights(64, 100, B=[40])
    assert interaction_energy("A", nodes[10], far, nodes, NAMES, t, L) == 0.0
    zero = reversible_binding_network(kappa=0).potentials
    assert interaction_energy("A", nodes[10], w, nodes, NAMES, zero, L) == 0.0


def test_exclusion_of_missing_particle_raises(net):
    nodes = build_mesh(L, 64).nodes
    w = lattice_weights(64, 100, B=[10])
    with pytest.raises(InconsistentExclusionError, match="inconsistent exclusion"):
        interaction_energy("A", nodes[3], w, nodes, NAMES, net.potentials, L, 100, [("A", nodes[3])])
    # the same formula without the consistency check
    e = interaction_energy("A", nodes[3], w, nodes, NAMES, net.potentials, L, 100, [("A", nodes[3])],
                           strict=False)
    assert e == pytest.approx(-18.0 / 100)


def test_acceptance_closed_forms():
    assert acceptance_from_delta(-5.0) == 1.0
    assert acceptance_from_delta(math.log(2)) == pytest.approx(0.5, rel=1e-15)
    assert acceptance_from_delta(0.0) == 1.0
    assert acceptance_from_delta(1e6) == 0.0


def test_zero_potential_accepts_everything():
    net = reversible_binding_network(kappa=0)
    nodes = build_mesh(L, 32).nodes
    w = lattice_weights(32, 10, A=[1, 2], B=[2], C=[5])
    bind, unbind = net.reactions
    sc = SystemScale(10)
    assert acceptance_probability(bind, nodes[[1, 2]], nodes[[2]], w, nodes, NAMES, net.potentials, L, sc) == 1.0
    assert acceptance_probability(unbind, nodes[[5]], nodes[[5, 6]], w, nodes, NAMES,
                                  net.potentials, L, sc) == 1.0


def test_identity_reaction_accepts(net):
    rxn = ReactionSpec(("A",), ("A",), 1.0)
    nodes = build_mesh(L, 32).nodes
    w = lattice_weights(32, 10, A=[1, 1, 2], B=[1])
    assert acceptance_probability(rxn, [nodes[1]], [nodes[1]], w, nodes, NAMES, net.potentials, L,
                                  SystemScale(10)) == 1.0


def test_binding_and_unbinding_energies_are_negatives(net):
    """Same bath, (x, y) <-> z: the two energy changes cancel to rounding."""
    N, gamma = 64, 20
    nodes = build_mesh(L, N).nodes
    bind, unbind = net.reactions
    rng = np.random.default_rng(5)
    for _ in range(50):
        bath = np.zeros((3, N))
        for s in range(3):
            np.add.at(bath[s], rng.integers(0, 6, 8), 1)
        x, y = rng.integers(0, 6, 2)
        z = x if rng.random() < 0.5 else y
        pre_b = bath.copy()
        pre_b[0, x] += 1
        pre_b[1, y] += 1
        pre_u = bath.copy()
        pre_u[2, z] += 1
        d1 = energy_change(bind, nodes[[x, y]], nodes[[z]], pre_b / gamma, nodes, NAMES, net.potentials, L, gamma)
        d2 = energy_change(unbind, nodes[[z]], nodes[[x, y]], pre_u / gamma, nodes, NAMES, net.potentials, L, gamma)
        assert abs(d1 + d2) <= 1e-12 * max(1.0, abs(d1))
        p1 = acceptance_from_delta(d1)
        p2 = acceptance_from_delta(d2)
        assert p1 / p2 == pytest.approx(math.exp(-d1), rel=1e-12)


def test_swap_form_carries_internal_pairs():
    k = KernelSpec(0.15, L)
    table = PotentialTable({"A": 0.05, "B": 0.05, "C": 0.05, "D": 0.05}, kappa=100)
    rxn = ReactionSpec(("A", "B"), ("C", "D"), 1.0, k)
    names = ("A", "B", "C", "D")
    nodes = build_mesh(L, 32).nodes
    w = np.zeros((4, 32))
    w[0, 3] = w[1, 4] = 0.1
    # substrates excluded, empty bath: only the internal pair terms remain
    d = energy_change(rxn, nodes[[3, 4]], nodes[[3, 3]], w, nodes, names, table, L, 10)
    expect = (table.pair("C", "D", 0.0) - table.pair("A", "B", nodes[1])) / 10
    assert d == pytest.approx(expect, rel=1e-13)


def test_one_body_potential_enters_energy():
    table = PotentialTable({"A": 0.0, "B": 0.0}, one_body={"B": lambda x: np.cos(x)})
    rxn = ReactionSpec(("A",), ("B",), 1.0)
    nodes = build_mesh(L, 16).nodes
    w = np.zeros((2, 16))
    d = energy_change(rxn, [nodes[4]], [nodes[4]], w, nodes, ("A", "B"), table, L, None)
    assert d == pytest.approx(math.cos(nodes[4]))


def test_meanfield_acceptance_ignores_exclusions(net):
    N = 64
    nodes = build_mesh(L, N).nodes
    w = np.full((3, N), 0.5 / L) * (L / N)
    bind = net.reactions[0]
    p = acceptance_probability_meanfield(bind, nodes[[3, 4]], nodes[[3]], w, nodes, NAMES, net.potentials, L)
    # uniform bath: the energy change is the difference of total pair integrals
    ints = {s: sum(float(np.dot(net.potentials.pair(s, s2, periodic_distance(nodes[3], nodes, L)), w[j]))
                   for j, s2 in enumerate(NAMES)) for s in NAMES}
    assert p == pytest.approx(acceptance_from_delta(ints["C"] - ints["A"] - ints["B"]), rel=1e-13)


# -- placement ---------------------------------------------------------------

def test_forward_placement_fair_and_deterministic():
    rng = np.random.default_rng(11)
    hits = sum(sample_forward_placement(1.0, 2.0, rng) == 1.0 for _ in range(100_000))
    assert abs(hits / 100_000 - 0.5) < 0.005
    assert sample_forward_placement(3.0, 3.0, rng) == 3.0
    a = [sample_forward_placement(0, 1, np.random.default_rng(4)) for _ in range(3)]
    assert a == [a[0]] * 3


def test_backward_placement_normalised(net):
    m = build_mesh(L, 128)
    bp = backward_placement_distribution(5, m, net.reactions[1].kernel, net.potentials, SystemScale(50))
    assert bp.partner_weights.sum() / bp.normalizer == pytest.approx(1.0, abs=1e-15)
    P = bp.pair_probabilities()
    assert P.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(bp.partner_weights >= 0)
    i, j = bp.sample(np.random.default_rng(0))
    assert 5 in (i, j)


def test_backward_placement_without_potentials_is_discrete_gaussian():
    net = reversible_binding_network(kappa=0)
    m = build_mesh(L, 128)
    k = net.reactions[1].kernel
    bp = backward_placement_distribution(7, m, k, net.potentials, SystemScale(50))
    expect = m.h * kernel_eval(m.nodes, m.nodes[7], k)
    expect[expect < 1e-300] = 0
    np.testing.assert_allclose(bp.partner_weights, expect, rtol=1e-15)
    assert bp.normalizer == pytest.approx(1.0, abs=1e-10)


def test_backward_placement_penalises_overlap(net):
    m = build_mesh(L, 128)
    bp = backward_placement_distribution(0, m, net.reactions[1].kernel, net.potentials, SystemScale(10))
    k0 = m.h * net.reactions[1].kernel.of_distance(0.0)
    assert bp.partner_weights[0] == pytest.approx(k0 * math.exp(-18.0 / 10))
