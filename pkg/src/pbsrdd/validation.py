"""Desk-size instances and a quick oracle suite (the ``validate`` verb)."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle
from .crdme import CRDMEProblem, hop_rate, initialize_particles, sample_states
from .mfm import MeanFieldModel, SolverSettings, gaussian_bumps, reaction_rhs, solve
from .model import (
    Mesh,
    ReactionNetwork,
    acceptance_from_delta,
    build_mesh,
    energy_change,
    reversible_binding_network,
    periodic_distance,
)

__all__ = [
    "MICRO_L",
    "MICRO_GAMMA",
    "MICRO_MU",
    "MicroInstance",
    "micro_network",
    "micro_instances",
    "empirical_distribution",
    "CheckResult",
    "run_validation",
    "frozen_lattice_state",
    "acceptance_gap",
    "imex_self_convergence",
]

# Short domain so that neighbouring nodes sit inside the pair-potential
# range and the kernel couples different voxels; small population scale so
# that the 1/gamma pair energies are O(1).
MICRO_L = 0.5
MICRO_GAMMA = 4
MICRO_MU = 0.5


def micro_network(kappa: float = 200.0, reactions: bool = True) -> ReactionNetwork:
    net = reversible_binding_network(kappa=kappa, mu=MICRO_MU, L=MICRO_L)
    if reactions:
        return net
    return ReactionNetwork(net.species, (), net.potentials)


@dataclass(frozen=True)
class MicroInstance:
    name: str
    network: ReactionNetwork
    mesh: Mesh
    counts: np.ndarray
    gamma: int = MICRO_GAMMA

    def ctmc(self) -> oracle.MicroCTMC:
        return oracle.build_micro_ctmc(self.mesh, self.counts, self.network, self.gamma)

    def problem(self, t_end: float) -> CRDMEProblem:
        return CRDMEProblem(self.network, self.mesh, self.gamma, t_end, initial_counts=self.counts)


def _counts(N, **placed):
    c = np.zeros((3, N), np.int64)
    for name, voxels in placed.items():
        for i in voxels:
            c["ABC".index(name), i] += 1
    return c


def micro_instances() -> list[MicroInstance]:
    """The three reference systems of the exact-distribution comparison.

    * one A hopping on 5 voxels with pair potentials switched on;
    * A + B <-> C on 2 voxels started from a single C;
    * A + B <-> C on 2 voxels started from A and B in different voxels.
    """
    return [
        MicroInstance("1A hop-only, 5 voxels", micro_network(reactions=False), Mesh(MICRO_L, 5),
                      _counts(5, A=[0])),
        MicroInstance("1A+1B<->1C, 2 voxels, from C", micro_network(), Mesh(MICRO_L, 2),
                      _counts(2, C=[0])),
        MicroInstance("1A+1B<->1C, 2 voxels, from A+B", micro_network(), Mesh(MICRO_L, 2),
                      _counts(2, A=[0], B=[1])),
    ]


def empirical_distribution(ctmc: oracle.MicroCTMC, samples: np.ndarray) -> np.ndarray:
    """Histogram of sampled occupancy arrays over the CTMC state ordering."""
    idx = np.fromiter((ctmc.index(s) for s in samples), dtype=np.int64, count=len(samples))
    return np.bincount(idx, minlength=len(ctmc.states)) / len(samples)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: {self.value:.3e} (bound {self.bound:.1e}, {self.seconds:.1f}s)"


def _hop_ratio() -> float:
    d = np.linspace(-20, 20, 4001)
    ratio = hop_rate(1.0, 1.0, d) / hop_rate(1.0, 1.0, -d)
    return float(np.max(np.abs(ratio / np.exp(-d) - 1)))


def _flux_balance() -> float:
    worst = 0.0
    for mesh, counts in ((Mesh(MICRO_L, 2), _counts(2, A=[0], B=[1])),
                         (Mesh(MICRO_L, 3), _counts(3, A=[0, 1], B=[2]))):
        c = oracle.build_micro_ctmc(mesh, counts, micro_network(), MICRO_GAMMA)
        pi = oracle.ctmc_stationary(c)
        worst = max(worst, oracle.flux_balance_defect(c, pi),
                    float(np.abs(pi - oracle.stationary_weights(c)).max()))
    return worst


def _expm_vs_uniformization() -> float:
    worst = 0.0
    for inst in micro_instances():
        c = inst.ctmc()
        worst = max(worst, float(np.abs(oracle.ctmc_distribution(c, 2.0)
                                        - oracle.ctmc_distribution(c, 2.0, "uniformization")).max()))
    return worst


def _ssa_tv(replicates: int) -> float:
    worst = 0.0
    for k, inst in enumerate(micro_instances()):
        c = inst.ctmc()
        samples = sample_states(inst.problem(2.0), replicates, 1000 + k, 2.0)
        worst = max(worst, oracle.total_variation(empirical_distribution(c, samples),
                                                  oracle.ctmc_distribution(c, 2.0)))
    return worst


def _rhs_vs_dense() -> float:
    net = reversible_binding_network()
    m = MeanFieldModel(net, settings=SolverSettings(N=64))
    rng = np.random.default_rng(3)
    x = np.arange(64) * m.h
    vals = np.array([0.2 + 0.1 * np.sin(x + p) + 0.05 * rng.random(64) for p in (0.0, 1.0, 2.0)])
    fast = reaction_rhs(vals, m)
    dense = oracle.dense_reaction_rhs(vals, net, m.L)
    return float(np.abs(fast - dense).max() / np.abs(dense).max())


def _conservation() -> float:
    m = MeanFieldModel(reversible_binding_network(), settings=SolverSettings(N=128, dt_max=1e-3))
    res = solve(m, gaussian_bumps(128), 0.5, [0.0, 0.5])
    M = res.masses
    ac, bc = M[:, 0] + M[:, 2], M[:, 1] + M[:, 2]
    return float(max(np.ptp(ac), np.ptp(bc)))


def run_validation(replicates: int = 20_000, report: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run the quick oracle suite; each check reports one line through ``report``."""
    checks = [
        ("hop-rate ratio identity", _hop_ratio, 1e-12),
        ("reaction flux balance on micro systems", _flux_balance, 1e-12),
        ("expm vs uniformization", _expm_vs_uniformization, 1e-10),
        (f"simulator vs exact distribution, TV at t=2 ({replicates} runs)",
         lambda: _ssa_tv(replicates), 0.02),
        ("mean-field reactions vs dense quadrature (relative)", _rhs_vs_dense, 1e-10),
        ("mean-field mass drift on [0, 0.5]", _conservation, 1e-8),
    ]
    out = []
    for name, fn, bound in checks:
        t0 = time.perf_counter()
        v = fn()
        r = CheckResult(name, bool(v <= bound and math.isfinite(v)), v, bound, time.perf_counter() - t0)
        out.append(r)
        if report:
            report(r.line())
    return out


# ---------------------------------------------------------------------------
# acceptance probabilities on a frozen measure


def frozen_lattice_state(populations=(40, 40, 20), N: int = 128, seed: int = 0) -> np.ndarray:
    """Occupancy of a fixed lattice configuration of the model problem.

    A and B are drawn i.i.d. from the two Gaussian bumps, C from a bump
    between them (100 particles by default).
    """
    mesh = build_mesh(2 * math.pi, N)
    L = mesh.L
    profiles = {}
    for s, c in zip("ABC", (0.75 * math.pi, 1.25 * math.pi, math.pi)):
        profiles[s] = np.exp(-5 * periodic_distance(mesh.nodes, c, L) ** 2)
    st = initialize_particles(sum(populations), profiles, mesh, np.random.default_rng(seed),
                              populations=dict(zip("ABC", populations)))
    return st.counts


def _sample_reactions(counts, mesh, network, samples, rng):
    """Binding and unbinding proposals drawn from the particles of ``counts``.

    Binding pairs an A with a B inside the kernel range (partner drawn
    with kernel weights); unbinding places the partner at a kernel-drawn
    offset from a C.
    """
    bind, unbind = network.reactions
    N = mesh.N
    kw = mesh.h * bind.kernel.of_distance(mesh.offset_distances())
    kw = kw / kw.sum()
    a_sites = np.repeat(np.arange(N), counts[0])
    b_sites = np.repeat(np.arange(N), counts[1])
    c_sites = np.repeat(np.arange(N), counts[2])
    out = []
    while len(out) < samples:
        if len(c_sites) and (rng.random() < 0.5 or not (len(a_sites) and len(b_sites))):
            z = int(rng.choice(c_sites))
            p = (z + int(rng.choice(N, p=kw))) % N
            prods = (z, p) if rng.random() < 0.5 else (p, z)
            out.append((unbind, (z,), prods))
        else:
            x = int(rng.choice(a_sites))
            w = kw[(b_sites - x) % N]
            if not w.sum() > 0:
                continue
            y = int(rng.choice(b_sites, p=w / w.sum()))
            out.append((bind, (x, y), (x if rng.random() < 0.5 else y,)))
    return out


def acceptance_gap(counts, state_gamma: float, gammas, samples: int = 1000, seed: int = 0,
                   network: ReactionNetwork | None = None, mesh: Mesh | None = None) -> dict[int, float]:
    """``sup |pi^gamma - pi|`` over sampled reactions on one frozen measure.

    The measure ``counts / state_gamma`` is held fixed for every ``gamma``;
    only the removal of the reacting particles' own ``1/gamma`` pair
    energies changes. ``pi`` is the mean-field acceptance probability.
    """
    network = network or reversible_binding_network()
    counts = np.asarray(counts)
    mesh = mesh or build_mesh(2 * math.pi, counts.shape[1])
    weights = counts / float(state_gamma)
    nodes, names, table, L = mesh.nodes, network.names, network.potentials, mesh.L
    rng = np.random.default_rng(seed)
    proposals = _sample_reactions(counts, mesh, network, samples, rng)
    gaps = {int(g): 0.0 for g in gammas}
    for rxn, src, tgt in proposals:
        x, y = nodes[list(src)], nodes[list(tgt)]
        p_mf = acceptance_from_delta(energy_change(rxn, x, y, weights, nodes, names, table, L, None))
        for g in gaps:
            p = acceptance_from_delta(energy_change(rxn, x, y, weights, nodes, names, table, L, g, strict=False))
            gaps[g] = max(gaps[g], abs(p - p_mf))
    return gaps


# ---------------------------------------------------------------------------
# temporal order of the IMEX scheme


def imex_self_convergence(dts=(1e-2, 5e-3, 2.5e-3, 1.25e-3), t_end: float = 0.1, N: int = 512):
    """Observed orders ``log2(|u_dt - u_dt/2| / |u_dt/2 - u_dt/4|)`` at ``t_end``.

    Runs the model problem with fixed steps ``dts`` (each halving the
    previous) and returns ``(differences, orders)`` in the max norm over
    all fields.
    """
    sols = []
    for dt in dts:
        m = MeanFieldModel(reversible_binding_network(), settings=SolverSettings(N=N, dt_max=dt, dt_min=min(dt, 1e-7)))
        sols.append(solve(m, gaussian_bumps(N), t_end).fields[-1])
    diffs = [float(np.abs(a - b).max()) for a, b in zip(sols, sols[1:])]
    orders = [math.log2(a / b) for a, b in zip(diffs, diffs[1:])]
    return diffs, orders
