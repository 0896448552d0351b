"""Lattice jump process for interacting, reacting particles on a periodic mesh.

Two event loops share the same rates:

* :func:`ssa_step` is a direct-method SSA over an explicit
  :class:`EventSchedule` (every hop, every binding voxel pair, every
  unimolecular voxel). It is written for clarity and is used as a
  reference on small systems.
* :func:`simulate_trajectory` / :func:`run_ensemble` drive the compiled
  thinned loop in :mod:`pbsrdd._engine`, which realises the same jump
  intensities with bounded proposals.

Hop rates follow ``(D/h^2) * Delta / expm1(Delta)`` where ``Delta`` is the
change in the hopping particle's energy with its own contribution removed.
Reactions are proposed at rate ``lambda K / gamma`` per substrate pair (or
``mu`` per particle) and accepted with ``min(1, exp(-dPhi))``.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _engine
from .model import (
    AcceptanceForm,
    Mesh,
    ReactionNetwork,
    ReactionSpec,
    SystemScale,
    acceptance_probability,
    backward_placement_distribution,
    build_mesh,
    interaction_energy,
    periodic_distance,
)

__all__ = [
    "Mesh",
    "build_mesh",
    "LatticeState",
    "initialize_particles",
    "hop_delta",
    "hop_rate",
    "binding_proposal_rate",
    "unbinding_proposal_rate",
    "continuum_unbinding_normalizer",
    "EventSchedule",
    "Event",
    "ssa_step",
    "CRDMEProblem",
    "Trajectory",
    "simulate_trajectory",
    "EnsembleStats",
    "run_ensemble",
    "sample_states",
    "replicate_generator",
    "write_snapshots_csv",
    "AbsorbingStateError",
    "KERNEL_FLOOR",
]

KERNEL_FLOOR = 1e-300


class AbsorbingStateError(RuntimeError):
    """No channel has positive propensity."""


# ---------------------------------------------------------------------------
# state


@dataclass
class LatticeState:
    """Integer occupation numbers ``counts[s, i]`` at time ``t``."""

    counts: np.ndarray
    gamma: float
    t: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a (species, voxel) array")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def weights(self) -> np.ndarray:
        """Nodal measure ``counts / gamma``."""
        return self.counts / self.gamma

    def copy(self) -> "LatticeState":
        return LatticeState(self.counts.copy(), self.gamma, self.t)


def _profile_values(profile, mesh: Mesh) -> np.ndarray:
    if callable(profile):
        vals = np.asarray(profile(mesh.nodes), dtype=float)
    else:
        vals = np.asarray(profile, dtype=float)
    vals = np.broadcast_to(vals, (mesh.N,)).astype(float)
    if (vals < 0).any() or not np.isfinite(vals).all():
        raise ValueError("initial profiles must be finite and nonnegative")
    return vals


def initialize_particles(gamma: int, init_profiles: Mapping[str, object], mesh: Mesh,
                         rng: np.random.Generator,
                         species: Sequence[str] = ("A", "B", "C"),
                         populations: Mapping[str, int] | None = None) -> LatticeState:
    """Place particles i.i.d. on nodes with probability proportional to a profile.

    By default each species with a profile gets ``gamma // 2`` particles
    (``gamma`` must then be even); ``populations`` overrides the counts.
    Species without a profile start empty.
    """
    gamma = int(gamma)
    if populations is None:
        if gamma % 2:
            raise ValueError("gamma must be even to split the population in halves")
        populations = {s: gamma // 2 for s in init_profiles}
    counts = np.zeros((len(species), mesh.N), dtype=np.int64)
    for s in species:
        if s not in init_profiles:
            continue
        p = _profile_values(init_profiles[s], mesh)
        tot = p.sum()
        if not tot > 0:
            raise ValueError(f"initial profile of {s!r} is identically zero")
        counts[list(species).index(s)] = rng.multinomial(int(populations[s]), p / tot)
    return LatticeState(counts, gamma, 0.0)


# ---------------------------------------------------------------------------
# rates


def hop_rate(D, h, delta):
    """``(D/h^2) * delta / expm1(delta)``, stable near 0 and for large ``|delta|``."""
    d = np.asarray(delta, dtype=float)
    small = np.abs(d) < 1e-8
    big = d > 700.0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        g = np.where(small, 1.0 - 0.5 * d,
                     np.where(big, d * np.exp(-np.minimum(d, 1e300)), d / np.expm1(d)))
    # expm1 overflows to inf for d >~ 709; d/inf = 0 is also correct there
    out = (D / h**2) * g
    return float(out) if out.ndim == 0 else out


def hop_delta(state: LatticeState, s: str, i: int, j: int, network: ReactionNetwork,
              mesh: Mesh) -> float:
    """Energy change felt by one ``s`` particle hopping from node ``i`` to ``j``.

    The particle's own contribution to the bath is removed from both the
    source and the target energy.
    """
    N = mesh.N
    i, j = int(i) % N, int(j) % N
    if (j - i) % N not in (1, N - 1):
        raise ValueError(f"voxels {i} and {j} are not adjacent")
    k = network.index(s)
    if state.counts[k, i] < 1:
        raise ValueError(f"no {s} particle in source voxel {i}")
    nodes, names, table = mesh.nodes, network.names, network.potentials
    w = state.weights
    xi, xj = nodes[i], nodes[j]
    e_j = interaction_energy(s, xj, w, nodes, names, table, mesh.L)
    e_i = interaction_energy(s, xi, w, nodes, names, table, mesh.L)
    self_j = table.pair(s, s, periodic_distance(xj, xi, mesh.L)) / state.gamma
    self_i = table.pair(s, s, 0.0) / state.gamma
    v = table.one_body_energy(s, xj) - table.one_body_energy(s, xi)
    return float(e_j - e_i - self_j + self_i + v)


def binding_proposal_rate(i: int, j: int, kernel, lam: float, gamma: float, mesh: Mesh) -> float:
    """Per-pair proposal rate ``lam * K(x_i, y_j) / gamma`` (0 below the floor)."""
    x = mesh.nodes
    k = kernel.of_distance(periodic_distance(x[int(i) % mesh.N], x[int(j) % mesh.N], mesh.L))
    if k < KERNEL_FLOOR:
        return 0.0
    return lam * k / gamma


def continuum_unbinding_normalizer(kernel, table, gamma: float, products=("A", "B"),
                                   quadrature_points: int = 1 << 16) -> float:
    """``int K(x, z) exp(-u_{p0,p1}(x, z)/gamma) dx`` by a fine trapezoidal rule."""
    n = int(quadrature_points)
    x = np.arange(n) * (kernel.L / n)
    r = np.minimum(x, kernel.L - x)
    vals = kernel.of_distance(r) * np.exp(-table.pair(products[0], products[1], r) / gamma)
    return float(vals.sum() * kernel.L / n)


def unbinding_proposal_rate(k_voxel: int, mesh: Mesh, kernel, table, scale: SystemScale,
                            mu: float, products=("A", "B"), normalizer: float | None = None) -> float:
    """Per-particle proposal rate of a dissociation at node ``k_voxel``.

    ``(mu / Z) * sum_i h K(x_i, z) exp(-u_{p0,p1}(x_i, z)/gamma)``. With the
    default ``normalizer=None`` the normaliser ``Z`` is the same lattice sum
    that normalises the placement distribution, so the rate is ``mu``.
    Passing :func:`continuum_unbinding_normalizer` gives the continuum form.
    """
    bp = backward_placement_distribution(int(k_voxel) % mesh.N, mesh, kernel, table, scale, tuple(products))
    z = bp.normalizer if normalizer is None else float(normalizer)
    return mu * bp.normalizer / z


# ---------------------------------------------------------------------------
# direct-method schedule (reference path)


def _offset_table(mesh: Mesh) -> np.ndarray:
    """``dist[i, j]``: periodic distance between nodes i and j."""
    idx = np.arange(mesh.N)
    return mesh.offset_distances()[(idx[None, :] - idx[:, None]) % mesh.N]


@dataclass(frozen=True)
class Event:
    kind: str              # "hop" or "reaction"
    index: int             # species index (hop) or reaction index
    source: tuple          # voxels of the substrates (hop: (i,))
    target: tuple          # voxels of the products (hop: (j,))
    accepted: bool


class EventSchedule:
    """Explicit channel propensities for a lattice state.

    ``hop[s, i, 0]`` / ``hop[s, i, 1]`` are the rates of a species-``s``
    particle leaving voxel ``i`` to the right / left (times the occupancy).
    ``pair[r]`` is the ``N x N`` proposal propensity of bimolecular
    reaction ``r`` over (first-substrate voxel, second-substrate voxel);
    ``single[r]`` is the length-``N`` proposal propensity of a
    unimolecular reaction. :meth:`update` recomputes only the entries
    that can depend on a set of changed voxels; :meth:`rebuild` recomputes
    everything with the same arithmetic, so both agree bit for bit.
    """

    def __init__(self, state: LatticeState, network: ReactionNetwork, mesh: Mesh):
        self.network = network
        self.mesh = mesh
        self.gamma = float(state.gamma)
        self.state = state
        names = network.names
        S, N = len(names), mesh.N
        if state.counts.shape != (S, N):
            raise ValueError("state shape does not match the network and mesh")
        dist = _offset_table(mesh)
        table = network.potentials
        self._U = np.zeros((S, S, N, N))
        reach = 0
        for a, sa in enumerate(names):
            for b, sb in enumerate(names):
                self._U[a, b] = table.pair(sa, sb, dist) / self.gamma
                c = table.cutoff(sa, sb)
                if c > 0:
                    reach = max(reach, int(np.ceil(c / mesh.h)))
        self._reach = min(reach + 1, N)
        self._V = np.array([np.broadcast_to(table.one_body_energy(s, mesh.nodes), (N,)) for s in names],
                           dtype=float)
        self._selfjump = np.array([[self._U[a, a, 0, 1] - self._U[a, a, 0, 0],
                                    self._U[a, a, 0, N - 1] - self._U[a, a, 0, 0]] for a in range(S)])
        self._D = network.diffusivities()
        self._pair_base = {}
        self._single_base = {}
        for r, rxn in enumerate(network.reactions):
            if rxn.order == 2:
                k = rxn.kernel.of_distance(dist)
                k = np.where(k < KERNEL_FLOOR, 0.0, k)
                self._pair_base[r] = rxn.rate * k / self.gamma
            else:
                self._single_base[r] = np.full(N, float(rxn.rate))
                if rxn.acceptance_form is AcceptanceForm.UNBINDING:
                    scale = SystemScale(self.gamma)
                    self._single_base[r] = np.array([
                        unbinding_proposal_rate(z, mesh, rxn.kernel, table, scale, rxn.rate, rxn.products)
                        for z in range(N)])
        self.hop = np.zeros((S, N, 2))
        self.pair = {r: np.zeros((N, N)) for r in self._pair_base}
        self.single = {r: np.zeros(N) for r in self._single_base}
        self.rebuild()

    # -- energies ---------------------------------------------------------
    def _psi_rows(self, s: int, idx) -> np.ndarray:
        c = self.state.counts
        out = np.empty(len(idx))
        for n, i in enumerate(idx):
            e = self._V[s, i]
            for b in range(c.shape[0]):
                e += float(np.dot(self._U[s, b, i], c[b]))
            out[n] = e
        return out

    def _hop_entries(self, idx):
        N = self.mesh.N
        idx = np.asarray(idx, dtype=int)
        c = self.state.counts
        h = self.mesh.h
        for s in range(c.shape[0]):
            occ = c[s, idx]
            if not occ.any():
                self.hop[s, idx] = 0.0
                continue
            here = self._psi_rows(s, idx)
            right = self._psi_rows(s, (idx + 1) % N)
            left = self._psi_rows(s, (idx - 1) % N)
            d_r = right - here - self._selfjump[s, 0]
            d_l = left - here - self._selfjump[s, 1]
            self.hop[s, idx, 0] = occ * hop_rate(self._D[s], h, d_r)
            self.hop[s, idx, 1] = occ * hop_rate(self._D[s], h, d_l)

    def _pair_entries(self, r: int, rows, cols):
        rxn = self.network.reactions[r]
        c = self.state.counts
        a = c[self.network.index(rxn.substrates[0])].astype(float)
        b = c[self.network.index(rxn.substrates[1])].astype(float)
        base = self._pair_base[r]
        P = self.pair[r]
        homo = rxn.substrates[0] == rxn.substrates[1]
        for i in rows:
            P[i, :] = self._pair_row(base[i], a[i], b, homo, i)
        for j in cols:
            P[:, j] = self._pair_row(base[:, j], b[j], a, homo, j)

    @staticmethod
    def _pair_row(base_row, n_fixed, n_other, homo, i):
        row = base_row * n_fixed * n_other
        if homo:
            row = 0.5 * row
            row[i] = 0.5 * base_row[i] * n_fixed * (n_fixed - 1)
        return row

    def _single_entries(self, r: int, idx):
        rxn = self.network.reactions[r]
        c = self.state.counts[self.network.index(rxn.substrates[0])]
        idx = np.asarray(idx, dtype=int)
        self.single[r][idx] = self._single_base[r][idx] * c[idx]

    # -- public -------------------------------------------------------------
    def rebuild(self):
        allv = np.arange(self.mesh.N)
        self._hop_entries(allv)
        for r in self.pair:
            self._pair_entries(r, allv, [])
        for r in self.single:
            self._single_entries(r, allv)

    def update(self, changed: Sequence[int]):
        """Refresh every entry that depends on the counts in ``changed`` voxels."""
        N = self.mesh.N
        changed = sorted({int(v) % N for v in changed})
        if not changed:
            return
        near = set()
        for v in changed:
            for d in range(-self._reach, self._reach + 1):
                near.add((v + d) % N)
        self._hop_entries(sorted(near))
        for r in self.pair:
            self._pair_entries(r, changed, changed)
        for r in self.single:
            self._single_entries(r, changed)

    def channel_vector(self) -> np.ndarray:
        parts = [self.hop.ravel()]
        parts += [self.pair[r].ravel() for r in sorted(self.pair)]
        parts += [self.single[r] for r in sorted(self.single)]
        return np.concatenate(parts)

    @property
    def a0(self) -> float:
        return float(self.channel_vector().sum())

    def snapshot(self) -> dict:
        return {"hop": self.hop.copy(),
                "pair": {r: v.copy() for r, v in self.pair.items()},
                "single": {r: v.copy() for r, v in self.single.items()}}


def ssa_step(state: LatticeState, schedule: EventSchedule, rng: np.random.Generator):
    """One direct-method step. Mutates ``state`` and ``schedule``.

    Returns ``(event, dt)``. Rejected reaction proposals advance time only.
    Raises :class:`AbsorbingStateError` when every propensity vanishes.
    """
    if schedule.state is not state:
        raise ValueError("schedule was built for a different state object")
    net, mesh = schedule.network, schedule.mesh
    N = mesh.N
    vec = schedule.channel_vector()
    a0 = float(vec.sum())
    if not a0 > 0:
        raise AbsorbingStateError("total propensity is zero")
    dt = float(rng.standard_exponential() / a0)
    state.t += dt
    cum = np.cumsum(vec)
    c = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    c = min(c, len(vec) - 1)
    while vec[c] <= 0:  # guard against landing on a zero-width channel by rounding
        c -= 1
    S = len(net.names)
    nhop = S * N * 2
    if c < nhop:
        s, rem = divmod(c, N * 2)
        i, d = divmod(rem, 2)
        j = (i + 1) % N if d == 0 else (i - 1) % N
        state.counts[s, i] -= 1
        state.counts[s, j] += 1
        schedule.update([i, j])
        return Event("hop", s, (i,), (j,), True), dt
    c -= nhop
    rxn_idx = None
    for r in sorted(schedule.pair):
        if c < N * N:
            rxn_idx = r
            i, j = divmod(c, N)
            src = (i, j)
            break
        c -= N * N
    if rxn_idx is None:
        for r in sorted(schedule.single):
            if c < N:
                rxn_idx = r
                src = (c,)
                break
            c -= N
    rxn = net.reactions[rxn_idx]
    tgt = _place_products(rxn, src, state, mesh, net.potentials, rng)
    x = mesh.nodes
    pacc = acceptance_probability(rxn, x[list(src)], x[list(tgt)], state.weights, x, net.names,
                                  net.potentials, mesh.L, SystemScale(state.gamma))
    if rng.random() >= pacc:
        return Event("reaction", rxn_idx, src, tgt, False), dt
    for sp, v in zip(rxn.substrates, src):
        state.counts[net.index(sp), v] -= 1
    for sp, v in zip(rxn.products, tgt):
        state.counts[net.index(sp), v] += 1
    schedule.update(list(src) + list(tgt))
    return Event("reaction", rxn_idx, src, tgt, True), dt


def _place_products(rxn: ReactionSpec, src, state, mesh, table, rng) -> tuple:
    form = rxn.acceptance_form
    if form is AcceptanceForm.BINDING:
        return (src[0] if rng.random() < 0.5 else src[1],)
    if form is AcceptanceForm.UNBINDING:
        bp = backward_placement_distribution(src[0], mesh, rxn.kernel, table,
                                             SystemScale(state.gamma), rxn.products)
        return bp.sample(rng)
    return tuple(src)


# ---------------------------------------------------------------------------
# compiled path


@dataclass
class CRDMEProblem:
    """Everything needed to run lattice trajectories.

    ``init_profiles`` maps species names to nonnegative functions of the
    node coordinates (or arrays of nodal values); particles are placed
    i.i.d. proportionally. ``populations`` gives the particle count per
    profiled species (default ``gamma // 2``). ``initial_counts`` fixes a
    deterministic initial state instead.
    """

    network: ReactionNetwork
    mesh: Mesh
    gamma: int
    t_end: float
    init_profiles: Mapping[str, object] = field(default_factory=dict)
    populations: Mapping[str, int] | None = None
    initial_counts: np.ndarray | None = None
    rebuild_every: int = 4096

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be >= 0")
        if self.initial_counts is None and not self.init_profiles:
            raise ValueError("give either init_profiles or initial_counts")


@dataclass
class _Plan:
    """Array form of a :class:`CRDMEProblem` for the compiled loop (picklable)."""

    hop_base: np.ndarray
    U: np.ndarray
    wlo: np.ndarray
    whi: np.ndarray
    selfcorr: np.ndarray
    V: np.ndarray
    r_nsub: np.ndarray
    r_sub: np.ndarray
    r_nprod: np.ndarray
    r_prod: np.ndarray
    r_rate: np.ndarray
    r_form: np.ndarray
    r_homo: np.ndarray
    r_kt: np.ndarray
    r_kmax: np.ndarray
    r_cdf: np.ndarray
    gamma: float
    t_end: float
    init_prob: np.ndarray
    populations: np.ndarray
    initial_counts: np.ndarray | None
    rebuild_every: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.V.shape


_FORM_CODE = {
    AcceptanceForm.NONE: _engine.FORM_NONE,
    AcceptanceForm.BINDING: _engine.FORM_BINDING,
    AcceptanceForm.UNBINDING: _engine.FORM_UNBINDING,
    AcceptanceForm.SWAP: _engine.FORM_SWAP,
}


def compile_problem(problem: CRDMEProblem) -> _Plan:
    net, mesh = problem.network, problem.mesh
    names = net.names
    S, N = len(names), mesh.N
    gamma = float(problem.gamma)
    table = net.potentials
    dist = mesh.offset_distances()
    U = np.zeros((S, S, N))
    wlo = np.zeros((S, S), dtype=np.int64)
    whi = np.full((S, S), -1, dtype=np.int64)
    for a, sa in enumerate(names):
        for b, sb in enumerate(names):
            U[a, b] = table.pair(sa, sb, dist) / gamma
            nz = np.nonzero(U[a, b])[0]
            if len(nz) == 0:
                continue
            # widest offset (in either direction) carrying a nonzero value
            w = int(max(min(d, N - d) for d in nz))
            if 2 * w + 1 >= N:
                wlo[a, b], whi[a, b] = -(N // 2), N - 1 - N // 2
            else:
                wlo[a, b], whi[a, b] = -w, w
    selfcorr = np.array([max(abs(U[a, a, 1 % N] - U[a, a, 0]), abs(U[a, a, N - 1] - U[a, a, 0]))
                         for a in range(S)])
    V = np.array([np.broadcast_to(table.one_body_energy(s, mesh.nodes), (N,)) for s in names], dtype=float)
    R = len(net.reactions)
    r_nsub = np.zeros(R, np.int64)
    r_sub = np.zeros((R, 2), np.int64)
    r_nprod = np.zeros(R, np.int64)
    r_prod = np.zeros((R, 2), np.int64)
    r_rate = np.zeros(R)
    r_form = np.zeros(R, np.int64)
    r_homo = np.zeros(R, np.bool_)
    r_kt = np.zeros((R, N))
    r_kmax = np.zeros(R)
    r_cdf = np.ones((R, N))
    for r, rxn in enumerate(net.reactions):
        r_nsub[r] = rxn.order
        r_nprod[r] = len(rxn.products)
        for k, s in enumerate(rxn.substrates):
            r_sub[r, k] = net.index(s)
        for k, s in enumerate(rxn.products):
            r_prod[r, k] = net.index(s)
        r_rate[r] = rxn.rate
        r_form[r] = _FORM_CODE[rxn.acceptance_form]
        if rxn.order == 2:
            r_homo[r] = rxn.substrates[0] == rxn.substrates[1]
            k = rxn.kernel.of_distance(dist)
            r_kt[r] = np.where(k < KERNEL_FLOOR, 0.0, k)
            r_kmax[r] = r_kt[r].max()
        elif rxn.acceptance_form is AcceptanceForm.UNBINDING:
            # partner offset (partner - z) mod N, weights h K exp(-u/gamma)
            w = mesh.h * rxn.kernel.of_distance(dist) * np.exp(
                -table.pair(rxn.products[0], rxn.products[1], dist) / gamma)
            w = np.where(w < KERNEL_FLOOR, 0.0, w)
            c = np.cumsum(w)
            r_cdf[r] = c / c[-1]
            r_cdf[r, -1] = 1.0
    init_prob = np.zeros((S, N))
    pops = np.zeros(S, np.int64)
    init_counts = None
    if problem.initial_counts is not None:
        init_counts = np.asarray(problem.initial_counts, dtype=np.int64).reshape(S, N).copy()
        if (init_counts < 0).any():
            raise ValueError("initial counts must be nonnegative")
    else:
        pop_map = problem.populations
        if pop_map is None:
            if int(problem.gamma) % 2:
                raise ValueError("gamma must be even to split the population in halves")
            pop_map = {s: int(problem.gamma) // 2 for s in problem.init_profiles}
        for s, prof in problem.init_profiles.items():
            p = _profile_values(prof, mesh)
            if not p.sum() > 0:
                raise ValueError(f"initial profile of {s!r} is identically zero")
            init_prob[net.index(s)] = p / p.sum()
            pops[net.index(s)] = int(pop_map[s])
    return _Plan(net.diffusivities() / mesh.h**2, U, wlo, whi, selfcorr, V,
                 r_nsub, r_sub, r_nprod, r_prod, r_rate, r_form, r_homo, r_kt, r_kmax, r_cdf,
                 gamma, float(problem.t_end), init_prob, pops, init_counts, int(problem.rebuild_every))


def replicate_generator(base_seed: int, replicate: int) -> np.random.Generator:
    """Counter-based (Philox) stream for replicate ``replicate`` of an ensemble."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(base_seed), int(replicate)])))


@dataclass
class Trajectory:
    """Snapshots ``counts[k, s, i]`` at ``times[k]`` (state after the last event at or before ``times[k]``)."""

    times: np.ndarray
    counts: np.ndarray
    gamma: float
    status: str
    proposals: int
    names: tuple[str, ...] = ()

    def molar_masses(self) -> np.ndarray:
        return self.counts.sum(axis=2) / self.gamma


def _initial_counts(plan: _Plan, rng: np.random.Generator) -> np.ndarray:
    if plan.initial_counts is not None:
        return plan.initial_counts.copy()
    S, N = plan.shape
    counts = np.zeros((S, N), np.int64)
    for s in range(S):
        if plan.populations[s] > 0:
            counts[s] = rng.multinomial(int(plan.populations[s]), plan.init_prob[s])
    return counts


def _plist_from_counts(counts: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    S, N = counts.shape
    plist = np.zeros((S, cap), np.int64)
    npart = counts.sum(axis=1).astype(np.int64)
    for s in range(S):
        plist[s, :npart[s]] = np.repeat(np.arange(N), counts[s])
    return plist, npart


_STATUS_NAME = {
    _engine.STATUS_T_END: "t_end",
    _engine.STATUS_ABSORBING: "absorbing",
    _engine.STATUS_MAX_EVENTS: "max_events",
}


def _run_plan(plan: _Plan, rng: np.random.Generator, record_times: np.ndarray,
              max_events: int = -1) -> tuple[np.ndarray, str, int]:
    S, N = plan.shape
    counts = _initial_counts(plan, rng)
    cap = int(2 * counts.sum() + 8)
    plist, npart = _plist_from_counts(counts, cap)
    psi = np.zeros((S, N))
    _engine.build_psi(counts, plan.U, plan.wlo, plan.whi, plan.V, psi)
    M = np.array([_engine.exact_bound(psi, s) for s in range(S)])
    clock = np.zeros(2)
    rec_out = np.zeros((len(record_times), S, N), np.int64)
    info = np.zeros(3, np.int64)
    rec_next = 0
    proposals = 0
    while True:
        status, rec_next, n = _engine.run_events(
            plan.hop_base, plan.U, plan.wlo, plan.whi, plan.selfcorr, plan.V,
            plan.r_nsub, plan.r_sub, plan.r_nprod, plan.r_prod, plan.r_rate, plan.r_form,
            plan.r_homo, plan.r_kt, plan.r_kmax, plan.r_cdf,
            plan.gamma, counts, plist, npart, psi, M, clock,
            rng, plan.t_end, record_times, rec_next, rec_out,
            max_events if max_events < 0 else max_events - proposals, plan.rebuild_every, info)
        proposals += n
        if status == _engine.STATUS_CAPACITY:
            cap *= 2
            plist, npart = _plist_from_counts(counts, cap)
            continue
        if status == _engine.STATUS_BOUND_VIOLATION:
            raise RuntimeError("hop proposal bound violated; this is a bug in the bound bookkeeping")
        break
    return rec_out, _STATUS_NAME[status], proposals


def _check_record_times(record_times, t_end) -> np.ndarray:
    rt = np.asarray(record_times, dtype=float).ravel()
    if len(rt) and (np.any(np.diff(rt) < 0) or rt[0] < 0 or rt[-1] > t_end):
        raise ValueError("record times must be sorted and lie in [0, t_end]")
    return rt


def simulate_trajectory(problem: CRDMEProblem, rng: np.random.Generator, record_times,
                        max_events: int | None = None) -> Trajectory:
    """Exact stochastic trajectory sampled at ``record_times`` (cadlag snapshots)."""
    rt = _check_record_times(record_times, problem.t_end)
    plan = compile_problem(problem)
    rec, status, n = _run_plan(plan, rng, rt, -1 if max_events is None else int(max_events))
    return Trajectory(rt, rec, plan.gamma, status, n, problem.network.names)


@dataclass
class EnsembleStats:
    """Integer sums over replicates and the statistics derived from them."""

    replicates: int
    times: np.ndarray
    gamma: float
    h: float
    names: tuple[str, ...]
    sum_counts: np.ndarray      # (K, S, N)
    sumsq_counts: np.ndarray    # (K, S, N)
    sum_totals: np.ndarray      # (K, S)
    sumsq_totals: np.ndarray    # (K, S)
    base_seed: int = 0

    @property
    def mean_concentration(self) -> np.ndarray:
        """Mean voxel concentrations ``<counts> / (h gamma)``, shape (K, S, N)."""
        return self.sum_counts / (self.replicates * self.h * self.gamma)

    @property
    def molar_mass(self) -> np.ndarray:
        """Mean molar masses ``<total count> / gamma``, shape (K, S)."""
        return self.sum_totals / (self.replicates * self.gamma)

    def _se(self, s, ss, scale):
        R = self.replicates
        if R < 2:
            return np.zeros(s.shape)
        s = s.astype(float)
        var = np.maximum(ss - s * s / R, 0.0) / (R - 1)
        return np.sqrt(var / R) / scale

    @property
    def molar_mass_se(self) -> np.ndarray:
        return self._se(self.sum_totals, self.sumsq_totals, self.gamma)

    @property
    def concentration_se(self) -> np.ndarray:
        return self._se(self.sum_counts, self.sumsq_counts, self.h * self.gamma)

    def species(self, name: str) -> int:
        return self.names.index(name)


def _ensemble_chunk(plan: _Plan, record_times: np.ndarray, base_seed: int, lo: int, hi: int):
    S, N = plan.shape
    K = len(record_times)
    sc = np.zeros((K, S, N), np.int64)
    ssc = np.zeros((K, S, N), np.int64)
    st = np.zeros((K, S), np.int64)
    sst = np.zeros((K, S), np.int64)
    for r in range(lo, hi):
        rec, _, _ = _run_plan(plan, replicate_generator(base_seed, r), record_times)
        tot = rec.sum(axis=2)
        sc += rec
        ssc += rec * rec
        st += tot
        sst += tot * tot
    return sc, ssc, st, sst


def run_ensemble(problem: CRDMEProblem, replicates: int, base_seed: int, record_times,
                 workers: int = 1, progress: Callable[[int], None] | None = None) -> EnsembleStats:
    """Run ``replicates`` independent trajectories and aggregate integer sums.

    Replicate ``r`` draws from :func:`replicate_generator` ``(base_seed, r)``.
    Sums are over integers, so the result does not depend on ``workers``
    or on the completion order of chunks.
    """
    R = int(replicates)
    if R < 1:
        raise ValueError("need at least one replicate")
    rt = _check_record_times(record_times, problem.t_end)
    plan = compile_problem(problem)
    S, N = plan.shape
    K = len(rt)
    workers = max(1, int(workers))
    nchunk = min(R, workers * 4 if workers > 1 else max(1, R // 256))
    edges = np.linspace(0, R, nchunk + 1).astype(int)
    tot = [np.zeros((K, S, N), np.int64), np.zeros((K, S, N), np.int64),
           np.zeros((K, S), np.int64), np.zeros((K, S), np.int64)]
    done = 0

    def _accumulate(part, n):
        nonlocal done
        for a, b in zip(tot, part):
            a += b
        done += n
        if progress is not None:
            progress(done)

    if workers == 1:
        for lo, hi in zip(edges[:-1], edges[1:]):
            _accumulate(_ensemble_chunk(plan, rt, base_seed, int(lo), int(hi)), int(hi - lo))
    else:
        ctx = mp.get_context("fork")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            futs = {ex.submit(_ensemble_chunk, plan, rt, base_seed, int(lo), int(hi)): int(hi - lo)
                    for lo, hi in zip(edges[:-1], edges[1:])}
            for f in cf.as_completed(futs):
                _accumulate(f.result(), futs[f])
    return EnsembleStats(R, rt, plan.gamma, problem.mesh.h, problem.network.names,
                         *tot, base_seed=int(base_seed))


def sample_states(problem: CRDMEProblem, replicates: int, base_seed: int, t: float) -> np.ndarray:
    """Occupancy arrays of ``replicates`` independent runs at time ``t``, shape (R, S, N)."""
    rt = _check_record_times([t], problem.t_end)
    plan = compile_problem(problem)
    out = np.empty((int(replicates),) + plan.shape, np.int64)
    for r in range(int(replicates)):
        rec, _, _ = _run_plan(plan, replicate_generator(base_seed, r), rt)
        out[r] = rec[0]
    return out


def write_snapshots_csv(traj: Trajectory, path, comments: Sequence[str] = ()) -> None:
    """Dump nonzero snapshot entries as ``time,species,voxel,count``."""
    names = traj.names or tuple(str(s) for s in range(traj.counts.shape[1]))
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(["time", "species", "voxel", "count"])
        for k, t in enumerate(traj.times):
            for s, i in zip(*np.nonzero(traj.counts[k])):
                w.writerow([repr(float(t)), names[s], int(i), int(traj.counts[k, s, i])])
