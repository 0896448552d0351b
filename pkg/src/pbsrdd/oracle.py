"""Brute-force references for tests.

* exact generators of the lattice jump process on desk-size state spaces,
  with transient distributions by two independent matrix-exponential
  methods and the closed-form stationary law;
* energies by explicit enumeration of particle pairs;
* the well-mixed rate equations;
* dense O(N^2) reaction terms of the mean-field system.

Nothing here calls into :mod:`pbsrdd._engine` or reuses the schedule code
of :mod:`pbsrdd.crdme`; only the model definitions (potentials, kernels,
stoichiometry) are shared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp
from scipy.stats import poisson

from .model import AcceptanceForm, Mesh, ReactionNetwork, periodic_distance

__all__ = [
    "MicroCTMC",
    "StateSpaceOverflow",
    "build_micro_ctmc",
    "ctmc_distribution",
    "ctmc_stationary",
    "stationary_weights",
    "flux_balance_defect",
    "configuration_energy",
    "enumerated_hop_delta",
    "wellmixed_ode",
    "dense_reaction_rhs",
    "lattice_meanfield_rhs",
    "total_variation",
]

MAX_STATES = 100_000


class StateSpaceOverflow(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# pair enumeration


def _particles(counts: np.ndarray) -> list[tuple[int, int]]:
    """Explicit particle list ``[(species, voxel), ...]`` of an occupancy array."""
    out = []
    for s in range(counts.shape[0]):
        for i in range(counts.shape[1]):
            out.extend([(s, i)] * int(counts[s, i]))
    return out


def _u(network, mesh, gamma, s, i, s2, j) -> float:
    names = network.names
    r = periodic_distance(mesh.nodes[i], mesh.nodes[j], mesh.L)
    return float(network.potentials.pair(names[s], names[s2], r)) / gamma


def _v(network, mesh, s, i) -> float:
    return float(network.potentials.one_body_energy(network.names[s], mesh.nodes[i]))


def configuration_energy(counts, network: ReactionNetwork, mesh: Mesh, gamma: float) -> float:
    """``sum_p v(x_p) + sum_{p<q} u(x_p, x_q) / gamma`` over every particle pair."""
    parts = _particles(np.asarray(counts))
    e = sum(_v(network, mesh, s, i) for s, i in parts)
    for a in range(len(parts)):
        for b in range(a):
            e += _u(network, mesh, gamma, *parts[a], *parts[b])
    return e


def _bath_energy(network, mesh, gamma, s, i, bath) -> float:
    return _v(network, mesh, s, i) + sum(_u(network, mesh, gamma, s, i, s2, j) for s2, j in bath)


def enumerated_hop_delta(counts, s: int, i: int, j: int, network, mesh, gamma) -> float:
    """Hop energy change as a difference of whole-configuration energies."""
    after = np.array(counts, dtype=np.int64, copy=True)
    after[s, i] -= 1
    after[s, j] += 1
    return (configuration_energy(after, network, mesh, gamma)
            - configuration_energy(counts, network, mesh, gamma))


def _reaction_dphi(network, mesh, gamma, counts, rxn, sub, prod) -> float:
    """``Phi+ - Phi-`` of a reaction on an occupancy array, by enumeration.

    ``sub`` / ``prod`` are lists of ``(species, voxel)``; the bath is every
    particle except the substrates.
    """
    bath = _particles(counts)
    for p in sub:
        bath.remove(p)
    minus = sum(_bath_energy(network, mesh, gamma, s, i, bath) for s, i in sub)
    plus = sum(_bath_energy(network, mesh, gamma, s, i, bath) for s, i in prod)
    if rxn.acceptance_form is AcceptanceForm.SWAP:
        minus += _u(network, mesh, gamma, *sub[0], *sub[1])
        plus += _u(network, mesh, gamma, *prod[0], *prod[1])
    return plus - minus


# ---------------------------------------------------------------------------
# exact generator


@dataclass
class MicroCTMC:
    states: list[tuple[int, ...]]       # flattened occupancy tuples, lexicographic
    shape: tuple[int, int]              # (species, voxels)
    Q: np.ndarray                       # generator, rows sum to zero
    p0: np.ndarray
    network: ReactionNetwork
    mesh: Mesh
    gamma: float
    placement_normalizer: dict

    def index(self, counts) -> int:
        return self._lookup[tuple(int(c) for c in np.asarray(counts).ravel())]

    def __post_init__(self):
        self._lookup = {s: k for k, s in enumerate(self.states)}

    def counts(self, k: int) -> np.ndarray:
        return np.array(self.states[k], dtype=np.int64).reshape(self.shape)


def _hop_factor(delta: float) -> float:
    if delta == 0.0:
        return 1.0
    if delta > 700.0:
        return delta * math.exp(-delta)
    return delta / math.expm1(delta)


def _transitions(counts, network: ReactionNetwork, mesh: Mesh, gamma: float, znorm: dict):
    """Yield ``(new_counts, rate)`` for every channel out of ``counts``."""
    S, N = counts.shape
    h = mesh.h
    D = network.diffusivities()
    for s in range(S):
        for i in range(N):
            n = int(counts[s, i])
            if n == 0:
                continue
            for j in ((i + 1) % N, (i - 1) % N):
                delta = enumerated_hop_delta(counts, s, i, j, network, mesh, gamma)
                new = counts.copy()
                new[s, i] -= 1
                new[s, j] += 1
                yield new, n * D[s] / h**2 * _hop_factor(delta)
    for r, rxn in enumerate(network.reactions):
        sidx = [network.index(x) for x in rxn.substrates]
        pidx = [network.index(x) for x in rxn.products]
        if rxn.order == 2:
            sa, sb = sidx
            for i in range(N):
                for j in range(N):
                    if sa == sb:
                        if j < i:
                            continue
                        npair = counts[sa, i] * (counts[sa, i] - 1) / 2 if i == j else counts[sa, i] * counts[sa, j]
                    else:
                        npair = counts[sa, i] * counts[sb, j]
                    if npair == 0:
                        continue
                    k = float(rxn.kernel.of_distance(periodic_distance(mesh.nodes[i], mesh.nodes[j], mesh.L)))
                    if k < 1e-300:
                        continue
                    prop = npair * rxn.rate * k / gamma
                    sub = [(sa, i), (sb, j)]
                    if rxn.acceptance_form is AcceptanceForm.BINDING:
                        options = [([(pidx[0], i)], 0.5), ([(pidx[0], j)], 0.5)]
                    else:
                        options = [([(pidx[0], i), (pidx[1], j)], 1.0)]
                    for prod, w in options:
                        yield from _reaction_move(network, mesh, gamma, counts, rxn, sub, prod, prop * w)
        else:
            (sa,) = sidx
            for z in range(N):
                n = int(counts[sa, z])
                if n == 0:
                    continue
                sub = [(sa, z)]
                if rxn.acceptance_form is AcceptanceForm.UNBINDING:
                    w, total = znorm[r]
                    for off in range(N):
                        if w[off] == 0.0:
                            continue
                        y = (z + off) % N
                        q = 0.5 * w[off] / total
                        for prod in ([(pidx[0], z), (pidx[1], y)], [(pidx[0], y), (pidx[1], z)]):
                            yield from _reaction_move(network, mesh, gamma, counts, rxn, sub, prod,
                                                      n * rxn.rate * q)
                else:
                    prod = [(p, z) for p in pidx]
                    yield from _reaction_move(network, mesh, gamma, counts, rxn, sub, prod, n * rxn.rate)


def _reaction_move(network, mesh, gamma, counts, rxn, sub, prod, prop):
    dphi = _reaction_dphi(network, mesh, gamma, counts, rxn, sub, prod)
    acc = 1.0 if dphi <= 0 else math.exp(-dphi)
    new = counts.copy()
    for s, i in sub:
        new[s, i] -= 1
    for s, i in prod:
        new[s, i] += 1
    yield new, prop * acc


def _placement_tables(network: ReactionNetwork, mesh: Mesh, gamma: float) -> dict:
    """Unbinding partner weights ``h K exp(-u/gamma)`` over node offsets and their sum."""
    out = {}
    dist = np.array([periodic_distance(mesh.nodes[0], mesh.nodes[k], mesh.L) for k in range(mesh.N)])
    for r, rxn in enumerate(network.reactions):
        if rxn.acceptance_form is AcceptanceForm.UNBINDING:
            w = np.array([mesh.h * float(rxn.kernel.of_distance(d))
                          * math.exp(-float(network.potentials.pair(rxn.products[0], rxn.products[1], d)) / gamma)
                          for d in dist])
            w[w < 1e-300] = 0.0
            out[r] = (w, float(w.sum()))
    return out


def build_micro_ctmc(mesh: Mesh, initial_counts, network: ReactionNetwork, gamma: float,
                     max_voxels: int = 5, max_particles: int = 3) -> MicroCTMC:
    """Enumerate every state reachable from ``initial_counts`` and assemble ``Q``.

    Hop rates, reaction proposal rates and acceptance probabilities are
    evaluated from whole-configuration energies; states are ordered
    lexicographically by their flattened occupancy tuple.
    """
    init = np.asarray(initial_counts, dtype=np.int64)
    S = len(network.names)
    if init.shape != (S, mesh.N):
        raise ValueError("initial counts must have shape (species, voxels)")
    if mesh.N > max_voxels:
        raise StateSpaceOverflow(f"{mesh.N} voxels exceed the limit of {max_voxels}")
    if init.sum() > max_particles:
        raise StateSpaceOverflow(f"{init.sum()} particles exceed the limit of {max_particles}")
    znorm = _placement_tables(network, mesh, gamma)
    seen = {tuple(init.ravel()): init}
    frontier = [init]
    edges: dict[tuple, dict[tuple, float]] = {}
    while frontier:
        cur = frontier.pop()
        key = tuple(cur.ravel())
        out = edges.setdefault(key, {})
        for new, rate in _transitions(cur, network, mesh, gamma, znorm):
            if rate == 0.0:
                continue
            nk = tuple(new.ravel())
            if nk == key:
                continue
            out[nk] = out.get(nk, 0.0) + rate
            if nk not in seen:
                if new.sum() > max_particles * 2:
                    raise StateSpaceOverflow("particle number grows without bound")
                seen[nk] = new
                frontier.append(new)
                if len(seen) > MAX_STATES:
                    raise StateSpaceOverflow(f"more than {MAX_STATES} states")
    states = sorted(seen)
    idx = {s: k for k, s in enumerate(states)}
    n = len(states)
    Q = np.zeros((n, n))
    for a, out in edges.items():
        for b, rate in out.items():
            Q[idx[a], idx[b]] += rate
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    p0 = np.zeros(n)
    p0[idx[tuple(init.ravel())]] = 1.0
    return MicroCTMC(states, (S, mesh.N), Q, p0, network, mesh, float(gamma), znorm)


def ctmc_distribution(ctmc: MicroCTMC, t: float, method: str = "expm", tol: float = 1e-12) -> np.ndarray:
    """``p(t) = p0 exp(Q t)`` by Pade scaling-and-squaring or by uniformization."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return ctmc.p0.copy()
    if method == "expm":
        p = ctmc.p0 @ scipy.linalg.expm(ctmc.Q * t)
    elif method == "uniformization":
        q = float(-np.diag(ctmc.Q).min())
        if q == 0:
            return ctmc.p0.copy()
        P = np.eye(len(ctmc.p0)) + ctmc.Q / q
        lam = q * t
        kmax = int(poisson.isf(tol * 1e-2, lam)) + 1
        w = poisson.pmf(np.arange(kmax + 1), lam)
        p = np.zeros_like(ctmc.p0)
        v = ctmc.p0.copy()
        for k in range(kmax + 1):
            p += w[k] * v
            v = v @ P
    else:
        raise ValueError(f"unknown method {method!r}")
    return p


def ctmc_stationary(ctmc: MicroCTMC) -> np.ndarray:
    """Stationary vector of an irreducible generator (left null vector of ``Q``)."""
    n = ctmc.Q.shape[0]
    A = np.vstack([ctmc.Q.T, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return pi


def stationary_weights(ctmc: MicroCTMC) -> np.ndarray:
    """Closed-form stationary law for the binding/unbinding network.

    ``pi(n) ~ exp(-Phi(n)) prod_{s,i} 1/n_s(i)! * (lam Z / (gamma mu h))^{n_C}``,
    with ``Phi`` the whole-configuration energy and ``Z`` the lattice
    normaliser of the unbinding placement. Valid for hop-only networks
    and for one reversible ``A + B <-> C`` pair.
    """
    net = ctmc.network
    factor = 1.0
    c_idx = None
    bind = [r for r in net.reactions if r.acceptance_form is AcceptanceForm.BINDING]
    unbind = [k for k, r in enumerate(net.reactions) if r.acceptance_form is AcceptanceForm.UNBINDING]
    if bind or unbind:
        if len(bind) != 1 or len(unbind) != 1 or len(net.reactions) != 2:
            raise ValueError("closed form needs exactly one binding and one unbinding reaction")
        lam = bind[0].rate
        mu = net.reactions[unbind[0]].rate
        Z = ctmc.placement_normalizer[unbind[0]][1]
        factor = lam * Z / (ctmc.gamma * mu * ctmc.mesh.h)
        c_idx = net.index(bind[0].products[0])
    w = np.zeros(len(ctmc.states))
    for k in range(len(ctmc.states)):
        n = ctmc.counts(k)
        logw = -configuration_energy(n, net, ctmc.mesh, ctmc.gamma)
        logw -= sum(math.lgamma(int(c) + 1) for c in n.ravel())
        if c_idx is not None:
            logw += n[c_idx].sum() * math.log(factor)
        w[k] = logw
    w = np.exp(w - w.max())
    return w / w.sum()


def flux_balance_defect(ctmc: MicroCTMC, pi: np.ndarray | None = None) -> float:
    """``max |pi_a Q_ab - pi_b Q_ba| / max(pi_a Q_ab)`` over all state pairs."""
    if pi is None:
        pi = stationary_weights(ctmc)
    F = pi[:, None] * ctmc.Q
    np.fill_diagonal(F, 0.0)
    scale = float(F.max())
    return float(np.abs(F - F.T).max() / scale) if scale > 0 else 0.0


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# well-mixed limit


def wellmixed_ode(init: Sequence[float], lam: float, mu: float, t) -> np.ndarray:
    """``a' = b' = -lam a b + mu c``, ``c' = lam a b - mu c`` (DOP853, tol 1e-12).

    Returns an array of shape ``(len(t), 3)``.
    """
    if min(init) < 0:
        raise ValueError("initial concentrations must be nonnegative")
    t = np.atleast_1d(np.asarray(t, dtype=float))

    def rhs(_, y):
        a, b, c = y
        r = lam * a * b - mu * c
        return [-r, -r, r]

    if t.max() == 0:
        return np.tile(np.asarray(init, float), (len(t), 1))
    sol = solve_ivp(rhs, (0.0, float(t.max())), list(map(float, init)), method="DOP853",
                    t_eval=t, rtol=1e-12, atol=1e-12)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y.T


# ---------------------------------------------------------------------------
# mean-field references


def _dense_potentials(values, network, x, L):
    h = L / len(x)
    r = periodic_distance(x[:, None], x[None, :], L)
    names = network.names
    phi = np.zeros_like(values)
    for a, sa in enumerate(names):
        phi[a] = network.potentials.one_body_energy(sa, x)
        for b, sb in enumerate(names):
            phi[a] += h * network.potentials.pair(sa, sb, r) @ values[b]
    return phi


def dense_reaction_rhs(values: np.ndarray, network: ReactionNetwork, L: float) -> np.ndarray:
    """Mean-field reaction terms by explicit ``N x N`` quadrature."""
    A, B, C = values
    N = len(A)
    x = np.arange(N) * (L / N)
    h = L / N
    bind = [r for r in network.reactions if r.acceptance_form is AcceptanceForm.BINDING]
    unbind = [r for r in network.reactions if r.acceptance_form is AcceptanceForm.UNBINDING]
    lam = bind[0].rate if bind else 0.0
    mu = unbind[0].rate if unbind else 0.0
    kern = (bind or unbind)[0].kernel
    Kh = h * kern.of_distance(periodic_distance(x[:, None], x[None, :], L))
    phi = _dense_potentials(values, network, x, L)
    E1 = phi[2][:, None] - phi[0][:, None] - phi[1][None, :]
    E2 = phi[2][None, :] - phi[0][:, None] - phi[1][None, :]
    P1a, P2a = np.exp(-np.maximum(E1, 0)), np.exp(np.minimum(E1, 0))
    P1b, P2b = np.exp(-np.maximum(E2, 0)), np.exp(np.minimum(E2, 0))
    dA = (-0.5 * lam * A * ((Kh * (P1a + P1b)) @ B) + 0.5 * mu * C * (Kh * P2a).sum(1)
          + 0.5 * mu * (Kh * P2b) @ C)
    dB = (-0.5 * lam * B * ((Kh * (P1a + P1b)).T @ A) + 0.5 * mu * C * (Kh * P2b).sum(0)
          + 0.5 * mu * (Kh * P2a).T @ C)
    dC = (0.5 * lam * A * ((Kh * P1a) @ B) + 0.5 * lam * B * ((Kh * P1b).T @ A)
          - 0.5 * mu * C * ((Kh * P2a).sum(1) + (Kh * P2b).sum(0)))
    return np.array([dA, dB, dC])


def lattice_meanfield_rhs(values: np.ndarray, network: ReactionNetwork, L: float) -> np.ndarray:
    """Large-population limit of the lattice process at fixed mesh spacing.

    Nodal concentrations hop with the lattice rates driven by the
    mean-field energy; reactions use the same quadrature as the continuum
    system. Comparing its solution with the spectral solution isolates
    the lattice discretisation bias of the particle simulations.
    """
    N = values.shape[1]
    h = L / N
    x = np.arange(N) * h
    D = network.diffusivities()[:, None]
    psi = _dense_potentials(values, network, x, L)
    dpsi = np.roll(psi, -1, axis=1) - psi
    g = np.vectorize(_hop_factor)
    flux = D / h**2 * (values * g(dpsi) - np.roll(values, -1, axis=1) * g(-dpsi))
    return -flux + np.roll(flux, 1, axis=1) + dense_reaction_rhs(values, network, L)
