"""Reaction network, potentials, kernels and acceptance probabilities.

Everything here is a pure function of immutable inputs. The particle
simulator (:mod:`pbsrdd.crdme`) and the mean-field solver
(:mod:`pbsrdd.mfm`) both build on these definitions, so the energies
entering a lattice acceptance test and the mean-field reaction terms come
from the same code path.

Positions live on the periodic interval ``[0, L)``. Energies are in units
of k_B T. Concentration states are represented as nodal measures: an
array ``weights[s, i]`` giving the mass of species ``s`` at mesh node
``x_i``. For a lattice state this is ``counts / gamma``; for mean-field
fields it is ``h * values`` (trapezoidal quadrature weights).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "SpeciesSpec",
    "PotentialTable",
    "KernelSpec",
    "PlacementRule",
    "AcceptanceForm",
    "ReactionSpec",
    "ReactionNetwork",
    "SystemScale",
    "Mesh",
    "build_mesh",
    "periodic_distance",
    "pair_potential",
    "kernel_normalization",
    "kernel_eval",
    "interaction_energy",
    "energy_change",
    "acceptance_from_delta",
    "acceptance_probability",
    "acceptance_probability_meanfield",
    "sample_forward_placement",
    "BackwardPlacement",
    "backward_placement_distribution",
    "InconsistentExclusionError",
    "reversible_binding_network",
]


class InconsistentExclusionError(ValueError):
    """An excluded particle is not present in the measure it is removed from."""


# ---------------------------------------------------------------------------
# geometry


def periodic_distance(x, y, L: float):
    """Periodic distance ``min(|x - y|, L - |x - y|)`` on ``[0, L)``.

    Inputs are wrapped into ``[0, L)`` first; broadcasts like numpy.
    """
    d = np.abs(np.mod(x, L) - np.mod(y, L))
    r = np.minimum(d, L - d)
    if np.ndim(r) == 0:
        return float(r)
    return r


def _signed_periodic_difference(x, y, L: float):
    """``x - y`` mapped into ``[-L/2, L/2)``."""
    return np.mod(np.asarray(x, dtype=float) - y + 0.5 * L, L) - 0.5 * L


@dataclass(frozen=True)
class Mesh:
    """Uniform periodic mesh with nodes ``x_i = i*h``, ``i = 0..N-1``."""

    L: float
    N: int

    def __post_init__(self):
        # two voxels are allowed for desk-size exact oracles; both hop
        # directions then lead to the same neighbour
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"mesh needs N >= 2 voxels, got N={self.N}")
        if not self.L > 0:
            raise ValueError(f"domain length must be positive, got L={self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N) * self.h

    def wrap(self, i):
        """Voxel index modulo N (periodic adjacency)."""
        return np.mod(i, self.N)

    def voxel_of(self, x) -> np.ndarray:
        """Index of the voxel whose node is nearest to ``x``."""
        return np.mod(np.rint(np.mod(x, self.L) / self.h).astype(int), self.N)

    def offset_distances(self) -> np.ndarray:
        """Periodic distance of node offset ``d`` for ``d = 0..N-1``."""
        d = np.arange(self.N)
        return np.minimum(d, self.N - d) * self.h


def build_mesh(L: float, N: int) -> Mesh:
    """Uniform periodic mesh with ``N >= 3`` voxels and spacing ``L/N``."""
    if int(N) != N or N < 3:
        raise ValueError(f"mesh needs N >= 3 voxels, got N={N}")
    return Mesh(float(L), int(N))


# ---------------------------------------------------------------------------
# species and potentials


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    diffusivity: float
    radius: float = 0.0

    def __post_init__(self):
        if not self.diffusivity > 0:
            raise ValueError(f"species {self.name!r}: diffusivity must be > 0")
        if self.radius < 0:
            raise ValueError(f"species {self.name!r}: radius must be >= 0")


PairFunction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TabulatedPair:
    """Arbitrary bounded pair potential ``r -> u(r)`` vanishing for ``r >= cutoff``."""

    func: PairFunction
    cutoff: float
    derivative: PairFunction | None = None


@dataclass(frozen=True)
class PotentialTable:
    """One-body and pairwise potentials.

    The default pair form is the harmonic repulsion
    ``kappa * max(0, cutoff_factor*(r_s + r_s') - r)**2``. Entries of
    ``tabulated`` override the harmonic form for a given (unordered) pair of
    species names. ``one_body`` maps a species name to a vectorised
    function ``v(x)``; missing species have ``v = 0``.
    """

    radii: Mapping[str, float]
    kappa: float = 0.0
    cutoff_factor: float = 3.0
    one_body: Mapping[str, Callable[[np.ndarray], np.ndarray]] = field(default_factory=dict)
    tabulated: Mapping[tuple[str, str], TabulatedPair] = field(default_factory=dict)

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0 (bounded repulsive form)")
        for (a, b) in self.tabulated:
            if (b, a) in self.tabulated and self.tabulated[(b, a)] is not self.tabulated[(a, b)]:
                raise ValueError(f"tabulated pair ({a},{b}) defined twice with different functions")

    def _tab(self, s: str, s2: str) -> TabulatedPair | None:
        return self.tabulated.get((s, s2)) or self.tabulated.get((s2, s))

    def cutoff(self, s: str, s2: str) -> float:
        """Distance beyond which ``u_{s,s'}`` vanishes."""
        tab = self._tab(s, s2)
        if tab is not None:
            return float(tab.cutoff)
        if self.kappa == 0:
            return 0.0
        return self.cutoff_factor * (self.radii[s] + self.radii[s2])

    def pair(self, s: str, s2: str, r):
        """Unscaled pair energy ``u_{s,s'}(r)`` for distances ``r >= 0``."""
        r = np.asarray(r, dtype=float)
        tab = self._tab(s, s2)
        if tab is not None:
            out = np.where(r < tab.cutoff, tab.func(r), 0.0)
        else:
            c = self.cutoff_factor * (self.radii[s] + self.radii[s2])
            out = self.kappa * np.maximum(0.0, c - r) ** 2
        return float(out) if out.ndim == 0 else out

    def pair_derivative(self, s: str, s2: str, r):
        """``du_{s,s'}/dr`` (one-sided from above at ``r = 0``)."""
        r = np.asarray(r, dtype=float)
        tab = self._tab(s, s2)
        if tab is not None:
            if tab.derivative is None:
                eps = 1e-6
                out = (tab.func(r + eps) - tab.func(np.maximum(r - eps, 0.0))) / (
                    r + eps - np.maximum(r - eps, 0.0))
            else:
                out = tab.derivative(r)
            out = np.where(r < tab.cutoff, out, 0.0)
        else:
            c = self.cutoff_factor * (self.radii[s] + self.radii[s2])
            out = -2.0 * self.kappa * np.maximum(0.0, c - r)
        return float(out) if out.ndim == 0 else out

    def one_body_energy(self, s: str, x):
        v = self.one_body.get(s)
        if v is None:
            return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
        return v(x)

    @property
    def is_zero(self) -> bool:
        """True when every pair and one-body potential vanishes identically."""
        return self.kappa == 0 and not self.tabulated and not self.one_body


def pair_potential(s: str, s2: str, r, table: PotentialTable):
    return table.pair(s, s2, r)


# ---------------------------------------------------------------------------
# reaction kernel


def kernel_normalization(sigma: float, L: float, quadrature_points: int = 4096) -> float:
    """Mass of the periodised Gaussian over ``[0, L)`` by the trapezoidal rule.

    The integrand is smooth and periodic, so the rule converges
    spectrally; the result does not depend on the kernel centre.
    """
    if not sigma > 0:
        raise ValueError("kernel width must be positive")
    if quadrature_points < 64:
        raise ValueError("need at least 64 quadrature points")
    x = np.arange(quadrature_points) * (L / quadrature_points)
    r = np.minimum(x, L - x)
    vals = np.exp(-(r**2) / (2.0 * sigma**2)) / math.sqrt(2.0 * math.pi * sigma**2)
    return float(vals.sum() * (L / quadrature_points))


@dataclass(frozen=True)
class KernelSpec:
    """Normalised periodic Gaussian reaction kernel of width ``sigma``."""

    sigma: float
    L: float
    Z: float = float("nan")

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("kernel width must be positive")
        if math.isnan(self.Z):
            object.__setattr__(self, "Z", kernel_normalization(self.sigma, self.L))
        if not self.Z > 0:
            raise ValueError("kernel normalisation must be positive")

    def of_distance(self, r):
        r = np.asarray(r, dtype=float)
        out = np.exp(-(r**2) / (2.0 * self.sigma**2)) / (
            math.sqrt(2.0 * math.pi * self.sigma**2) * self.Z)
        return float(out) if out.ndim == 0 else out


def kernel_eval(x, y, k: KernelSpec):
    return k.of_distance(periodic_distance(x, y, k.L))


# ---------------------------------------------------------------------------
# reactions


class PlacementRule(str, enum.Enum):
    SPLIT_DELTA = "split_delta"
    BOLTZMANN_BACKWARD = "boltzmann_backward"
    IDENTITY_PAIR = "identity_pair"


class AcceptanceForm(str, enum.Enum):
    BINDING = "binding"
    UNBINDING = "unbinding"
    SWAP = "swap"
    NONE = "none"


def _form_for(n_sub: int, n_prod: int) -> AcceptanceForm:
    if (n_sub, n_prod) == (2, 1):
        return AcceptanceForm.BINDING
    if (n_sub, n_prod) == (1, 2):
        return AcceptanceForm.UNBINDING
    if (n_sub, n_prod) == (2, 2):
        return AcceptanceForm.SWAP
    return AcceptanceForm.NONE


_DEFAULT_PLACEMENT = {
    AcceptanceForm.BINDING: PlacementRule.SPLIT_DELTA,
    AcceptanceForm.UNBINDING: PlacementRule.BOLTZMANN_BACKWARD,
    AcceptanceForm.SWAP: PlacementRule.IDENTITY_PAIR,
    AcceptanceForm.NONE: PlacementRule.IDENTITY_PAIR,
}


@dataclass(frozen=True)
class ReactionSpec:
    """A reaction ``substrates -> products``.

    ``rate`` is lambda for bimolecular reactions (the pair proposal rate is
    ``rate * K(x, y) / gamma``) and mu for unimolecular ones (per-particle
    proposal rate). Bimolecular reactions and unbinding reactions need a
    kernel. ``acceptance_form`` is derived from the stoichiometry when not
    given and validated otherwise.
    """

    substrates: tuple[str, ...]
    products: tuple[str, ...]
    rate: float
    kernel: KernelSpec | None = None
    placement: PlacementRule | None = None
    acceptance_form: AcceptanceForm | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "substrates", tuple(self.substrates))
        object.__setattr__(self, "products", tuple(self.products))
        ns, np_ = len(self.substrates), len(self.products)
        if not (1 <= ns <= 2 and 1 <= np_ <= 2):
            raise ValueError("reactions need 1-2 substrates and 1-2 products")
        if self.rate < 0:
            raise ValueError("rate constant must be >= 0")
        form = _form_for(ns, np_)
        if self.acceptance_form is None:
            object.__setattr__(self, "acceptance_form", form)
        elif AcceptanceForm(self.acceptance_form) is not form:
            raise ValueError(
                f"acceptance form {self.acceptance_form} inconsistent with "
                f"{ns} substrates -> {np_} products (expected {form.value})")
        else:
            object.__setattr__(self, "acceptance_form", AcceptanceForm(self.acceptance_form))
        if self.placement is None:
            object.__setattr__(self, "placement", _DEFAULT_PLACEMENT[form])
        else:
            object.__setattr__(self, "placement", PlacementRule(self.placement))
        if self.placement is not _DEFAULT_PLACEMENT[form]:
            raise ValueError(f"placement {self.placement.value} not available for {form.value} reactions")
        if (ns == 2 or np_ == 2 and ns == 1) and self.kernel is None:
            raise ValueError("bimolecular and unbinding reactions need a kernel")

    @property
    def order(self) -> int:
        return len(self.substrates)


@dataclass(frozen=True)
class SystemScale:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def scaled(self, u):
        return np.asarray(u) / self.gamma


@dataclass(frozen=True)
class ReactionNetwork:
    species: tuple[SpeciesSpec, ...]
    reactions: tuple[ReactionSpec, ...]
    potentials: PotentialTable

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "reactions", tuple(self.reactions))
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise ValueError("species names must be unique")
        for rxn in self.reactions:
            for s in rxn.substrates + rxn.products:
                if s not in names:
                    raise ValueError(f"reaction references unknown species {s!r}")
        for s in names:
            if s not in self.potentials.radii:
                raise ValueError(f"potential table has no radius for species {s!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.species)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def diffusivities(self) -> np.ndarray:
        return np.array([s.diffusivity for s in self.species])


def reversible_binding_network(kappa: float = 200.0, lam: float = 1.0, mu: float = 0.05,
                  sigma: float = 0.15, L: float = 2 * math.pi,
                  D=(0.25, 0.25, 0.5), radii=(0.05, 0.05, 0.1),
                  cutoff_factor: float = 3.0) -> ReactionNetwork:
    """The reversible ``A + B <-> C`` model problem on ``[0, 2*pi)``."""
    species = tuple(SpeciesSpec(n, d, r) for n, d, r in zip("ABC", D, radii))
    table = PotentialTable(radii={s.name: s.radius for s in species},
                           kappa=kappa, cutoff_factor=cutoff_factor)
    k = KernelSpec(sigma, L)
    reactions = (
        ReactionSpec(("A", "B"), ("C",), lam, kernel=k, name="binding"),
        ReactionSpec(("C",), ("A", "B"), mu, kernel=k, name="unbinding"),
    )
    return ReactionNetwork(species, reactions, table)


# ---------------------------------------------------------------------------
# energies on nodal measures


def _species_pos(p) -> tuple[str, float]:
    s, x = p
    return str(s), float(x)


def interaction_energy(s: str, x: float, weights: np.ndarray, nodes: np.ndarray,
                       names: Sequence[str], table: PotentialTable, L: float,
                       gamma: float | None = None,
                       exclusions: Sequence[tuple[str, float]] = (),
                       strict: bool = True) -> float:
    """Pair energy of a species-``s`` particle at ``x`` with a nodal measure.

    Returns ``sum_{s'} sum_i u_{s,s'}(|x - x_i|) w[s', i]`` minus
    ``u_{s,s_e}(|x - x_e|) / gamma`` for every excluded particle
    ``(s_e, x_e)``. Exclusions remove the event's own particles from the
    bath and are only meaningful for lattice measures (``gamma`` given);
    with ``strict`` each must sit on a node carrying at least that much
    mass. ``strict=False`` evaluates the formula on any measure, e.g. to
    compare population scales on one frozen measure.
    """
    total = 0.0
    for j, s2 in enumerate(names):
        w = weights[j]
        if table.cutoff(s, s2) == 0.0 and not table._tab(s, s2):
            continue
        total += float(np.dot(table.pair(s, s2, periodic_distance(x, nodes, L)), w))
    if exclusions:
        if gamma is None:
            raise ValueError("exclusions need the population scale gamma")
        used: dict[tuple[int, int], int] = {}
        h = L / len(nodes)
        for s_e, x_e in map(_species_pos, exclusions):
            j = list(names).index(s_e)
            i = int(np.mod(np.rint(np.mod(x_e, L) / h), len(nodes)))
            used[(j, i)] = used.get((j, i), 0) + 1
            if strict and weights[j, i] * gamma < used[(j, i)] - 1e-9:
                raise InconsistentExclusionError(
                    f"inconsistent exclusion: no {s_e} particle left at node {i}")
            total -= table.pair(s, s_e, periodic_distance(x, x_e, L)) / gamma
    return total


def _one_body(table: PotentialTable, items: Sequence[tuple[str, float]]) -> float:
    return float(sum(table.one_body_energy(s, x) for s, x in items))


def _internal_pairs(table: PotentialTable, items: Sequence[tuple[str, float]], L: float) -> float:
    e = 0.0
    for a in range(len(items)):
        for b in range(a):
            e += table.pair(items[a][0], items[b][0], periodic_distance(items[a][1], items[b][1], L))
    return e


def energy_change(rxn: ReactionSpec, x: Sequence[float], y: Sequence[float],
                  weights: np.ndarray, nodes: np.ndarray, names: Sequence[str],
                  table: PotentialTable, L: float, gamma: float | None = None,
                  strict: bool = True) -> float:
    """Energy difference ``Phi+ - Phi-`` entering the acceptance test.

    ``x`` are substrate positions (ordered like ``rxn.substrates``), ``y``
    product positions, ``weights`` the pre-reaction nodal measure. With
    ``gamma=None`` the mean-field limit is returned: bath energies use the
    full measure and no intra-reactant pair terms appear. With a finite
    ``gamma`` all substrates are excluded from the bath of both substrates
    and products, and the swap form additionally carries the
    substrate-substrate and product-product pair energies scaled by
    ``1/gamma``.
    """
    subs = list(zip(rxn.substrates, map(float, x)))
    prods = list(zip(rxn.products, map(float, y)))
    if len(subs) != rxn.order or len(prods) != len(rxn.products):
        raise ValueError("positions do not match the reaction stoichiometry")
    excl = subs if gamma is not None else ()
    phi_minus = _one_body(table, subs) + sum(
        interaction_energy(s, p, weights, nodes, names, table, L, gamma, excl, strict) for s, p in subs)
    phi_plus = _one_body(table, prods) + sum(
        interaction_energy(s, p, weights, nodes, names, table, L, gamma, excl, strict) for s, p in prods)
    if gamma is not None and rxn.acceptance_form is AcceptanceForm.SWAP:
        phi_minus += _internal_pairs(table, subs, L) / gamma
        phi_plus += _internal_pairs(table, prods, L) / gamma
    return phi_plus - phi_minus


def acceptance_from_delta(dphi):
    """``min(1, exp(-dphi))`` without overflow for large negative ``dphi``."""
    out = np.exp(-np.maximum(dphi, 0.0))
    return float(out) if np.ndim(out) == 0 else out


def acceptance_probability(rxn: ReactionSpec, x, y, weights, nodes, names,
                           table: PotentialTable, L: float, scale: SystemScale,
                           strict: bool = True) -> float:
    """Finite-population acceptance probability of a proposed reaction."""
    return acceptance_from_delta(
        energy_change(rxn, x, y, weights, nodes, names, table, L, scale.gamma, strict))


def acceptance_probability_meanfield(rxn: ReactionSpec, x, y, weights, nodes, names,
                                     table: PotentialTable, L: float) -> float:
    """Mean-field limit of the acceptance probability (all three forms coincide)."""
    return acceptance_from_delta(
        energy_change(rxn, x, y, weights, nodes, names, table, L, None))


# ---------------------------------------------------------------------------
# placement


def sample_forward_placement(x_a, x_b, rng: np.random.Generator):
    """Product position for ``A + B -> C``: ``x_a`` or ``x_b`` with probability 1/2."""
    return x_a if rng.random() < 0.5 else x_b


@dataclass(frozen=True)
class BackwardPlacement:
    """Discrete unbinding placement around a dissociating particle at node ``z``.

    With probability 1/2 the first product sits at ``z`` and the second at
    node ``i`` drawn with probability ``partner_weights[i] / normalizer``;
    otherwise the roles are swapped.
    """

    z: int
    partner_weights: np.ndarray
    normalizer: float

    def pair_probabilities(self) -> np.ndarray:
        """``P[i, j]``: probability of first product at node i, second at node j."""
        n = len(self.partner_weights)
        p = np.zeros((n, n))
        q = 0.5 * self.partner_weights / self.normalizer
        p[self.z, :] += q
        p[:, self.z] += q
        return p

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        partner = int(rng.choice(len(self.partner_weights), p=self.partner_weights / self.normalizer))
        if rng.random() < 0.5:
            return self.z, partner
        return partner, self.z


def backward_placement_distribution(z: int, mesh: Mesh, kernel: KernelSpec,
                                    table: PotentialTable, scale: SystemScale,
                                    products: tuple[str, str] = ("A", "B")) -> BackwardPlacement:
    """Partner weights ``h K(x_i, z) exp(-u_{AB}(x_i, z)/gamma)`` and their sum."""
    r = periodic_distance(mesh.nodes, mesh.nodes[z], mesh.L)
    w = mesh.h * kernel.of_distance(r) * np.exp(-table.pair(products[0], products[1], r) / scale.gamma)
    w = np.where(w < 1e-300, 0.0, w)
    total = float(w.sum())
    if not total > 0:
        raise ValueError("backward placement weights are all zero")
    return BackwardPlacement(int(z), w, total)
