"""Mean-field integro-differential system for ``A + B <-> C`` on a periodic interval.

Fields are sampled at ``N`` collocation points ``x_i = i L / N``. Spatial
derivatives are taken in Fourier space, the convolutions with the pair
potentials and the reaction kernel use the trapezoidal rule (which on a
periodic grid is a circulant product), and time stepping is one-step
IMEX Euler: reactions explicit, transport implicit via Newton-Krylov.

The reaction terms carry the mean-field acceptance factors. With
``E1[i, j] = Phi_C(x_i) - Phi_A(x_i) - Phi_B(x_j)`` (product at the A
position) and ``E2[i, j] = Phi_C(x_j) - Phi_A(x_i) - Phi_B(x_j)`` (product
at the B position), binding is accepted with ``min(1, exp(-E))`` and the
reverse unbinding with ``min(1, exp(E))``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numba as nb
import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .model import (
    AcceptanceForm,
    ReactionNetwork,
    _signed_periodic_difference,
    periodic_distance,
)

__all__ = [
    "SolverSettings",
    "SpectralFields",
    "MeanFieldModel",
    "MFMResult",
    "SolverStallError",
    "NegativeFieldError",
    "transport_apply",
    "reaction_rhs",
    "imex_step",
    "solve",
    "gaussian_bumps",
    "write_fields_csv",
    "write_masses_csv",
]


class SolverStallError(RuntimeError):
    """The implicit solve kept failing down to the minimum timestep."""


class NegativeFieldError(RuntimeError):
    """A concentration dropped below ``-positivity_tol``."""


@dataclass(frozen=True)
class SolverSettings:
    """Time stepping and discretisation controls.

    ``newton_tol`` is an absolute max-norm tolerance on the implicit
    residual. The Krylov inner solve is restarted GMRES with relative
    tolerance ``krylov_rtol``. ``convolution`` selects FFT-based circulant
    products (``"fft"``) or explicit dense circulant matrices
    (``"dense"``). Kernel entries with ``K / K(0) < reaction_cutoff`` are
    dropped from the reaction band.
    """

    dt_max: float = 1e-4
    dt_min: float = 1e-7
    newton_tol: float = 1e-10
    newton_max_iters: int = 12
    positivity_tol: float = 1e-8
    N: int = 512
    krylov_rtol: float = 1e-3
    krylov_restart: int = 20
    krylov_maxiter: int = 4
    fd_epsilon: float = 1e-7
    convolution: str = "fft"
    reaction_cutoff: float = 1e-17
    dt_growth: float = 2.0

    def __post_init__(self):
        if not (0 < self.dt_min <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_max")
        for name in ("newton_tol", "positivity_tol", "krylov_rtol", "fd_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.newton_max_iters < 1 or self.krylov_restart < 1 or self.krylov_maxiter < 1:
            raise ValueError("iteration limits must be >= 1")
        if int(self.N) != self.N or self.N < 4 or self.N % 2:
            raise ValueError("N must be an even integer >= 4")
        if self.convolution not in ("fft", "dense"):
            raise ValueError("convolution must be 'fft' or 'dense'")
        if not (0 <= self.reaction_cutoff < 1):
            raise ValueError("reaction_cutoff must lie in [0, 1)")
        if not self.dt_growth >= 1:
            raise ValueError("dt_growth must be >= 1")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SpectralFields:
    """Nodal values ``values[s, i]`` of A, B, C at time ``t``."""

    values: np.ndarray
    t: float = 0.0
    L: float = 2 * math.pi

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != 3:
            raise ValueError("fields must have shape (3, N)")

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def coefficients(self) -> np.ndarray:
        """Real-FFT coefficients per species."""
        return np.fft.rfft(self.values, axis=1)

    @property
    def masses(self) -> np.ndarray:
        """Trapezoidal masses of A, B, C."""
        return self.h * self.values.sum(axis=1)

    def copy(self) -> "SpectralFields":
        return SpectralFields(self.values.copy(), self.t, self.L)


def gaussian_bumps(N: int, L: float = 2 * math.pi, centers=(0.75 * math.pi, 1.25 * math.pi),
                   width: float = 5.0, mass: float = 0.5) -> SpectralFields:
    """``A, B`` proportional to ``exp(-width |x - c|^2)`` (periodic distance) with
    trapezoidal mass ``mass``; ``C = 0``."""
    x = np.arange(N) * (L / N)
    vals = np.zeros((3, N))
    for s, c in enumerate(centers):
        p = np.exp(-width * periodic_distance(x, c, L) ** 2)
        vals[s] = mass * p / (p.sum() * L / N)
    return SpectralFields(vals, 0.0, L)


# ---------------------------------------------------------------------------
# model


def _species_roles(network: ReactionNetwork):
    names = network.names
    if len(names) != 3:
        raise ValueError("the mean-field solver handles exactly three species A, B, C")
    lam = mu = 0.0
    kernel = None
    for rxn in network.reactions:
        if rxn.acceptance_form is AcceptanceForm.BINDING:
            if lam:
                raise ValueError("more than one binding reaction")
            a, b = rxn.substrates
            c = rxn.products[0]
            lam = rxn.rate
            kernel = rxn.kernel
            roles = (a, b, c)
        elif rxn.acceptance_form is AcceptanceForm.UNBINDING:
            if mu:
                raise ValueError("more than one unbinding reaction")
            mu = rxn.rate
            kernel = kernel or rxn.kernel
            roles_u = (rxn.products[0], rxn.products[1], rxn.substrates[0])
        else:
            raise ValueError(f"unsupported reaction form {rxn.acceptance_form.value}")
    if lam and mu and roles != roles_u:
        raise ValueError("binding and unbinding must be mutual inverses A + B <-> C")
    order = roles if lam else (roles_u if mu else names)
    if tuple(order) != tuple(names):
        raise ValueError("species must be ordered (A, B, C) with A + B <-> C")
    return lam, mu, kernel


class MeanFieldModel:
    """Precomputed operators for one network, domain and resolution."""

    def __init__(self, network: ReactionNetwork, L: float = 2 * math.pi,
                 settings: SolverSettings | None = None):
        self.network = network
        self.settings = settings or SolverSettings()
        self.L = float(L)
        N = self.N = int(self.settings.N)
        self.h = self.L / N
        self.x = np.arange(N) * self.h
        self.D = network.diffusivities()
        self.lam, self.mu, self.kernel = _species_roles(network)
        table = network.potentials
        names = network.names
        d = np.arange(N)
        signed = _signed_periodic_difference(d * self.h, 0.0, self.L)
        dist = np.abs(signed)
        sign = np.sign(signed)
        sign[N // 2] = 0.0  # the half-period offset is its own mirror image
        # first columns of the circulant operators (trapezoid weight included)
        self.u_col = np.zeros((3, 3, N))
        self.du_col = np.zeros((3, 3, N))
        for a, sa in enumerate(names):
            for b, sb in enumerate(names):
                self.u_col[a, b] = self.h * table.pair(sa, sb, dist)
                self.du_col[a, b] = self.h * table.pair_derivative(sa, sb, dist) * sign
        self.du_col[:, :, 0] = 0.0
        self.V = np.array([np.broadcast_to(table.one_body_energy(s, self.x), (N,)) for s in names],
                          dtype=float)
        self.interacting = bool(np.any(self.u_col) or np.any(self.V))
        self.u_hat = np.fft.rfft(self.u_col, axis=2)
        self.du_hat = np.fft.rfft(self.du_col, axis=2)
        k = np.fft.rfftfreq(N, d=self.h) * 2 * math.pi
        self.k2 = -(k**2)                   # second derivative symbol, Nyquist kept
        self.ik = 1j * k
        self.ik[-1] = 0.0                   # odd derivative: Nyquist mode dropped
        if self.settings.convolution == "dense":
            idx = (d[:, None] - d[None, :]) % N
            self.u_mat = self.u_col[:, :, idx]
            self.du_mat = self.du_col[:, :, idx]
        # reaction kernel: banded table of h K over offsets
        if self.kernel is not None:
            kcol = self.h * self.kernel.of_distance(dist)
            keep = kcol >= self.settings.reaction_cutoff * kcol[0]
            band = int(max(min(m, N - m) for m in np.nonzero(keep)[0]))
            band = min(band, N // 2 - 1)
            keep = np.minimum(d, N - d) <= band
            self.band = band
            self.kh = kcol[: band + 1].copy()
            self.kh_band = np.concatenate([self.kh[:0:-1], self.kh])  # offsets -band..band
            self.kh_col = np.where(keep, kcol, 0.0)
            self.kh_hat = np.fft.rfft(self.kh_col)
        else:
            self.band = 0
            self.kh = np.zeros(1)
            self.kh_band = np.zeros(1)
            self.kh_col = np.zeros(N)
            self.kh_hat = np.fft.rfft(self.kh_col)

    # -- convolutions ------------------------------------------------------
    def _circulant(self, col_hat, mat, f):
        if self.settings.convolution == "dense":
            return mat @ f
        return np.fft.irfft(col_hat * np.fft.rfft(f), n=self.N)

    def potentials(self, values: np.ndarray) -> np.ndarray:
        """``Phi_s(x_i) = V_s + sum_s' h sum_j u_{s,s'}(x_i - x_j) S'_j``."""
        out = self.V.copy()
        if not np.any(self.u_col):
            return out
        if self.settings.convolution == "dense":
            for a in range(3):
                for b in range(3):
                    out[a] += self.u_mat[a, b] @ values[b]
            return out
        fh = np.fft.rfft(values, axis=1)
        return out + np.fft.irfft(np.einsum("abk,bk->ak", self.u_hat, fh), n=self.N, axis=1)

    def drift(self, values: np.ndarray) -> np.ndarray:
        """``G_s(x_i) = sum_s' h sum_j u'_{s,s'}(x_i - x_j) S'_j`` (signed derivative)."""
        if not np.any(self.du_col):
            return np.zeros_like(values)
        if self.settings.convolution == "dense":
            out = np.zeros_like(values)
            for a in range(3):
                for b in range(3):
                    out[a] += self.du_mat[a, b] @ values[b]
            return out
        fh = np.fft.rfft(values, axis=1)
        return np.fft.irfft(np.einsum("abk,bk->ak", self.du_hat, fh), n=self.N, axis=1)

    def kernel_apply(self, f: np.ndarray) -> np.ndarray:
        """``sum_j h K(x_i - x_j) f_j`` with the truncated kernel."""
        return np.fft.irfft(self.kh_hat * np.fft.rfft(f), n=self.N)


# ---------------------------------------------------------------------------
# operators


def _transport_all(model: MeanFieldModel, values: np.ndarray) -> np.ndarray:
    fh = np.fft.rfft(values, axis=1)
    Dk = model.D[:, None]
    if not np.any(model.du_col):
        return np.fft.irfft(Dk * model.k2 * fh, n=model.N, axis=1)
    if model.settings.convolution == "dense":
        G = model.drift(values)
    else:
        G = np.fft.irfft(np.einsum("abk,bk->ak", model.du_hat, fh), n=model.N, axis=1)
    flux_hat = np.fft.rfft(values * G, axis=1)
    return np.fft.irfft(Dk * (model.k2 * fh + model.ik * flux_hat), n=model.N, axis=1)


def transport_apply(s: int, fields: SpectralFields | np.ndarray, model: MeanFieldModel) -> np.ndarray:
    """``D_s d/dx (dS/dx + S * sum_s' (du_{s,s'}/dx * S'))`` for species index ``s``."""
    values = fields.values if isinstance(fields, SpectralFields) else np.asarray(fields, float)
    return _transport_all(model, values)[s]


@nb.njit(cache=True, fastmath=True)
def _reaction_band(A, B, C, ea, ia, eb, ib, ec, ic, ed, id_, kh, band, lam, mu, out):
    # q1 = exp(-E1[i, j]) = ea[i] * eb[j] and q2 = exp(-E2[i, j]) = ed[i] * ec[j];
    # the i* arrays hold reciprocals so that min(1, 1/q) needs no division.
    # Arrays indexed by j (row pass) or i (column pass) are padded by
    # ``band`` periodic ghost cells on each side; kh has length 2*band + 1.
    # A, B, C are always padded.
    N = ea.shape[0]
    hl = 0.5 * lam
    hm = 0.5 * mu
    W = 2 * band + 1
    for i in range(N):
        sa = 0.0
        row = 0.0
        gain = 0.0
        back = 0.0
        for k in range(W):
            j = i + k           # padded index of x_{i + k - band}
            q1 = ea[i] * eb[j]
            q2 = ed[i] * ec[j]
            r1 = ia[i] * ib[j]
            r2 = id_[i] * ic[j]
            p1a = min(1.0, q1)
            p1b = min(1.0, q2)
            kk = kh[k]
            kb = kk * B[j]
            sa += kb * (p1a + p1b)
            gain += kb * p1a
            row += kk * min(1.0, r1)
            back += kk * min(1.0, r2) * C[j]
        ci = C[band + i]
        out[0, i] += -hl * A[band + i] * sa + hm * ci * row + hm * back
        out[2, i] += hl * A[band + i] * gain - hm * ci * row


@nb.njit(cache=True, fastmath=True)
def _reaction_band_cols(A, B, C, ea, ia, eb, ib, ec, ic, ed, id_, kh, band, lam, mu, out):
    # column pass: i-indexed factors padded, j-indexed factors plain
    N = eb.shape[0]
    hl = 0.5 * lam
    hm = 0.5 * mu
    W = 2 * band + 1
    for j in range(N):
        sb = 0.0
        col = 0.0
        gain = 0.0
        back = 0.0
        for k in range(W):
            i = j + k           # padded index of x_{j + k - band}
            q1 = ea[i] * eb[j]
            q2 = ed[i] * ec[j]
            r1 = ia[i] * ib[j]
            r2 = id_[i] * ic[j]
            p1a = min(1.0, q1)
            p1b = min(1.0, q2)
            kk = kh[k]
            ka = kk * A[i]
            sb += ka * (p1a + p1b)
            gain += ka * p1b
            col += kk * min(1.0, r2)
            back += kk * min(1.0, r1) * C[i]
        cj = C[band + j]
        out[1, j] += -hl * B[band + j] * sb + hm * cj * col + hm * back
        out[2, j] += hl * B[band + j] * gain - hm * cj * col


def _pad(v, band):
    return np.concatenate([v[len(v) - band:], v, v[:band]]) if band else v.copy()


def reaction_rhs(fields: SpectralFields | np.ndarray, model: MeanFieldModel) -> np.ndarray:
    """Reaction terms ``(dA, dB, dC)`` with mean-field acceptance factors."""
    values = fields.values if isinstance(fields, SpectralFields) else np.asarray(fields, float)
    A, B, C = values
    out = np.zeros_like(values)
    if model.kernel is None or (model.lam == 0 and model.mu == 0):
        return out
    if not model.interacting:
        # every acceptance factor is 1: plain kernel convolutions
        KB = model.kernel_apply(B)
        KA = model.kernel_apply(A)
        KC = model.kernel_apply(C)
        ksum = float(model.kh_col.sum())
        out[0] = -model.lam * A * KB + 0.5 * model.mu * (C * ksum + KC)
        out[1] = -model.lam * B * KA + 0.5 * model.mu * (C * ksum + KC)
        # the product sits at the A or the B position with probability 1/2
        out[2] = 0.5 * model.lam * (A * KB + B * KA) - model.mu * C * ksum
        return out
    phi = model.potentials(values)
    a1 = phi[2] - phi[0]          # Phi_C - Phi_A, product at the A site
    b2 = phi[2] - phi[1]          # Phi_C - Phi_B, product at the B site
    span = max(np.abs(a1).max() + np.abs(phi[1]).max(), np.abs(b2).max() + np.abs(phi[0]).max())
    if span > 600.0:
        raise FloatingPointError("mean-field energies too large for the separable acceptance form")
    bw = model.band
    kh = model.kh_band
    ea, eb, ec, ed = np.exp(-a1), np.exp(phi[1]), np.exp(-b2), np.exp(phi[0])
    ia, ib, ic, id_ = np.exp(a1), np.exp(-phi[1]), np.exp(b2), np.exp(-phi[0])
    Ap, Bp, Cp = _pad(A, bw), _pad(B, bw), _pad(C, bw)
    _reaction_band(Ap, Bp, Cp, ea, ia, _pad(eb, bw), _pad(ib, bw), _pad(ec, bw), _pad(ic, bw),
                   ed, id_, kh, bw, model.lam, model.mu, out)
    _reaction_band_cols(Ap, Bp, Cp, _pad(ea, bw), _pad(ia, bw), eb, ib, ec, ic,
                        _pad(ed, bw), _pad(id_, bw), kh, bw, model.lam, model.mu, out)
    return out


# ---------------------------------------------------------------------------
# time stepping


@dataclass
class _StepReport:
    dt: float
    newton_iters: int
    converged: bool
    residual: float


def _implicit_transport(model: MeanFieldModel, rhs: np.ndarray, dt: float) -> _StepReport | tuple:
    """Solve ``S - dt T(S) = rhs`` by Newton-Krylov starting from ``rhs``."""
    st = model.settings
    shape = rhs.shape
    n = rhs.size
    target_mass = rhs.sum(axis=1)
    S = rhs.copy()

    def residual(v):
        return v - dt * _transport_all(model, v) - rhs

    F = residual(S)
    res = float(np.abs(F).max())
    if res <= st.newton_tol:
        return S, _StepReport(dt, 0, True, res)
    if not np.any(model.du_col):
        # linear diffusion: exact per-mode solve
        sym = 1.0 - dt * model.D[:, None] * model.k2[None, :]
        S = np.fft.irfft(np.fft.rfft(rhs, axis=1) / sym, n=model.N, axis=1)
        return S, _StepReport(dt, 1, True, float(np.abs(residual(S)).max()))
    sym = 1.0 - dt * model.D[:, None] * model.k2[None, :]
    # start from the implicit diffusion step; Newton then only corrects the drift
    S = np.fft.irfft(np.fft.rfft(rhs, axis=1) / sym, n=model.N, axis=1)
    F = residual(S)

    def precond(v):
        w = v.reshape(shape)
        return np.fft.irfft(np.fft.rfft(w, axis=1) / sym, n=model.N, axis=1).ravel()

    P = LinearOperator((n, n), matvec=precond, dtype=float)
    for it in range(1, st.newton_max_iters + 1):
        Fv = F.ravel()
        scale = st.fd_epsilon * (1.0 + float(np.abs(S).max()))

        def jv(v, S=S, Fv=Fv, scale=scale):
            nv = float(np.abs(v).max())
            if nv == 0.0:
                return np.zeros_like(v)
            e = scale / nv
            return (residual(S + e * v.reshape(shape)).ravel() - Fv) / e

        J = LinearOperator((n, n), matvec=jv, dtype=float)
        delta, info = gmres(J, Fv, rtol=st.krylov_rtol, atol=0.1 * st.newton_tol,
                            restart=st.krylov_restart, maxiter=st.krylov_maxiter, M=P)
        if not np.all(np.isfinite(delta)):
            return S, _StepReport(dt, it, False, float("inf"))
        S = S - delta.reshape(shape)
        # Newton updates are only accurate to the Krylov tolerance; the
        # exact update preserves every mass, so restore it
        S += ((target_mass - S.sum(axis=1)) / model.N)[:, None]
        F = residual(S)
        res = float(np.abs(F).max())
        if res <= st.newton_tol:
            return S, _StepReport(dt, it, True, res)
        if not np.isfinite(res):
            break
    return S, _StepReport(dt, st.newton_max_iters, False, res)


def imex_step(fields: SpectralFields, dt: float, model: MeanFieldModel) -> tuple[SpectralFields, float]:
    """Advance by one IMEX Euler step, halving ``dt`` on Newton failure.

    Returns the new fields and the timestep actually used.
    """
    st = model.settings
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt > st.dt_max * (1 + 1e-12):
        raise ValueError("dt exceeds dt_max")
    R = reaction_rhs(fields.values, model)
    while True:
        star = fields.values + dt * R
        S, rep = _implicit_transport(model, star, dt)
        if rep.converged:
            break
        dt *= 0.5
        if dt < st.dt_min:
            raise SolverStallError(
                f"solver stall at t={fields.t:.6g}: Newton residual {rep.residual:.3g} "
                f"not below {st.newton_tol:g} for dt >= dt_min={st.dt_min:g}")
    worst = float(S.min())
    if worst < -st.positivity_tol:
        s, i = np.unravel_index(int(np.argmin(S)), S.shape)
        raise NegativeFieldError(
            f"negative field: species {model.network.names[s]} reaches {worst:.3e} at "
            f"x={model.x[i]:.6g}, t={fields.t + dt:.6g}")
    return SpectralFields(S, fields.t + dt, model.L), dt


@dataclass
class MFMResult:
    times: np.ndarray
    fields: np.ndarray          # (K, 3, N)
    x: np.ndarray
    settings: SolverSettings
    steps: int
    rejected_steps: int

    @property
    def masses(self) -> np.ndarray:
        """Trapezoidal masses of A, B, C at each output time, shape (K, 3)."""
        h = self.x[1] - self.x[0]
        return h * self.fields.sum(axis=2)

    @property
    def molar_mass_C(self) -> np.ndarray:
        return self.masses[:, 2]


def solve(model: MeanFieldModel, initial: SpectralFields, t_end: float,
          output_times: Sequence[float] | None = None,
          progress: Callable[[float], None] | None = None) -> MFMResult:
    """Integrate from ``initial.t`` to ``t_end``, landing exactly on every output time."""
    st = model.settings
    if initial.N != model.N:
        raise ValueError("initial fields do not match the model resolution")
    t0 = initial.t
    out_t = np.asarray([t_end] if output_times is None else output_times, dtype=float)
    if len(out_t) and (np.any(np.diff(out_t) < 0) or out_t[0] < t0 or out_t[-1] > t_end):
        raise ValueError("output times must be sorted and lie in [t0, t_end]")
    frames = np.zeros((len(out_t), 3, model.N))
    cur = initial.copy()
    k = 0
    while k < len(out_t) and out_t[k] <= cur.t:
        frames[k] = cur.values
        k += 1
    dt = st.dt_max
    steps = rejected = 0
    stop = out_t[-1] if len(out_t) else t_end
    while k < len(out_t):
        target = out_t[k]
        step = min(dt, target - cur.t)
        land = step >= target - cur.t
        cur_t = cur.t
        cur, used = imex_step(cur, step, model)
        steps += 1
        if used < step:
            rejected += 1
            land = False
            dt = used
        elif dt < st.dt_max:
            dt = min(st.dt_max, dt * st.dt_growth)
        if land:
            cur.t = target  # remove rounding drift of the accumulated time
        while k < len(out_t) and out_t[k] <= cur.t + 1e-12 * max(1.0, abs(cur.t)):
            frames[k] = cur.values
            k += 1
        if progress is not None:
            progress(cur.t)
        if cur.t == cur_t:
            raise SolverStallError("time did not advance")
    return MFMResult(out_t, frames, model.x.copy(), st, steps, rejected)


# ---------------------------------------------------------------------------
# output


def write_fields_csv(result: MFMResult, path, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(["time", "x", "A", "B", "C"])
        for k, t in enumerate(result.times):
            for i, x in enumerate(result.x):
                a, b, c = result.fields[k, :, i]
                w.writerow([repr(float(t)), repr(float(x)), repr(float(a)), repr(float(b)), repr(float(c))])


def write_masses_csv(result: MFMResult, path, comments: Sequence[str] = ()) -> None:
    m = result.masses
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(["time", "mass_A", "mass_B", "mass_C"])
        for k, t in enumerate(result.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in m[k]])
