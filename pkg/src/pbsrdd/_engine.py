"""Compiled event loop for the lattice jump process.

The loop is an exact thinned SSA. Every channel group carries a proposal
propensity that bounds the true jump intensity for the *current* state;
a proposal is realised with probability ``true_rate / bound``. Because
the bounds only change when the state changes, this generates the same
jump process as the direct method (the time of a rejected proposal is
simply consumed).

Groups:
  * hops of species ``s``: bound ``2 * n_s * D_s/h^2 * g(-M_s)`` where
    ``g(d) = d / expm1(d)`` and ``M_s`` bounds ``|Delta|`` over the mesh;
  * bimolecular reaction ``r``: bound ``rate * Kmax / gamma`` per pair,
    realised with probability ``K(x_i, y_j) / Kmax * pi``;
  * unimolecular reaction ``r``: ``rate`` per particle, realised with
    probability ``pi`` after sampling the product placement.

``psi[s, i]`` holds the energy a species-``s`` particle would feel at node
``i`` (one-body term plus the pair energy with every particle present,
already divided by gamma). It is updated in a window around each change.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

FORM_NONE = 0
FORM_BINDING = 1
FORM_UNBINDING = 2
FORM_SWAP = 3

STATUS_OK = 0
STATUS_T_END = 1
STATUS_ABSORBING = 2
STATUS_MAX_EVENTS = 3
STATUS_CAPACITY = -1
STATUS_BOUND_VIOLATION = -2

KIND_HOP = 0
KIND_REACTION = 1
KIND_NONE = -1

BOUND_SLACK = 1.0 + 1e-9


@nb.njit(cache=True, inline="always")
def rel_hop_rate(delta):
    """``delta / expm1(delta)``, i.e. the hop rate in units of ``D/h^2``."""
    if abs(delta) < 1e-8:
        return 1.0 - 0.5 * delta
    if delta > 700.0:
        return delta * math.exp(-delta)
    return delta / math.expm1(delta)


@nb.njit(cache=True)
def build_psi(counts, U, wlo, whi, V, psi):
    S, N = counts.shape
    for s in range(S):
        for i in range(N):
            psi[s, i] = V[s, i]
    for s in range(S):
        for s2 in range(S):
            if whi[s, s2] < wlo[s, s2]:
                continue
            for k in range(N):
                c = counts[s2, k]
                if c == 0:
                    continue
                for d in range(wlo[s, s2], whi[s, s2] + 1):
                    m = (k + d) % N
                    psi[s, m] += c * U[s, s2, (d + N) % N]


@nb.njit(cache=True)
def exact_bound(psi, s):
    N = psi.shape[1]
    m = 0.0
    for i in range(N):
        d = abs(psi[s, (i + 1) % N] - psi[s, i])
        if d > m:
            m = d
    return m


@nb.njit(cache=True, inline="always")
def _wrap(m, N):
    # m is within one period of [0, N); cheaper than a signed modulo
    if m < 0:
        return m + N
    if m >= N:
        return m - N
    return m


@nb.njit(cache=True)
def window_tables(U, wlo, whi):
    """Contiguous per-window tables used by the incremental updates.

    ``add[s2, s, k]`` is the change of ``psi[s2]`` at offset ``wlo + k``
    when a species-``s`` particle appears; ``move[s2, s, 0|1, k]`` is the
    change at offset ``wlo + k`` (right hop) or ``wlo - 1 + k`` (left hop)
    when it moves by one node.
    """
    S = U.shape[0]
    N = U.shape[2]
    width = 1
    for a in range(S):
        for b in range(S):
            if whi[a, b] - wlo[a, b] + 2 > width:
                width = whi[a, b] - wlo[a, b] + 2
    add = np.zeros((S, S, width))
    move = np.zeros((S, S, 2, width))
    for a in range(S):
        for b in range(S):
            lo = wlo[a, b]
            hi = whi[a, b]
            if hi < lo:
                continue
            for d in range(lo, hi + 1):
                add[a, b, d - lo] = U[a, b, _wrap(d, N)]
            for k in range(hi - lo + 2):
                d = lo + k
                v = 0.0
                if d <= hi:
                    v -= U[a, b, _wrap(d, N)]
                if d - 1 >= lo:
                    v += U[a, b, _wrap(d - 1, N)]
                move[a, b, 0, k] = v
                d = lo - 1 + k
                v = 0.0
                if d >= lo:
                    v -= U[a, b, _wrap(d, N)]
                if d + 1 <= hi:
                    v += U[a, b, _wrap(d + 1, N)]
                move[a, b, 1, k] = v
    return add, move


@nb.njit(cache=True, inline="always")
def _segment_update(psi, s2, m0, length, tab, scale, best, N):
    # psi[s2, m0 + k] += scale * tab[k] for k < length (wrapping once), and
    # return the largest neighbour difference touching the updated run
    prev = psi[s2, m0 - 1 if m0 > 0 else N - 1]
    n1 = N - m0
    if n1 > length:
        n1 = length
    for k in range(n1):
        cur = psi[s2, m0 + k] + scale * tab[k]
        psi[s2, m0 + k] = cur
        best = max(best, abs(cur - prev))
        prev = cur
    for k in range(n1, length):
        m = m0 + k - N
        cur = psi[s2, m] + scale * tab[k]
        psi[s2, m] = cur
        best = max(best, abs(cur - prev))
        prev = cur
    end = m0 + length
    if end >= N:
        end -= N
    return max(best, abs(psi[s2, end] - prev))


@nb.njit(cache=True, inline="always")
def _apply_particle(psi, M, U, wlo, whi, add, s, i, sign, N):
    """Add (sign=+1) or remove (sign=-1) one species-``s`` particle at node ``i``."""
    S = psi.shape[0]
    for s2 in range(S):
        lo_d = wlo[s2, s]
        hi_d = whi[s2, s]
        if hi_d < lo_d:
            continue
        if hi_d - lo_d + 3 > N:
            _ring_pass(psi, M, U, s2, s, i, lo_d, hi_d, sign, N)
            continue
        M[s2] = _segment_update(psi, s2, _wrap(i + lo_d, N), hi_d - lo_d + 1,
                                add[s2, s], sign, M[s2], N)


@nb.njit(cache=True, inline="always")
def _hop_psi(psi, M, U, wlo, whi, move, s, i, j, N):
    """Move one species-``s`` particle between adjacent nodes ``i`` and ``j``.

    Returns True when any slope bound ``M`` was raised.
    """
    S = psi.shape[0]
    raised = False
    right = _wrap(j - i, N) == 1
    for s2 in range(S):
        lo_d = wlo[s2, s]
        hi_d = whi[s2, s]
        if hi_d < lo_d:
            continue
        old = M[s2]
        if hi_d - lo_d + 4 > N:
            # window wraps onto itself: update then rescan the whole ring
            _ring_pass(psi, M, U, s2, s, i, lo_d, hi_d, -1.0, N)
            _ring_pass(psi, M, U, s2, s, j, lo_d, hi_d, 1.0, N)
        elif right:
            M[s2] = _segment_update(psi, s2, _wrap(i + lo_d, N), hi_d - lo_d + 2,
                                    move[s2, s, 0], 1.0, old, N)
        else:
            M[s2] = _segment_update(psi, s2, _wrap(i + lo_d - 1, N), hi_d - lo_d + 2,
                                    move[s2, s, 1], 1.0, old, N)
        if M[s2] > old:
            raised = True
    return raised


@nb.njit(cache=True, inline="always")
def _ring_pass(psi, M, U, s2, s, i, lo_d, hi_d, sign, N):
    best = M[s2]
    for d in range(lo_d, hi_d + 1):
        m = _wrap(i + d, N)
        psi[s2, m] += sign * U[s2, s, _wrap(d, N)]
    for q in range(N):
        dd = abs(psi[s2, (q + 1) % N] - psi[s2, q])
        if dd > best:
            best = dd
    M[s2] = best


@nb.njit(cache=True, inline="always")
def _remove_particle(plist, npart, s, k):
    """Swap-remove particle ``k`` of species ``s``; returns its node."""
    node = plist[s, k]
    last = npart[s] - 1
    plist[s, k] = plist[s, last]
    npart[s] = last
    return node


@nb.njit(cache=True, inline="always")
def _add_particle(plist, npart, s, node):
    n = npart[s]
    if n >= plist.shape[1]:
        return False
    plist[s, n] = node
    npart[s] = n + 1
    return True


@nb.njit(cache=True, inline="always")
def energy_delta(psi, U, N, form, sub_s, sub_x, nsub, prod_s, prod_y, nprod):
    """``Phi+ - Phi-`` on the lattice with every substrate excluded from the bath."""
    phi_minus = 0.0
    for a in range(nsub):
        sa = sub_s[a]
        xa = sub_x[a]
        e = psi[sa, xa]
        for b in range(nsub):
            e -= U[sa, sub_s[b], (xa - sub_x[b] + N) % N]
        phi_minus += e
    phi_plus = 0.0
    for p in range(nprod):
        sp = prod_s[p]
        yp = prod_y[p]
        e = psi[sp, yp]
        for b in range(nsub):
            e -= U[sp, sub_s[b], (yp - sub_x[b] + N) % N]
        phi_plus += e
    if form == FORM_SWAP:
        phi_minus += U[sub_s[0], sub_s[1], (sub_x[0] - sub_x[1] + N) % N]
        phi_plus += U[prod_s[0], prod_s[1], (prod_y[0] - prod_y[1] + N) % N]
    return phi_plus - phi_minus


@nb.njit(cache=True, inline="always")
def hop_bound_factor(M_s, selfcorr_s):
    return rel_hop_rate(-(M_s + selfcorr_s)) * BOUND_SLACK


@nb.njit(cache=True, inline="always")
def _propensities(npart, hop_base, M, selfcorr, g_hop, a_hop, a_rx,
                  r_nsub, r_sub, r_homo, r_rate, r_kmax, gamma):
    a0 = 0.0
    for s in range(npart.shape[0]):
        if npart[s] > 0 and hop_base[s] > 0:
            g_hop[s] = hop_bound_factor(M[s], selfcorr[s])
            a_hop[s] = 2.0 * npart[s] * hop_base[s] * g_hop[s]
        else:
            a_hop[s] = 0.0
        a0 += a_hop[s]
    for r in range(r_rate.shape[0]):
        n0 = npart[r_sub[r, 0]]
        if r_nsub[r] == 2:
            if r_homo[r]:
                pairs = 0.5 * n0 * (n0 - 1)
            else:
                pairs = 1.0 * n0 * npart[r_sub[r, 1]]
            a_rx[r] = r_rate[r] * r_kmax[r] / gamma * pairs
        else:
            a_rx[r] = r_rate[r] * n0
        a0 += a_rx[r]
    return a0


@nb.njit(cache=True)
def run_events(hop_base, U, wlo, whi, selfcorr, V,
               r_nsub, r_sub, r_nprod, r_prod, r_rate, r_form, r_homo, r_kt, r_kmax, r_cdf,
               gamma, counts, plist, npart, psi, M, clock,
               rng, t_end, record_times, rec_next, rec_out, max_events, rebuild_every, info):
    """Advance the lattice state.

    ``clock`` is a length-2 float array ``[t, accepted_since_rebuild]``;
    ``info`` receives ``[kind, index, accepted]`` of the last proposal.
    Returns ``(status, next_record_index, proposals)``.
    """
    S, N = counts.shape
    R = r_rate.shape[0]
    add, move = window_tables(U, wlo, whi)
    a_hop = np.zeros(S)
    g_hop = np.zeros(S)
    a_rx = np.zeros(R)
    sub_s = np.zeros(2, np.int64)
    sub_x = np.zeros(2, np.int64)
    prod_s = np.zeros(2, np.int64)
    prod_y = np.zeros(2, np.int64)
    sub_k = np.zeros(2, np.int64)
    n_rec = record_times.shape[0]
    t = clock[0]
    since_rebuild = int(clock[1])
    proposals = 0
    status = STATUS_OK
    dirty = True
    a0 = 0.0
    while True:
        if max_events >= 0 and proposals >= max_events:
            status = STATUS_MAX_EVENTS
            break
        if dirty:
            a0 = _propensities(npart, hop_base, M, selfcorr, g_hop, a_hop, a_rx,
                               r_nsub, r_sub, r_homo, r_rate, r_kmax, gamma)
            dirty = False
        if a0 <= 0.0:
            while rec_next < n_rec and record_times[rec_next] <= t_end:
                for s in range(S):
                    for i in range(N):
                        rec_out[rec_next, s, i] = counts[s, i]
                rec_next += 1
            status = STATUS_ABSORBING
            info[0] = KIND_NONE
            break
        t_new = t + rng.standard_exponential() / a0
        while rec_next < n_rec and record_times[rec_next] < t_new and record_times[rec_next] <= t_end:
            for s in range(S):
                for i in range(N):
                    rec_out[rec_next, s, i] = counts[s, i]
            rec_next += 1
        if t_new > t_end:
            t = t_end
            status = STATUS_T_END
            break
        t = t_new
        proposals += 1

        # choose a channel group
        u = rng.random() * a0
        group = -1
        for s in range(S):
            if u < a_hop[s]:
                group = s
                break
            u -= a_hop[s]
        if group < 0:
            for r in range(R):
                if u < a_rx[r]:
                    group = S + r
                    break
                u -= a_rx[r]
            if group < 0:
                # rounding at the top edge of the last non-empty group
                for g in range(S + R - 1, -1, -1):
                    w = a_hop[g] if g < S else a_rx[g - S]
                    if w > 0:
                        group = g
                        u = w * 0.999999999999
                        break

        if group < S:
            s = group
            n = npart[s]
            idx = int(u / a_hop[s] * 2.0 * n)
            if idx >= 2 * n:
                idx = 2 * n - 1
            k = idx >> 1
            i = plist[s, k]
            if (idx & 1) == 0:
                j = i + 1 if i + 1 < N else 0
                dj = 1 if N > 1 else 0
            else:
                j = i - 1 if i > 0 else N - 1
                dj = N - 1
            delta = psi[s, j] - psi[s, i] - (U[s, s, dj] - U[s, s, 0])
            g = rel_hop_rate(delta)
            if g > g_hop[s]:
                status = STATUS_BOUND_VIOLATION
                break
            info[0] = KIND_HOP
            info[1] = s
            if rng.random() * g_hop[s] < g:
                counts[s, i] -= 1
                counts[s, j] += 1
                plist[s, k] = j
                if _hop_psi(psi, M, U, wlo, whi, move, s, i, j, N):
                    dirty = True
                info[2] = 1
                since_rebuild += 1
            else:
                info[2] = 0
        else:
            r = group - S
            form = r_form[r]
            nsub = r_nsub[r]
            nprod = r_nprod[r]
            frac = u / a_rx[r]
            info[0] = KIND_REACTION
            info[1] = r
            info[2] = 0
            sa = r_sub[r, 0]
            if nsub == 2:
                sb = r_sub[r, 1]
                na = npart[sa]
                if r_homo[r]:
                    tot = na * (na - 1)
                    idx = int(frac * tot)
                    if idx >= tot:
                        idx = tot - 1
                    ka = idx // (na - 1)
                    kb = idx % (na - 1)
                    if kb >= ka:
                        kb += 1
                else:
                    nb_ = npart[sb]
                    tot = na * nb_
                    idx = int(frac * tot)
                    if idx >= tot:
                        idx = tot - 1
                    ka = idx // nb_
                    kb = idx % nb_
                xi = plist[sa, ka]
                yj = plist[sb, kb]
                kval = r_kt[r, (yj - xi + N) % N]
                u2 = rng.random() * r_kmax[r]
                if u2 >= kval:
                    continue
                sub_s[0] = sa
                sub_s[1] = sb
                sub_x[0] = xi
                sub_x[1] = yj
                sub_k[0] = ka
                sub_k[1] = kb
                if form == FORM_BINDING:
                    prod_s[0] = r_prod[r, 0]
                    prod_y[0] = xi if rng.random() < 0.5 else yj
                else:
                    prod_s[0] = r_prod[r, 0]
                    prod_s[1] = r_prod[r, 1]
                    prod_y[0] = xi
                    prod_y[1] = yj
                dphi = energy_delta(psi, U, N, form, sub_s, sub_x, 2, prod_s, prod_y, nprod)
                pacc = math.exp(-dphi) if dphi > 0.0 else 1.0
                if u2 >= kval * pacc:
                    continue
            else:
                na = npart[sa]
                ka = int(frac * na)
                if ka >= na:
                    ka = na - 1
                z = plist[sa, ka]
                sub_s[0] = sa
                sub_x[0] = z
                sub_k[0] = ka
                if form == FORM_UNBINDING:
                    which = rng.random()
                    uo = rng.random()
                    lo = 0
                    hi = N - 1
                    while lo < hi:
                        mid = (lo + hi) >> 1
                        if r_cdf[r, mid] > uo:
                            hi = mid
                        else:
                            lo = mid + 1
                    other = (z + lo) % N
                    prod_s[0] = r_prod[r, 0]
                    prod_s[1] = r_prod[r, 1]
                    if which < 0.5:
                        prod_y[0] = z
                        prod_y[1] = other
                    else:
                        prod_y[0] = other
                        prod_y[1] = z
                else:
                    prod_s[0] = r_prod[r, 0]
                    prod_y[0] = z
                dphi = energy_delta(psi, U, N, form, sub_s, sub_x, 1, prod_s, prod_y, nprod)
                if dphi > 0.0 and rng.random() >= math.exp(-dphi):
                    continue
            # execute: remove substrates (higher particle index first within a species)
            if nsub == 2 and sub_s[0] == sub_s[1] and sub_k[1] > sub_k[0]:
                _remove_particle(plist, npart, sub_s[1], sub_k[1])
                _remove_particle(plist, npart, sub_s[0], sub_k[0])
            elif nsub == 2 and sub_s[0] == sub_s[1]:
                _remove_particle(plist, npart, sub_s[0], sub_k[0])
                _remove_particle(plist, npart, sub_s[1], sub_k[1])
            else:
                for a in range(nsub):
                    _remove_particle(plist, npart, sub_s[a], sub_k[a])
            for a in range(nsub):
                counts[sub_s[a], sub_x[a]] -= 1
                _apply_particle(psi, M, U, wlo, whi, add, sub_s[a], sub_x[a], -1.0, N)
            ok = True
            for p in range(nprod):
                if not _add_particle(plist, npart, prod_s[p], prod_y[p]):
                    ok = False
                counts[prod_s[p], prod_y[p]] += 1
                _apply_particle(psi, M, U, wlo, whi, add, prod_s[p], prod_y[p], 1.0, N)
            info[2] = 1
            since_rebuild += 1
            dirty = True
            if not ok:
                status = STATUS_CAPACITY
                break
        if since_rebuild >= rebuild_every:
            for s in range(S):
                M[s] = exact_bound(psi, s)
            since_rebuild = 0
            dirty = True
    clock[0] = t
    clock[1] = since_rebuild
    return status, rec_next, proposals
