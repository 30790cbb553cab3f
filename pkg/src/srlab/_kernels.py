"""Compiled inner loops for polynomial frames.

Tables follow ``PolyTable``: exponents E (T, n) and anchor coefficients
C (T, n, h).  Every kernel has a numpy reference path elsewhere in the
package; tests compare the two.
"""

from __future__ import annotations

import numpy as np
from numba import njit

BLOWUP = 1e12


@njit(cache=True)
def _mono(E, q, out):
    T, n = E.shape
    for t in range(T):
        v = 1.0
        for j in range(n):
            e = E[t, j]
            if e == 1:
                v *= q[j]
            elif e > 1:
                v *= q[j] ** e
        out[t] = v


@njit(cache=True)
def _dmono(E, q, out):
    T, n = E.shape
    for t in range(T):
        for j in range(n):
            e = E[t, j]
            if e == 0:
                out[t, j] = 0.0
                continue
            v = e * q[j] ** (e - 1) if e > 1 else 1.0
            for k in range(n):
                if k != j:
                    ek = E[t, k]
                    if ek == 1:
                        v *= q[k]
                    elif ek > 1:
                        v *= q[k] ** ek
            out[t, j] = v


@njit(cache=True)
def _drift(E, cu, x, mono, out):
    _mono(E, x, mono)
    T, n = cu.shape
    for i in range(n):
        out[i] = 0.0
    for t in range(T):
        mt = mono[t]
        if mt != 0.0:
            for i in range(n):
                out[i] += mt * cu[t, i]


@njit(cache=True)
def rk4_forward(E, C, q0, values, spi):
    """States at all substep nodes for a batch: q0 (B, n), values (B, m, h).

    Returns (out (B, m*spi+1, n), first bad interval per batch entry or -1).
    """
    B, n = q0.shape
    m = values.shape[1]
    h = values.shape[2]
    T = E.shape[0]
    S = m * spi
    dt = 1.0 / S
    out = np.empty((B, S + 1, n))
    bad = np.full(B, -1)
    cu = np.empty((T, n))
    mono = np.empty(T)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    x = np.empty(n)
    for b in range(B):
        q = q0[b].copy()
        out[b, 0] = q
        s = 0
        for k in range(m):
            for t in range(T):
                for i in range(n):
                    acc = 0.0
                    for a in range(h):
                        acc += C[t, i, a] * values[b, k, a]
                    cu[t, i] = acc
            for _ in range(spi):
                _drift(E, cu, q, mono, k1)
                for i in range(n):
                    x[i] = q[i] + 0.5 * dt * k1[i]
                _drift(E, cu, x, mono, k2)
                for i in range(n):
                    x[i] = q[i] + 0.5 * dt * k2[i]
                _drift(E, cu, x, mono, k3)
                for i in range(n):
                    x[i] = q[i] + dt * k3[i]
                _drift(E, cu, x, mono, k4)
                for i in range(n):
                    q[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                s += 1
                out[b, s] = q
            ok = True
            for i in range(n):
                if not np.isfinite(q[i]) or abs(q[i]) > BLOWUP:
                    ok = False
            if not ok:
                bad[b] = k
                for r in range(s + 1, S + 1):
                    out[b, r] = np.nan
                break
    return out, bad


@njit(cache=True)
def _sgrad_unit(E, C, q, p, mono, dmono, xi, qd, pd, u):
    T, n, h = C.shape
    _mono(E, q, mono)
    _dmono(E, q, dmono)
    for i in range(n):
        for a in range(h):
            xi[i, a] = 0.0
    for t in range(T):
        mt = mono[t]
        if mt != 0.0:
            for i in range(n):
                for a in range(h):
                    xi[i, a] += mt * C[t, i, a]
    for a in range(h):
        acc = 0.0
        for i in range(n):
            acc += xi[i, a] * p[i]
        u[a] = acc
    for i in range(n):
        acc = 0.0
        for a in range(h):
            acc += xi[i, a] * u[a]
        qd[i] = acc
        pd[i] = 0.0
    for t in range(T):
        # c_t = sum_{i,a} C[t,i,a] u_a p_i
        c = 0.0
        for i in range(n):
            if p[i] != 0.0:
                for a in range(h):
                    c += C[t, i, a] * u[a] * p[i]
        if c != 0.0:
            for j in range(n):
                pd[j] -= c * dmono[t, j]


@njit(cache=True)
def flow_unit(E, C, Q0, P0, dt, steps, keep):
    """RK4 on the normal Hamiltonian field of an orthonormal polynomial frame.

    Q0, P0 are (B, n).  With ``keep`` the full paths (B, steps+1, .) are
    returned, otherwise paths have a time axis of length 1 holding the end
    state.  ``bad`` flags blow-ups per batch entry (first bad step or -1).
    """
    B, n = Q0.shape
    T, _, h = C.shape
    L = steps + 1 if keep else 1
    Qo = np.empty((B, L, n))
    Po = np.empty((B, L, n))
    Uo = np.empty((B, L, h))
    bad = np.full(B, -1)
    mono = np.empty(T)
    dmono = np.empty((T, n))
    xi = np.empty((n, h))
    a1 = np.empty(n); b1 = np.empty(n)
    a2 = np.empty(n); b2 = np.empty(n)
    a3 = np.empty(n); b3 = np.empty(n)
    a4 = np.empty(n); b4 = np.empty(n)
    u = np.empty(h)
    x = np.empty(n)
    y = np.empty(n)
    for b in range(B):
        q = Q0[b].copy()
        p = P0[b].copy()
        for s in range(steps):
            _sgrad_unit(E, C, q, p, mono, dmono, xi, a1, b1, u)
            if keep:
                Qo[b, s] = q
                Po[b, s] = p
                Uo[b, s] = u
            for i in range(n):
                x[i] = q[i] + 0.5 * dt * a1[i]
                y[i] = p[i] + 0.5 * dt * b1[i]
            _sgrad_unit(E, C, x, y, mono, dmono, xi, a2, b2, u)
            for i in range(n):
                x[i] = q[i] + 0.5 * dt * a2[i]
                y[i] = p[i] + 0.5 * dt * b2[i]
            _sgrad_unit(E, C, x, y, mono, dmono, xi, a3, b3, u)
            for i in range(n):
                x[i] = q[i] + dt * a3[i]
                y[i] = p[i] + dt * b3[i]
            _sgrad_unit(E, C, x, y, mono, dmono, xi, a4, b4, u)
            ok = True
            for i in range(n):
                q[i] += dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i])
                p[i] += dt / 6.0 * (b1[i] + 2.0 * b2[i] + 2.0 * b3[i] + b4[i])
                if not (np.isfinite(q[i]) and np.isfinite(p[i])) or abs(q[i]) > BLOWUP or abs(p[i]) > BLOWUP:
                    ok = False
            if not ok:
                bad[b] = s
                break
        _sgrad_unit(E, C, q, p, mono, dmono, xi, a1, b1, u)
        Qo[b, L - 1] = q
        Po[b, L - 1] = p
        Uo[b, L - 1] = u
    return Qo, Po, Uo, bad


@njit(cache=True)
def costate_backward(Ja, Jm, Jb, sa, sm, sb, p1, dt):
    """Backward RK4 for p' = -p J + s (row covectors), p(1) = p1 (K, n).

    J* and s* hold the matrices d_q(xi u) and sources at the left end,
    midpoint and right end of each substep.  Returns P (K, S+1, n) and the
    first bad substep (or -1).
    """
    S, n, _ = Ja.shape
    K = p1.shape[0]
    P = np.empty((K, S + 1, n))
    k1 = np.empty(n); k2 = np.empty(n); k3 = np.empty(n); k4 = np.empty(n)
    x = np.empty(n)
    bad = -1
    for kk in range(K):
        p = p1[kk].copy()
        P[kk, S] = p
        for s in range(S - 1, -1, -1):
            for j in range(n):
                acc = sb[s, j]
                for i in range(n):
                    acc -= p[i] * Jb[s, i, j]
                k1[j] = acc
            for i in range(n):
                x[i] = p[i] - 0.5 * dt * k1[i]
            for j in range(n):
                acc = sm[s, j]
                for i in range(n):
                    acc -= x[i] * Jm[s, i, j]
                k2[j] = acc
            for i in range(n):
                x[i] = p[i] - 0.5 * dt * k2[i]
            for j in range(n):
                acc = sm[s, j]
                for i in range(n):
                    acc -= x[i] * Jm[s, i, j]
                k3[j] = acc
            for i in range(n):
                x[i] = p[i] - dt * k3[i]
            for j in range(n):
                acc = sa[s, j]
                for i in range(n):
                    acc -= x[i] * Ja[s, i, j]
                k4[j] = acc
            ok = True
            for i in range(n):
                p[i] -= dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if not np.isfinite(p[i]) or abs(p[i]) > BLOWUP:
                    ok = False
            P[kk, s] = p
            if not ok and bad < 0:
                bad = s
    return P, bad
