"""Normal Hamiltonian, geodesic flow, exponential map and shooting.

In chart coordinates the normal control is u(q,p) = G_q^{-1} xi_q^* p, the
normal Hamiltonian h = 1/2 g_q(u,u), and the geodesic equations read

    q' = xi_q u,     p' = 1/2 d_q g(u,u) - (d_q xi_q u)^* p.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import _kernels
from . import dynamics as dyn
from .models import Model, _check

log = logging.getLogger(__name__)

DEFAULT_STEPS = 1000


@dataclass(frozen=True)
class PhaseTrajectory:
    times: np.ndarray
    q: np.ndarray  # (steps+1, n)
    p: np.ndarray  # (steps+1, n)
    controls: np.ndarray  # (steps+1, h)

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([self.q, self.p], axis=1)

    @property
    def q0(self) -> np.ndarray:
        return self.q[0]

    @property
    def p0(self) -> np.ndarray:
        return self.p[0]


# ---------------------------------------------------------------------------
# pointwise

def normal_control(model: Model, q, p) -> np.ndarray:
    q = _check(model, "q", q, model.n)
    p = _check(model, "p", p, model.n)
    return _normal_control(model, q, p)


def _normal_control(model: Model, q, p):
    w = np.einsum("...ia,...i->...a", model.anchor(q), p)
    return model.raise_(q, w)


def normal_hamiltonian(model: Model, q, p) -> float:
    q = _check(model, "q", q, model.n)
    p = _check(model, "p", p, model.n)
    return float(_hamiltonian(model, q, p))


def _hamiltonian(model: Model, q, p):
    u = _normal_control(model, q, p)
    return 0.5 * model.norm2(q, u)


def pre_hamiltonian(model: Model, q, p, u, lam: float = 1.0) -> float:
    """H^lam(q,p,u) = p(xi_q u) - lam/2 g_q(u,u)."""
    return float(p @ model.drift(q, u) - 0.5 * lam * model.norm2(q, u))


def _sgrad(model: Model, q: np.ndarray, p: np.ndarray):
    """Batched symplectic gradient; returns (qdot, pdot, u)."""
    table = model._anchor
    mono = table.monomials(q)
    xi = np.tensordot(mono, table.coefs, axes=([-1], [0]))  # (..., n, h)
    w = np.einsum("...ia,...i->...a", xi, p)
    u = w if model.unit_metric else model.raise_(q, w)
    qdot = np.einsum("...ia,...a->...i", xi, u)
    cu = np.einsum("tia,...a->...ti", table.coefs, u)
    dm = table.monomial_jac(q)
    pdot = -np.einsum("...ti,...i,...tj->...j", cu, p, dm)
    if not model.unit_metric:
        pdot = pdot + 0.5 * np.einsum("...abj,...a,...b->...j", model.metric_jac(q), u, u)
    return qdot, pdot, u


def symplectic_gradient(model: Model, q, p) -> tuple[np.ndarray, np.ndarray]:
    q = _check(model, "q", q, model.n)
    p = _check(model, "p", p, model.n)
    qdot, pdot, _ = _sgrad(model, q, p)
    return qdot, pdot


# ---------------------------------------------------------------------------
# flow

def flow(model: Model, q0: np.ndarray, p0: np.ndarray, T: float = 1.0, steps: int = DEFAULT_STEPS,
         keep_path: bool = True, reference: bool = False):
    """Batched RK4 on the normal Hamiltonian vector field.

    Returns (q, p, u) with a time axis of length steps+1 before the coordinate
    axis when ``keep_path``; otherwise only the final (q, p).  Orthonormal
    frames use the compiled kernel unless ``reference`` is set.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    q = np.array(q0, dtype=float)
    p = np.array(p0, dtype=float)
    q, p = np.broadcast_arrays(q, p)
    q, p = q.copy(), p.copy()
    dt = float(T) / steps
    if model.unit_metric and not reference:
        batch = q.shape[:-1]
        B = int(np.prod(batch, dtype=int))
        Q, Pp, U, bad = _kernels.flow_unit(model._anchor.exps, model._anchor.coefs,
                                           q.reshape(B, model.n), p.reshape(B, model.n),
                                           dt, int(steps), bool(keep_path))
        if np.any(bad >= 0):
            raise dyn.IntegrationError("geodesic flow blow-up", (int(bad[bad >= 0].min()) + 1) * dt)
        if not keep_path:
            return Q[:, 0].reshape(q.shape), Pp[:, 0].reshape(p.shape)
        L = steps + 1
        return (Q.reshape(batch + (L, model.n)), Pp.reshape(batch + (L, model.n)),
                U.reshape(batch + (L, model.h)))
    if keep_path:
        Q = np.empty(q.shape[:-1] + (steps + 1, model.n))
        Pp = np.empty_like(Q)
        U = np.empty(q.shape[:-1] + (steps + 1, model.h))
    for s in range(steps):
        a1, b1, u1 = _sgrad(model, q, p)
        if keep_path:
            Q[..., s, :], Pp[..., s, :], U[..., s, :] = q, p, u1
        a2, b2, _ = _sgrad(model, q + 0.5 * dt * a1, p + 0.5 * dt * b1)
        a3, b3, _ = _sgrad(model, q + 0.5 * dt * a2, p + 0.5 * dt * b2)
        a4, b4, _ = _sgrad(model, q + dt * a3, p + dt * b3)
        q = q + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        p = p + (dt / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
        if (s & 15) == 15 or s == steps - 1:
            if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))) or max(
                    np.abs(q).max(initial=0), np.abs(p).max(initial=0)) > dyn.BLOWUP:
                raise dyn.IntegrationError("geodesic flow blow-up", (s + 1) * dt)
    if not keep_path:
        return q, p
    Q[..., steps, :], Pp[..., steps, :] = q, p
    U[..., steps, :] = _normal_control(model, q, p)
    return Q, Pp, U


def geodesic_shoot(model: Model, q0, p0, T: float = 1.0, steps: int = DEFAULT_STEPS) -> PhaseTrajectory:
    q0 = _check(model, "q0", q0, model.n)
    p0 = _check(model, "p0", p0, model.n)
    Q, P, U = flow(model, q0, p0, T, steps)
    return PhaseTrajectory(np.linspace(0.0, T, steps + 1), Q, P, U)


def exp_map(model: Model, q0, p0, steps: int = DEFAULT_STEPS) -> np.ndarray:
    q0 = _check(model, "q0", q0, model.n)
    p0 = _check(model, "p0", p0, model.n)
    return flow(model, q0, p0, 1.0, steps, keep_path=False)[0]


def hamiltonian_drift(model: Model, phase: PhaseTrajectory) -> float:
    """max_t |h(q(t),p(t)) - h(q0,p0)|."""
    hs = _hamiltonian(model, phase.q, phase.p)
    return float(np.max(np.abs(hs - hs[0])))


def to_control_path(phase: PhaseTrajectory, model: Model | None = None, refine: int = 1) -> dyn.ControlPath:
    """Interval averages of the geodesic control on a grid of ``refine * steps`` intervals.

    With ``refine > 1`` the flow is restarted from every recorded node (one
    batched integration) to sample the control between nodes.  Averages use
    the end-corrected trapezoid rule avg = (u_k + u_{k+1})/2 + dt (u'_k - u'_{k+1})/12,
    with u' from second-order differences of the samples.
    """
    U = phase.controls
    steps = U.shape[0] - 1
    T = phase.times[-1]
    if refine > 1:
        if model is None:
            raise ValueError("refining a phase trajectory needs its model")
        _, _, sub = flow(model, phase.q[:-1], phase.p[:-1], T / steps, refine)  # (steps, refine+1, h)
        U = np.concatenate([sub[:, :-1].reshape(-1, U.shape[1]), U[-1:]], axis=0)
        steps *= refine
    vals = 0.5 * (U[:-1] + U[1:])
    if steps >= 2:
        dt = T / steps
        du = np.gradient(U, dt, axis=0, edge_order=2)
        vals = vals + dt * (du[:-1] - du[1:]) / 12.0
    return dyn.ControlPath(vals * T)


def geodesic_extremal_residual(model: Model, phase: PhaseTrajectory, refine: int = 4) -> float:
    """extremal_residual(lam=1) of the geodesic control with its own final covector."""
    u = to_control_path(phase, model, refine)
    return dyn.extremal_residual(model, phase.q[0], u, phase.p[-1], 1, steps_per_interval=1)


def geodesic_length(model: Model, q0, p0) -> float:
    """Length of the unit-time normal geodesic: sqrt(2 h(q0, p0))."""
    return float(np.sqrt(2.0 * normal_hamiltonian(model, q0, p0)))


# ---------------------------------------------------------------------------
# two-point shooting

@dataclass
class BVPResult:
    success: bool
    p0: np.ndarray
    residual: float
    iterations: int
    phase: PhaseTrajectory | None = None
    extremal_residual: float | None = None
    history: list[float] = field(default_factory=list)
    message: str = ""

    def diagnostics(self) -> dict[str, Any]:
        return {
            "success": self.success,
            "p0": self.p0.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "extremal_residual": self.extremal_residual,
            "history": self.history,
            "message": self.message,
        }


@dataclass
class ShootOptions:
    tol_bvp: float = 1e-9
    max_iter: int = 100
    steps: int = 200
    damping0: float = 1e-3
    fd_step: float = 1e-6


def lm_shoot_batch(model: Model, q0: np.ndarray, q1: np.ndarray, P0: np.ndarray,
                   opts: ShootOptions = ShootOptions()) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Levenberg-Marquardt on F(p0) = exp(q0, p0) - q1 for a batch of starts.

    Each start keeps its own damping.  Returns (P, residual norms, iterations
    used, per-start residual histories).
    """
    n = model.n
    P = np.array(P0, dtype=float).reshape(-1, n)
    B = P.shape[0]
    q1 = np.asarray(q1, dtype=float)

    def F(Pb):
        qe, _ = flow(model, q0, Pb, 1.0, opts.steps, keep_path=False)
        return qe - q1

    def safe_F(Pb):
        try:
            return F(Pb)
        except dyn.IntegrationError:
            out = np.empty(Pb.shape)
            for i, p in enumerate(Pb):
                try:
                    out[i] = F(p[None])[0]
                except dyn.IntegrationError:
                    out[i] = np.inf
            return out

    Fc = safe_F(P)
    res = np.linalg.norm(Fc, axis=1)
    lam = np.full(B, np.nan)
    active = np.isfinite(res) & (res > opts.tol_bvp)
    iters = np.zeros(B, dtype=int)
    hist = [[float(r)] for r in res]
    eye = np.eye(n)
    for _ in range(opts.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Pa = P[idx]
        hstep = opts.fd_step * np.maximum(1.0, np.linalg.norm(Pa, axis=1))  # (b,)
        probes = Pa[:, None, :] + hstep[:, None, None] * eye[None]  # (b, n, n)
        Fp = safe_F(probes.reshape(-1, n)).reshape(idx.size, n, n)
        J = np.swapaxes((Fp - Fc[idx][:, None, :]) / hstep[:, None, None], 1, 2)  # (b, n_out, n_in)
        JtJ = np.einsum("bki,bkj->bij", J, J)
        g = np.einsum("bki,bk->bi", J, Fc[idx])
        scale = np.maximum(np.einsum("bii->bi", JtJ).max(axis=1), 1e-300)
        la = lam[idx]
        la = np.where(np.isnan(la), opts.damping0 * scale, la)
        trials = np.empty_like(Pa)
        for j in range(idx.size):
            try:
                trials[j] = Pa[j] - np.linalg.solve(JtJ[j] + la[j] * eye, g[j])
            except np.linalg.LinAlgError:
                trials[j] = Pa[j]
        Ft = safe_F(trials)
        rt = np.linalg.norm(Ft, axis=1)
        ok = np.isfinite(rt) & (rt < res[idx])
        for j, b in enumerate(idx):
            iters[b] += 1
            if ok[j]:
                P[b], Fc[b], res[b] = trials[j], Ft[j], rt[j]
                la[j] = max(la[j] / 10.0, 1e-15 * scale[j])
            else:
                la[j] = la[j] * 10.0
            hist[b].append(float(res[b]))
            if res[b] <= opts.tol_bvp or la[j] > 1e20 * scale[j]:
                active[b] = False
        lam[idx] = la
    return P, res, iters, hist


def shoot_bvp(model: Model, q0, q1, p0_init, options: ShootOptions | None = None,
              check_extremal: bool = True) -> BVPResult:
    """Find p0 with exp(q0, p0) = q1 starting from ``p0_init``.

    On failure the best iterate is returned with ``success=False``.
    """
    opts = options or ShootOptions()
    q0 = _check(model, "q0", q0, model.n)
    q1 = _check(model, "q1", q1, model.n)
    p0_init = _check(model, "p0_init", p0_init, model.n)
    P, res, iters, hist = lm_shoot_batch(model, q0, q1, p0_init[None], opts)
    return _finish(model, q0, P[0], float(res[0]), int(iters[0]), hist[0], opts, check_extremal)


def _finish(model, q0, p0, res, iters, hist, opts, check_extremal) -> BVPResult:
    success = bool(np.isfinite(res) and res <= opts.tol_bvp)
    out = BVPResult(success, p0, res, iters, history=hist,
                    message="converged" if success else "iteration limit or stalled damping")
    if np.isfinite(res):
        steps = max(opts.steps, DEFAULT_STEPS)
        steps += steps % 2
        out.phase = geodesic_shoot(model, q0, p0, 1.0, steps)
        if check_extremal:
            out.extremal_residual = geodesic_extremal_residual(model, out.phase)
    return out


# ---------------------------------------------------------------------------
# empirical local minimality

@dataclass
class MinimalityReport:
    passed: bool
    min_action_change: float
    tolerance: float
    trials: int
    base_action: float
    changes: list[float] = field(default_factory=list)
    max_endpoint_error: float = 0.0


def verify_local_minimality(model: Model, q0, path, trials: int = 64, magnitude: float = 1e-3,
                            seed: int = 0, steps_per_interval: int = dyn.DEFAULT_SPI,
                            rel_tol: float = 1e-2) -> MinimalityReport:
    """Random endpoint-preserving perturbations must not decrease the action.

    ``path`` is a PhaseTrajectory (converted to a control) or a ControlPath.
    Each random perturbation is projected on the kernel of dE(u), scaled to
    grid-L^2 norm ``magnitude``, and pulled back onto the fixed endpoint by
    Newton steps before comparing actions.  A decrease larger than
    ``rel_tol * magnitude**2`` fails.
    """
    u = to_control_path(path) if isinstance(path, PhaseTrajectory) else path
    q0 = np.asarray(q0, dtype=float)
    spi = steps_per_interval
    base = dyn.action(model, q0, u, spi)
    tol = rel_tol * magnitude ** 2
    if base == 0.0:
        # the action is nonnegative, so the zero control is a global minimiser
        return MinimalityReport(True, 0.0, tol, 0, 0.0)
    target = dyn.endpoint(model, q0, u, spi)
    gram, cols = dyn.adjoint_gram(model, q0, u, spi)
    flat = cols.reshape(model.n, -1)
    ginv = np.linalg.pinv(gram, rcond=1e-12)
    rng = np.random.default_rng(seed)
    changes = []
    worst_ep = 0.0
    for _ in range(trials):
        d = rng.standard_normal(u.values.shape)
        # smooth-ish perturbations: random walk averaged over neighbours
        d = np.cumsum(d, axis=0) / np.sqrt(u.m)
        d = d - np.mean(d, axis=0)
        coeff = ginv @ (flat @ d.ravel() / u.m)
        d = d - (coeff @ flat).reshape(d.shape)
        nrm = np.sqrt(np.sum(d ** 2) / u.m)
        if nrm == 0.0:
            continue
        v = dyn.ControlPath(u.values + magnitude * d / nrm)
        v, err = dyn.restore_endpoint(model, q0, v, target, spi)
        worst_ep = max(worst_ep, err)
        changes.append(dyn.action(model, q0, v, spi) - base)
    mn = float(min(changes)) if changes else 0.0
    return MinimalityReport(mn >= -tol, mn, tol, len(changes), base, changes, worst_ep)
