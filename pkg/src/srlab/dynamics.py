"""Horizontal systems on a uniform control grid.

Controls are piecewise constant on ``m`` equal intervals of [0, 1]; each
interval is integrated with ``steps_per_interval`` classical RK4 substeps.
The costate runs backward with RK4 on the same substeps; the state at
substep midpoints comes from cubic Hermite interpolation (fourth order, like
the integrator), and dual controls are interval averages by Simpson's rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .models import DimensionError, Model

BLOWUP = 1e12
DEFAULT_M = 256
DEFAULT_SPI = 4


class IntegrationError(ArithmeticError):
    """Non-finite or exploding state; ``time`` is the first bad grid time."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control: ``values[k]`` acts on [k/m, (k+1)/m)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"control values must be an (m, h) array with m >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("control values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def dt(self) -> float:
        return 1.0 / self.m

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.m + 1)

    @classmethod
    def zeros(cls, m: int, h: int) -> "ControlPath":
        return cls(np.zeros((m, h)))

    @classmethod
    def constant(cls, u, m: int = DEFAULT_M) -> "ControlPath":
        return cls(np.tile(np.asarray(u, dtype=float), (m, 1)))

    @classmethod
    def from_function(cls, f: Callable[[float], np.ndarray], m: int = DEFAULT_M) -> "ControlPath":
        """Interval averages of ``f`` (5-point Gauss-Legendre per interval)."""
        x, w = np.polynomial.legendre.leggauss(5)
        edges = np.linspace(0.0, 1.0, m + 1)
        vals = []
        for a, b in zip(edges[:-1], edges[1:]):
            ts = 0.5 * (a + b) + 0.5 * (b - a) * x
            vals.append(sum(wi * np.asarray(f(t), dtype=float) for wi, t in zip(w, ts)) / 2.0)
        return cls(np.array(vals))

    def inner(self, other: "ControlPath") -> float:
        """Grid L^2 inner product."""
        if other.values.shape != self.values.shape:
            raise DimensionError("control grids differ")
        return float(np.sum(self.values * other.values) * self.dt)

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def reversed(self) -> "ControlPath":
        """Time reversal: retraces the trajectory backward."""
        return ControlPath(-self.values[::-1])

    def refined(self, factor: int) -> "ControlPath":
        return ControlPath(np.repeat(self.values, int(factor), axis=0))

    @staticmethod
    def concatenate(parts: list["ControlPath"]) -> "ControlPath":
        """Run the parts one after another inside [0, 1] (each sped up by len(parts))."""
        k = len(parts)
        return ControlPath(np.concatenate([p.values * k for p in parts], axis=0))

    def __add__(self, other: "ControlPath") -> "ControlPath":
        return ControlPath(self.values + other.values)

    def __mul__(self, s: float) -> "ControlPath":
        return ControlPath(self.values * float(s))

    __rmul__ = __mul__


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    fine_states: np.ndarray = field(repr=False, default=None)
    steps_per_interval: int = DEFAULT_SPI

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class CostatePath:
    times: np.ndarray
    covectors: np.ndarray


# ---------------------------------------------------------------------------
# forward integration

def _check_q0(model: Model, q0) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    if q0.shape[-1] != model.n:
        raise DimensionError(f"q0 has length {q0.shape[-1]}, model {model.name} has n={model.n}")
    if not np.all(np.isfinite(q0)):
        raise ValueError("q0 must be finite")
    return q0


def integrate_fine(model: Model, q0: np.ndarray, values: np.ndarray, spi: int = DEFAULT_SPI,
                   reference: bool = False) -> np.ndarray:
    """RK4 states at every substep node, shape (..., m*spi + 1, n).

    ``q0`` (..., n) and ``values`` (..., m, h) broadcast over leading axes.
    ``reference=True`` runs the vectorised numpy loop instead of the
    compiled kernel.
    """
    if spi < 1:
        raise ValueError("steps_per_interval must be >= 1")
    q0 = _check_q0(model, q0)
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != model.h:
        raise DimensionError(f"control has h={values.shape[-1]}, model {model.name} has h={model.h}")
    m = values.shape[-2]
    dt = 1.0 / (m * spi)
    batch = np.broadcast_shapes(q0.shape[:-1], values.shape[:-2])
    if not reference:
        B = int(np.prod(batch, dtype=int))
        qb = np.ascontiguousarray(np.broadcast_to(q0, batch + (model.n,)).reshape(B, model.n))
        vb = np.ascontiguousarray(np.broadcast_to(values, batch + values.shape[-2:]).reshape(B, m, model.h))
        out, bad = _kernels.rk4_forward(model._anchor.exps, model._anchor.coefs, qb, vb, int(spi))
        if np.any(bad >= 0):
            k = int(bad[bad >= 0].min())
            raise IntegrationError("state blow-up", (k + 1) / m)
        return out.reshape(batch + out.shape[1:])
    q = np.broadcast_to(q0, batch + (model.n,)).astype(float)
    out = np.empty(batch + (m * spi + 1, model.n))
    out[..., 0, :] = q
    table = model._anchor
    coefs = table.coefs
    s = 0
    for k in range(m):
        cu = np.einsum("tia,...a->...ti", coefs, values[..., k, :])
        if cu.ndim > 2:
            cu = np.broadcast_to(cu, batch + cu.shape[-2:])

        def f(x):
            return np.einsum("...t,...ti->...i", table.monomials(x), cu)

        for _ in range(spi):
            k1 = f(q)
            k2 = f(q + 0.5 * dt * k1)
            k3 = f(q + 0.5 * dt * k2)
            k4 = f(q + dt * k3)
            q = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            s += 1
            out[..., s, :] = q
        if not np.all(np.isfinite(q)) or np.max(np.abs(q), initial=0.0) > BLOWUP:
            raise IntegrationError("state blow-up", (k + 1) / m)
    return out


def _as_control(model: Model, u) -> ControlPath:
    if not isinstance(u, ControlPath):
        u = ControlPath(u)
    if u.h != model.h:
        raise DimensionError(f"control has h={u.h}, model {model.name} has h={model.h}")
    return u


def trajectory(model: Model, q0, u: ControlPath, steps_per_interval: int = DEFAULT_SPI) -> Trajectory:
    """Solve q(0) = q0, q' = xi_q u(t) on the control grid."""
    u = _as_control(model, u)
    fine = integrate_fine(model, q0, u.values, steps_per_interval)
    return Trajectory(u.times, fine[::steps_per_interval].copy(), fine, steps_per_interval)


def endpoint(model: Model, q0, u: ControlPath, steps_per_interval: int = DEFAULT_SPI) -> np.ndarray:
    u = _as_control(model, u)
    return integrate_fine(model, q0, u.values, steps_per_interval)[-1]


def _substep_controls(values: np.ndarray, spi: int) -> np.ndarray:
    return np.repeat(values, spi, axis=-2)


def action_from_fine(model: Model, fine: np.ndarray, values: np.ndarray, spi: int) -> np.ndarray:
    """Left-endpoint quadrature of 1/2 g(u,u) per substep (exact for a constant metric)."""
    us = _substep_controls(values, spi)
    g = model.norm2(fine[..., :-1, :], us)
    return 0.5 * g.mean(axis=-1)


def action(model: Model, q0, u: ControlPath, steps_per_interval: int = DEFAULT_SPI) -> float:
    u = _as_control(model, u)
    if model.unit_metric:
        return 0.5 * float(np.sum(u.values ** 2)) * u.dt
    fine = integrate_fine(model, q0, u.values, steps_per_interval)
    return float(action_from_fine(model, fine, u.values, steps_per_interval))


def length(model: Model, q0, u: ControlPath, steps_per_interval: int = DEFAULT_SPI) -> float:
    u = _as_control(model, u)
    if model.unit_metric:
        return float(np.sum(np.linalg.norm(u.values, axis=1)) * u.dt)
    fine = integrate_fine(model, q0, u.values, steps_per_interval)
    us = _substep_controls(u.values, steps_per_interval)
    return float(np.sqrt(model.norm2(fine[:-1], us)).mean())


# ---------------------------------------------------------------------------
# differential and adjoint of the endpoint map

def endpoint_diff(model: Model, q0, u: ControlPath, du: ControlPath,
                  steps_per_interval: int = DEFAULT_SPI) -> np.ndarray:
    """dE(u).du: the variational equation integrated alongside the state.

    RK4 on the augmented system (q, dq) gives exactly the derivative of the
    discrete endpoint map.
    """
    u = _as_control(model, u)
    du = _as_control(model, du)
    if du.m != u.m:
        raise DimensionError("grids of u and du differ")
    q = _check_q0(model, q0).copy()
    dq = np.zeros(model.n)
    spi = steps_per_interval
    dt = 1.0 / (u.m * spi)
    for k in range(u.m):
        uk, duk = u.values[k], du.values[k]

        def f(x, dx):
            return model.drift(x, uk), model.drift_jac(x, uk) @ dx + model.drift(x, duk)

        for _ in range(spi):
            a1, b1 = f(q, dq)
            a2, b2 = f(q + 0.5 * dt * a1, dq + 0.5 * dt * b1)
            a3, b3 = f(q + 0.5 * dt * a2, dq + 0.5 * dt * b2)
            a4, b4 = f(q + dt * a3, dq + dt * b3)
            q = q + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
            dq = dq + (dt / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(dq))) or np.abs(q).max() > BLOWUP:
            raise IntegrationError("blow-up in variational equation", (k + 1) / u.m)
    return dq


@dataclass
class _AdjointResult:
    fine_costates: np.ndarray  # (K, S+1, n)
    dual: np.ndarray  # (K, m, h)  interval averages of xi^* p
    metric_dual: np.ndarray  # (m, h)  interval averages of g(u, .)


def costate_sweep(model: Model, fine: np.ndarray, values: np.ndarray, p1: np.ndarray, lam: float,
                  spi: int, reference: bool = False) -> _AdjointResult:
    """Backward RK4 for p' = -(d_q xi_q u)^* p + lam/2 d_q g(u,u), p(1) = p1.

    ``fine`` are the forward substep states of one trajectory; ``p1`` is (K, n).
    """
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    m = values.shape[0]
    S = m * spi
    dt = 1.0 / S
    us = _substep_controls(values, spi)  # (S, h)
    qa, qb = fine[:-1], fine[1:]
    fa, fb = model.drift(qa, us), model.drift(qb, us)
    qm = 0.5 * (qa + qb) + (dt / 8.0) * (fa - fb)
    Ja, Jm, Jb = (model.drift_jac(x, us) for x in (qa, qm, qb))
    if lam != 0.0 and not model.unit_metric:
        def src(x):
            return 0.5 * lam * np.einsum("...abj,...a,...b->...j", model.metric_jac(x), us, us)
        sa, sm, sb = src(qa), src(qm), src(qb)
    else:
        sa = sm = sb = np.zeros_like(qa)
    K = p1.shape[0]
    if reference:
        P = np.empty((K, S + 1, model.n))
        p = p1.copy()
        P[:, S] = p
        for s in range(S - 1, -1, -1):
            k1 = -(p @ Jb[s]) + sb[s]
            k2 = -((p - 0.5 * dt * k1) @ Jm[s]) + sm[s]
            k3 = -((p - 0.5 * dt * k2) @ Jm[s]) + sm[s]
            k4 = -((p - dt * k3) @ Ja[s]) + sa[s]
            p = p - (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            P[:, s] = p
            if not np.all(np.isfinite(p)) or np.abs(p).max(initial=0.0) > BLOWUP:
                raise IntegrationError("costate blow-up", s / S)
    else:
        c = np.ascontiguousarray
        P, bad = _kernels.costate_backward(c(Ja), c(Jm), c(Jb), c(sa), c(sm), c(sb), c(p1), dt)
        if bad >= 0:
            raise IntegrationError("costate blow-up", bad / S)
    # p' at both ends of each substep, with that substep's control
    pda = -np.einsum("ksi,sij->ksj", P[:, :-1], Ja) + sa  # (K, S, n)
    pdb = -np.einsum("ksi,sij->ksj", P[:, 1:], Jb) + sb
    pm = 0.5 * (P[:, :-1] + P[:, 1:]) + (dt / 8.0) * (pda - pdb)
    xa, xm, xb = model.anchor(qa), model.anchor(qm), model.anchor(qb)  # (S, n, h)
    wa = np.einsum("ksi,sia->ksa", P[:, :-1], xa)
    wm = np.einsum("ksi,sia->ksa", pm, xm)
    wb = np.einsum("ksi,sia->ksa", P[:, 1:], xb)
    w = (wa + 4.0 * wm + wb) / 6.0
    dual = w.reshape(K, m, spi, model.h).mean(axis=2)
    if model.unit_metric:
        gd = np.array(values, dtype=float)
    else:
        ga, gm, gb = model.lower(qa, us), model.lower(qm, us), model.lower(qb, us)
        gd = ((ga + 4 * gm + gb) / 6.0).reshape(m, spi, model.h).mean(axis=1)
    return _AdjointResult(P, dual, gd)


def endpoint_adjoint(model: Model, q0, u: ControlPath, p1,
                     steps_per_interval: int = DEFAULT_SPI) -> tuple[CostatePath, ControlPath]:
    """dE(u)^* p1 as a dual control t -> xi_{q(t)}^* p(t), with its costate path."""
    u = _as_control(model, u)
    p1 = np.asarray(p1, dtype=float)
    if p1.shape != (model.n,):
        raise DimensionError(f"p1 must have length {model.n}")
    spi = steps_per_interval
    fine = integrate_fine(model, q0, u.values, spi)
    res = costate_sweep(model, fine, u.values, p1[None], 0.0, spi)
    return CostatePath(u.times, res.fine_costates[0, ::spi].copy()), ControlPath(res.dual[0])


def adjoint_columns(model: Model, q0, u: ControlPath, steps_per_interval: int = DEFAULT_SPI,
                    fine: np.ndarray | None = None) -> np.ndarray:
    """dE(u)^* e_i for every basis covector: array (n, m, h)."""
    u = _as_control(model, u)
    if fine is None:
        fine = integrate_fine(model, q0, u.values, steps_per_interval)
    return costate_sweep(model, fine, u.values, np.eye(model.n), 0.0, steps_per_interval).dual


def adjoint_gram(model: Model, q0, u: ControlPath, steps_per_interval: int = DEFAULT_SPI,
                 fine: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gram matrix <dE^* e_i, dE^* e_j> (grid L^2) and the columns themselves."""
    cols = adjoint_columns(model, q0, u, steps_per_interval, fine)
    flat = cols.reshape(model.n, -1)
    return flat @ flat.T / u.m, cols


def action_gradient(model: Model, q0, u: ControlPath, p1, lam: float = 1.0,
                    steps_per_interval: int = DEFAULT_SPI,
                    fine: np.ndarray | None = None) -> np.ndarray:
    """L^2 representative of lam dA(u) - dE(u)^* p1, shape (m, h)."""
    u = _as_control(model, u)
    if fine is None:
        fine = integrate_fine(model, q0, u.values, steps_per_interval)
    res = costate_sweep(model, fine, u.values, np.asarray(p1, dtype=float)[None], lam, steps_per_interval)
    return lam * res.metric_dual - res.dual[0]


def extremal_residual(model: Model, q0, u: ControlPath, p1, lam: int = 1,
                      steps_per_interval: int = DEFAULT_SPI) -> float:
    """Grid L^2 norm of t -> lam g(u(t), .) - xi^* p(t)."""
    if lam not in (0, 1):
        raise ValueError("lam must be 0 or 1")
    u = _as_control(model, u)
    r = action_gradient(model, q0, u, p1, float(lam), steps_per_interval)
    return float(np.sqrt(np.sum(r ** 2) / u.m))


def restore_endpoint(model: Model, q0, u: ControlPath, target, steps_per_interval: int = DEFAULT_SPI,
                     tol: float = 1e-12, max_iter: int = 20) -> tuple[ControlPath, float]:
    """Newton projection onto E(u) = target with minimum-L^2-norm corrections.

    Returns the corrected control and the final endpoint error (the best
    iterate if the Gram matrix is too degenerate to converge).
    """
    target = np.asarray(target, dtype=float)
    spi = steps_per_interval
    fine = integrate_fine(model, q0, u.values, spi)
    r = fine[-1] - target
    err = float(np.linalg.norm(r))
    best = (u, err)
    for _ in range(max_iter):
        if err <= tol:
            break
        gram, cols = adjoint_gram(model, q0, u, spi, fine)
        coeff = np.linalg.lstsq(gram, r, rcond=1e-13)[0]
        step = np.einsum("i,iak->ak", coeff, cols)
        u = ControlPath(u.values - step)
        fine = integrate_fine(model, q0, u.values, spi)
        r = fine[-1] - target
        new = float(np.linalg.norm(r))
        if new < best[1]:
            best = (u, new)
        if new > 0.5 * err and new > tol:
            err = new
            break
        err = new
    return best
