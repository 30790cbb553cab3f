"""Sub-Riemannian distance by direct optimal control and by multistart shooting.

The direct method minimises the action plus a quadratic endpoint penalty over
piecewise-constant controls, raising the penalty weight tenfold per stage.
Gradients come from the discrete costate sweep, so they are exact for the
discretised problem.  Shooting searches covectors of normal geodesics.  Both
finish with a Newton restoration of the endpoint, so every reported control
is feasible to ``tol_ep``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import minimize

from . import dynamics as dyn
from . import hamiltonian as ham
from .models import Model, _check, least_norm_control

log = logging.getLogger(__name__)

TOL_EP = 1e-6
ABNORMAL_RTOL = 1e-8
NORMAL_TOL = 1e-6
RANK_RTOL = 1e-9


class DistanceError(RuntimeError):
    """Neither solver produced a control meeting the endpoint tolerance."""


@dataclass
class DistanceResult:
    distance: float
    control: dyn.ControlPath
    endpoint_error: float
    method: str
    success: bool
    diagnostics: dict[str, Any] = field(default_factory=dict)
    steps_per_interval: int = dyn.DEFAULT_SPI

    def to_dict(self) -> dict[str, Any]:
        return {"distance": self.distance, "endpoint_error": self.endpoint_error, "method": self.method,
                "success": self.success, "m": self.control.m, "diagnostics": self.diagnostics}


@dataclass
class DirectOptions:
    m: int = 64
    steps_per_interval: int = dyn.DEFAULT_SPI
    mu_start: float = 1e1
    mu_stop: float = 1e7
    steps_per_stage: int = 200
    tol_ep: float = TOL_EP
    seed: int = 0
    perturbation: float = 0.3
    memory: int = 20


@dataclass
class BestOptions:
    direct: DirectOptions = field(default_factory=DirectOptions)
    shoot: ham.ShootOptions = field(default_factory=ham.ShootOptions)
    starts: int = 16
    shoot_m: int = 256
    discrepancy: float = 0.02


def _scale(model: Model, q0: np.ndarray, q1: np.ndarray) -> tuple[float, np.ndarray]:
    """Length scale of the displacement and per-coordinate residual weights.

    With dilation weights w_i the scale is the homogeneous norm of q1 - q0 and
    residual coordinate i is divided by scale**w_i, which makes the penalised
    objective invariant under dilations.
    """
    d = q1 - q0
    if model.weights is not None:
        w = np.asarray(model.weights, dtype=float)
        s = float(np.max(np.abs(d) ** (1.0 / w)))
    else:
        w = np.ones(model.n)
        s = float(np.linalg.norm(d))
    s = max(s, 1e-300)
    return s, 1.0 / s ** w


def line_control(model: Model, q0: np.ndarray, q1: np.ndarray, m: int) -> np.ndarray:
    """Least-norm controls following the chart segment from q0 to q1."""
    ts = (np.arange(m) + 0.5) / m
    return np.array([least_norm_control(model, q0 + t * (q1 - q0), q1 - q0) for t in ts])


def _smooth_noise(rng: np.random.Generator, m: int, h: int, modes: int = 4) -> np.ndarray:
    t = (np.arange(m) + 0.5) / m
    out = np.zeros((m, h))
    for k in range(1, modes + 1):
        a, b = rng.standard_normal((2, h))
        out += (a[None] * np.cos(2 * np.pi * k * t)[:, None] + b[None] * np.sin(2 * np.pi * k * t)[:, None]) / k
    return out / np.sqrt(np.mean(np.sum(out ** 2, axis=1)))


def steering_control(model: Model, q0: np.ndarray, q1: np.ndarray, m: int) -> np.ndarray | None:
    """A feasible start from the commutator steering planner, averaged onto m intervals."""
    from .controllability import steer

    plan = steer(model, q0, q1)
    if not plan.success:
        return None
    v = plan.control.values
    M = v.shape[0]
    edges = np.linspace(0, M, m + 1)
    cum = np.vstack([np.zeros((1, model.h)), np.cumsum(v, axis=0)])
    # exact averages of the piecewise-constant control over the coarse cells
    idx = np.floor(edges).astype(int).clip(0, M - 1)
    frac = edges - idx
    at = cum[idx] + frac[:, None] * v[idx]
    return np.diff(at, axis=0) * (m / M)


def distance_direct(model: Model, q0, q1, options: DirectOptions | None = None,
                    init: np.ndarray | str | None = None) -> DistanceResult:
    """Penalty homotopy on A(u) + mu |E(u) - q1|^2 with L-BFGS stages.

    ``init=None`` starts from the chart-line control plus a seeded smooth
    perturbation (the line control can be a critical point of the endpoint
    map, e.g. zero) and, if that run ends infeasible, restarts from the
    steering planner's control (``init="steer"``).  An (m, h) array is used
    as given.
    """
    o = options or DirectOptions()
    if o.m < 8:
        raise ValueError("grid size m must be >= 8")
    q0 = _check(model, "q0", q0, model.n)
    q1 = _check(model, "q1", q1, model.n)
    spi = o.steps_per_interval
    if np.array_equal(q0, q1):
        return DistanceResult(0.0, dyn.ControlPath.zeros(o.m, model.h), 0.0, "direct", True,
                              {"stages": [], "init": "none"}, spi)
    if init is None:
        first = distance_direct(model, q0, q1, o, init="line")
        if first.success:
            return first
        log.info("line start ended infeasible (%.3g); restarting from the steering control", first.endpoint_error)
        second = distance_direct(model, q0, q1, o, init="steer")
        return second if second.success or second.endpoint_error < first.endpoint_error else first
    s, rw = _scale(model, q0, q1)
    rng = np.random.default_rng(o.seed)
    if isinstance(init, str):
        if init == "line":
            v0 = line_control(model, q0, q1, o.m) + o.perturbation * s * _smooth_noise(rng, o.m, model.h)
        elif init == "steer":
            v0 = steering_control(model, q0, q1, o.m)
            if v0 is None:
                return DistanceResult(np.inf, dyn.ControlPath.zeros(o.m, model.h), np.inf, "direct", False,
                                      {"stages": [], "init": init, "message": "steering start failed"}, spi)
        else:
            raise ValueError(f"unknown init {init!r}")
        tag = init
    else:
        v0 = np.asarray(init, dtype=float)
        tag = "given"
    m, h = v0.shape
    sqdt = np.sqrt(1.0 / m)
    # optimise x = values / (s sqrt(m)): the grid L^2 product becomes euclidean
    to_v = s / sqdt

    def objective(x, mu):
        v = x.reshape(m, h) * to_v
        try:
            fine = dyn.integrate_fine(model, q0, v, spi)
        except dyn.IntegrationError:
            return np.inf, np.zeros_like(x)
        r = (fine[-1] - q1) * rw
        A = float(dyn.action_from_fine(model, fine, v, spi)) if not model.unit_metric else 0.5 * float(np.sum(v * v)) / m
        f = A / s ** 2 + mu * float(r @ r)
        p1 = -2.0 * mu * r * rw * s ** 2
        res = dyn.costate_sweep(model, fine, v, p1[None], 1.0, spi)
        grad = (res.metric_dual - res.dual[0]) / s ** 2  # L^2 representative w.r.t. v
        return f, (grad * to_v / m).ravel()

    x = (v0 / to_v).ravel()
    dist0 = float(np.linalg.norm(q1 - q0))
    stages = []
    mu = o.mu_start
    err = np.inf
    while mu <= o.mu_stop * (1 + 1e-12):
        sol = minimize(objective, x, args=(mu,), jac=True, method="L-BFGS-B",
                       options={"maxiter": o.steps_per_stage, "maxcor": o.memory, "gtol": 1e-12, "ftol": 1e-15})
        v = sol.x.reshape(m, h) * to_v
        err = float(np.linalg.norm(dyn.endpoint(model, q0, dyn.ControlPath(v), spi) - q1))
        # a stage that slid back to the start point (typically u = 0) is discarded
        collapsed = err >= 0.9 * dist0
        if not collapsed:
            x = sol.x
        stages.append({"mu": mu, "iterations": int(sol.nit), "objective": float(sol.fun),
                       "gradient_norm": float(np.linalg.norm(sol.jac)), "endpoint_error": err,
                       "rejected": bool(collapsed)})
        if err <= o.tol_ep:
            break
        mu *= 10.0
    u = dyn.ControlPath(x.reshape(m, h) * to_v)
    u, err = dyn.restore_endpoint(model, q0, u, q1, spi)
    ok = err <= o.tol_ep
    d = dyn.length(model, q0, u, spi)
    diag = {"stages": stages, "scale": s, "init": tag}
    if not ok:
        diag["message"] = f"penalty schedule exhausted: endpoint error {err:.3g}"
    return DistanceResult(d, u, err, "direct", ok, diag, spi)


def _sphere_starts(k: int, n: int, radius: float) -> np.ndarray:
    """Deterministic, roughly uniform covectors on the sphere (Fibonacci-style spiral)."""
    if n == 1:
        return radius * np.array([[1.0], [-1.0]] * (k // 2 + 1))[:k]
    i = np.arange(k) + 0.5
    golden = np.pi * (3.0 - np.sqrt(5.0))
    pts = np.empty((k, n))
    pts[:, 0] = 1.0 - 2.0 * i / k
    rest = np.sqrt(np.maximum(0.0, 1.0 - pts[:, 0] ** 2))
    angles = golden * np.arange(k)
    for j in range(1, n):
        pts[:, j] = rest * np.cos(angles * j + j)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return radius * pts


def initial_covector(model: Model, q0, u: dyn.ControlPath, spi: int) -> np.ndarray | None:
    """p(0) of the normal multiplier fitted to a (near-)optimal control, if one fits."""
    cert = classify_extremal(model, q0, u, steps_per_interval=spi, tol=np.inf, abnormal_first=False)
    if cert.covector is None:
        return None
    fine = dyn.integrate_fine(model, q0, u.values, spi)
    res = dyn.costate_sweep(model, fine, u.values, cert.covector[None], 1.0, spi)
    return res.fine_costates[0, 0]


def distance_shooting(model: Model, q0, q1, starts: np.ndarray, opts: ham.ShootOptions,
                      m: int = 256, spi: int = dyn.DEFAULT_SPI, tol_ep: float = TOL_EP) -> DistanceResult:
    """Shortest converged normal geodesic among multistart shooting runs."""
    q0 = _check(model, "q0", q0, model.n)
    q1 = _check(model, "q1", q1, model.n)
    P, res, iters, _ = ham.lm_shoot_batch(model, q0, q1, starts, opts)
    conv = np.flatnonzero(np.isfinite(res) & (res <= max(opts.tol_bvp, 1e-7)))
    diag = {"starts": len(P), "converged": int(conv.size), "iterations": iters.tolist()}
    if conv.size == 0:
        return DistanceResult(np.inf, dyn.ControlPath.zeros(m, model.h), np.inf, "shooting", False, diag, spi)
    lengths = np.sqrt(2.0 * ham._hamiltonian(model, np.broadcast_to(q0, P[conv].shape), P[conv]))
    order = conv[np.argsort(lengths)]
    for b in order[:3]:
        phase = ham.geodesic_shoot(model, q0, P[b], 1.0, m)
        u = ham.to_control_path(phase)
        u, err = dyn.restore_endpoint(model, q0, u, q1, spi)
        if err <= tol_ep:
            diag.update({"p0": P[b].tolist(), "geodesic_length": float(np.sqrt(2 * ham._hamiltonian(model, q0, P[b])))})
            return DistanceResult(dyn.length(model, q0, u, spi), u, err, "shooting", True, diag, spi)
    return DistanceResult(np.inf, dyn.ControlPath.zeros(m, model.h), np.inf, "shooting", False, diag, spi)


def distance_best(model: Model, q0, q1, options: BestOptions | None = None) -> DistanceResult:
    """Run both solvers and keep the shorter feasible control.

    Shooting starts: ``starts`` covectors on a sphere whose radius is the chart
    distance, plus the multiplier recovered from the direct solution.
    A relative disagreement above ``discrepancy`` is flagged.
    """
    o = options or BestOptions()
    q0 = _check(model, "q0", q0, model.n)
    q1 = _check(model, "q1", q1, model.n)
    spi = o.direct.steps_per_interval
    if np.array_equal(q0, q1):
        return DistanceResult(0.0, dyn.ControlPath.zeros(o.direct.m, model.h), 0.0, "best-of", True, {}, spi)
    direct = distance_direct(model, q0, q1, o.direct)
    starts = _sphere_starts(o.starts, model.n, max(float(np.linalg.norm(q1 - q0)), 1e-12))
    if direct.success:
        p0 = initial_covector(model, q0, direct.control, spi)
        if p0 is not None and np.all(np.isfinite(p0)):
            starts = np.vstack([p0[None], starts])
    shoot = distance_shooting(model, q0, q1, starts, o.shoot, o.shoot_m, spi, o.direct.tol_ep)
    cands = [r for r in (direct, shoot) if r.success]
    if not cands:
        raise DistanceError(f"both solvers failed: direct error {direct.endpoint_error:.3g}, "
                            f"shooting converged {shoot.diagnostics.get('converged')}/{shoot.diagnostics.get('starts')}")
    best = min(cands, key=lambda r: r.distance)
    diag = {"direct": direct.to_dict(), "shooting": shoot.to_dict(), "chosen": best.method}
    if len(cands) == 2:
        rel = abs(direct.distance - shoot.distance) / max(best.distance, 1e-300)
        diag["relative_discrepancy"] = rel
        diag["flagged"] = bool(rel > o.discrepancy)
        if rel > o.discrepancy:
            log.warning("direct %.6g and shooting %.6g disagree by %.2g", direct.distance, shoot.distance, rel)
    return DistanceResult(best.distance, best.control, best.endpoint_error, "best-of", True, diag, spi)


# ---------------------------------------------------------------------------
# extremal classification

@dataclass
class ExtremalCertificate:
    kind: str  # normal | abnormal | unclassified
    covector: np.ndarray | None
    normal_residual: float
    abnormal_ratio: float
    singular_values: np.ndarray
    rank: int

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "covector": None if self.covector is None else self.covector.tolist(),
                "normal_residual": self.normal_residual, "abnormal_ratio": self.abnormal_ratio,
                "singular_values": self.singular_values.tolist(), "rank": self.rank}


def classify_extremal(model: Model, q0, u: dyn.ControlPath, tol: float = NORMAL_TOL,
                      abnormal_rtol: float = ABNORMAL_RTOL, steps_per_interval: int = dyn.DEFAULT_SPI,
                      abnormal_first: bool = True) -> ExtremalCertificate:
    """Normal / abnormal / unclassified verdict for a control.

    Abnormal: the Gram matrix of the n dual controls dE(u)^* e_i has
    sigma_min <= abnormal_rtol * sigma_max; the covector is the matching
    singular vector.  Normal: the least-squares fit dA(u) ~ dE(u)^* p1 leaves
    a grid L^2 residual <= tol.  The abnormal test is applied first.
    """
    q0 = _check(model, "q0", q0, model.n)
    spi = steps_per_interval
    fine = dyn.integrate_fine(model, q0, u.values, spi)
    res0 = dyn.costate_sweep(model, fine, u.values, np.zeros((1, model.n)), 1.0, spi)
    a = res0.metric_dual - res0.dual[0]  # dA(u) as a dual control
    cols = dyn.costate_sweep(model, fine, u.values, np.eye(model.n), 0.0, spi).dual
    flat = cols.reshape(model.n, -1)
    gram = flat @ flat.T / u.m
    U, sv, _ = np.linalg.svd(gram)
    smax = sv[0] if sv.size else 0.0
    ratio = float(sv[-1] / smax) if smax > 0 else 0.0
    rank = int(np.sum(sv > RANK_RTOL * smax)) if smax > 0 else 0
    p1, *_ = np.linalg.lstsq(flat.T, a.ravel(), rcond=None)
    resid = float(np.sqrt(np.sum((a.ravel() - flat.T @ p1) ** 2) / u.m))
    abnormal = smax == 0.0 or ratio <= abnormal_rtol
    normal = resid <= tol
    if abnormal and (abnormal_first or not normal):
        return ExtremalCertificate("abnormal", U[:, -1].copy(), resid, ratio, sv, rank)
    if normal:
        return ExtremalCertificate("normal", p1, resid, ratio, sv, rank)
    return ExtremalCertificate("unclassified", None, resid, ratio, sv, rank)


def certify_result(model: Model, q0, result: DistanceResult, tol: float = NORMAL_TOL,
                   abnormal_rtol: float = ABNORMAL_RTOL, refine: int = 4) -> ExtremalCertificate:
    """Classify a distance result, on the refined geodesic when shooting supplied a covector.

    A shooting control sampled on a coarse grid carries an O(1/m^2) residual
    floor that can exceed ``tol``; the refined geodesic control does not.
    """
    p0 = _find_p0(result.diagnostics)
    if p0 is None:
        return classify_extremal(model, q0, result.control, tol, abnormal_rtol, result.steps_per_interval)
    phase = ham.geodesic_shoot(model, q0, p0, 1.0, ham.DEFAULT_STEPS)
    u = ham.to_control_path(phase, model, refine)
    return classify_extremal(model, q0, u, tol, abnormal_rtol, steps_per_interval=1)


def _find_p0(diag: dict[str, Any]) -> np.ndarray | None:
    if "p0" in diag:
        return np.asarray(diag["p0"], dtype=float)
    if diag.get("chosen") == "shooting":
        return _find_p0(diag.get("shooting", {}).get("diagnostics", {}))
    return None


# ---------------------------------------------------------------------------
# ball-box exponents

@dataclass
class BallBoxFit:
    exponent: float
    intercept: float
    residual: float
    scales: list[float]
    distances: list[float]
    failures: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"exponent": self.exponent, "intercept": self.intercept, "residual": self.residual,
                "scales": self.scales, "distances": self.distances, "failures": self.failures}


def ballbox_fit(model: Model, q0, direction, scales: Sequence[float], options: BestOptions | None = None,
                solver=None) -> BallBoxFit:
    """Slope of log d(q0, q0 + s direction) against log s."""
    from .parallel import parallel_map

    q0 = _check(model, "q0", q0, model.n)
    direction = _check(model, "direction", direction, model.n)
    scales = [float(s) for s in scales]
    if any(s <= 0 for s in scales) or any(b >= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be positive and decreasing")
    solve = solver or (lambda q1: distance_best(model, q0, q1, options).distance)
    out = parallel_map(_safe_solve, [(solve, q0 + s * direction) for s in scales])
    ok = [(s, d) for s, d in zip(scales, out) if d is not None and np.isfinite(d) and d > 0]
    failed = [s for s, d in zip(scales, out) if d is None or not np.isfinite(d) or d <= 0]
    if len(ok) < 3:
        raise DistanceError(f"ball-box fit needs >= 3 solved scales, got {len(ok)}")
    ls = np.log([s for s, _ in ok])
    ld = np.log([d for _, d in ok])
    (slope, icpt), resid, *_ = np.polyfit(ls, ld, 1, full=True)
    r = float(np.sqrt(resid[0] / len(ls))) if resid.size else 0.0
    return BallBoxFit(float(slope), float(icpt), r, [s for s, _ in ok], [d for _, d in ok], failed)


def _safe_solve(args):
    solve, q1 = args
    try:
        return float(solve(q1))
    except (DistanceError, dyn.IntegrationError) as exc:
        log.warning("distance solve failed at %s: %s", q1, exc)
        return None
