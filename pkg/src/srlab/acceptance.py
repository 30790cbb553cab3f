"""The twelve acceptance checks, runnable from tests and from ``srlab verify``.

Each check returns a ``Criterion`` with the measured quantities next to the
thresholds; nothing here loosens a threshold after the fact.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import controllability as ctl
from . import distance as dist
from . import dynamics as dyn
from . import hamiltonian as ham
from . import products as prod
from .models import engel, engel_product, heisenberg3, heisenberg_product, infinite_heisenberg_trunc

log = logging.getLogger(__name__)


@dataclass
class Criterion:
    number: int
    title: str
    passed: bool
    metrics: dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:2d}: {self.title}"

    def to_dict(self) -> dict[str, Any]:
        return {"number": self.number, "title": self.title, "passed": self.passed, "metrics": self.metrics,
                "seconds": self.seconds}


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def _random_geodesics(model, rng, count, steps=1000):
    out = []
    for _ in range(count):
        q0 = 0.5 * rng.standard_normal(model.n)
        p0 = rng.standard_normal(model.n)
        out.append(ham.geodesic_shoot(model, q0, p0, 1.0, steps))
    return out


# ---------------------------------------------------------------------------

def hamiltonian_conservation(seed: int = 0) -> Criterion:
    rng = np.random.default_rng(seed)
    worst = {}
    for model in (heisenberg3(), engel()):
        w = 0.0
        for ph in _random_geodesics(model, rng, 32):
            h0 = ham._hamiltonian(model, ph.q0, ph.p0)
            w = max(w, ham.hamiltonian_drift(model, ph) / max(1.0, float(h0)))
        worst[model.name] = w
    return Criterion(1, "Hamiltonian drift <= 1e-8 (32 covectors, step 1e-3)", max(worst.values()) <= 1e-8,
                     {"relative_drift": worst, "threshold": 1e-8})


def extremal_consistency(seed: int = 0) -> Criterion:
    rng = np.random.default_rng(seed)
    worst = {}
    for model in (heisenberg3(), engel()):
        worst[model.name] = max(ham.geodesic_extremal_residual(model, ph)
                                for ph in _random_geodesics(model, rng, 32))
    return Criterion(2, "extremal residual (lam=1) of shot geodesics <= 1e-6", max(worst.values()) <= 1e-6,
                     {"extremal_residual": worst, "threshold": 1e-6})


def catalog_models():
    return [heisenberg3(), engel(), heisenberg_product(2), engel_product(2), infinite_heisenberg_trunc(3)]


def differential_oracles(seed: int = 0, samples: int = 100) -> Criterion:
    rng = np.random.default_rng(seed)
    models = catalog_models()
    worst = {"endpoint_diff": 0.0, "adjoint": 0.0, "symplectic": 0.0}
    m, spi = 16, 4
    for k in range(samples):
        model = models[k % len(models)]
        q0 = 0.5 * rng.standard_normal(model.n)
        u = dyn.ControlPath(rng.standard_normal((m, model.h)))
        du = dyn.ControlPath(rng.standard_normal((m, model.h)))
        p1 = rng.standard_normal(model.n)
        an = dyn.endpoint_diff(model, q0, u, du, spi)
        eps = 1e-6 * max(1.0, u.norm()) / du.norm()
        fd = (dyn.endpoint(model, q0, u + du * eps, spi) - dyn.endpoint(model, q0, u + du * (-eps), spi)) / (2 * eps)
        worst["endpoint_diff"] = max(worst["endpoint_diff"], _rel(an, fd))
        _, dual = dyn.endpoint_adjoint(model, q0, u, p1, spi)
        lhs = float(an @ p1)
        rhs = du.inner(dual)
        scale = np.linalg.norm(an) * np.linalg.norm(p1)
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / max(scale, 1e-300))
        q, p = 0.5 * rng.standard_normal(model.n), rng.standard_normal(model.n)
        qdot, pdot = ham.symplectic_gradient(model, q, p)
        h = 1e-5
        eye = np.eye(model.n)
        dhdp = np.array([(ham._hamiltonian(model, q, p + h * e) - ham._hamiltonian(model, q, p - h * e)) / (2 * h)
                         for e in eye])
        dhdq = np.array([(ham._hamiltonian(model, q + h * e, p) - ham._hamiltonian(model, q - h * e, p)) / (2 * h)
                         for e in eye])
        worst["symplectic"] = max(worst["symplectic"], _rel(np.r_[qdot, pdot], np.r_[dhdp, -dhdq]))
    thr = {"endpoint_diff": 1e-5, "adjoint": 1e-8, "symplectic": 1e-6}
    return Criterion(3, "differential oracles (endpoint diff, adjoint identity, symplectic gradient)",
                     all(worst[k] <= thr[k] for k in thr), {"worst": worst, "thresholds": thr, "samples": samples})


def growth_vectors(seed: int = 0) -> Criterion:
    rng = np.random.default_rng(seed)
    cases = [(heisenberg3(), (2, 1), 2), (engel(), (2, 1, 1), 3), (heisenberg_product(3), (6, 3), 2),
             (infinite_heisenberg_trunc(8), (16, 1), 2)]
    got = {}
    ok = True
    for model, want, depth in cases:
        for q in (np.zeros(model.n), rng.standard_normal(model.n)):
            gv = ctl.bracket_span(model, q, depth)
            got.setdefault(model.name, []).append(list(gv.ranks))
            ok &= gv.ranks == want and gv.satisfied
    return Criterion(4, "growth vectors (2,1), (2,1,1), (6,3), (16,1)", bool(ok), {"ranks": got})


BALLBOX_SCALES = (0.2, 0.1, 0.05, 0.025, 0.0125)


def ballbox_exponents(seed: int = 0) -> Criterion:
    opts = dist.BestOptions(direct=dist.DirectOptions(seed=seed))
    H, E = heisenberg3(), engel()
    cases = [("heisenberg x", H, np.array([1.0, 0, 0]), 1.0, 0.02),
             ("heisenberg z", H, np.array([0, 0, 1.0]), 0.5, 0.02),
             ("engel w", E, np.array([0, 0, 0, 1.0]), 1.0 / 3.0, 0.03)]
    res = {}
    ok = True
    for name, model, direction, want, tol in cases:
        fit = dist.ballbox_fit(model, np.zeros(model.n), direction, BALLBOX_SCALES, opts)
        res[name] = {"exponent": fit.exponent, "expected": want, "tolerance": tol, "distances": fit.distances}
        ok &= abs(fit.exponent - want) <= tol
    return Criterion(5, "ball-box exponents 1.00, 0.50, 0.333", bool(ok), res)


def steering_sweep(seed: int = 0) -> Criterion:
    H = heisenberg3()
    amps = [1e-1, 1e-2, 1e-3, 1e-4]
    errs, ratios = [], []
    for s in amps:
        plan = ctl.steer(H, np.zeros(3), np.array([0.0, 0.0, s]), [(), (1,)])
        cert = ctl.steering_cost_certificate(H, plan)
        errs.append(plan.endpoint_error if plan.success else np.inf)
        ratios.append(cert.ratio)
    slope = float(np.polyfit(np.log(amps), np.log(ratios), 1)[0])
    ok = max(errs) <= 1e-6 and abs(slope) <= 0.1
    return Criterion(6, "steering to (0,0,s): error <= 1e-6, log-ratio slope 0 +- 0.1", bool(ok),
                     {"amplitudes": amps, "endpoint_errors": errs, "ratios": ratios, "slope": slope})


def bracket_motion_slopes(seed: int = 0, s: float = 1e-3) -> Criterion:
    rng = np.random.default_rng(seed)
    worst = {}
    for model in (heisenberg3(), engel()):
        q = 0.5 * rng.standard_normal(model.n)
        w = 0.0
        for depth in range(0, 4):
            for word in itertools.product(range(1, model.h + 1), repeat=depth):
                for _ in range(3):
                    u = rng.standard_normal(model.h)
                    u /= np.linalg.norm(u)
                    w = max(w, ctl.motion_slope_error(model, word, u, q, s))
        worst[model.name] = w
    return Criterion(7, "bracket-motion first-order slope error <= 5% at s=1e-3 (depth <= 3)",
                     max(worst.values()) <= 0.05, {"worst_error": worst, "threshold": 0.05})


ORBIT_N = (25, 50, 100, 200, 400, 800)


def orbit_verdicts(seed: int = 0) -> Criterion:
    cache = prod.DistanceCache()
    runs = {
        "z=(n+1)^-2": (prod.orbit_profile, prod.SequenceSpec(1.0, 2.0, "z"), "convergent"),
        "z=(n+1)^-1": (prod.orbit_profile, prod.SequenceSpec(1.0, 1.0, "z"), "divergent-trend"),
        "w=(n+1)^-2": (prod.engel_profile, prod.SequenceSpec(1.0, 2.0, "w"), "convergent"),
        "w=(n+1)^-1": (prod.engel_profile, prod.SequenceSpec(1.0, 1.0, "w"), "divergent-trend"),
    }
    out = {}
    ok = True
    for name, (fn, spec, want) in runs.items():
        pr = fn(spec, ORBIT_N, cache=cache)
        out[name] = {"verdict": pr.verdict, "expected": want, "law": pr.law.get("kind"),
                     "law_r2": pr.law.get("r2"), "tail_exponent": pr.tail_exponent,
                     "partial_sums": pr.partial_sums}
        ok &= pr.verdict == want
        if name == "z=(n+1)^-1":
            ok &= pr.law.get("kind") == "log" and pr.law.get("r2", 0.0) >= 0.99
        if name == "z=(n+1)^-2":
            i, j = ORBIT_N.index(100), ORBIT_N.index(200)
            change = (pr.partial_sums[j] - pr.partial_sums[i]) / pr.partial_sums[j]
            out[name]["relative_change_100_200"] = change
            ok &= change < 0.01
    return Criterion(8, "orbit verdicts (Heisenberg z, Engel w)", bool(ok), out)


def classification(seed: int = 0) -> Criterion:
    rng = np.random.default_rng(seed)
    normal = []
    for model, count in ((heisenberg3(), 4), (engel(), 2)):
        for _ in range(count):
            q0 = 0.5 * rng.standard_normal(model.n)
            p_true = rng.standard_normal(model.n)
            q1 = ham.exp_map(model, q0, p_true)
            bvp = ham.shoot_bvp(model, q0, q1, p_true + 0.05 * rng.standard_normal(model.n), check_extremal=False)
            u = ham.to_control_path(bvp.phase, model, refine=4)
            cert = dist.classify_extremal(model, q0, u, steps_per_interval=1)
            normal.append({"model": model.name, "bvp_success": bvp.success, "kind": cert.kind,
                           "residual": cert.normal_residual})
    abnormal = []
    for N in (1, 2, 4):
        model = heisenberg_product(N)
        cert = dist.classify_extremal(model, np.zeros(model.n), dyn.ControlPath.zeros(64, model.h))
        abnormal.append({"N": N, "kind": cert.kind, "rank": cert.rank})
    H = heisenberg3()
    u = dyn.ControlPath(np.random.default_rng(12345).standard_normal((64, 2)))
    rc = dist.classify_extremal(H, np.zeros(3), u)
    ok = (all(r["bvp_success"] and r["kind"] == "normal" and r["residual"] <= 1e-6 for r in normal)
          and all(r["kind"] == "abnormal" and r["rank"] == 2 * r["N"] for r in abnormal)
          and rc.kind == "unclassified")
    return Criterion(9, "classification: shot -> normal, zero -> abnormal (rank 2N), random -> unclassified", bool(ok),
                     {"normal": normal, "abnormal": abnormal,
                      "random": {"kind": rc.kind, "residual": rc.normal_residual, "ratio": rc.abnormal_ratio}})


def elusive_trend(seed: int = 0) -> Criterion:
    rows = prod.elusive_spectrum([1, 2, 4, 8, 16])
    smin = [r.sigma_min for r in rows]
    ok = all(b < a for a, b in zip(smin, smin[1:]))
    return Criterion(10, "sigma_min strictly decreasing over N = 1, 2, 4, 8, 16", bool(ok),
                     {"N": [r.N for r in rows], "sigma_min": smin, "rank": [r.rank for r in rows]})


def metric_axioms(seed: int = 0, triples: int = 20) -> Criterion:
    rng = np.random.default_rng(seed)
    H = heisenberg3()
    opts = dist.BestOptions(direct=dist.DirectOptions(seed=seed))
    tol = dist.TOL_EP

    def d(a, b):
        return dist.distance_best(H, a, b, opts).distance

    tri, sym = [], []
    for _ in range(triples):
        a, b, c = (0.5 * rng.standard_normal(3) for _ in range(3))
        ab, bc, ac, ba = d(a, b), d(b, c), d(a, c), d(b, a)
        tri.append(ac - (ab + bc))
        sym.append(abs(ab - ba) / max(ab, ba))
    ok = max(tri) <= 3 * tol and max(sym) <= 0.02
    return Criterion(11, "triangle inequality (slack 3 tol_ep) and symmetry (2%) on 20 triples", bool(ok),
                     {"max_triangle_excess": max(tri), "max_symmetry_gap": max(sym), "tol_ep": tol})


def local_minimality(seed: int = 0) -> Criterion:
    rng = np.random.default_rng(seed)
    H = heisenberg3()
    reports = []
    for k in range(8):
        q0 = 0.5 * rng.standard_normal(3)
        p0 = np.r_[rng.standard_normal(2), rng.uniform(-3.0, 3.0)]
        ph = ham.geodesic_shoot(H, q0, p0, 1.0, 256)
        rep = ham.verify_local_minimality(H, q0, ph, trials=64, seed=seed + k)
        reports.append({"passed": rep.passed, "min_change": rep.min_action_change, "tolerance": rep.tolerance,
                        "max_endpoint_error": rep.max_endpoint_error})
    return Criterion(12, "local minimality on 8 geodesics x 64 perturbations",
                     all(r["passed"] for r in reports), {"geodesics": reports})


CRITERIA: dict[int, Callable[..., Criterion]] = {
    1: hamiltonian_conservation,
    2: extremal_consistency,
    3: differential_oracles,
    4: growth_vectors,
    5: ballbox_exponents,
    6: steering_sweep,
    7: bracket_motion_slopes,
    8: orbit_verdicts,
    9: classification,
    10: elusive_trend,
    11: metric_axioms,
    12: local_minimality,
}


def run_criterion(number: int, seed: int = 0) -> Criterion:
    t = time.perf_counter()
    try:
        c = CRITERIA[number](seed=seed)
    except Exception as exc:  # a crashing check is a failed check
        log.exception("criterion %d raised", number)
        c = Criterion(number, CRITERIA[number].__name__, False, {"error": f"{type(exc).__name__}: {exc}"})
    c.seconds = time.perf_counter() - t
    return c


def run_all(numbers=None, seed: int = 0) -> list[Criterion]:
    return [run_criterion(k, seed) for k in (numbers or sorted(CRITERIA))]
