"""Finite-N surrogates for infinite products of Heisenberg and Engel groups.

Distances on a product of independent structures satisfy d^2 = sum_n d_n^2,
so a point of the product is handled one component at a time.  Component
distances use dilation homogeneity: d(q) = lam * d(delta_{1/lam} q) with
lam the homogeneous norm of q, so only points on the unit box are ever
solved.  The homogeneity is checked first by a regression on raw solves.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import distance as dist
from . import dynamics as dyn
from .io import write_json
from .models import Model, engel, heisenberg3, heisenberg_product

log = logging.getLogger(__name__)

QUALITIES = ("fast", "oracle")
R2_HOMOGENEITY = 0.999
R2_VERDICT = 0.99
MAX_PRODUCT_DIM = 600


class HomogeneityError(RuntimeError):
    """The homogeneity regression that justifies dilation scaling failed."""


def solver_options(quality: str) -> dist.BestOptions:
    if quality == "fast":
        return dist.BestOptions()
    if quality == "oracle":
        return dist.BestOptions(direct=dist.DirectOptions(m=2048, steps_per_interval=2, mu_stop=1e9,
                                                          steps_per_stage=400),
                                shoot_m=2048)
    raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")


class DistanceCache:
    """Memo of unit-box component distances, optionally persisted as JSON.

    Keys are ``model|quality|coords`` with coordinates rounded to 1e-12.
    ``commit`` rewrites the file atomically; the in-memory map is the only
    writer.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.data: dict[str, float] = {}
        if self.path and self.path.exists():
            self.data = {k: float(v) for k, v in json.loads(self.path.read_text()).items()}
        self.dirty = False

    @staticmethod
    def key(model: Model, quality: str, q: np.ndarray) -> str:
        r = np.round(np.asarray(q, dtype=float), 12) + 0.0  # +0.0 folds -0.0 into 0.0
        return f"{model.name}|{quality}|" + ",".join(f"{x:.12f}" for x in r)

    def get(self, key: str) -> float | None:
        return self.data.get(key)

    def put(self, key: str, value: float) -> None:
        self.data[key] = float(value)
        self.dirty = True

    def commit(self) -> None:
        if self.path and self.dirty:
            write_json(self.path, self.data)
            self.dirty = False


_MEMORY = DistanceCache()


def _raw_distance(model: Model, q: np.ndarray, quality: str) -> float:
    return dist.distance_best(model, np.zeros(model.n), q, solver_options(quality)).distance


def component_distance(model: Model, q, quality: str = "fast", cache: DistanceCache | None = None) -> float:
    """d(0, q) on a Carnot model via the unit-box representative of q."""
    if quality not in QUALITIES:
        raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")
    q = np.asarray(q, dtype=float)
    lam = model.homogeneous_norm(q)
    if lam == 0.0:
        return 0.0
    return lam * cached_distance(model, model.dilate(q, 1.0 / lam), quality, cache)


def cached_distance(model: Model, q, quality: str = "fast", cache: DistanceCache | None = None) -> float:
    """Memoised d(0, q) without any rescaling."""
    cache = cache if cache is not None else _MEMORY
    key = DistanceCache.key(model, quality, q)
    d = cache.get(key)
    if d is None:
        d = _raw_distance(model, np.asarray(q, dtype=float), quality)
        cache.put(key, d)
    return d


def heisenberg_component_distance(x: float, y: float, z: float, quality: str = "fast",
                                  cache: DistanceCache | None = None) -> float:
    return component_distance(_heis(), np.array([x, y, z], dtype=float), quality, cache)


def engel_component_distance(x: float, y: float, z: float, w: float, quality: str = "fast",
                             cache: DistanceCache | None = None) -> float:
    return component_distance(_engel(), np.array([x, y, z, w], dtype=float), quality, cache)


_MODELS: dict[str, Model] = {}


def _heis() -> Model:
    return _MODELS.setdefault("heisenberg3", heisenberg3())


def _engel() -> Model:
    return _MODELS.setdefault("engel", engel())


def product_distance(model: Model, components: np.ndarray, quality: str = "fast",
                     cache: DistanceCache | None = None) -> float:
    """sqrt(sum_n d(0, q_n)^2) for component points q_n (rows)."""
    comps = np.atleast_2d(np.asarray(components, dtype=float))
    return float(np.sqrt(sum(component_distance(model, c, quality, cache) ** 2 for c in comps)))


@dataclass
class HomogeneityFit:
    slope: float
    expected: float
    r2: float
    scales: list[float]
    distances: list[float]

    @property
    def passed(self) -> bool:
        return self.r2 >= R2_HOMOGENEITY and abs(self.slope - self.expected) <= 0.02 * self.expected


def homogeneity_regression(model: Model, point, scales: Sequence[float] = (1.0, 0.5, 0.25),
                           quality: str = "fast",
                           solver: Callable[[Model, np.ndarray, str], float] | None = None) -> HomogeneityFit:
    """Fit log d(0, delta_s point) against log s on raw (unscaled) solves; expect slope 1."""
    solve = solver or _raw_distance
    point = np.asarray(point, dtype=float)
    ds = [solve(model, model.dilate(point, s), quality) for s in scales]
    x, y = np.log(scales), np.log(ds)
    slope, icpt = np.polyfit(x, y, 1)
    return HomogeneityFit(float(slope), 1.0, _r2(x, y, slope * x + icpt), list(map(float, scales)),
                          list(map(float, ds)))


def _r2(x, y, fit) -> float:
    ss = float(np.sum((y - np.mean(y)) ** 2))
    return 1.0 if ss == 0.0 else 1.0 - float(np.sum((y - fit) ** 2)) / ss


# ---------------------------------------------------------------------------
# orbit profiles

@dataclass
class SequenceSpec:
    """a_n = c (n+1)^(-p) placed in one coordinate of every component."""

    c: float
    p: float
    component: str
    family: str = "power"

    def __post_init__(self):
        if self.family != "power":
            raise ValueError(f"unknown sequence family {self.family!r}")
        if not np.isfinite(self.c):
            raise ValueError("c must be finite")
        if not self.p > 0:
            raise ValueError("p must be > 0")

    def terms(self, N: int) -> np.ndarray:
        return self.c * (np.arange(N) + 1.0) ** (-self.p)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "c": self.c, "p": self.p, "component": self.component}


@dataclass
class OrbitProfile:
    N: list[int]
    partial_sums: list[float]
    verdict: str  # convergent | divergent-trend | inconclusive
    law: dict[str, Any]
    tail_exponent: float | None
    tail_r2: float | None
    spec: SequenceSpec | None = None
    homogeneity: HomogeneityFit | None = None
    terms: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"N": self.N, "partial_sums": self.partial_sums, "verdict": self.verdict, "law": self.law,
                "tail_exponent": self.tail_exponent, "tail_r2": self.tail_r2,
                "spec": None if self.spec is None else self.spec.to_dict(),
                "homogeneity": None if self.homogeneity is None else {
                    "slope": self.homogeneity.slope, "r2": self.homogeneity.r2,
                    "scales": self.homogeneity.scales, "distances": self.homogeneity.distances}}

    def rows(self) -> list[list[float]]:
        return [[n, s] for n, s in zip(self.N, self.partial_sums)]


def verdict(N_list: Sequence[int], sq_terms: np.ndarray, r2_min: float = R2_VERDICT) -> tuple[str, dict, float | None, float | None]:
    """Classify partial sums of nonnegative terms t_n (n = 0 .. max N - 1).

    The tail (last 7/8 of the terms on a log grid) is fitted by t_n ~ a (n+1)^-alpha.
    alpha > 1.05 gives "convergent"; otherwise the partial sums are fitted by
    a + b log N (alpha within 0.05 of 1) or a + b N^(1 - alpha), and a fit with
    R^2 >= r2_min gives "divergent-trend".  Anything else is "inconclusive".
    """
    t = np.asarray(sq_terms, dtype=float)
    N = np.asarray(N_list, dtype=int)
    S = np.array([t[:k].sum() for k in N])
    if np.all(t == 0.0):
        return "convergent", {"kind": "zero", "limit": 0.0}, None, None
    n = np.unique(np.geomspace(max(1, len(t) // 8), len(t), 40).astype(int)) - 1
    n = n[t[n] > 0]
    if n.size < 3:
        return "inconclusive", {"kind": "none", "reason": "too few positive tail terms"}, None, None
    x, y = np.log(n + 1.0), np.log(t[n])
    slope, icpt = np.polyfit(x, y, 1)
    alpha = float(-slope)
    r2 = _r2(x, y, slope * x + icpt)
    if r2 < r2_min:
        return "inconclusive", {"kind": "none", "reason": f"tail fit R^2 {r2:.4f}"}, alpha, r2
    rel = [float((S[i + 1] - S[i]) / S[i + 1]) if S[i + 1] > 0 else 0.0 for i in range(len(S) - 1)]
    if alpha > 1.05:
        # a (n+1)^-alpha summed beyond max N
        tail = float(np.exp(icpt) * len(t) ** (1.0 - alpha) / (alpha - 1.0))
        return "convergent", {"kind": "summable-power", "alpha": alpha, "estimated_limit": float(S[-1] + tail),
                              "relative_increments": rel}, alpha, r2
    if abs(alpha - 1.0) <= 0.05:
        X = np.log(N.astype(float))
        kind, params = "log", {}
    else:
        X = N.astype(float) ** (1.0 - alpha)
        kind, params = "power", {"exponent": 1.0 - alpha}
    b, a = np.polyfit(X, S, 1)
    fit_r2 = _r2(X, S, a + b * X)
    law = {"kind": kind, "a": float(a), "b": float(b), "r2": fit_r2, **params, "relative_increments": rel}
    if fit_r2 >= r2_min and b > 0:
        return "divergent-trend", law, alpha, r2
    return "inconclusive", law, alpha, r2


_COMPONENTS = {
    "heisenberg": ("x", "y", "z"),
    "engel": ("x", "y", "z", "w"),
}


def _profile(model: Model, coords: tuple[str, ...], spec: SequenceSpec, N_list: Sequence[int], quality: str,
             cache: DistanceCache | None, check_homogeneity: bool, solver) -> OrbitProfile:
    N_list = [int(n) for n in N_list]
    if not N_list or any(b <= a for a, b in zip(N_list, N_list[1:])) or N_list[0] < 1:
        raise ValueError("N_list must be positive and increasing")
    if spec.component not in coords:
        raise ValueError(f"component must be one of {coords}, got {spec.component!r}")
    j = coords.index(spec.component)
    a = spec.terms(N_list[-1])
    homog = None
    if check_homogeneity and np.any(a != 0):
        e = np.zeros(model.n)
        e[j] = 1.0
        raw = solver or (lambda mdl, q, qual: cached_distance(mdl, q, qual, cache))
        homog = homogeneity_regression(model, e, quality=quality, solver=raw)
        if not homog.passed:
            raise HomogeneityError(f"homogeneity regression failed: slope {homog.slope:.4f}, R^2 {homog.r2:.6f}")
    pts = np.zeros((len(a), model.n))
    pts[:, j] = a
    if solver is None:
        d = np.array([component_distance(model, q, quality, cache) for q in pts])
    else:
        d = np.array([_scaled(model, q, quality, solver) for q in pts])
    sq = d ** 2
    v, law, alpha, r2 = verdict(N_list, sq)
    S = [float(sq[:k].sum()) for k in N_list]
    if cache is not None:
        cache.commit()
    return OrbitProfile(N_list, S, v, law, alpha, r2, spec, homog, sq)


def _scaled(model, q, quality, solver):
    lam = model.homogeneous_norm(q)
    return 0.0 if lam == 0 else lam * solver(model, model.dilate(q, 1.0 / lam), quality)


def orbit_profile(spec: SequenceSpec, N_list: Sequence[int], quality: str = "fast",
                  cache: DistanceCache | None = None, check_homogeneity: bool = True,
                  solver=None) -> OrbitProfile:
    """Partial sums of d_H(0, q_n)^2 for the Heisenberg components q_n and their verdict."""
    return _profile(_heis(), _COMPONENTS["heisenberg"], spec, N_list, quality, cache, check_homogeneity, solver)


def engel_profile(spec: SequenceSpec, N_list: Sequence[int], quality: str = "fast",
                  cache: DistanceCache | None = None, check_homogeneity: bool = True,
                  solver=None) -> OrbitProfile:
    """As ``orbit_profile`` for Engel components (x, y, z, w)."""
    return _profile(_engel(), _COMPONENTS["engel"], spec, N_list, quality, cache, check_homogeneity, solver)


# ---------------------------------------------------------------------------
# spectrum of the endpoint adjoint on products

def circle_control(m: int = 64) -> dyn.ControlPath:
    """u(t) = (cos 2 pi t, sin 2 pi t), interval-averaged."""
    return dyn.ControlPath.from_function(lambda t: np.array([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)]), m)


def lift_control(u: dyn.ControlPath, amplitudes: Sequence[float]) -> dyn.ControlPath:
    """Run the two-component control u in every block n with weight amplitudes[n]."""
    a = np.asarray(amplitudes, dtype=float)
    if u.h != 2:
        raise ValueError("the base control must have two components")
    return dyn.ControlPath(np.concatenate([ak * u.values for ak in a], axis=1))


@dataclass
class SpectrumRow:
    N: int
    sigma_max: float
    sigma_min: float
    rank: int
    leading: list[float]
    trailing: list[float]


def elusive_spectrum(N_list: Sequence[int], u: dyn.ControlPath | None = None, k: int = 3,
                     amplitudes: Callable[[int], np.ndarray] | str = "harmonic",
                     steps_per_interval: int = dyn.DEFAULT_SPI) -> list[SpectrumRow]:
    """Singular values of the endpoint-adjoint Gram on heisenberg_product(N) at the lifted control.

    ``amplitudes`` gives the block weights before l^2 normalisation:
    "harmonic" is (n+1)^-1, "zero" the zero control, "flat" all ones.
    """
    u = u if u is not None else circle_control()
    rows = []
    for N in N_list:
        N = int(N)
        if 3 * N > MAX_PRODUCT_DIM:
            raise MemoryError(f"heisenberg_product({N}) exceeds the dimension guard 3N <= {MAX_PRODUCT_DIM}")
        if callable(amplitudes):
            a = np.asarray(amplitudes(N), dtype=float)
        elif amplitudes == "harmonic":
            a = 1.0 / (np.arange(N) + 1.0)
        elif amplitudes == "flat":
            a = np.ones(N)
        elif amplitudes == "zero":
            a = np.zeros(N)
        else:
            raise ValueError(f"unknown amplitude family {amplitudes!r}")
        nrm = np.linalg.norm(a)
        if nrm > 0:
            a = a / nrm
        model = heisenberg_product(N)
        gram, _ = dyn.adjoint_gram(model, np.zeros(model.n), lift_control(u, a), steps_per_interval)
        sv = np.linalg.svd(gram, compute_uv=False)
        rank = int(np.sum(sv > dist.RANK_RTOL * sv[0])) if sv[0] > 0 else 0
        rows.append(SpectrumRow(N, float(sv[0]), float(sv[-1]), rank, sv[:k].tolist(), sv[-k:].tolist()))
    return rows
