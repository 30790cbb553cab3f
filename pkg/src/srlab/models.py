"""Chart-level sub-Riemannian structures: anchor, metric and the built-in catalog.

A structure on a chart of R^n is a frame of h polynomial vector fields (the
columns of the anchor xi_q, an n x h matrix) together with a metric g_q on the
control space R^h.  With no metric given the frame is orthonormal.

All evaluations broadcast over leading batch axes: ``q`` has shape (..., n),
controls (..., h).
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .polynomial import PolyField, PolyTable

RANGE_RTOL = 1e-9


class DimensionError(ValueError):
    pass


class ModelError(ValueError):
    """The model violates its own contract (e.g. a metric that is not SPD)."""


class Model:
    """A sub-Riemannian structure (anchor + metric) on one chart.

    Parameters
    ----------
    name:
        Identifier used in reports.
    frame:
        h polynomial vector fields; column a of the anchor is ``frame[a]``.
    metric:
        Optional polynomial table of shape (h, h).  ``None`` means identity.
    weights:
        Optional dilation weights of the coordinates (Carnot models only).
    """

    def __init__(self, name: str, frame: Sequence[PolyField], metric: PolyTable | None = None,
                 weights: Sequence[int] | None = None):
        if not frame:
            raise ModelError("a model needs at least one frame field")
        n = frame[0].n
        if any(f.n != n for f in frame):
            raise ModelError("frame fields live in different dimensions")
        self.name = name
        self.frame = list(frame)
        self.n = n
        self.h = len(frame)
        terms = [((i, a), e, c) for a, f in enumerate(frame) for i, comp in enumerate(f.components)
                 for e, c in comp.items()]
        self._anchor = PolyTable.from_terms(n, (n, self.h), terms)
        if metric is not None and metric.shape != (self.h, self.h):
            raise ModelError(f"metric table has shape {metric.shape}, expected {(self.h, self.h)}")
        self._metric = metric
        self.weights = None if weights is None else tuple(int(w) for w in weights)

    def __repr__(self) -> str:
        return f"Model({self.name!r}, n={self.n}, h={self.h})"

    @property
    def unit_metric(self) -> bool:
        return self._metric is None

    # anchor ---------------------------------------------------------------
    def anchor(self, q: np.ndarray) -> np.ndarray:
        return self._anchor(q)

    def anchor_jac(self, q: np.ndarray) -> np.ndarray:
        """d(xi_q)_{ia}/dq_j, shape (..., n, h, n)."""
        return self._anchor.jac(q)

    def drift(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """xi_q u, broadcasting q (..., n) against u (..., h)."""
        mono = self._anchor.monomials(q)
        cu = np.einsum("tia,...a->...ti", self._anchor.coefs, u)
        return np.einsum("...t,...ti->...i", mono, cu)

    def drift_jac(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """d_q(xi_q u) as an (..., n, n) matrix."""
        dm = self._anchor.monomial_jac(q)
        cu = np.einsum("tia,...a->...ti", self._anchor.coefs, u)
        return np.einsum("...ti,...tj->...ij", cu, dm)

    def anchor_deriv(self, q: np.ndarray, u: np.ndarray, dq: np.ndarray) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.drift_jac(q, u), dq)

    # metric ---------------------------------------------------------------
    def metric(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self._metric is None:
            return np.broadcast_to(np.eye(self.h), q.shape[:-1] + (self.h, self.h)).copy()
        return self._metric(q)

    def metric_jac(self, q: np.ndarray) -> np.ndarray:
        """d(g_q)_{ab}/dq_j, shape (..., h, h, n)."""
        q = np.asarray(q, dtype=float)
        if self._metric is None:
            return np.zeros(q.shape[:-1] + (self.h, self.h, self.n))
        return self._metric.jac(q)

    def metric_deriv(self, q, u, v, dq) -> np.ndarray:
        return np.einsum("...abj,...a,...b,...j->...", self.metric_jac(q), u, v, dq)

    def norm2(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """g_q(u, u), batched."""
        if self._metric is None:
            return np.einsum("...a,...a->...", u, u)
        return np.einsum("...a,...ab,...b->...", u, self.metric(q), u)

    def lower(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """The musical map u -> g_q(u, .)."""
        if self._metric is None:
            return np.array(u, dtype=float, copy=True)
        return np.einsum("...ab,...b->...a", self.metric(q), u)

    def raise_(self, q: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Inverse musical map (batched Cholesky solve)."""
        if self._metric is None:
            return np.array(w, dtype=float, copy=True)
        g = self.metric(q)
        try:
            chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise ModelError(f"metric of {self.name} is not positive definite") from exc
        y = np.linalg.solve(chol, np.asarray(w, dtype=float)[..., None])
        return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]

    def dilate(self, q: np.ndarray, lam: float) -> np.ndarray:
        if self.weights is None:
            raise ModelError(f"{self.name} has no dilation structure")
        return np.asarray(q, dtype=float) * float(lam) ** np.asarray(self.weights, dtype=float)

    def homogeneous_norm(self, q: np.ndarray) -> float:
        """max_i |q_i|^(1/w_i); the dilation by 1/norm sends q to the unit box."""
        if self.weights is None:
            raise ModelError(f"{self.name} has no dilation structure")
        q = np.asarray(q, dtype=float)
        return float(np.max(np.abs(q) ** (1.0 / np.asarray(self.weights, dtype=float))))


# ---------------------------------------------------------------------------
# pointwise operations

def _check(model: Model, name: str, x: np.ndarray, size: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != size:
        raise DimensionError(f"{name} must be a vector of length {size} for {model.name}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


def anchor_apply(model: Model, q, u) -> np.ndarray:
    q = _check(model, "q", q, model.n)
    u = _check(model, "u", u, model.h)
    return model.drift(q, u)


def anchor_adjoint(model: Model, q, p) -> np.ndarray:
    """xi_q^* p: the dual-control vector with <xi_q u, p> = <u, xi_q^* p>."""
    q = _check(model, "q", q, model.n)
    p = _check(model, "p", p, model.n)
    return model.anchor(q).T @ p


def metric_solve(model: Model, q, w) -> np.ndarray:
    """The control u with g_q(u, .) = w."""
    q = _check(model, "q", q, model.n)
    w = _check(model, "w", w, model.h)
    return model.raise_(q, w)


def seminorm(model: Model, q, w, rtol: float = RANGE_RTOL) -> float:
    """min sqrt(g_q(u,u)) over xi_q u = w; +inf when w is not horizontal."""
    q = _check(model, "q", q, model.n)
    w = _check(model, "w", w, model.n)
    wn = float(np.linalg.norm(w))
    if wn == 0.0:
        return 0.0
    xi = model.anchor(q)
    try:
        chol = np.linalg.cholesky(model.metric(q))
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"metric of {model.name} is not positive definite") from exc
    # u = L^{-T} v turns the g-norm into the euclidean norm of v
    b = np.linalg.solve(chol, xi.T).T  # xi L^{-T}
    v, *_ = np.linalg.lstsq(b, w, rcond=None)
    if np.linalg.norm(b @ v - w) > rtol * wn:
        return float("inf")
    return float(np.linalg.norm(v))


def least_norm_control(model: Model, q, w) -> np.ndarray:
    """g-least-norm solution of xi_q u = w in the least-squares sense."""
    q = np.asarray(q, dtype=float)
    xi = model.anchor(q)
    chol = np.linalg.cholesky(model.metric(q))
    b = np.linalg.solve(chol, xi.T).T
    v, *_ = np.linalg.lstsq(b, np.asarray(w, dtype=float), rcond=None)
    return np.linalg.solve(chol.T, v)


# ---------------------------------------------------------------------------
# catalog

def _x(n, j):
    return PolyField.unit(n, j)


def _zero(n):
    return (0,) * n


def _heisenberg_fields(n: int, ix: int, iy: int, iz: int, suffix: str = "") -> tuple[PolyField, PolyField]:
    c = _zero(n)
    X = PolyField.from_terms(n, [(ix, c, 1.0), (iz, _x(n, iy), -0.5)], label="X" + suffix)
    Y = PolyField.from_terms(n, [(iy, c, 1.0), (iz, _x(n, ix), 0.5)], label="Y" + suffix)
    return X, Y


def heisenberg3() -> Model:
    """(x, y, z) with X = d_x - y/2 d_z and Y = d_y + x/2 d_z, orthonormal."""
    return Model("heisenberg3", _heisenberg_fields(3, 0, 1, 2), weights=(1, 1, 2))


def heisenberg_product(N: int) -> Model:
    """N independent copies of heisenberg3 on R^{3N}; coordinates (x1,y1,z1,x2,...)."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    n = 3 * N
    frame: list[PolyField] = []
    for k in range(N):
        frame.extend(_heisenberg_fields(n, 3 * k, 3 * k + 1, 3 * k + 2, suffix=str(k + 1)))
    return Model(f"heisenberg_product({N})", frame, weights=(1, 1, 2) * N)


def _engel_fields(n: int, o: int, suffix: str = "") -> tuple[PolyField, PolyField]:
    c = _zero(n)
    x = _x(n, o)
    x2 = tuple(2 * e for e in x)
    X1 = PolyField.from_terms(n, [(o, c, 1.0)], label="X1" + suffix)
    X2 = PolyField.from_terms(n, [(o + 1, c, 1.0), (o + 2, x, 1.0), (o + 3, x2, 0.5)], label="X2" + suffix)
    return X1, X2


def engel() -> Model:
    """(x, y, z, w) with X1 = d_x and X2 = d_y + x d_z + x^2/2 d_w; growth (2, 1, 1)."""
    return Model("engel", _engel_fields(4, 0), weights=(1, 1, 2, 3))


def engel_product(N: int) -> Model:
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    n = 4 * N
    frame: list[PolyField] = []
    for k in range(N):
        frame.extend(_engel_fields(n, 4 * k, suffix=f"_{k + 1}"))
    return Model(f"engel_product({N})", frame, weights=(1, 1, 2, 3) * N)


def infinite_heisenberg_trunc(N: int) -> Model:
    """Coordinates (x1, y1, ..., xN, yN, z); X_k = d_xk - y_k/2 d_z, Y_k = d_yk + x_k/2 d_z."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    n = 2 * N + 1
    frame: list[PolyField] = []
    for k in range(N):
        frame.extend(_heisenberg_fields(n, 2 * k, 2 * k + 1, n - 1, suffix=str(k + 1)))
    return Model(f"infinite_heisenberg_trunc({N})", frame, weights=(1,) * (2 * N) + (2,))


def custom(definition: Mapping[str, Any]) -> Model:
    """Model from a JSON-style definition.

    ::

        {"name": "...", "n": 3, "h": 2,
         "frame": [[{"component": 0, "coef": 1.0, "powers": [0, 0, 0]}, ...], ...],
         "metric": [[...], ...]                      # optional constant SPD matrix
                   or [{"row": 0, "col": 0, "coef": 1.0, "powers": [...]}, ...],
         "weights": [1, 1, 2]}                       # optional
    """
    known = {"name", "n", "h", "frame", "metric", "weights"}
    extra = set(definition) - known
    if extra:
        raise ValueError(f"unknown keys in model definition: {sorted(extra)}")
    try:
        n = int(definition["n"])
        fields_def = definition["frame"]
    except KeyError as exc:
        raise ValueError(f"model definition is missing {exc.args[0]!r}") from None
    h = int(definition.get("h", len(fields_def)))
    if len(fields_def) != h:
        raise ValueError(f"h={h} but {len(fields_def)} frame fields given")
    frame = []
    for a, terms in enumerate(fields_def):
        parsed = []
        for t in terms:
            powers = tuple(int(e) for e in t.get("powers", [0] * n))
            parsed.append((int(t["component"]), powers, float(t["coef"])))
        frame.append(PolyField.from_terms(n, parsed, label=f"X{a + 1}"))
    metric = None
    mdef = definition.get("metric")
    if mdef is not None:
        if mdef and isinstance(mdef[0], (list, tuple)):
            g = np.asarray(mdef, dtype=float)
            if g.shape != (h, h) or not np.allclose(g, g.T):
                raise ValueError("constant metric must be a symmetric h x h matrix")
            metric = PolyTable(n, (h, h), np.zeros((1, n), dtype=np.int64), g[None])
        else:
            mterms = []
            for t in mdef:
                r, c = int(t["row"]), int(t["col"])
                powers = tuple(int(e) for e in t.get("powers", [0] * n))
                mterms.append(((r, c), powers, float(t["coef"])))
                if r != c:
                    mterms.append(((c, r), powers, float(t["coef"])))
            metric = PolyTable.from_terms(n, (h, h), mterms)
    return Model(str(definition.get("name", "custom")), frame, metric, definition.get("weights"))


CATALOG = {
    "heisenberg3": heisenberg3,
    "heisenberg_product": heisenberg_product,
    "engel": engel,
    "engel_product": engel_product,
    "infinite_heisenberg_trunc": infinite_heisenberg_trunc,
}

_CALL = re.compile(r"^\s*([a-z_0-9]+)\s*(?:\(\s*(\d+)\s*\))?\s*$")


def build_model(spec: str | Mapping[str, Any] | Model) -> Model:
    """Resolve ``"engel"``, ``"heisenberg_product(3)"``, ``{"name": ..., "N": 3}``,
    ``{"name": "custom", "definition": {...}}`` or ``{"name": "custom", "path": "m.json"}``."""
    if isinstance(spec, Model):
        return spec
    if isinstance(spec, str):
        m = _CALL.match(spec)
        if not m:
            raise ValueError(f"cannot parse model spec {spec!r}")
        name, arg = m.group(1), m.group(2)
        params: dict[str, Any] = {} if arg is None else {"N": int(arg)}
    else:
        params = dict(spec)
        name = params.pop("name", None)
    if name == "custom":
        if "path" in params:
            return custom(json.loads(Path(params["path"]).read_text()))
        if "definition" in params:
            return custom(params["definition"])
        raise ValueError("custom model needs 'path' or 'definition'")
    if name not in CATALOG:
        raise ValueError(f"unknown model {name!r}; known: {sorted(CATALOG)} and custom")
    try:
        return CATALOG[name](**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {name}: {params}") from exc


def check_model(model: Model, rng: np.random.Generator, samples: int = 16, scale: float = 1.0,
                step: float = 1e-5) -> dict[str, float]:
    """Probabilistic contract check: SPD metric, derivative/FD agreement, duality.

    Returns the worst observed relative errors and the smallest metric eigenvalue.
    """
    worst = {"min_metric_eig": np.inf, "anchor_deriv": 0.0, "metric_deriv": 0.0, "duality": 0.0}
    for _ in range(samples):
        q = scale * rng.standard_normal(model.n)
        u, v = rng.standard_normal(model.h), rng.standard_normal(model.h)
        p, dq = rng.standard_normal(model.n), rng.standard_normal(model.n)
        g = model.metric(q)
        worst["min_metric_eig"] = min(worst["min_metric_eig"], float(np.linalg.eigvalsh(0.5 * (g + g.T)).min()))
        fd = (model.drift(q + step * dq, u) - model.drift(q - step * dq, u)) / (2 * step)
        an = model.anchor_deriv(q, u, dq)
        worst["anchor_deriv"] = max(worst["anchor_deriv"], _rel(an, fd))
        gp = model.metric(q + step * dq)
        gm = model.metric(q - step * dq)
        fdg = (u @ gp @ v - u @ gm @ v) / (2 * step)
        ang = float(model.metric_deriv(q, u, v, dq))
        worst["metric_deriv"] = max(worst["metric_deriv"], abs(ang - fdg) / max(1.0, abs(fdg)))
        lhs = float(anchor_apply(model, q, u) @ p)
        rhs = float(u @ anchor_adjoint(model, q, p))
        worst["duality"] = max(worst["duality"], abs(lhs - rhs) / max(1e-300, abs(lhs), abs(rhs), 1.0))
    return worst


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))
