"""Lie brackets, growth vectors and commutator-flow steering.

Words are tuples of 1-based frame labels.  The bracket field of a word is
right-nested: ``X_(i1, i2, ..., ik) = [X_i1, [X_i2, [... X_ik]]]`` and the
bracket convention is ``[A, B] = dB.A - dA.B``.

Flows are realised as horizontal arcs: an arc ``w`` (a vector in R^h) is the
constant control ``w`` applied for unit time, i.e. the time-1 flow of the
field ``X(w) = xi w``.  Concatenated arcs form admissible controls whose
length can be measured.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import dynamics as dyn
from .models import Model, ModelError, _check
from .polynomial import PolyField

log = logging.getLogger(__name__)

RANK_RTOL = 1e-9
FD_STEP = 1e-5
ARC_STEPS = 64
TOL_STEER = 1e-8
MAX_SUBDIVISIONS = 16

Word = tuple[int, ...]


class VectorField(Protocol):
    def __call__(self, q: np.ndarray) -> np.ndarray: ...

    def jac(self, q: np.ndarray) -> np.ndarray: ...


class FDField:
    """Wrap a plain callable as a VectorField with a central-difference Jacobian."""

    def __init__(self, f: Callable[[np.ndarray], np.ndarray], step: float = FD_STEP, label: str = ""):
        self.f = f
        self.step = step
        self.label = label

    def __call__(self, q):
        return np.asarray(self.f(np.asarray(q, dtype=float)), dtype=float)

    def jac(self, q):
        q = np.asarray(q, dtype=float)
        n = q.shape[-1]
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = self.step
            cols.append((self(q + e) - self(q - e)) / (2 * self.step))
        return np.stack(cols, axis=-1)


def lie_bracket(X: VectorField, Y: VectorField, q) -> np.ndarray:
    """[X, Y](q) = dY(q) X(q) - dX(q) Y(q)."""
    q = np.asarray(q, dtype=float)
    return Y.jac(q) @ X(q) - X.jac(q) @ Y(q)


def _frame(model: Model) -> list[PolyField]:
    frame = getattr(model, "frame", None)
    if not frame:
        raise ModelError(f"{getattr(model, 'name', model)!r} has no frame to bracket")
    return frame


def word_field(model: Model, word: Word) -> PolyField:
    """The right-nested bracket field X_I of a word (exact for polynomial frames)."""
    frame = _frame(model)
    if not word:
        raise ValueError("the empty word has no bracket field")
    for i in word:
        if not 1 <= i <= model.h:
            raise ValueError(f"word {word} indexes outside 1..{model.h}")
    out = frame[word[-1] - 1]
    for i in reversed(word[:-1]):
        out = frame[i - 1].bracket(out)
    return out


# ---------------------------------------------------------------------------
# growth vectors

@dataclass
class GrowthVector:
    """Rank increments of the flag Delta^1 c Delta^2 c ... at one point."""

    ranks: tuple[int, ...]
    n: int
    depth: int
    bases: list[np.ndarray] = field(default_factory=list, repr=False)
    words: list[list[Word]] = field(default_factory=list, repr=False)

    @property
    def satisfied(self) -> bool:
        return sum(self.ranks) == self.n

    def to_dict(self) -> dict:
        return {"ranks": list(self.ranks), "n": self.n, "depth": self.depth, "satisfied": self.satisfied,
                "words": [[list(w) for w in layer] for layer in self.words]}


def _rank(vectors: np.ndarray, rtol: float) -> tuple[int, np.ndarray]:
    if vectors.size == 0:
        return 0, np.zeros((0, vectors.shape[-1]))
    _, s, vt = np.linalg.svd(vectors, full_matrices=False)
    if s[0] == 0.0:
        return 0, np.zeros((0, vectors.shape[-1]))
    r = int(np.sum(s > rtol * s[0]))
    return r, vt[:r]


def bracket_span(model: Model, q, depth: int, rtol: float = RANK_RTOL) -> GrowthVector:
    """Growth vector at ``q`` from iterated brackets up to ``depth``.

    Layer i+1 brackets every frame field against the fields of layer i;
    duplicate and identically zero fields are dropped.  Computation stops once
    the span is the whole tangent space.  ``bases[i]`` is an orthonormal basis
    of the directions that layer i adds.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    frame = _frame(model)
    q = _check(model, "q", q, model.n)
    layer: list[tuple[Word, PolyField]] = [((a + 1,), f) for a, f in enumerate(frame)]
    seen = {f.key() for _, f in layer}
    basis = np.zeros((0, model.n))
    ranks, bases, words = [], [], []
    total = 0
    for k in range(1, depth + 1):
        if k > 1:
            nxt = []
            for a, fa in enumerate(frame):
                for w, f in layer:
                    b = fa.bracket(f)
                    key = b.key()
                    if b.is_zero() or key in seen:
                        continue
                    seen.add(key)
                    nxt.append(((a + 1,) + w, b))
            layer = nxt
        vals = np.array([f(q) for _, f in layer]).reshape(-1, model.n)
        r, vt = _rank(np.vstack([basis, vals]), rtol)
        new = r - total
        # directions added by this layer: orthogonal complement of the old basis
        if new > 0:
            resid = vt - (vt @ basis.T) @ basis
            _, _, v2 = np.linalg.svd(resid, full_matrices=False)
            added = v2[:new]
        else:
            added = np.zeros((0, model.n))
        basis = np.vstack([basis, added])
        total = r
        ranks.append(new)
        bases.append(added)
        words.append([w for w, _ in layer])
        if total == model.n or not layer:
            break
    return GrowthVector(tuple(ranks), model.n, len(ranks), bases, words)


# ---------------------------------------------------------------------------
# flows as horizontal arcs

def arcs_control(arcs: Sequence[np.ndarray], h: int, steps: int = ARC_STEPS) -> dyn.ControlPath:
    """Concatenate unit-time constant arcs into one control on [0, 1]."""
    if len(arcs) == 0:
        return dyn.ControlPath.zeros(steps, h)
    W = np.asarray(arcs, dtype=float).reshape(-1, h)
    return dyn.ControlPath(np.repeat(W, steps, axis=0) * len(W))


def flow_arcs(model: Model, arcs: Sequence[np.ndarray], q, steps: int = ARC_STEPS) -> np.ndarray:
    """Endpoint after running the arcs in order from ``q``."""
    q = np.asarray(q, dtype=float)
    if len(arcs) == 0:
        return q.copy()
    u = arcs_control(arcs, model.h, steps)
    return dyn.integrate_fine(model, q, u.values, 1)[-1]


def _unit(h: int, i: int, s: float) -> np.ndarray:
    e = np.zeros(h)
    e[i - 1] = s
    return e


def _inverse(arcs: list[np.ndarray]) -> list[np.ndarray]:
    return [-a for a in reversed(arcs)]


def commutator_arcs(h: int, word: Word, s: float) -> list[np.ndarray]:
    """Arcs of the nested group commutator S_I(s), whose displacement is s^|I| X_I + O(s^(|I|+1)).

    S_(i)(s) is the flow of X_i for time s and
    S_(i, I')(s) = S_I'(s)^-1 o phi_i^-s o S_I'(s) o phi_i^s (rightmost first).
    """
    if not word:
        return []
    first = _unit(h, word[0], s)
    if len(word) == 1:
        return [first]
    inner = commutator_arcs(h, word[1:], s)
    return [first] + inner + [-first] + _inverse(inner)


def commutator_flow(model: Model, word: Word, t: float, q, flow_steps: int = ARC_STEPS) -> np.ndarray:
    """phi_{i_k}^t o ... o phi_{i_1}^t (q): the frame flows of the word, in order, each for time t."""
    q = _check(model, "q", q, model.n)
    for i in word:
        if not 1 <= i <= model.h:
            raise ValueError(f"word {word} indexes outside 1..{model.h}")
    return flow_arcs(model, [_unit(model.h, i, t) for i in word], q, flow_steps)


def motion_arcs(h: int, word: Word, u) -> list[np.ndarray]:
    """Arcs of Phi_I(u), the reparametrised commutator moving by [X(u), X_I] + o(u).

    With i = |I|, t = |u|^(1/(i+1)) and v = u / |u|^(i/(i+1)) the motion is
    S_I(t)^-1 o phi_{X(v)}^-1 o S_I(t) o phi_{X(v)}^1.  The empty word is the
    plain arc X(u).
    """
    u = np.asarray(u, dtype=float)
    r = float(np.linalg.norm(u))
    if r == 0.0:
        return []
    if not word:
        return [u]
    i = len(word)
    t = r ** (1.0 / (i + 1))
    v = u / r ** (i / (i + 1.0))
    S = commutator_arcs(h, word, t)
    return [v] + S + [-v] + _inverse(S)


def bracket_motion(model: Model, word: Word, u, q, flow_steps: int = ARC_STEPS) -> np.ndarray:
    """Endpoint of Phi_I(u) started at q."""
    q = _check(model, "q", q, model.n)
    u = _check(model, "u", u, model.h)
    for i in word:
        if not 1 <= i <= model.h:
            raise ValueError(f"word {word} indexes outside 1..{model.h}")
    return flow_arcs(model, motion_arcs(model.h, tuple(word), u), q, flow_steps)


def motion_direction(model: Model, word: Word, u, q) -> np.ndarray:
    """First-order prediction [X(u), X_I](q) (X(u) itself for the empty word)."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    xu = model.drift(q, u)
    if not word:
        return xu
    XI = word_field(model, tuple(word))
    Xu = FDField(lambda x: model.drift(x, u))
    Xu.jac = lambda x: model.drift_jac(x, u)
    return lie_bracket(Xu, XI, q)


def motion_slope_error(model: Model, word: Word, u, q, s: float = 1e-3) -> float:
    """|(Phi_I(s u)(q) - q)/s - [X(u), X_I](q)| relative to max(|[X(u), X_I](q)|, |u|)."""
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    pred = motion_direction(model, word, u, q)
    got = (bracket_motion(model, word, s * u, q) - q) / s
    return float(np.linalg.norm(got - pred) / max(np.linalg.norm(pred), np.linalg.norm(u)))


# ---------------------------------------------------------------------------
# steering

@dataclass
class SteeringPlan:
    """Bracket words with amplitudes, the assembled control and its predicted endpoint."""

    words: list[Word]
    amplitudes: np.ndarray  # (len(words), h)
    control: dyn.ControlPath
    q0: np.ndarray
    predicted_endpoint: np.ndarray
    target: np.ndarray
    endpoint_error: float
    cost_bound: float
    success: bool = True
    history: list[float] = field(default_factory=list)
    segments: int = 1
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "words": [list(w) for w in self.words],
            "amplitudes": self.amplitudes.tolist(),
            "q0": self.q0.tolist(),
            "target": self.target.tolist(),
            "predicted_endpoint": self.predicted_endpoint.tolist(),
            "endpoint_error": self.endpoint_error,
            "cost_bound": self.cost_bound,
            "success": self.success,
            "segments": self.segments,
            "history": self.history,
            "message": self.message,
        }


@dataclass
class SteerOptions:
    tol_steer: float = TOL_STEER
    max_iter: int = 50
    max_subdivisions: int = MAX_SUBDIVISIONS
    arc_steps: int = ARC_STEPS
    fd_step: float = 1e-7


def default_words(model: Model, q, max_depth: int = 4) -> list[Word]:
    """Greedy choice of words I such that {X_a(q)} and {[X_a, X_I](q)} span T_q.

    The empty word (plain horizontal motion) is always first.
    """
    q = _check(model, "q", q, model.n)
    words: list[Word] = [()]
    span = model.anchor(q).T
    r, _ = _rank(span, RANK_RTOL)
    if r == model.n:
        return words
    gv = bracket_span(model, q, max_depth)
    for layer in gv.words[:-1]:
        for w in layer:
            cols = np.array([motion_direction(model, w, np.eye(model.h)[a], q) for a in range(model.h)])
            r2, _ = _rank(np.vstack([span, cols]), RANK_RTOL)
            if r2 > r:
                words.append(w)
                span = np.vstack([span, cols])
                r = r2
            if r == model.n:
                return words
    return words


def _plan_arcs(h: int, words: Sequence[Word], U: np.ndarray) -> list[np.ndarray]:
    arcs: list[np.ndarray] = []
    for w, u in zip(words, U):
        arcs.extend(motion_arcs(h, w, u))
    return arcs


def cost_bound(words: Sequence[Word], U: np.ndarray) -> float:
    """sum_I |u_I|^(2/(i+1)) with i = |I| (the empty word counts with exponent 2)."""
    return float(sum(np.linalg.norm(u) ** (2.0 / (len(w) + 1)) for w, u in zip(words, U)))


def _steer_segment(model: Model, q0, q1, words, opts: SteerOptions):
    h = model.h
    K = len(words)

    def Phi(x):
        return flow_arcs(model, _plan_arcs(h, words, x.reshape(K, h)), q0, opts.arc_steps)

    J0 = np.concatenate([np.stack([motion_direction(model, w, e, q0) for e in np.eye(h)], axis=1)
                         for w in words], axis=1)  # (n, K h)
    x = np.zeros(K * h)
    r = Phi(x) - q1
    err = float(np.linalg.norm(r))
    hist = [err]
    J = J0
    for it in range(opts.max_iter):
        if err <= opts.tol_steer:
            break
        step = np.linalg.lstsq(J, r, rcond=1e-10)[0]
        lam = 1.0
        improved = False
        while lam > 1e-4:
            xt = x - lam * step
            rt = Phi(xt) - q1
            et = float(np.linalg.norm(rt))
            if et < err:
                improved = True
                break
            lam *= 0.5
        if not improved:
            if J is J0:
                break
            J = J0
            continue
        x, r, err = xt, rt, et
        hist.append(err)
        # finite-difference refresh; Phi is smooth away from u_I = 0
        hs = opts.fd_step * max(1.0, float(np.linalg.norm(x)))
        J = np.empty_like(J0)
        for j in range(K * h):
            e = np.zeros_like(x)
            e[j] = hs
            J[:, j] = (Phi(x + e) - Phi(x - e)) / (2 * hs)
    return x.reshape(K, h), err, hist


def steer(model: Model, q0, q1, words: Sequence[Word] | None = None,
          options: SteerOptions | None = None) -> SteeringPlan:
    """Solve Phi(u)(q0) = q1 by Gauss-Newton, subdividing the chart segment on stalls.

    ``Phi`` runs the motions of the words one after another.  The initial
    Jacobian is dPhi(0), assembled from bracket evaluations; later iterations
    use central differences.  A failed plan carries ``success=False`` and the
    residual history.
    """
    opts = options or SteerOptions()
    q0 = _check(model, "q0", q0, model.n)
    q1 = _check(model, "q1", q1, model.n)
    if words is None:
        words = default_words(model, q0)
    words = [tuple(w) for w in words]
    if () not in words:
        words = [()] + words
    if np.array_equal(q0, q1):
        U = np.zeros((len(words), model.h))
        return SteeringPlan(words, U, arcs_control([], model.h, opts.arc_steps), q0, q0.copy(), q1, 0.0, 0.0)
    segments = 1
    best = None
    while segments <= opts.max_subdivisions:
        arcs: list[np.ndarray] = []
        amps = []
        hist: list[float] = []
        q = q0
        ok = True
        for k in range(1, segments + 1):
            target = q0 + (q1 - q0) * k / segments if k < segments else q1
            U, err, h_ = _steer_segment(model, q, target, words, opts)
            hist.extend(h_)
            amps.append(U)
            arcs.extend(_plan_arcs(model.h, words, U))
            q = flow_arcs(model, arcs, q0, opts.arc_steps)
            if err > opts.tol_steer:
                ok = False
                break
        U = np.concatenate(amps, axis=0)
        ctrl = arcs_control(arcs, model.h, opts.arc_steps)
        err = float(np.linalg.norm(q - q1))
        plan = SteeringPlan(list(words) * len(amps), U, ctrl, q0, q, q1, err, cost_bound(list(words) * len(amps), U),
                            ok and err <= opts.tol_steer, hist, segments)
        if plan.success:
            plan.message = "converged"
            return plan
        if best is None or plan.endpoint_error < best.endpoint_error:
            best = plan
        log.info("steering stalled with %d segment(s) (error %.3g); subdividing", segments, err)
        segments *= 2
    best.message = "Gauss-Newton stalled at every subdivision level"
    return best


@dataclass
class CostCertificate:
    measured_sq_length: float
    bound: float
    ratio: float
    replay_error: float


def steering_cost_certificate(model: Model, plan: SteeringPlan) -> CostCertificate:
    """Replay the plan and compare its squared length with sum_I |u_I|^(2/(i+1))."""
    fine = dyn.integrate_fine(model, plan.q0, plan.control.values, 1)
    replay = float(np.linalg.norm(fine[-1] - plan.predicted_endpoint))
    L = dyn.length(model, plan.q0, plan.control, 1)
    bound = plan.cost_bound
    ratio = 1.0 if bound == 0.0 and L == 0.0 else (L * L / bound if bound > 0 else float("inf"))
    return CostCertificate(L * L, bound, ratio, replay)
