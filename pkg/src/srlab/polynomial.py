"""Polynomial vector fields and batched polynomial tables.

Every built-in structure in this package has a polynomial frame, so the
anchor, its Jacobian and all iterated Lie brackets can be evaluated exactly
and vectorised over leading batch axes.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np

Exps = tuple[int, ...]


class PolyTable:
    """Array-valued polynomial ``q -> sum_t C[t] * q**E[t]``.

    ``E`` has shape (T, n) (non-negative integer powers) and ``C`` has shape
    (T, *shape).  Evaluation broadcasts over any leading axes of ``q``.
    """

    def __init__(self, n: int, shape: tuple[int, ...], exps: np.ndarray, coefs: np.ndarray):
        self.n = int(n)
        self.shape = tuple(shape)
        self.exps = np.asarray(exps, dtype=np.int64).reshape(-1, self.n)
        self.coefs = np.asarray(coefs, dtype=float).reshape((-1,) + self.shape)
        if self.exps.shape[0] != self.coefs.shape[0]:
            raise ValueError("exponent and coefficient tables disagree in length")
        if np.any(self.exps < 0):
            raise ValueError("negative exponents are not polynomial")
        self.degree = int(self.exps.sum(axis=1).max()) if len(self.exps) else 0
        # exponents after differentiating in q_j, clipped: (n, T, n)
        eye = np.eye(self.n, dtype=np.int64)
        self._dexps = np.clip(self.exps[None, :, :] - eye[:, None, :], 0, None)
        self._dfac = self.exps.T.astype(float)  # (n, T)
        self._linear = self.degree <= 1

    @classmethod
    def from_terms(cls, n: int, shape: tuple[int, ...],
                   terms: Iterable[tuple[tuple[int, ...], Exps, float]]) -> "PolyTable":
        """Build from ``(out_index, exponents, coef)`` triples; duplicates add up."""
        acc: dict[Exps, np.ndarray] = {}
        for index, exps, coef in terms:
            exps = tuple(int(e) for e in exps)
            if len(exps) != n:
                raise ValueError(f"exponent tuple {exps} has length != {n}")
            if exps not in acc:
                acc[exps] = np.zeros(shape)
            acc[exps][tuple(index)] += float(coef)
        keys = sorted(acc)
        if not keys:
            keys = [(0,) * n]
            acc[keys[0]] = np.zeros(shape)
        return cls(n, shape, np.array(keys, dtype=np.int64), np.stack([acc[k] for k in keys]))

    def monomials(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.degree == 0:
            return np.ones(q.shape[:-1] + (len(self.exps),))
        return np.prod(q[..., None, :] ** self.exps, axis=-1)

    def monomial_jac(self, q: np.ndarray) -> np.ndarray:
        """d(monomial_t)/dq_j with shape (..., T, n)."""
        q = np.asarray(q, dtype=float)
        if self.degree == 0:
            return np.zeros(q.shape[:-1] + (len(self.exps), self.n))
        vals = np.prod(q[..., None, None, :] ** self._dexps, axis=-1)  # (..., n, T)
        return np.swapaxes(vals * self._dfac, -1, -2)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        mono = self.monomials(q)
        return np.tensordot(mono, self.coefs, axes=([-1], [0]))

    def jac(self, q: np.ndarray) -> np.ndarray:
        """Derivative with the q-index last: shape (..., *shape, n)."""
        dm = self.monomial_jac(q)  # (..., T, n)
        k = len(self.shape)
        out = np.tensordot(dm, self.coefs, axes=([-2], [0]))  # (..., n, *shape)
        return np.moveaxis(out, -k - 1, -1)


class PolyField:
    """Polynomial vector field on R^n, stored as one ``{exponents: coef}`` dict per component.

    Brackets of polynomial fields are polynomial, so ``bracket`` is exact and the
    result keeps an analytic Jacobian.
    """

    def __init__(self, n: int, components: Sequence[Mapping[Exps, float]], label: str = ""):
        if len(components) != n:
            raise ValueError(f"expected {n} components, got {len(components)}")
        self.n = n
        self.components: tuple[dict[Exps, float], ...] = tuple(
            {tuple(int(e) for e in k): float(v) for k, v in comp.items() if v != 0.0}
            for comp in components
        )
        self.label = label
        self._table: PolyTable | None = None

    # construction helpers -------------------------------------------------
    @classmethod
    def from_terms(cls, n: int, terms: Iterable[tuple[int, Exps, float]], label: str = "") -> "PolyField":
        comps: list[dict[Exps, float]] = [defaultdict(float) for _ in range(n)]
        for i, exps, coef in terms:
            comps[i][tuple(exps)] += coef
        return cls(n, comps, label)

    @staticmethod
    def unit(n: int, j: int) -> Exps:
        e = [0] * n
        e[j] = 1
        return tuple(e)

    # evaluation -----------------------------------------------------------
    @property
    def table(self) -> PolyTable:
        if self._table is None:
            terms = [((i,), e, c) for i, comp in enumerate(self.components) for e, c in comp.items()]
            self._table = PolyTable.from_terms(self.n, (self.n,), terms)
        return self._table

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.table(q)

    def jac(self, q: np.ndarray) -> np.ndarray:
        return self.table.jac(q)

    # algebra --------------------------------------------------------------
    def is_zero(self) -> bool:
        return all(not comp for comp in self.components)

    def scaled(self, s: float) -> "PolyField":
        return PolyField(self.n, [{e: s * c for e, c in comp.items()} for comp in self.components], self.label)

    def __add__(self, other: "PolyField") -> "PolyField":
        comps = []
        for a, b in zip(self.components, other.components):
            d = dict(a)
            for e, c in b.items():
                d[e] = d.get(e, 0.0) + c
            comps.append({e: c for e, c in d.items() if abs(c) > 0.0})
        return PolyField(self.n, comps)

    def _derivative(self, poly: Mapping[Exps, float], j: int) -> dict[Exps, float]:
        out: dict[Exps, float] = {}
        for e, c in poly.items():
            if e[j] > 0:
                ne = list(e)
                ne[j] -= 1
                out[tuple(ne)] = out.get(tuple(ne), 0.0) + c * e[j]
        return out

    @staticmethod
    def _mul(a: Mapping[Exps, float], b: Mapping[Exps, float]) -> dict[Exps, float]:
        out: dict[Exps, float] = {}
        for ea, ca in a.items():
            for eb, cb in b.items():
                e = tuple(x + y for x, y in zip(ea, eb))
                out[e] = out.get(e, 0.0) + ca * cb
        return out

    def directional(self, other: "PolyField") -> "PolyField":
        """The field q -> D(self)(q) . other(q)."""
        comps = []
        for comp in self.components:
            acc: dict[Exps, float] = {}
            for j in range(self.n):
                if not other.components[j]:
                    continue
                dj = self._derivative(comp, j)
                if not dj:
                    continue
                for e, c in self._mul(dj, other.components[j]).items():
                    acc[e] = acc.get(e, 0.0) + c
            comps.append({e: c for e, c in acc.items() if abs(c) > 1e-300})
        return PolyField(self.n, comps)

    def bracket(self, other: "PolyField") -> "PolyField":
        """[self, other] = D(other).self - D(self).other."""
        a = other.directional(self)
        b = self.directional(other)
        label = f"[{self.label},{other.label}]" if self.label and other.label else ""
        out = a + b.scaled(-1.0)
        out.label = label
        return out

    def key(self) -> tuple:
        """Hashable canonical form, used to drop duplicate bracket fields."""
        return tuple(tuple(sorted((e, round(c, 14)) for e, c in comp.items())) for comp in self.components)

    def __repr__(self) -> str:
        return f"PolyField({self.label or '?'}, n={self.n})"
