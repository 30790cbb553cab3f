import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srlab.polynomial import PolyField, PolyTable


def random_field(rng, n, terms=4, max_pow=2, label=""):
    comps = []
    for _ in range(n):
        comp = {}
        for _ in range(terms):
            e = tuple(int(x) for x in rng.integers(0, max_pow + 1, n))
            comp[e] = comp.get(e, 0.0) + float(rng.standard_normal())
        comps.append(comp)
    return PolyField(n, comps, label)


def fd_jac(f, q, h=1e-6):
    cols = []
    for j in range(q.size):
        e = np.zeros_like(q)
        e[j] = h
        cols.append((f(q + e) - f(q - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_table_evaluates_sum_of_monomials():
    # 2 x y^2 - 3 in the first output, z in the second
    t = PolyTable.from_terms(3, (2,), [((0,), (1, 2, 0), 2.0), ((0,), (0, 0, 0), -3.0), ((1,), (0, 0, 1), 1.0)])
    q = np.array([1.5, -2.0, 0.25])
    assert np.allclose(t(q), [2 * 1.5 * 4.0 - 3.0, 0.25])
    assert np.allclose(t.jac(q), [[8.0, 2 * 1.5 * 2 * -2.0, 0.0], [0.0, 0.0, 1.0]])


def test_table_broadcasts_over_batch_axes():
    rng = np.random.default_rng(0)
    f = random_field(rng, 3)
    Q = rng.standard_normal((4, 5, 3))
    batched = f(Q)
    assert batched.shape == (4, 5, 3)
    assert np.allclose(batched[2, 3], f(Q[2, 3]))
    assert np.allclose(f.jac(Q)[1, 4], f.jac(Q[1, 4]))


def test_negative_exponents_rejected():
    with pytest.raises(ValueError):
        PolyTable(1, (1,), np.array([[-1]]), np.array([[1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_jacobian_matches_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    f = random_field(rng, n)
    q = rng.uniform(-1, 1, n)
    an = f.jac(q)
    fd = fd_jac(f, q)
    assert np.linalg.norm(an - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_bracket_matches_pointwise_formula(seed):
    rng = np.random.default_rng(seed)
    X, Y = random_field(rng, 3), random_field(rng, 3)
    q = rng.uniform(-1, 1, 3)
    pointwise = Y.jac(q) @ X(q) - X.jac(q) @ Y(q)
    assert np.allclose(X.bracket(Y)(q), pointwise, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_bracket_antisymmetry_and_jacobi(seed):
    rng = np.random.default_rng(seed)
    X, Y, Z = (random_field(rng, 3, terms=3) for _ in range(3))
    q = rng.uniform(-1, 1, 3)
    assert np.allclose(X.bracket(Y)(q), -Y.bracket(X)(q), atol=1e-10)
    jac = X.bracket(Y.bracket(Z)) + Y.bracket(Z.bracket(X)) + Z.bracket(X.bracket(Y))
    assert np.allclose(jac(q), 0.0, atol=1e-8)


def test_bracket_with_itself_is_zero():
    rng = np.random.default_rng(3)
    X = random_field(rng, 3)
    assert X.bracket(X).is_zero()


def test_key_identifies_equal_fields():
    a = PolyField.from_terms(2, [(0, (1, 0), 1.0), (1, (0, 0), 2.0)])
    b = PolyField.from_terms(2, [(1, (0, 0), 2.0), (0, (1, 0), 1.0)])
    assert a.key() == b.key()
