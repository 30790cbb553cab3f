import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srlab import dynamics as dyn
from srlab import models
from srlab.dynamics import ControlPath, IntegrationError
from srlab.products import circle_control

H = models.heisenberg3()
E = models.engel()


def shoelace_endpoint(values):
    """Exact Heisenberg endpoint of a piecewise-constant control.

    The planar path is a polygon from the origin and z is its signed area
    swept from the origin, which RK4 reproduces exactly (z is quadratic per step).
    """
    pts = np.vstack([[0.0, 0.0], np.cumsum(values / len(values), axis=0)])
    z = 0.5 * np.sum(pts[:-1, 0] * pts[1:, 1] - pts[:-1, 1] * pts[1:, 0])
    return np.array([pts[-1, 0], pts[-1, 1], z])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 4))
def test_heisenberg_endpoint_matches_polygon_area(seed, m, spi):
    values = np.random.default_rng(seed).standard_normal((m, 2))
    got = dyn.endpoint(H, np.zeros(3), ControlPath(values), spi)
    assert np.allclose(got, shoelace_endpoint(values), atol=1e-12)


def test_circle_control_encloses_quarter_pi_inverse():
    # averaged circle control traces a regular m-gon with side sinc(pi/m)/m
    for m in (64, 1024):
        q = dyn.endpoint(H, np.zeros(3), circle_control(m), 1)
        side = np.sinc(1.0 / m) / m
        R = side / (2 * np.sin(np.pi / m))
        assert np.allclose(q[:2], 0.0, atol=1e-12)
        assert q[2] == pytest.approx(0.5 * m * R ** 2 * np.sin(2 * np.pi / m), rel=1e-12)
    # and the continuum limit is the disc of circumference 1
    assert q[2] == pytest.approx(1 / (4 * np.pi), rel=1e-5)


@pytest.mark.parametrize("model", [H, E, models.heisenberg_product(2)], ids=lambda m: m.name)
def test_kernel_matches_reference_loop(model):
    rng = np.random.default_rng(1)
    q0 = rng.standard_normal((3, model.n)) * 0.3
    vals = rng.standard_normal((3, 17, model.h))
    fast = dyn.integrate_fine(model, q0, vals, 3)
    ref = dyn.integrate_fine(model, q0, vals, 3, reference=True)
    assert np.array_equal(fast, ref)


def test_costate_kernel_matches_reference():
    rng = np.random.default_rng(2)
    u = ControlPath(rng.standard_normal((20, 2)))
    q0 = rng.standard_normal(4) * 0.2
    fine = dyn.integrate_fine(E, q0, u.values, 2)
    p1 = rng.standard_normal((3, 4))
    a = dyn.costate_sweep(E, fine, u.values, p1, 1.0, 2)
    b = dyn.costate_sweep(E, fine, u.values, p1, 1.0, 2, reference=True)
    assert np.allclose(a.fine_costates, b.fine_costates, rtol=1e-13, atol=1e-14)
    assert np.allclose(a.dual, b.dual, rtol=1e-13, atol=1e-14)


def test_endpoint_diff_matches_finite_differences():
    rng = np.random.default_rng(3)
    u = ControlPath(rng.standard_normal((16, 2)))
    du = ControlPath(rng.standard_normal((16, 2)))
    q0 = np.array([0.1, -0.2, 0.3, 0.0])
    h = 1e-6
    fd = (dyn.endpoint(E, q0, u + du * h) - dyn.endpoint(E, q0, u + du * -h)) / (2 * h)
    assert np.allclose(dyn.endpoint_diff(E, q0, u, du), fd, atol=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
def test_adjoint_identity(seed, spi):
    # <dE(u) du, p1> equals the grid pairing of du with dE(u)^* p1
    rng = np.random.default_rng(seed)
    m = int(rng.integers(4, 24))
    u = ControlPath(rng.standard_normal((m, 2)))
    du = ControlPath(rng.standard_normal((m, 2)))
    q0 = rng.standard_normal(4) * 0.3
    p1 = rng.standard_normal(4)
    lhs = dyn.endpoint_diff(E, q0, u, du, spi) @ p1
    _, dual = dyn.endpoint_adjoint(E, q0, u, p1, spi)
    rhs = du.inner(dual)
    assert abs(lhs - rhs) <= 1e-11 * max(1.0, abs(lhs))


def test_action_and_length_of_constant_control():
    u = ControlPath.constant([3.0, 4.0], m=8)
    assert dyn.action(H, np.zeros(3), u) == pytest.approx(12.5)
    assert dyn.length(H, np.zeros(3), u) == pytest.approx(5.0)


def test_reversal_retraces_path():
    rng = np.random.default_rng(4)
    u = ControlPath(rng.standard_normal((32, 2)))
    q0 = np.array([0.2, 0.1, -0.3, 0.4])
    q1 = dyn.endpoint(E, q0, u)
    assert np.allclose(dyn.endpoint(E, q1, u.reversed()), q0, atol=1e-8)


def test_refinement_preserves_endpoint_and_length():
    rng = np.random.default_rng(5)
    u = ControlPath(rng.standard_normal((16, 2)))
    fine = u.refined(3)
    assert fine.m == 48
    assert np.allclose(dyn.endpoint(E, np.zeros(4), u, 3), dyn.endpoint(E, np.zeros(4), fine, 1), atol=1e-13)
    assert dyn.length(H, np.zeros(3), fine) == pytest.approx(dyn.length(H, np.zeros(3), u))


def test_concatenation_composes_endpoints():
    rng = np.random.default_rng(6)
    a, b = ControlPath(rng.standard_normal((8, 2))), ControlPath(rng.standard_normal((8, 2)))
    mid = dyn.endpoint(E, np.zeros(4), a)
    assert np.allclose(dyn.endpoint(E, np.zeros(4), ControlPath.concatenate([a, b])),
                       dyn.endpoint(E, mid, b), atol=1e-12)


def test_control_path_validation():
    with pytest.raises(ValueError):
        ControlPath(np.zeros(3))
    with pytest.raises(ValueError):
        ControlPath(np.array([[np.inf, 0.0]]))
    with pytest.raises(models.DimensionError):
        dyn.endpoint(H, np.zeros(3), ControlPath(np.zeros((4, 3))))


def test_blowup_raises_integration_error():
    # x' = u (1 + x^2) blows up at x = tan(t * u)
    spec = {"name": "riccati", "n": 1, "frame": [[{"component": 0, "coef": 1.0, "powers": [0]},
                                                    {"component": 0, "coef": 1.0, "powers": [2]}]]}
    M = models.custom(spec)
    with pytest.raises(IntegrationError) as info:
        dyn.endpoint(M, np.zeros(1), ControlPath.constant([50.0], m=64))
    assert 0 < info.value.time <= 1.0


def test_restore_endpoint_hits_target():
    rng = np.random.default_rng(7)
    u = ControlPath(rng.standard_normal((32, 2)))
    target = dyn.endpoint(E, np.zeros(4), u) + 1e-3 * rng.standard_normal(4)
    v, err = dyn.restore_endpoint(E, np.zeros(4), u, target)
    assert err < 1e-11
    assert np.linalg.norm(dyn.endpoint(E, np.zeros(4), v) - target) < 1e-11


RICCATI = {"name": "riccati", "n": 1, "frame": [[{"component": 0, "coef": 1.0, "powers": [0]},
                                                 {"component": 0, "coef": 1.0, "powers": [2]}]]}


def test_integrator_order():
    # x' = 1 + x^2 from 0 reaches tan(1); Carnot models are integrated exactly, so this field is used instead.
    # Below 32 steps the error changes sign and the sweep is not yet asymptotic.
    M = models.custom(RICCATI)
    u = ControlPath.constant([1.0], m=1)
    spis = np.array([32, 64, 128, 256])
    errs = [abs(dyn.endpoint(M, np.zeros(1), u, int(s))[0] - np.tan(1.0)) for s in spis]
    order = -np.polyfit(np.log(spis), np.log(errs), 1)[0]
    assert order >= 3.5
    assert all(a / b >= 8 for a, b in zip(errs, errs[1:]))


def test_uniform_time_rescaling():
    # run u twice as fast and then rest: same curve, same length, twice the action
    rng = np.random.default_rng(9)
    u = ControlPath(rng.standard_normal((16, 2)))
    fast = ControlPath.concatenate([u, ControlPath.zeros(16, 2)])
    q0 = np.array([0.1, 0.0, -0.2, 0.3])
    assert np.allclose(dyn.endpoint(E, q0, fast), dyn.endpoint(E, q0, u), atol=1e-12)
    assert dyn.length(E, q0, fast) == pytest.approx(dyn.length(E, q0, u), rel=1e-12)
    assert dyn.action(E, q0, fast) == pytest.approx(2 * dyn.action(E, q0, u), rel=1e-12)


def test_endpoint_diff_is_linear():
    rng = np.random.default_rng(10)
    u, d1, d2 = (ControlPath(rng.standard_normal((12, 2))) for _ in range(3))
    q0 = np.zeros(4)
    lhs = dyn.endpoint_diff(E, q0, u, d1 * 2.0 + d2 * -0.5)
    rhs = 2.0 * dyn.endpoint_diff(E, q0, u, d1) - 0.5 * dyn.endpoint_diff(E, q0, u, d2)
    assert np.allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("model", [models.heisenberg_product(2), models.engel_product(2),
                                   models.infinite_heisenberg_trunc(3), models.custom(RICCATI)],
                         ids=lambda m: m.name)
def test_adjoint_identity_across_catalog(model):
    rng = np.random.default_rng(11)
    u = ControlPath(0.3 * rng.standard_normal((10, model.h)))
    du = ControlPath(rng.standard_normal((10, model.h)))
    q0 = 0.2 * rng.standard_normal(model.n)
    p1 = rng.standard_normal(model.n)
    lhs = dyn.endpoint_diff(model, q0, u, du) @ p1
    rhs = du.inner(dyn.endpoint_adjoint(model, q0, u, p1)[1])
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))
