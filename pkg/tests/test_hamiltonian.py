import numpy as np
import pytest

from srlab import dynamics as dyn
from srlab import hamiltonian as ham
from srlab import models

H = models.heisenberg3()
E = models.engel()


@pytest.mark.parametrize("model", [H, E], ids=lambda m: m.name)
def test_symplectic_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(0)
    q, p = rng.standard_normal(model.n) * 0.5, rng.standard_normal(model.n)
    dq, dp = ham.symplectic_gradient(model, q, p)
    step = 1e-6
    for j in range(model.n):
        e = np.zeros(model.n)
        e[j] = step
        dh_dp = (ham.normal_hamiltonian(model, q, p + e) - ham.normal_hamiltonian(model, q, p - e)) / (2 * step)
        dh_dq = (ham.normal_hamiltonian(model, q + e, p) - ham.normal_hamiltonian(model, q - e, p)) / (2 * step)
        assert dq[j] == pytest.approx(dh_dp, abs=1e-7)
        assert dp[j] == pytest.approx(-dh_dq, abs=1e-7)


def test_zero_covector_stays_put():
    phase = ham.geodesic_shoot(H, [0.3, -0.1, 0.2], np.zeros(3), steps=50)
    assert np.allclose(phase.q, [0.3, -0.1, 0.2])
    assert np.allclose(phase.controls, 0.0)


def test_full_turn_geodesic_reaches_vertical_axis():
    # p_z = 2 pi closes one unit-speed circle of circumference 1
    q1 = ham.exp_map(H, np.zeros(3), [1.0, 0.0, 2 * np.pi], steps=2000)
    assert np.allclose(q1[:2], 0.0, atol=1e-10)
    assert q1[2] == pytest.approx(1 / (4 * np.pi), rel=1e-9)
    assert ham.geodesic_length(H, np.zeros(3), [1.0, 0.0, 2 * np.pi]) == pytest.approx(1.0)


def test_flow_kernel_matches_reference():
    rng = np.random.default_rng(1)
    Q0, P0 = rng.standard_normal((4, 4)) * 0.3, rng.standard_normal((4, 4))
    a = ham.flow(E, Q0, P0, 1.0, 64)
    b = ham.flow(E, Q0, P0, 1.0, 64, reference=True)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-14)


def test_hamiltonian_is_conserved_and_controls_are_normal():
    phase = ham.geodesic_shoot(E, np.zeros(4), [0.4, -0.7, 1.2, 0.8], steps=1000)
    assert ham.hamiltonian_drift(E, phase) < 1e-11
    k = 321
    assert np.allclose(phase.controls[k], ham.normal_control(E, phase.q[k], phase.p[k]))


def test_geodesic_satisfies_extremal_equation():
    phase = ham.geodesic_shoot(E, np.zeros(4), [0.4, -0.7, 1.2, 0.8], steps=1000)
    assert ham.geodesic_extremal_residual(E, phase) < 1e-7


def test_to_control_path_reproduces_endpoint():
    phase = ham.geodesic_shoot(H, np.zeros(3), [0.6, 0.8, 3.0], steps=400)
    u = ham.to_control_path(phase, H, refine=4)
    assert u.m == 1600
    assert np.allclose(dyn.endpoint(H, np.zeros(3), u, 1), phase.q[-1], atol=1e-9)


def test_shooting_recovers_known_covector():
    p_true = np.array([0.3, -0.5, 0.9, 0.4])
    q1 = ham.exp_map(E, np.zeros(4), p_true, steps=200)
    r = ham.shoot_bvp(E, np.zeros(4), q1, p_true + 0.05)
    assert r.success and r.residual <= 1e-9
    assert np.allclose(r.p0, p_true, atol=1e-6)
    assert r.extremal_residual < 1e-6


def test_shooting_failure_is_reported_not_raised():
    r = ham.shoot_bvp(H, np.zeros(3), [0.0, 0.0, 1.0], np.zeros(3), ham.ShootOptions(max_iter=3))
    assert not r.success
    assert r.message


def test_short_geodesic_is_locally_minimal():
    phase = ham.geodesic_shoot(H, np.zeros(3), [1.0, 0.0, 3.0], steps=256)
    rep = ham.verify_local_minimality(H, np.zeros(3), ham.to_control_path(phase, H, 1), trials=16, seed=1)
    assert rep.passed and rep.max_endpoint_error < 1e-10


def test_geodesic_past_cut_point_is_not_minimal():
    # p_z beyond 2 pi goes past the first return to the vertical axis
    phase = ham.geodesic_shoot(H, np.zeros(3), [1.0, 0.0, 3 * np.pi], steps=256)
    rep = ham.verify_local_minimality(H, np.zeros(3), ham.to_control_path(phase, H, 1), trials=32, seed=2)
    assert not rep.passed
    assert rep.min_action_change < 0


@pytest.mark.parametrize("s", [0.5, 2.0])
def test_covector_scaling_is_time_rescaling(s):
    p0 = np.array([0.4, -0.7, 1.2, 0.8])
    scaled = ham.geodesic_shoot(E, np.zeros(4), s * p0, 1.0, 1000)
    slow = ham.geodesic_shoot(E, np.zeros(4), p0, s, 1000)
    assert np.allclose(scaled.q, slow.q, atol=1e-10)
    assert ham.geodesic_length(E, np.zeros(4), s * p0) == pytest.approx(s * ham.geodesic_length(E, np.zeros(4), p0))
