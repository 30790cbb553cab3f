import numpy as np
import pytest

from srlab import distance as dist
from srlab import dynamics as dyn
from srlab import hamiltonian as ham
from srlab import models

from oracles import heisenberg_oracle

H = models.heisenberg3()
E = models.engel()

# m=64 direct solution of d(0, (0,0,z))^2 / |z|, frozen from a reference run
HEIS_VERTICAL_RATIO_M64 = 12.5765


def test_oracle_limits():
    assert heisenberg_oracle(1.0, 0.0) == 1.0
    # a nearly closed arc approaches the vertical value sqrt(4 pi |z|)
    assert heisenberg_oracle(1e-6, 1.0) == pytest.approx(np.sqrt(4 * np.pi), rel=1e-4)


def test_horizontal_distance_is_euclidean():
    r = dist.distance_direct(H, np.zeros(3), [1.0, 0.0, 0.0])
    assert r.success and r.endpoint_error <= dist.TOL_EP
    assert r.distance == pytest.approx(1.0, rel=1e-6)


def test_distance_to_self_is_zero():
    r = dist.distance_best(E, np.ones(4), np.ones(4))
    assert r.distance == 0.0 and r.success


@pytest.mark.parametrize("point", [(0.5, 0.0, 0.05), (0.3, 0.0, -0.04), (0.2, 0.0, 0.1)])
def test_best_distance_matches_closed_form(point):
    r = dist.distance_best(H, np.zeros(3), point)
    assert r.success and r.endpoint_error <= dist.TOL_EP
    assert r.distance == pytest.approx(heisenberg_oracle(point[0], point[2]), rel=2e-3)


def test_left_translation_invariance():
    # d(g, g*q) = d(0, q) with the group law of this chart
    g = np.array([0.4, -0.3, 0.2])
    q = np.array([0.2, 0.1, 0.05])
    gq = np.array([g[0] + q[0], g[1] + q[1], g[2] + q[2] + 0.5 * (g[0] * q[1] - g[1] * q[0])])
    a = dist.distance_best(H, np.zeros(3), q).distance
    b = dist.distance_best(H, g, gq).distance
    assert b == pytest.approx(a, rel=2e-3)


def test_vertical_ratio_is_scale_free():
    ratios = []
    for z in (0.2, 0.05):
        r = dist.distance_direct(H, np.zeros(3), [0.0, 0.0, z])
        assert r.success
        ratios.append(r.distance ** 2 / z)
    assert ratios[0] == pytest.approx(ratios[1], rel=0.05)
    assert ratios[0] == pytest.approx(HEIS_VERTICAL_RATIO_M64, rel=1e-3)
    assert ratios[0] == pytest.approx(4 * np.pi, rel=5e-3)


def test_shooting_never_worse_than_direct():
    q1 = [0.1, 0.2, -0.1, 0.05]
    best = dist.distance_best(E, np.zeros(4), q1)
    direct = dist.distance_direct(E, np.zeros(4), q1)
    assert best.distance <= direct.distance * (1 + 1e-9)
    assert best.diagnostics["relative_discrepancy"] < 0.02


def test_engel_vertical_needs_steering_start():
    # the cubic w-direction traps a chart-line start at the zero control
    r = dist.distance_direct(E, np.zeros(4), [0.0, 0.0, 0.0, 0.01])
    assert r.success and r.endpoint_error <= dist.TOL_EP
    assert r.distance / 0.01 ** (1 / 3) == pytest.approx(6.37139, rel=0.02)


def test_direct_rejects_bad_init():
    with pytest.raises(ValueError):
        dist.distance_direct(H, np.zeros(3), [1.0, 0.0, 0.0], init="nonsense")


def test_classify_normal_geodesic():
    q1 = ham.exp_map(H, np.zeros(3), [0.6, -0.3, 2.0])
    bvp = ham.shoot_bvp(H, np.zeros(3), q1, [0.6, -0.3, 2.1], check_extremal=False)
    u = ham.to_control_path(bvp.phase, H, refine=4)
    cert = dist.classify_extremal(H, np.zeros(3), u, steps_per_interval=1)
    assert cert.kind == "normal" and cert.normal_residual <= dist.NORMAL_TOL
    # the fitted covector is the final costate
    assert np.allclose(cert.covector, bvp.phase.p[-1], atol=1e-4)


def test_classify_zero_control_is_abnormal():
    model = models.heisenberg_product(2)
    cert = dist.classify_extremal(model, np.zeros(6), dyn.ControlPath.zeros(32, 4))
    assert cert.kind == "abnormal" and cert.rank == 4
    # the certificate covector annihilates the horizontal directions
    assert np.allclose(model.anchor(np.zeros(6)).T @ cert.covector, 0.0, atol=1e-12)


def test_classify_random_control_is_unclassified():
    u = dyn.ControlPath(np.random.default_rng(12345).standard_normal((64, 2)))
    cert = dist.classify_extremal(H, np.zeros(3), u)
    assert cert.kind == "unclassified" and cert.covector is None


def test_straight_line_is_normal_and_not_abnormal():
    u = dyn.ControlPath.constant([1.0, 0.0], m=32)
    cert = dist.classify_extremal(H, np.zeros(3), u)
    assert cert.kind == "normal" and cert.rank == 3


def test_ballbox_horizontal_exponent():
    fit = dist.ballbox_fit(H, np.zeros(3), [1.0, 0.0, 0.0], (0.2, 0.1, 0.05),
                           solver=lambda q: dist.distance_direct(H, np.zeros(3), q).distance)
    assert fit.exponent == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        dist.ballbox_fit(H, np.zeros(3), [1.0, 0.0, 0.0], (0.1, 0.2, 0.3))


def test_certify_shooting_result_on_refined_geodesic():
    r = dist.distance_best(H, np.zeros(3), [0.3, 0.0, 0.05])
    assert r.diagnostics["chosen"] == "shooting"
    coarse = dist.classify_extremal(H, np.zeros(3), r.control, steps_per_interval=r.steps_per_interval)
    cert = dist.certify_result(H, np.zeros(3), r)
    assert cert.kind == "normal"
    assert cert.normal_residual < coarse.normal_residual


def test_direct_is_an_upper_bound_for_shooting():
    q1 = np.array([0.2, -0.1, 0.07])
    direct = dist.distance_direct(H, np.zeros(3), q1)
    starts = dist._sphere_starts(16, 3, float(np.linalg.norm(q1)))
    shoot = dist.distance_shooting(H, np.zeros(3), q1, starts, ham.ShootOptions())
    assert direct.success and shoot.success
    assert direct.distance >= shoot.distance * (1 - 0.02)
    assert shoot.endpoint_error <= dist.TOL_EP
