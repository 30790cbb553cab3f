import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srlab import distance as dist
from srlab import models
from srlab import products as prod

from oracles import heisenberg_oracle_point

N_GRID = (25, 50, 100, 200, 400, 800)


def oracle_solver(model, q, quality):
    return heisenberg_oracle_point(q)


# ---------------------------------------------------------------------------
# verdicts on synthetic sequences with known answers

def test_verdict_summable_power():
    t = (np.arange(800) + 1.0) ** -2
    v, law, alpha, r2 = prod.verdict(N_GRID, t)
    assert v == "convergent" and alpha == pytest.approx(2.0, abs=1e-9)
    assert law["estimated_limit"] == pytest.approx(np.pi ** 2 / 6, rel=1e-3)


def test_verdict_harmonic_is_log_divergent():
    t = (np.arange(800) + 1.0) ** -1
    v, law, alpha, _ = prod.verdict(N_GRID, t)
    assert v == "divergent-trend" and law["kind"] == "log"
    assert law["b"] == pytest.approx(1.0, rel=0.01)


def test_verdict_slow_power_divergence():
    t = (np.arange(800) + 1.0) ** -0.5
    v, law, alpha, _ = prod.verdict(N_GRID, t)
    assert v == "divergent-trend" and law["kind"] == "power"
    assert law["exponent"] == pytest.approx(0.5, abs=1e-6)


def test_verdict_zero_and_noise():
    assert prod.verdict(N_GRID, np.zeros(800))[0] == "convergent"
    noisy = np.abs(np.random.default_rng(0).standard_normal(800))
    assert prod.verdict(N_GRID, noisy)[0] == "inconclusive"


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.01, 10.0))
def test_verdict_depends_on_exponent_only(p, c):
    t = c * (np.arange(800) + 1.0) ** -p
    v = prod.verdict(N_GRID, t)[0]
    if p > 1.1:
        assert v == "convergent"
    elif p < 0.95:
        assert v == "divergent-trend"


# ---------------------------------------------------------------------------
# profiles driven by the closed-form Heisenberg distance

@pytest.mark.parametrize("p,want", [(2.0, "convergent"), (1.0, "divergent-trend")])
def test_heisenberg_z_profiles(p, want):
    # d(0, (0,0,a))^2 = 4 pi a, so the squared terms decay like (n+1)^-p
    pr = prod.orbit_profile(prod.SequenceSpec(1.0, p, "z"), N_GRID, solver=oracle_solver)
    assert pr.verdict == want
    assert pr.homogeneity.passed
    assert pr.tail_exponent == pytest.approx(p, abs=1e-9)
    assert all(b > a for a, b in zip(pr.partial_sums, pr.partial_sums[1:]))


def test_horizontal_profile_squares_the_terms():
    # d(0, (a,0,0)) = a, so p = 1 gives squared terms (n+1)^-2
    pr = prod.orbit_profile(prod.SequenceSpec(1.0, 1.0, "x"), N_GRID, solver=oracle_solver)
    assert pr.verdict == "convergent" and pr.tail_exponent == pytest.approx(2.0, abs=1e-9)


def test_verdict_stable_under_finer_grid():
    spec = prod.SequenceSpec(0.5, 1.0, "z")
    coarse = prod.orbit_profile(spec, N_GRID, solver=oracle_solver)
    fine = prod.orbit_profile(spec, (25, 50, 75, 100, 150, 200, 300, 400, 600, 800), solver=oracle_solver)
    assert coarse.verdict == fine.verdict
    assert coarse.law["b"] == pytest.approx(fine.law["b"], rel=0.02)


def test_broken_homogeneity_is_rejected():
    with pytest.raises(prod.HomogeneityError):
        prod.orbit_profile(prod.SequenceSpec(1.0, 2.0, "z"), N_GRID,
                           solver=lambda model, q, quality: float(np.abs(q).sum()) ** 0.8)


def test_profile_argument_checks():
    with pytest.raises(ValueError):
        prod.orbit_profile(prod.SequenceSpec(1.0, 1.0, "w"), N_GRID, solver=oracle_solver)
    with pytest.raises(ValueError):
        prod.orbit_profile(prod.SequenceSpec(1.0, 1.0, "z"), (50, 25), solver=oracle_solver)
    with pytest.raises(ValueError):
        prod.SequenceSpec(1.0, 0.0, "z")
    with pytest.raises(ValueError):
        prod.SequenceSpec(1.0, 1.0, "z", family="geometric")


# ---------------------------------------------------------------------------
# component distances, cache and product additivity

def test_component_distance_uses_dilations(tmp_path):
    cache = prod.DistanceCache(tmp_path / "d.json")
    d1 = prod.heisenberg_component_distance(0.0, 0.0, 0.01, cache=cache)
    assert len(cache.data) == 1
    d2 = prod.heisenberg_component_distance(0.0, 0.0, 0.04, cache=cache)
    # both points share the unit-box representative: one solve
    assert len(cache.data) == 1
    assert d2 == pytest.approx(2 * d1, rel=1e-12)
    assert d1 == pytest.approx(heisenberg_oracle_point([0, 0, 0.01]), rel=2e-3)
    cache.commit()
    reloaded = prod.DistanceCache(tmp_path / "d.json")
    assert reloaded.data == cache.data


def test_cache_keys_fold_signed_zero():
    H = models.heisenberg3()
    assert prod.DistanceCache.key(H, "fast", [-0.0, 0.0, 1.0]) == prod.DistanceCache.key(H, "fast", [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        prod.component_distance(H, [0.0, 0.0, 1.0], quality="sloppy")


def test_product_distance_is_root_sum_of_squares():
    model = models.heisenberg_product(2)
    comps = np.array([[0.3, 0.0, 0.02], [0.0, 0.2, -0.01]])
    via_components = prod.product_distance(prod._heis(), comps)
    direct = dist.distance_best(model, np.zeros(6), comps.ravel()).distance
    assert direct == pytest.approx(via_components, rel=0.02)
    oracle = np.sqrt(sum(heisenberg_oracle_point(c) ** 2 for c in comps))
    assert via_components == pytest.approx(oracle, rel=3e-3)


# ---------------------------------------------------------------------------
# adjoint spectrum on products

def test_spectrum_zero_control_has_horizontal_rank():
    rows = prod.elusive_spectrum([1, 2, 3], amplitudes="zero")
    assert [r.rank for r in rows] == [2, 4, 6]


def test_spectrum_flat_vs_harmonic():
    flat = prod.elusive_spectrum([1, 2, 4], amplitudes="flat")
    harm = prod.elusive_spectrum([1, 2, 4], amplitudes="harmonic")
    assert flat[0].sigma_min == pytest.approx(harm[0].sigma_min)
    # unequal block weights make the weakest block weaker
    assert harm[-1].sigma_min < flat[-1].sigma_min
    assert all(r.rank == 3 * r.N for r in harm)


def test_spectrum_memory_guard():
    with pytest.raises(MemoryError):
        prod.elusive_spectrum([201])
    with pytest.raises(ValueError):
        prod.elusive_spectrum([1], amplitudes="bumpy")


def test_lift_control_weights_blocks():
    u = prod.circle_control(8)
    lifted = prod.lift_control(u, [1.0, 0.5])
    assert lifted.h == 4
    assert np.allclose(lifted.values[:, 2:], 0.5 * u.values)
