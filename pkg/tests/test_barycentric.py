import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from barytree.barycentric import (C_LIPSCHITZ, M_SPECTRAL, WeightedSpherePoints, balance_vector, barycenter,
                                  belt_lower_bound, belt_volume, blaschke_family, delta_curve,
                                  delta_curve_csv, delta_value, derivative, extend, extend_many,
                                  finite_difference_derivative, fx_operator, fy_operator, fy_spectrum,
                                  g_at_r, hyperbolic_operator_norm, kappa, lemma_a2_check, lipschitz_scan,
                                  pushforward, recenter)
from barytree.errors import DomainError, PreconditionError
from barytree.h3 import (ORIGIN, CylindricalPoint, Isometry, apply_ball, from_cylindrical, hyp_dist,
                         random_ball_point, random_isometry)
from barytree.rational import RationalMap, compose
from barytree.sphere import make_quadrature
from conftest import kostlan_map
from oracles import belt_volume_power, mx_formula, z2_axis_moment

seeds = st.integers(0, 2 ** 32 - 1)
RULE = make_quadrature(30)
Z2 = RationalMap.power(2)


def rotation(angle, axis):
    """Moebius rotation about a coordinate axis of the ball (as a map of the plane)."""
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    if axis == 2:
        return Isometry([[c + 1j * s, 0], [0, c - 1j * s]])
    if axis == 1:
        return Isometry([[c, -s], [s, c]])
    return Isometry([[c, 1j * s], [1j * s, c]])


def as_multiset(points, weights, digits=9):
    return sorted(zip(np.round(points, digits).tolist(), np.round(weights, 15).tolist()))


def test_constants():
    assert C_LIPSCHITZ == pytest.approx(27 / (2 * math.log(3)))
    assert round(C_LIPSCHITZ, 1) == 12.3
    assert M_SPECTRAL == pytest.approx(27 / (8 * math.log(3)))
    assert belt_lower_bound(1) == pytest.approx(16 * math.log(3) / 81)


def test_pushforward_identity_is_rule():
    m = pushforward(RationalMap.identity(), ORIGIN, RULE)
    assert np.allclose(m.points, RULE.points, atol=1e-14)
    assert np.array_equal(m.weights, RULE.weights)
    assert np.all(m.weights > 0) and abs(m.weights.sum() - 1) < 1e-12


def test_pushforward_rotation():
    R = rotation(0.7, 1)
    m = pushforward(RationalMap.mobius(R), ORIGIN, RULE)
    # images are the rotated nodes (rotation by 0.7 about the y axis, sign fixed by the spinor action)
    c, s = math.cos(0.7), math.sin(0.7)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    direct = RULE.points @ rot.T
    other = RULE.points @ rot
    assert np.allclose(m.points, direct, atol=1e-12) or np.allclose(m.points, other, atol=1e-12)
    assert np.array_equal(m.weights, RULE.weights)


def test_pushforward_z2_symmetric():
    m = pushforward(Z2, ORIGIN, RULE)
    base = as_multiset(m.points, m.weights)
    flip = m.points * np.array([1, 1, -1])
    assert as_multiset(flip, m.weights) == base
    # rotation by a multiple of the doubled azimuth step keeps the weighted set
    step = 2 * (2 * math.pi / 62)
    c, s = math.cos(step), math.sin(step)
    rot = m.points @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    assert as_multiset(rot, m.weights, 8) == as_multiset(m.points, m.weights, 8)


def test_balance_vector_examples():
    assert np.allclose(balance_vector(pushforward(RationalMap.identity(), ORIGIN, RULE)), 0, atol=1e-15)
    pair = WeightedSpherePoints(np.array([[0, 0, 1.0], [0, 0, -1.0]]), np.array([0.5, 0.5]))
    assert np.allclose(balance_vector(pair), 0)
    # the axis endpoints are fixed by the translation along the axis, so this
    # pair stays balanced; an equatorial pair is pulled to the south
    assert np.allclose(balance_vector(pair, (0, 0, 0.5)), 0, atol=1e-15)
    side = WeightedSpherePoints(np.array([[1, 0, 0.0], [-1, 0, 0.0]]), np.array([0.5, 0.5]))
    b = balance_vector(side, (0, 0, 0.5))
    assert b[2] < 0
    expected = 0.5 * (mx_formula((0, 0, -0.5), (1, 0, 0)) + mx_formula((0, 0, -0.5), (-1, 0, 0)))
    assert np.allclose(b, expected)


def test_weighted_points_validation():
    with pytest.raises(DomainError):
        WeightedSpherePoints(np.eye(3), np.array([0.5, 0.5, 0.0]))
    with pytest.raises(DomainError):
        WeightedSpherePoints(np.eye(3), np.array([0.5, 0.5, 0.5]))


def test_barycenter_examples():
    res = barycenter(pushforward(RationalMap.identity(), ORIGIN, RULE))
    assert res.distance_from_origin < 1e-12
    res = barycenter(pushforward(RationalMap.identity(), (0.4, 0.1, 0), RULE))
    assert np.allclose(res.point.array, (0.4, 0.1, 0), atol=1e-8)
    assert res.residual < 1e-10
    assert barycenter(pushforward(Z2, ORIGIN, RULE)).distance_from_origin < 1e-12
    heavy = WeightedSpherePoints(np.array([[0, 0, 1.0], [1, 0, 0], [0, 1, 0]]), np.array([0.6, 0.2, 0.2]))
    with pytest.raises(PreconditionError):
        barycenter(heavy)


@given(seeds)
@settings(max_examples=15)
def test_barycenter_balances(seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((20, 3))
    w = rng.uniform(0.5, 1.5, 20)
    m = WeightedSpherePoints(pts, w / w.sum())
    res = barycenter(m)
    assert np.linalg.norm(balance_vector(m, res.point)) < 1e-9


@given(seeds)
@settings(max_examples=10)
def test_extend_reproduces_mobius(seed):
    rng = np.random.default_rng(seed)
    M = random_isometry(rng, 1.0)
    x = random_ball_point(rng, 2.5)
    y = extend(RationalMap.mobius(M), x)
    assert hyp_dist(y.point, apply_ball(M, x)) < 1e-8


@pytest.mark.parametrize("d, h", [(2, 0.7), (3, -1.1), (2, 4.0)])
def test_extend_power_on_axis(d, h):
    y = extend(RationalMap.power(d), CylindricalPoint(0, 0, h))
    c = y.cylindrical
    assert c.r < 1e-8
    assert c.h == pytest.approx(d * h, abs=1e-8)


def test_extend_z2_radial_point():
    c = extend(Z2, from_cylindrical(CylindricalPoint(1, 0, 0)), make_quadrature(40, 10), tol=1e-13).cylindrical
    delta = math.log(math.cosh(1)) - c.r
    assert delta > 0
    assert delta == pytest.approx(0.02286924140708163, abs=1e-9)
    assert abs(c.h) < 1e-9
    assert min(c.theta, 2 * math.pi - c.theta) < 1e-9


@given(seeds, st.integers(1, 4))
@settings(max_examples=10)
def test_conformal_naturality(seed, d):
    rng = np.random.default_rng(seed)
    f = kostlan_map(rng, d)
    M1, M2 = random_isometry(rng, 0.8), random_isometry(rng, 0.8)
    x = random_ball_point(rng, 1.5)
    g = compose(RationalMap.mobius(M1), compose(f, RationalMap.mobius(M2)))
    lhs = extend(g, x).point
    rhs = apply_ball(M1, extend(f, apply_ball(M2, x)).point)
    assert hyp_dist(lhs, rhs) < 1e-6


def test_extend_many_matches_extend():
    rng = np.random.default_rng(5)
    f = kostlan_map(rng, 2)
    xs = [random_ball_point(rng, 2.0) for _ in range(4)]
    many = extend_many(f, xs)
    for x, r in zip(xs, many):
        assert hyp_dist(r.point, extend(f, x).point) < 1e-9


def test_fy_fx_operators_for_z2():
    m = pushforward(Z2, ORIGIN, RULE)
    fy = fy_operator(m)
    axis = -2 + 2 * z2_axis_moment()
    side = -2 + (1 - z2_axis_moment())  # the trace of int f f^T is 1
    assert np.allclose(fy, np.diag([side, side, axis]), atol=1e-9)
    fx = fx_operator(m, RULE.points)
    D = -np.linalg.solve(fy, fx)
    assert np.allclose(D, np.diag([0, 0, 2]), atol=1e-8)
    lopsided = pushforward(Z2, (0.3, 0, 0), RULE)
    with pytest.raises(PreconditionError):
        fy_operator(lopsided)


def test_derivative_examples():
    D = derivative(Z2)
    assert np.allclose(D.matrix, np.diag([0, 0, 2]), atol=1e-8)
    rng = np.random.default_rng(11)
    M = random_isometry(rng, 1.0)
    D = derivative(RationalMap.mobius(M), random_ball_point(rng, 1.5))
    assert np.allclose(D.matrix @ D.matrix.T, np.eye(3), atol=1e-6)


def test_operator_norm_examples():
    assert hyperbolic_operator_norm(np.eye(3)) == pytest.approx(1)
    assert hyperbolic_operator_norm(np.diag([0, 0, 2])) == pytest.approx(2)
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((3, 3)))
    assert abs(hyperbolic_operator_norm(q) - 1) < 1e-10


@given(seeds, st.integers(2, 4))
@settings(max_examples=6)
def test_derivative_matches_finite_differences(seed, d):
    rng = np.random.default_rng(seed)
    f = kostlan_map(rng, d)
    x = random_ball_point(rng, 1.5)
    D = derivative(f, x)
    fd = finite_difference_derivative(f, x)
    assert np.linalg.norm(fd - D.raw) <= 1e-4 * max(np.linalg.norm(D.raw), 1e-3)


def test_lipschitz_scan_examples():
    rng = np.random.default_rng(2)
    mob = lipschitz_scan(RationalMap.mobius(random_isometry(rng, 1.0)), 200)
    assert abs(mob.max_norm - 1) < 1e-6
    sq = lipschitz_scan(Z2, 300)
    assert sq.max_norm >= 2 - 1e-4 and sq.within_bound
    cubic = lipschitz_scan(RationalMap.from_polys([1, 0, 0.1, 0]), 300)
    assert cubic.max_norm <= 36.86
    assert cubic.failures == 0 and cubic.samples == 300


def test_lipschitz_scan_is_deterministic():
    f = kostlan_map(np.random.default_rng(9), 2)
    a = lipschitz_scan(f, 260, seed=4).to_csv()
    b = lipschitz_scan(f, 260, seed=4).to_csv()
    assert a == b


def test_belt_examples():
    v = belt_volume(RationalMap.identity())
    assert v.V == pytest.approx(0.5, abs=1e-12)
    assert v.V1 == pytest.approx(0.25, abs=1e-12) and v.V2 == pytest.approx(0.25, abs=1e-12)
    for d in (2, 3, 5):
        assert belt_volume(RationalMap.power(d)).V == pytest.approx(belt_volume_power(d), abs=1e-9)
    with pytest.raises(PreconditionError):
        belt_volume(RationalMap.power(2, 5.0))


def test_recenter_and_spectrum():
    f = kostlan_map(np.random.default_rng(21), 3)
    g = recenter(f)
    assert extend(g).distance_from_origin < 1e-8
    eig = fy_spectrum(g)
    assert np.all(eig < 0)
    assert np.min(np.abs(eig)) >= 1 / (M_SPECTRAL * 3)
    assert np.sum(eig) == pytest.approx(-4, abs=1e-8)  # trace of -2I + 2 int f f^T


def test_delta_values():
    rows = delta_curve([0.25, 1.0, 8.0])
    ds = dict(rows)
    assert all(v > 0 for v in ds.values())
    assert ds[8.0] < ds[1.0]
    assert ds[0.25] == pytest.approx(0.00278045116330302, abs=1e-9)
    assert delta_value(1e-3) < 1e-6
    assert delta_curve_csv(rows).splitlines()[0] == "r,delta"
    with pytest.raises(DomainError):
        delta_curve([0.0])


def test_kappa_and_lemma_a2():
    res = kappa(0.5)
    c = res.cylindrical
    assert abs(c.theta - math.pi) < 1e-6 and abs(c.h) < 1e-8
    assert c.r == pytest.approx(0.011341148415402869, abs=1e-7)
    assert kappa(0.01).cylindrical.r < 1e-4
    for r in (0.5, 2.0):
        J_num, J_res = lemma_a2_check(0.5, r)
        assert J_num < 0 and abs(J_num - J_res) < 1e-8
    assert g_at_r(0.5, 1.0) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        lemma_a2_check(0.5, 1.0)
    with pytest.raises(DomainError):
        kappa(1.0)


def test_blaschke_family_fixes_unit_circle():
    f = blaschke_family(0.3)
    from barytree.rational import eval_map
    for t in np.linspace(0, 2 * math.pi, 7):
        assert abs(abs(eval_map(f, np.exp(1j * t)).value) - 1) < 1e-14
