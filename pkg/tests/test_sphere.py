import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from barytree.errors import ConfigError, DomainError
from barytree.sphere import (PlanePoint, SpherePoint, as_plane, chordal, make_quadrature,
                             stereo_project, stereo_unproject)
from oracles import real_sph_harm_values

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.mark.parametrize("z, v", [(0, (0, 0, -1)), (None, (0, 0, 1)), (1, (1, 0, 0)), (1j, (0, 1, 0))])
def test_stereo_project_examples(z, v):
    assert np.allclose(stereo_project(as_plane(z)).array, v, atol=1e-15)


@pytest.mark.parametrize("v, z", [((0, 0, 1), None), ((0, 0, -1), 0), ((1, 0, 0), 1)])
def test_stereo_unproject_examples(v, z):
    p = stereo_unproject(SpherePoint(v))
    if z is None:
        assert p.is_inf
    else:
        assert abs(p.value - z) < 1e-15


@given(finite, finite)
def test_projection_round_trip_and_unit_norm(x, y):
    z = complex(x, y)
    s = stereo_project(PlanePoint(z))
    assert abs(np.linalg.norm(s.array) - 1) < 1e-12
    back = stereo_unproject(s)
    assert np.linalg.norm(stereo_project(back).array - s.array) < 1e-12
    assert chordal(back, z) < 1e-12


def test_sphere_point_normalizes_and_rejects_zero():
    assert np.allclose(SpherePoint((0, 0, 2)).array, (0, 0, 1))
    with pytest.raises(DomainError):
        SpherePoint((0, 0, 0))


def test_plane_point_infinity_has_no_payload():
    assert PlanePoint.inf().value is None and PlanePoint.inf().is_inf
    with pytest.raises(DomainError):
        PlanePoint(complex("inf"))


def test_quadrature_examples():
    rule = make_quadrature(30)
    assert abs(rule.integrate(lambda p: np.ones(len(p))) - 1) < 1e-14
    assert np.allclose(rule.integrate(lambda p: p), 0, atol=1e-15)
    assert abs(rule.integrate(lambda p: p[:, 2] ** 2) - 1 / 3) < 1e-14


@pytest.mark.parametrize("order, grading", [(8, 0), (12, 0), (10, 3), (16, 5)])
def test_quadrature_exact_on_spherical_harmonics(order, grading):
    rule = make_quadrature(order, grading)
    assert abs(rule.weights.sum() - 1) < 1e-12
    assert rule.weights.max() < 0.25
    pts = rule.points
    assert np.allclose(np.linalg.norm(pts, axis=1), 1, atol=1e-12)
    for l in range(rule.degree + 1):
        for m in range(-l, l + 1):
            val = rule.weights @ real_sph_harm_values(l, m, pts)
            # the integral of Y_00 over the probability measure is 1/sqrt(4 pi)
            expected = 1 / math.sqrt(4 * math.pi) if l == 0 else 0.0
            assert abs(val - expected) < 1e-10, (l, m, val)


def test_quadrature_misses_degree_above_order():
    rule = make_quadrature(4)
    l = rule.degree + 1
    vals = [abs(rule.weights @ real_sph_harm_values(l, m, rule.points)) for m in range(-l, l + 1)]
    assert max(vals) > 1e-6


@pytest.mark.parametrize("order", [2, 401, 3.5])
def test_unsupported_order(order):
    with pytest.raises(ConfigError):
        make_quadrature(order)


def test_spinors_match_points():
    rule = make_quadrature(10, 2)
    p, q = rule.spinors
    for (pi, qi), v in zip(zip(p[::37], q[::37]), rule.points[::37]):
        s = stereo_project(PlanePoint.from_spinor(pi, qi))
        assert np.allclose(s.array, v, atol=1e-12)
