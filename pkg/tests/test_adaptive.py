import numpy as np
import pytest

from barytree.adaptive import adaptive_rule, vectors_to_spinors
from barytree.errors import ConfigError
from barytree.sphere import PlanePoint, stereo_project


def test_adaptive_rule_integrates_smooth_functions():
    rule = adaptive_rule(lambda u: (u[:, 2:3] / np.linalg.norm(u, axis=1, keepdims=True)) ** 2, tol=1e-12)
    assert abs(rule.weights.sum() - 1) < 1e-14
    assert rule.integrate(lambda p: p[:, 2] ** 2) == pytest.approx(1 / 3, abs=1e-12)
    assert np.allclose(rule.integrate(lambda p: p), 0, atol=1e-13)


def test_adaptive_rule_resolves_a_narrow_cap():
    # mass of the cap {x3 > 1 - eps} is eps / 2 for the probability measure
    eps = 1e-3

    def bump(u):
        x3 = u[:, 2] / np.linalg.norm(u, axis=1)
        return np.exp(-(1 - x3) / eps)[:, None]

    rule = adaptive_rule(bump, tol=1e-10)
    exact = eps / 2 * (1 - np.exp(-2 / eps))
    assert rule.integrate(lambda p: np.exp(-(1 - p[:, 2]) / eps)) == pytest.approx(exact, rel=1e-6)
    assert rule.panels > 6 * 4 * 4  # refined beyond the first split


def test_spinors_of_vectors():
    v = np.array([[0, 0, -3.0], [0, 0, 2.0], [1, 1, 0.0]])
    p, q = vectors_to_spinors(v)
    for k, z in enumerate([PlanePoint(0), PlanePoint.inf(), PlanePoint((1 + 1j) / np.sqrt(2))]):
        back = stereo_project(PlanePoint.from_spinor(p[k], q[k])).array
        assert np.allclose(back, stereo_project(z).array, atol=1e-15)


def test_adaptive_rule_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        adaptive_rule(lambda u: u, n=1)
