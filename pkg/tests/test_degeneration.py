import math

import numpy as np
import pytest

from barytree.barycentric import extend_many
from barytree.degeneration import (FamilySpec, SeedSpec, degeneration_indicator, dominant_cycle,
                                   family_from_name, indicator_csv, linear_family, naturality_gap,
                                   preimages_of_origin, quadratic_family, rescale_radius, scaled_square_family,
                                   snapshot, snapshot_csv, translation_csv, translation_estimate,
                                   verify_preimage)
from barytree.errors import DomainError
from barytree.frames import Frame
from barytree.h3 import (ORIGIN, BallPoint, CylindricalPoint, Isometry, apply_ball, cylindrical_frame,
                         hyp_dist, random_isometry)
from barytree.rational import RationalMap
from barytree.sphere import PlanePoint

Z2 = RationalMap.power(2)


def test_family_constructors():
    fam = family_from_name("quadratic", [1, 2])
    assert fam.label == "z^2+c" and len(fam.maps()) == 2
    with pytest.raises(DomainError):
        family_from_name("cubic", [1])
    with pytest.raises(DomainError):
        FamilySpec(lambda c: Z2, (), "empty")


def test_mobius_preimage_is_inverse_image_of_origin():
    M = random_isometry(np.random.default_rng(4), 0.8)
    pre = preimages_of_origin(RationalMap.mobius(M))
    assert len(pre) == 1
    target = apply_ball(M.inverse(), ORIGIN)
    assert hyp_dist(pre.solutions[0].point, target) < 1e-8
    assert rescale_radius(pre) == pytest.approx(hyp_dist(ORIGIN, target), abs=1e-8)


def test_z2_preimage_is_origin_only():
    pre = preimages_of_origin(Z2)
    assert len(pre) == 1 and pre.solutions[0].distance < 1e-8
    assert rescale_radius(pre) < 1e-8
    # oracle: the radial coordinate of E(z^2) stays positive on a dense radial
    # scan, so no point (r, theta, 0) with r > 0 maps to the origin
    rs = np.linspace(0.05, 6, 40)
    images = extend_many(Z2, [CylindricalPoint(r, 0, 0) for r in rs])
    assert all(res.cylindrical.r > 0 for res in images)


def test_scaled_square_preimage_on_axis():
    a = 1e4
    pre = preimages_of_origin(RationalMap.power(2, a))
    target = Frame.from_isometry(cylindrical_frame(CylindricalPoint(0, 0, -math.log(a) / 2)))
    assert min(s.frame.dist(target) for s in pre.solutions) < 1e-3
    for s in pre.solutions:
        assert s.residual <= 1e-9
        assert verify_preimage(RationalMap.power(2, a), s) < 1e-8


@pytest.mark.parametrize("a", [1e2, 1e3, 1e4])
def test_scaled_square_radius(a):
    r = rescale_radius(preimages_of_origin(RationalMap.power(2, a)))
    assert r == pytest.approx(math.log(a) / 2, abs=1e-2)


def test_solutions_are_separated_and_verified():
    f = RationalMap.from_polys([1, 0, 100])
    pre = preimages_of_origin(f)
    for i, s in enumerate(pre.solutions):
        assert verify_preimage(f, s) < 10 * 1e-9 + 1e-9
        for t in pre.solutions[i + 1:]:
            assert s.frame.dist(t.frame) > pre.dedupe_radius


@pytest.mark.parametrize("seed", [0, 1])
def test_radius_monotone_in_seed_budget(seed):
    f = RationalMap.from_polys([1, 0, 30])
    small = preimages_of_origin(f, search=SeedSpec(depths=(2.0,), random_seeds=2, seed=seed))
    big = preimages_of_origin(f, search=SeedSpec(depths=(2.0,), random_seeds=6, seed=seed))
    assert rescale_radius(big) >= rescale_radius(small) - 1e-9


def test_indicator_examples():
    rows = degeneration_indicator(quadratic_family([1, 1, 1]))
    radii = [r.radius for r in rows]
    assert max(radii) - min(radii) < 1e-6
    assert all(r.status == "ok" for r in rows)
    rows = degeneration_indicator(linear_family([2.0, 1.1, 1.01]))
    radii = [r.radius for r in rows]
    assert radii == pytest.approx([math.log(2.0), math.log(1.1), math.log(1.01)], abs=1e-8)
    assert radii[0] > radii[1] > radii[2]
    assert indicator_csv(rows).splitlines()[0] == "parameter,radius,resultant,status"


def test_translation_estimate_scaled_square():
    est = translation_estimate(scaled_square_family([1e2, 1e4]))
    for rec in est.records:
        assert rec.cycle_length == pytest.approx(math.log(2), abs=1e-9)
        assert rec.multiplier_ratio == pytest.approx(math.log(2) / rec.radius)
    assert est.records[1].multiplier_ratio < est.records[0].multiplier_ratio
    header = translation_csv(est).splitlines()[0].split(",")
    assert header[:6] == ["parameter", "r", "L", "L_over_r", "displacement_ratio", "gap"]


def test_dominant_cycle_and_depth_grid_validation():
    # the fixed points of z^2 are 0 and infinity (superattracting) and 1 (multiplier 2)
    C, L = dominant_cycle(Z2, 1)
    assert abs(C.points[0].value - 1) < 1e-12
    assert L == pytest.approx(math.log(2))
    with pytest.raises(DomainError):
        translation_estimate(quadratic_family([100]), depth_grid=(0.0, 1.0))


def test_translation_invariant_under_rotation():
    fam = quadratic_family([100j])
    R = Isometry([[np.exp(0.35j), 0], [0, np.exp(-0.35j)]])
    Rm, Ri = RationalMap.mobius(R), RationalMap.mobius(R.inverse())
    from barytree.rational import compose
    conj = FamilySpec(lambda c: compose(Rm, compose(fam.generator(c), Ri)), fam.params, "conjugated")
    a = translation_estimate(fam).records[0]
    b = translation_estimate(conj).records[0]
    assert b.radius == pytest.approx(a.radius, abs=1e-6)
    assert b.multiplier_ratio == pytest.approx(a.multiplier_ratio, abs=1e-6)
    assert b.displacement_ratio == pytest.approx(a.displacement_ratio, abs=1e-6)


def test_translation_ratios_undefined_for_rotations():
    rot = FamilySpec(lambda c: RationalMap.mobius(np.array([[np.exp(1j * c.real), 0], [0, 1]])), [0.7], "rotation")
    rec = translation_estimate(rot).records[0]
    assert rec.radius < 1e-6
    assert rec.cycle_length == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(rec.multiplier_ratio) and math.isnan(rec.displacement_ratio)


def test_naturality_gap_examples():
    M = random_isometry(np.random.default_rng(8), 0.6)
    for N in (1, 2, 3):
        assert naturality_gap(RationalMap.mobius(M), N, BallPoint((0.1, 0.2, -0.3))) < 1e-8
    assert naturality_gap(Z2, 2) < 1e-8
    with pytest.raises(DomainError):
        naturality_gap(Z2, 0)


def test_snapshot_examples():
    assert [lab for lab, _ in snapshot(Z2, 1.0)] == ["base"]
    x = BallPoint((0.3, 0.0, 0.4))
    rows = dict(snapshot(RationalMap.identity(), 2.0, [x, PlanePoint(0)]))
    assert np.linalg.norm(rows["x0"]) == pytest.approx(hyp_dist(ORIGIN, x) / 2)
    assert np.allclose(rows["Ex0"], rows["x0"], atol=1e-9)
    assert np.allclose(rows["ray1"], (0, 0, -1))
    f = RationalMap.power(2, 1e3)
    pre = preimages_of_origin(f)
    r = rescale_radius(pre)
    rows = snapshot(f, r, preimages=pre)
    assert max(np.linalg.norm(v) for lab, v in rows if lab.startswith("pre")) == pytest.approx(1.0, abs=1e-12)
    assert snapshot_csv(rows).splitlines()[0] == "label,x,y,z"
    with pytest.raises(DomainError):
        snapshot(f, 0.0)
