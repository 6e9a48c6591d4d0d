import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from barytree.errors import ConfigError, DomainError, StructureError
from barytree.h3 import ORIGIN, hyp_dist, random_ball_point
from barytree.tree import (FiniteTree, TreeMap, TreePoint, critical_locus, cycle_translation_length, fiber,
                           fit_tree, four_point_defect, glued_cover, hull, hyperbolic_distances, local_degree,
                           map_from_json, map_to_json, mutate_cover, project, random_tree, translation_length_end,
                           tree_from_json, tree_to_json, validate_branched_cover, vertex_point)
from oracles import quartet_linf_optimum

seeds = st.integers(0, 2 ** 32 - 1)


def star(n=3, length=1.0):
    return FiniteTree(["o"] + [f"l{i}" for i in range(n)], [("o", f"l{i}", length) for i in range(n)])


def fold(declared=2):
    src = FiniteTree(["a", "m", "b"], [("a", "m", 0.5), ("m", "b", 0.5)])
    tgt = FiniteTree(["p", "q"], [("p", "q", 1.0)])
    return TreeMap(src, tgt, {"a": "p", "m": "q", "b": "p"}, {("a", "m"): 2, ("b", "m"): 2}, declared,
                   witness=["a", "m", "b"])


def line(with_ends=True):
    """The real line as a tree: rays to the ends ``al`` and ``be`` glued to the segment [u, v]."""
    return FiniteTree(["al", "u", "v", "be"], [("al", "u", None), ("u", "v", 1.0), ("v", "be", None)],
                      ends=["al", "be"])


def shift(c):
    """Translation by ``c`` towards ``be`` (slope 1 everywhere)."""
    T = line()
    u_image = TreePoint("u", "v", c) if c < 1 else TreePoint("v", "be", c - 1.0)
    images = {"al": "al", "be": "be", "u": u_image, "v": TreePoint("v", "be", c)}
    return TreeMap(T, T, images, {("al", "u"): 1, ("u", "v"): 1, ("be", "v"): 1}, 1)


# ---------------------------------------------------------------------------
# trees


def test_tree_validation():
    with pytest.raises(DomainError):
        FiniteTree(["a", "b", "c"], [("a", "b", 1.0)])
    with pytest.raises(DomainError):
        FiniteTree(["a", "b", "c"], [("a", "b", 1.0), ("b", "a", 2.0)])
    with pytest.raises(DomainError):
        FiniteTree(["a", "b"], [("a", "b", 0.0)])
    with pytest.raises(DomainError):
        FiniteTree(["a", "b", "c"], [("a", "b", 1.0), ("b", "c", 1.0)], ends=["b"])
    T = line()
    assert T.length("u", "al") == math.inf and T.degree("al") == 1


def test_points_and_distances():
    T = star()
    p = T.point("o", "l0", 0.25)
    q = T.point("l1", "o", 0.5)
    assert T.dist(p, q) == pytest.approx(0.75)
    assert T.point("o", "l0", 1.0) == vertex_point("l0")
    with pytest.raises(DomainError):
        T.point("o", "l0", 1.5)
    L = line()
    far = L.point("v", "be", 100.0)
    assert L.dist(vertex_point("u"), far) == pytest.approx(101.0)


@given(seeds, st.integers(2, 12))
def test_tree_metric_axioms(seed, n):
    rng = np.random.default_rng(seed)
    T = random_tree(rng, n)
    pts = []
    for _ in range(4):
        u, v, L = T.edges[int(rng.integers(len(T.edges)))]
        pts.append(T.point(u, v, float(rng.uniform(0, L))))
    for a, b, c in itertools.permutations(pts, 3):
        assert T.dist(a, b) <= T.dist(a, c) + T.dist(c, b) + 1e-12
        assert T.dist(a, b) == pytest.approx(T.dist(b, a))
    D = np.array([[T.dist(a, b) for b in pts] for a in pts])
    assert four_point_defect(D, 0, 1, 2, 3) < 1e-9


def test_json_round_trip():
    T = line()
    assert tree_from_json(tree_to_json(T)) == T
    assert json.loads(tree_to_json(T))["edges"][0][2] is None
    with pytest.raises(ConfigError):
        FiniteTree.from_dict({"vertices": ["a"], "edges": [], "colour": 1})
    f = fold()
    g = map_from_json(map_to_json(f))
    assert g.images == f.images and g.slopes == f.slopes and g.witness == f.witness


# ---------------------------------------------------------------------------
# hulls and projections


def test_hull_examples():
    T = star(4)
    assert hull(T, T.vertices) == T
    path = hull(T, ["l0", "l2"])
    assert set(path.vertices) == {"l0", "o", "l2"}
    tripod = hull(T, ["l0", "l1", "l3"])
    assert set(tripod.vertices) == {"o", "l0", "l1", "l3"} and len(tripod.edges) == 3
    with pytest.raises(DomainError):
        hull(T, [])
    with pytest.raises(DomainError):
        hull(T, ["zz"])


@given(seeds, st.integers(2, 14))
def test_hull_idempotent_and_monotone(seed, n):
    rng = np.random.default_rng(seed)
    T = random_tree(rng, n)
    A = list(rng.choice(T.vertices, size=min(3, n), replace=False))
    B = A + list(rng.choice(T.vertices, size=2))
    H = hull(T, A)
    assert hull(T, H.vertices) == H
    assert set(H.vertices) <= set(hull(T, B).vertices)


def test_project_examples():
    T = star(3)
    leg = hull(T, ["o", "l1"])
    p = T.point("o", "l1", 0.3)
    assert project(T, p, leg) == p
    assert project(T, vertex_point("l0"), leg) == vertex_point("o")
    mid = T.point("o", "l0", 0.5)
    assert project(T, mid, hull(T, ["l1", "l2"])) == vertex_point("o")


@given(seeds, st.integers(3, 12))
def test_projection_is_nearest(seed, n):
    rng = np.random.default_rng(seed)
    T = random_tree(rng, n)
    sub = hull(T, list(rng.choice(T.vertices, size=2, replace=False)))
    u, v, L = T.edges[int(rng.integers(len(T.edges)))]
    x = T.point(u, v, float(rng.uniform(0, L)))
    proj = project(T, x, sub)
    candidates = [vertex_point(w) for w in sub.vertices]
    for a, b, Ls in sub.edges:
        candidates += [sub.point(a, b, Ls * k / 9) for k in range(1, 9)]
    assert T.dist(x, proj) <= min(T.dist(x, c) for c in candidates) + 1e-12


# ---------------------------------------------------------------------------
# maps, local degree and validation


def test_local_degree_examples():
    T = star(3)
    ident = TreeMap(T, T, {v: v for v in T.vertices}, {("l0", "o"): 1, ("l1", "o"): 1, ("l2", "o"): 1}, 1)
    assert all(local_degree(ident, v) == 1 for v in T.vertices)
    assert critical_locus(ident) == []
    assert str(validate_branched_cover(ident)) == "valid, d = 1"
    f = fold()
    assert local_degree(f, "m") == 2
    assert local_degree(f, f.source.point("a", "m", 0.2)) == 1
    assert critical_locus(f) == [vertex_point("m")]


def test_slope_counts_length_not_branching():
    # a single slope-3 edge covering a segment three times longer: the interior
    # is not a branch point, and the cover has degree 1
    src = FiniteTree(["a", "b"], [("a", "b", 1.0)])
    tgt = FiniteTree(["p", "q"], [("p", "q", 3.0)])
    f = TreeMap(src, tgt, {"a": "p", "b": "q"}, {("a", "b"): 3}, 1, witness=["a", "b"])
    assert local_degree(f, src.point("a", "b", 0.5)) == 1
    assert validate_branched_cover(f).valid


def test_validation_examples():
    assert validate_branched_cover(fold(2)).valid
    bad = validate_branched_cover(fold(3))
    assert not bad.valid
    kind, witness, detail = bad.failures[0]
    assert kind == "fiber" and "2 != 3" in detail
    # the same fold without the witness subtree violates the local isometry axiom
    f = fold()
    g = TreeMap(f.source, f.target, f.images, f.slopes, 2)
    assert any(k == "isometry" for k, _, _ in validate_branched_cover(g).failures)


def test_map_constructor_checks_structure():
    src = FiniteTree(["a", "b"], [("a", "b", 1.0)])
    with pytest.raises(StructureError):
        TreeMap(src, src, {"a": "a"}, {("a", "b"): 1}, 1)
    with pytest.raises(StructureError):
        TreeMap(src, src, {"a": "a", "b": "b"}, {("a", "b"): 0}, 1)
    with pytest.raises(StructureError):
        TreeMap(src, src, {"a": "a", "b": "b"}, {("a", "b"): 1.5}, 1)


@given(seeds, st.integers(2, 8), st.integers(1, 4))
@settings(max_examples=25)
def test_random_covers_satisfy_degree_sum(seed, n, d):
    rng = np.random.default_rng(seed)
    T = random_tree(rng, n)
    f = glued_cover(T, d, rng)
    assert validate_branched_cover(f).valid
    for _ in range(1000 // 10):
        u, v, L = T.edges[int(rng.integers(len(T.edges)))]
        y = T.point(u, v, float(rng.uniform(0, L)))
        assert sum(local_degree(f, x) for x in fiber(f, y)) == d
        for x in fiber(f, y):
            assert T.dist(f(x), y) < 1e-9


@given(seeds, st.sampled_from(["slope", "image"]))
@settings(max_examples=25)
def test_mutations_are_caught(seed, kind):
    rng = np.random.default_rng(seed)
    f = glued_cover(random_tree(rng, int(rng.integers(2, 7))), int(rng.integers(1, 4)), rng)
    report = validate_branched_cover(mutate_cover(f, rng, kind))
    assert not report.valid and report.failures[0][1] is not None


# ---------------------------------------------------------------------------
# translation lengths


@pytest.mark.parametrize("c", [0.4, 1.7, 3.0])
def test_shift_translation_lengths(c):
    f = shift(c)
    assert validate_branched_cover(f).valid
    assert translation_length_end(f, "al") == pytest.approx(c, abs=1e-12)
    assert translation_length_end(f, "be") == pytest.approx(-c, abs=1e-12)
    assert cycle_translation_length(f, ["al"]) == pytest.approx(c, abs=1e-12)


def test_identity_and_expanding_ends():
    T = line()
    slopes = {("al", "u"): 1, ("u", "v"): 1, ("be", "v"): 1}
    ident = TreeMap(T, T, {v: v for v in T.vertices}, slopes, 1)
    assert translation_length_end(ident, "al") == 0 and translation_length_end(ident, "be") == 0
    expand = TreeMap(T, T, {v: v for v in T.vertices}, {**slopes, ("be", "v"): 2}, 1)
    assert translation_length_end(expand, "be") == -math.inf
    assert cycle_translation_length(expand, ["be"]) == -math.inf


def test_two_cycle_of_ends():
    # reflection of the line through u followed by a shift by c towards be:
    # al -> be with length -c and be -> al with length +c
    T = line()
    c = 0.6
    images = {"al": "be", "be": "al", "u": T.point("u", "v", c), "v": TreePoint("u", "al", 1.0 - c)}
    f = TreeMap(T, T, images, {("al", "u"): 1, ("u", "v"): 1, ("be", "v"): 1}, 1)
    assert validate_branched_cover(f).valid
    assert translation_length_end(f, "al") == pytest.approx(-c, abs=1e-12)
    assert translation_length_end(f, "be") == pytest.approx(c, abs=1e-12)
    assert cycle_translation_length(f, ["al", "be"]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(StructureError):
        cycle_translation_length(f, ["al"])


def test_translation_errors():
    f = fold()
    with pytest.raises(StructureError):
        translation_length_end(f, "a")
    with pytest.raises(StructureError):
        translation_length_end(shift(1.0), "u")


@given(st.floats(0.05, 5.0), seeds)
def test_translation_length_basepoint_invariant(c, seed):
    f = shift(c)
    rng = np.random.default_rng(seed)
    T = f.source
    a = T.point("u", "v", float(rng.uniform(0, 1)))
    b = T.point("v", "be", float(rng.uniform(0, 10)))
    for end in ("al", "be"):
        assert translation_length_end(f, end, a) == pytest.approx(translation_length_end(f, end, b), abs=1e-9)


# ---------------------------------------------------------------------------
# fitting


def test_fit_three_points_is_tripod():
    D = np.array([[0, 3, 4], [3, 0, 5], [4, 5, 0.0]])
    fit = fit_tree(["x", "y", "z"], D)
    assert fit.ok and fit.distortion < 1e-12
    # Gromov products at x: (y|z)_x = 1, so x's leg is 1, y's is 2, z's is 3
    T = fit.tree
    (center,) = [v for v in T.vertices if v not in fit.placement.values()]
    legs = {lab: T.vertex_dist(fit.placement[lab], center) for lab in "xyz"}
    assert legs == pytest.approx({"x": 1.0, "y": 2.0, "z": 3.0})


def test_fit_tree_metric_exactly():
    D = np.array([[0, 3, 4, 5], [3, 0, 5, 6], [4, 5, 0, 3], [5, 6, 3, 0.0]])
    assert four_point_defect(D, 0, 1, 2, 3) == 0
    fit = fit_tree(list("abcd"), D)
    assert fit.ok and fit.distortion < 1e-12


def test_fit_square_reports_distortion():
    s = math.sqrt(2)
    D = np.array([[0, 1, s, 1], [1, 0, 1, s], [s, 1, 0, 1], [1, s, 1, 0.0]])
    fit = fit_tree(list("abcd"), D, tol=1e-3)
    best = quartet_linf_optimum(D)
    assert best > 0.1
    assert not fit.ok and fit.distortion >= best - 1e-9
    assert fit.worst_quadruple == ("a", "b", "c", "d")


@given(seeds, st.integers(2, 10))
def test_fit_reproduces_tree_metrics(seed, n):
    rng = np.random.default_rng(seed)
    T = random_tree(rng, n)
    labels = list(T.vertices)
    D = np.array([[T.vertex_dist(a, b) for b in labels] for a in labels])
    fit = fit_tree(labels, D, tol=1e-9)
    assert fit.ok
    fitted = np.array([[fit.tree.vertex_dist(fit.placement[a], fit.placement[b]) for b in labels] for a in labels])
    assert np.abs(fitted - D).max() < 1e-9


def test_fit_input_validation():
    with pytest.raises(DomainError):
        fit_tree(["a"], np.zeros((1, 1)))
    with pytest.raises(DomainError):
        fit_tree(["a", "b"], np.array([[0, 1], [2, 0.0]]))


@given(seeds)
def test_hyperbolic_distances_match_ball_distance(seed):
    rng = np.random.default_rng(seed)
    pts = [random_ball_point(rng, 6.0) for _ in range(4)]
    scale = 2.5
    vecs = []
    for p in pts:
        r = hyp_dist(p, ORIGIN)
        u = p.array / np.linalg.norm(p.array)
        vecs.append(u * r / scale)
    D = hyperbolic_distances(vecs, scale)
    for i, j in itertools.combinations(range(4), 2):
        assert D[i, j] * scale == pytest.approx(hyp_dist(pts[i], pts[j]), rel=1e-8, abs=1e-9)


def test_hyperbolic_distances_do_not_overflow():
    D = hyperbolic_distances([[1.0, 0, 0], [-1.0, 0, 0], [0, 0, 0]], 2000.0)
    assert D[0, 1] == pytest.approx(2.0, rel=1e-6) and D[0, 2] == pytest.approx(1.0)
