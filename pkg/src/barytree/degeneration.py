"""Degenerating families: preimages of the basepoint, rescaling radii and
translation-length estimates at finite (desk) scale.

Preimages of the origin under ``E f`` are found by a Levenberg-Marquardt
search on the map ``y -> E f(y)``, using the implicit derivative from
``barycentric``.  Seeds sit on geodesic rays towards the zeros and poles of
``f`` at several depths, plus a few random points.  The search cannot certify
completeness, so ``rescale_radius`` is a lower bound for the true radius.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .barycentric import (DEFAULT_ORDER, DEFAULT_TOL, REFINE_TOL, DerivativeMatrix, default_rule, derivatives_many,
                          extend, relative_ball_vector)
from .errors import DomainError, NumericError, SearchFailure
from .frames import Frame, refactor
from .h3 import BallPoint, translations_from
from .rational import (RationalMap, cycle_length, find_cycles, form_roots, iterate,
                       resultant_magnitude)
from .sphere import PlanePoint, QuadratureRule, make_quadrature, stereo_project

DEFAULT_DEPTHS = (1.0, 2.0, 4.0, 8.0, 16.0)
DEDUPE_RADIUS = 1e-4
PREIMAGE_TOL = 1e-9        # hyperbolic distance of E f(y) from the basepoint
LM_MAX_ITER = 80
LM_MAX_STEP = 3.0
DEFAULT_DEPTH_GRID = (0.25, 0.5, 0.75, 1.0)
RADIUS_FLOOR = 1e-6        # radii below this are solver noise around r = 0


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class FamilySpec:
    """A parameterised family ``params -> RationalMap`` with a label."""

    generator: Callable[[complex], RationalMap] = field(repr=False)
    params: tuple
    label: str

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise DomainError("a family needs at least one parameter")

    def maps(self):
        return [self.generator(c) for c in self.params]


def quadratic_family(params: Sequence[complex]) -> FamilySpec:
    """``z^2 + c``."""
    return FamilySpec(lambda c: RationalMap.from_polys([1, 0, c]), params, "z^2+c")


def scaled_square_family(params: Sequence[complex]) -> FamilySpec:
    """``a z^2``."""
    return FamilySpec(lambda a: RationalMap.from_polys([a, 0, 0]), params, "a*z^2")


def linear_family(params: Sequence[complex]) -> FamilySpec:
    """``a z``."""
    return FamilySpec(lambda a: RationalMap.from_polys([a, 0]), params, "a*z")


FAMILIES = {"quadratic": quadratic_family, "scaled_square": scaled_square_family, "linear": linear_family}


def family_from_name(name: str, params) -> FamilySpec:
    try:
        return FAMILIES[name](params)
    except KeyError:
        raise DomainError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# preimages of the origin


@dataclass(frozen=True)
class SeedSpec:
    """Seed recipe for ``preimages_of_origin``.

    Seeds on rays towards ``f^-1(0)`` and ``f^-1(inf)`` at ``depths``, then
    ``random_seeds`` points with uniform direction and radius in
    ``[0, random_radius]`` drawn from ``PCG64(seed)``.  The random seeds are
    generated sequentially, so a larger budget extends a smaller one.
    """

    depths: tuple = DEFAULT_DEPTHS
    random_seeds: int = 8
    random_radius: float = 8.0
    seed: int = 0

    def frames(self, f: RationalMap):
        targets = list(form_roots(f.P)) + list(form_roots(f.Q))
        out = [Frame.identity()]
        for z in targets:
            u = stereo_project(z).array
            out.extend(Frame.from_direction(u, t) for t in self.depths)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        for _ in range(self.random_seeds):
            u = rng.standard_normal(3)
            out.append(Frame.from_direction(u, float(rng.uniform(0, self.random_radius))))
        return out


@dataclass(frozen=True)
class PreimageSolution:
    frame: Frame = field(repr=False)
    residual: float          # hyperbolic distance of E f(y) from the basepoint
    distance: float          # hyperbolic distance of y from the basepoint

    @property
    def point(self) -> BallPoint:
        return self.frame.point()

    @property
    def direction(self):
        return self.frame.direction()


@dataclass(frozen=True)
class PreimageSet:
    basepoint: BallPoint
    solutions: tuple
    seed_count: int
    dedupe_radius: float
    failures: int = 0

    def __len__(self):
        return len(self.solutions)


def _target_vector(G: Frame):
    """Tangent vector at ``G`` (ball coordinates of its frame) pointing to the origin.

    Its Euclidean length is half the hyperbolic distance, the scale at which
    the normalised-frame derivative acts.
    """
    b = relative_ball_vector(G, Frame.identity())
    nb = float(np.linalg.norm(b))
    if nb == 0:
        return np.zeros(3), 0.0
    dist = 2 * math.atanh(min(nb, 1 - 1e-16))
    return b / nb * (dist / 2), dist


def _lm_search(f, frames, rule, tol, refine, max_iter=LM_MAX_ITER):
    """Damped Gauss-Newton iteration for ``E f(y) = 0`` from each seed frame."""
    n = len(frames)
    state = list(frames)
    derivs = derivatives_many(f, state, rule, refine=refine)
    resid = np.full(n, np.inf)
    target = [None] * n
    for i, D in enumerate(derivs):
        if isinstance(D, DerivativeMatrix):
            target[i], resid[i] = _target_vector(D.image)
    lam = np.full(n, 1e-3)
    active = np.array([isinstance(D, DerivativeMatrix) and resid[i] > tol for i, D in enumerate(derivs)])
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        trial = []
        for i in idx:
            J = derivs[i].raw
            JtJ = J.T @ J
            scale = max(np.trace(JtJ) / 3, 1e-12)
            s = np.linalg.solve(JtJ + lam[i] * scale * np.eye(3), J.T @ target[i])
            ns = float(np.linalg.norm(s))
            length = min(2 * ns, LM_MAX_STEP)
            if ns == 0:
                trial.append(state[i])
                continue
            fr = state[i].then(translations_from(s / ns, length))
            if np.abs(fr.K).max() > 1e3:
                fr = refactor(fr)
            trial.append(fr)
        new = derivatives_many(f, trial, rule, refine=refine)
        for j, i in enumerate(idx):
            D = new[j]
            if not isinstance(D, DerivativeMatrix):
                lam[i] *= 4
                if lam[i] > 1e8:
                    active[i] = False
                continue
            tv, r = _target_vector(D.image)
            if r < resid[i]:
                state[i], derivs[i], target[i], resid[i] = trial[j], D, tv, r
                lam[i] = max(lam[i] / 3, 1e-9)
                if r <= tol:
                    active[i] = False
            else:
                lam[i] *= 4
                if lam[i] > 1e8:
                    active[i] = False
    return state, resid


def _dedupe(frames, resid, radius):
    """Keep the best representative of each cluster, in residual order."""
    order = np.argsort(resid, kind="stable")
    kept = []
    for i in order:
        if not np.isfinite(resid[i]):
            continue
        if all(frames[i].dist(frames[k]) > radius for k in kept):
            kept.append(i)
    return kept


def preimages_of_origin(f: RationalMap, rule: QuadratureRule | None = None, search: SeedSpec | None = None,
                        tol: float = PREIMAGE_TOL, dedupe_radius: float = DEDUPE_RADIUS) -> PreimageSet:
    """Solutions ``y`` of ``E f(y) = 0`` reachable from the seed recipe.

    A fast search on the base rule is followed by a polishing search with
    adaptive quadrature on the distinct candidates.  Solutions are sorted by
    distance from the origin, then by direction.
    """
    rule = rule or default_rule()
    search = search or SeedSpec()
    seeds = search.frames(f)
    coarse, r0 = _lm_search(f, seeds, rule, tol * 10, refine=False)
    cand = _dedupe(coarse, np.where(r0 < 1e-6, r0, np.inf), max(dedupe_radius, 1e-3))
    fine, r1 = _lm_search(f, [coarse[i] for i in cand], rule, tol, refine=True)
    keep = _dedupe(fine, np.where(r1 <= tol, r1, np.inf), dedupe_radius)
    sols = [PreimageSolution(fine[i], float(r1[i]), fine[i].distance_from_origin()) for i in keep]
    sols.sort(key=lambda s: (round(s.distance, 8), tuple(np.round(s.direction, 8))))
    if not sols:
        raise SearchFailure("no preimage of the origin was found", residual=float(np.min(r0)))
    return PreimageSet(BallPoint((0.0, 0.0, 0.0)), tuple(sols), len(seeds), dedupe_radius,
                       failures=len(seeds) - int(np.sum(r0 < 1e-6)))


def verify_preimage(f: RationalMap, sol: PreimageSolution, order: int = 2 * DEFAULT_ORDER,
                    tol: float = DEFAULT_TOL) -> float:
    """Distance of ``E f(y)`` from the origin recomputed with a rule of doubled order."""
    return extend(f, sol.frame, make_quadrature(order), tol=tol).distance_from_origin


def rescale_radius(preimages: PreimageSet) -> float:
    """Largest distance from the basepoint to a found preimage (a lower bound)."""
    if not preimages.solutions:
        raise DomainError("empty preimage set")
    return max(s.distance for s in preimages.solutions)


# ---------------------------------------------------------------------------
# family level reports


@dataclass(frozen=True)
class IndicatorRow:
    param: complex
    radius: float
    resultant: float
    status: str = "ok"


def degeneration_indicator(family: FamilySpec, rule: QuadratureRule | None = None,
                           search: SeedSpec | None = None) -> list:
    """``(parameter, rescale_radius, resultant_magnitude)`` per parameter; failures recorded."""
    rows = []
    for c, f in zip(family.params, family.maps()):
        try:
            r = rescale_radius(preimages_of_origin(f, rule, search))
            rows.append(IndicatorRow(c, r, resultant_magnitude(f)))
        except NumericError as exc:
            rows.append(IndicatorRow(c, math.nan, resultant_magnitude(f), f"failed: {type(exc).__name__}"))
    return rows


@dataclass(frozen=True)
class TranslationRecord:
    param: complex
    radius: float
    cycle_length: float
    multiplier_ratio: float
    displacements: tuple         # ratio per depth in the grid
    displacement_ratio: float    # at the deepest grid point
    gap: float                   # relative gap between the two ratios


@dataclass(frozen=True)
class TranslationEstimate:
    q: int
    depth_grid: tuple
    records: tuple


def _relative_gap(a, b):
    if not (np.isfinite(a) and np.isfinite(b)):
        return math.inf
    den = max(abs(a), abs(b))
    return 0.0 if den == 0 else abs(a - b) / den


def dominant_cycle(f, q):
    """The cycle of period ``q`` with the largest finite length (ties: sorted order)."""
    cycles = find_cycles(f, q)
    if not cycles:
        raise DomainError(f"no cycle of period {q}")
    lengths = [cycle_length(f, C) for C in cycles]
    k = int(np.argmax(lengths))
    return cycles[k], lengths[k]


def translation_estimate(family: FamilySpec, q: int = 1, rule: QuadratureRule | None = None,
                         depth_grid: Sequence[float] = DEFAULT_DEPTH_GRID,
                         search: SeedSpec | None = None) -> TranslationEstimate:
    """Multiplier ratio ``L(C_n)/r_n`` against the displacement of ``E f^q``.

    For each parameter the displacement ratio at depth ``t`` is
    ``[d(x, 0) - d(E f^q(x), 0)] / r_n`` for ``x`` at distance ``t r_n`` on
    the ray towards the first point of the dominant cycle.  Both ratios are
    NaN when ``r_n`` is below ``RADIUS_FLOOR`` (for example rotations).
    """
    grid = tuple(float(t) for t in depth_grid)
    if not grid or any(not 0 < t <= 1 for t in grid):
        raise DomainError("depth grid must lie in (0, 1]")
    records = []
    for c, f in zip(family.params, family.maps()):
        r = rescale_radius(preimages_of_origin(f, rule, search))
        C, L = dominant_cycle(f, q)
        g = iterate(f, q)
        u = stereo_project(C.points[0]).array
        disp = []
        if r <= RADIUS_FLOOR:
            records.append(TranslationRecord(c, r, L, math.nan, tuple(math.nan for _ in grid), math.nan, math.inf))
            continue
        for t in grid:
            x = Frame.from_direction(u, t * r)
            y = extend(g, x, rule).frame
            disp.append((x.distance_from_origin() - y.distance_from_origin()) / r)
        mult = L / r
        records.append(TranslationRecord(c, r, L, mult, tuple(disp), disp[-1], _relative_gap(mult, disp[-1])))
    return TranslationEstimate(q, grid, tuple(records))


def naturality_gap(f: RationalMap, N: int, x=None, rule: QuadratureRule | None = None,
                   tol: float = DEFAULT_TOL, refine_tol: float = REFINE_TOL) -> float:
    """``d(E(f^N)(x), (E f)^N(x))``.

    The gap shrinks quickly along degenerating families; tightening ``tol``
    and ``refine_tol`` lowers the noise floor (about ``1e-10`` by default).
    """
    if N < 1:
        raise DomainError("N must be >= 1")
    x = Frame.identity() if x is None else Frame.coerce(x)
    lhs = extend(iterate(f, N), x, rule, tol=tol, refine_tol=refine_tol).frame
    y = x
    for _ in range(N):
        y = extend(f, y, rule, tol=tol, refine_tol=refine_tol).frame
    return lhs.dist(y)


# ---------------------------------------------------------------------------
# rescaled snapshots


def snapshot(f: RationalMap, scale: float, marked=(), rule: QuadratureRule | None = None,
             preimages: PreimageSet | None = None) -> list:
    """Rescaled positions ``direction * distance / scale`` of marked objects.

    Ball points (or frames) contribute themselves (``x<i>``) and their images
    (``Ex<i>``); plane points contribute the point at distance ``scale`` on the
    ray towards them (``ray<i>``); preimage solutions contribute ``pre<j>``.
    """
    if scale <= 0:
        raise DomainError("scale must be positive")
    out = [("base", np.zeros(3))]

    def rescaled(fr: Frame):
        return fr.direction() * fr.distance_from_origin() / scale

    for i, m in enumerate(marked):
        if isinstance(m, PlanePoint):
            out.append((f"ray{i}", stereo_project(m).array.copy()))
            continue
        fr = Frame.coerce(m)
        out.append((f"x{i}", rescaled(fr)))
        out.append((f"Ex{i}", rescaled(extend(f, fr, rule).frame)))
    if preimages is not None:
        for j, s in enumerate(preimages.solutions):
            out.append((f"pre{j}", rescaled(s.frame)))
    return out


# ---------------------------------------------------------------------------
# CSV


def _fmt(x):
    if isinstance(x, complex):
        return f"{x.real:.12g}{x.imag:+.12g}j" if x.imag else f"{x.real:.12g}"
    return f"{x:.12g}"


def indicator_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["parameter", "radius", "resultant", "status"])
    for r in rows:
        wr.writerow([_fmt(complex(r.param)), _fmt(r.radius), _fmt(r.resultant), r.status])
    return buf.getvalue()


def translation_csv(est: TranslationEstimate) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["parameter", "r", "L", "L_over_r", "displacement_ratio", "gap"]
                + [f"disp_t{t:g}" for t in est.depth_grid])
    for r in est.records:
        wr.writerow([_fmt(complex(r.param)), _fmt(r.radius), _fmt(r.cycle_length), _fmt(r.multiplier_ratio),
                     _fmt(r.displacement_ratio), _fmt(r.gap)] + [_fmt(v) for v in r.displacements])
    return buf.getvalue()


def snapshot_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["label", "x", "y", "z"])
    for label, v in rows:
        wr.writerow([label] + [_fmt(float(c)) for c in v])
    return buf.getvalue()
