"""Riemann sphere coordinates, stereographic projection and quadrature.

Points of the sphere are handled in three interchangeable forms:

* unit 3-vectors (``SpherePoint``),
* extended complex numbers (``PlanePoint``), with an explicit point at infinity,
* spinors, i.e. homogeneous pairs ``(p, q)`` with ``z = p / q``.

Spinors are the working representation inside the numerical kernels because
they keep full relative precision near both poles and never need an infinity
flag.  The projection used throughout is

    P(z) = (2z / (1 + |z|^2), (|z|^2 - 1) / (|z|^2 + 1)),

so ``0`` is the south pole and ``inf`` the north pole.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DomainError

UNIT_TOL = 1e-12


@dataclass(frozen=True)
class SpherePoint:
    v: tuple

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.shape != (3,):
            raise DomainError(f"sphere point needs 3 coordinates, got {v.shape}")
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise DomainError("cannot normalize a zero or non-finite vector")
        object.__setattr__(self, "v", tuple(float(c) for c in v / n))

    @property
    def array(self):
        return np.array(self.v)


@dataclass(frozen=True)
class PlanePoint:
    """A point of the extended plane; ``value is None`` means infinity."""

    value: complex | None = None

    def __post_init__(self):
        if self.value is not None:
            z = complex(self.value)
            if not (np.isfinite(z.real) and np.isfinite(z.imag)):
                raise DomainError("use PlanePoint.inf() for the point at infinity")
            object.__setattr__(self, "value", z)

    @classmethod
    def inf(cls):
        return cls(None)

    @property
    def is_inf(self):
        return self.value is None

    def spinor(self):
        """Homogeneous coordinates scaled so the larger entry has modulus 1."""
        if self.value is None:
            return 1.0 + 0j, 0j
        z = self.value
        if abs(z) <= 1:
            return z, 1.0 + 0j
        return 1.0 + 0j, 1 / z

    @classmethod
    def from_spinor(cls, p, q):
        p, q = complex(p), complex(q)
        if q == 0:
            if p == 0:
                raise DomainError("(0, 0) is not a point of the sphere")
            return cls(None)
        return cls(p / q)

    def __repr__(self):
        return "PlanePoint(inf)" if self.value is None else f"PlanePoint({self.value!r})"


INF = PlanePoint.inf()


def as_plane(z) -> PlanePoint:
    if isinstance(z, PlanePoint):
        return z
    if z is None or (isinstance(z, str) and z.lower() in ("inf", "infinity")):
        return INF
    return PlanePoint(complex(z))


# ---------------------------------------------------------------------------
# vectorised conversions


def normalize_spinors(p, q):
    """Rescale homogeneous pairs so that max(|p|, |q|) == 1."""
    s = np.maximum(np.abs(p), np.abs(q))
    return p / s, q / s


def spinor_to_vec(p, q):
    """Homogeneous pairs (arrays) to unit vectors, shape ``p.shape + (3,)``."""
    p, q = normalize_spinors(p, q)
    ap, aq = np.abs(p) ** 2, np.abs(q) ** 2
    n = ap + aq
    c = 2 * p * np.conj(q) / n
    return np.stack([c.real, c.imag, (ap - aq) / n], axis=-1)


def vec_to_spinor(v):
    """Unit vectors (..., 3) to spinors, choosing the chart away from the pole."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    south = z < 0
    w = x + 1j * y
    p = np.where(south, w, 1 + z + 0j)
    q = np.where(south, 1 - z + 0j, np.conj(w))
    return normalize_spinors(p, q)


def stereo_project(z) -> SpherePoint:
    """Extended complex number to the unit sphere (``inf`` to the north pole)."""
    p, q = as_plane(z).spinor()
    return SpherePoint(tuple(spinor_to_vec(np.array(p), np.array(q))))


def stereo_unproject(pt) -> PlanePoint:
    v = pt.array if isinstance(pt, SpherePoint) else np.asarray(pt, dtype=float)
    v = v / np.linalg.norm(v)
    if v[2] >= 1.0:
        return INF
    p, q = vec_to_spinor(v)
    return PlanePoint.from_spinor(p, q)


def chordal(a, b):
    """Chordal distance between two extended complex numbers (diameter 2)."""
    va, vb = stereo_project(a).array, stereo_project(b).array
    return float(np.linalg.norm(va - vb))


def spinor_chordal(p1, q1, p2, q2):
    """Vectorised chordal distance |P(z1) - P(z2)| from homogeneous pairs."""
    num = np.abs(p1 * q2 - p2 * q1)
    den = np.sqrt((np.abs(p1) ** 2 + np.abs(q1) ** 2) * (np.abs(p2) ** 2 + np.abs(q2) ** 2))
    return 2 * num / den


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Product rule for the round probability measure on the sphere.

    Heights ``x3`` are integrated with (composite) Gauss-Legendre panels and
    the azimuth with an even number of equally spaced angles, so the node set
    is closed under the antipodal map.  ``grading`` adds geometrically
    shrinking panels at both poles; these resolve maps whose interesting part
    has been squeezed into a small polar cap, which is what happens after
    translating a deep evaluation point to the origin.
    """

    order: int
    grading: int
    poles: str
    up: np.ndarray = field(repr=False)      # 1 + x3, kept exact near the south pole
    down: np.ndarray = field(repr=False)    # 1 - x3, kept exact near the north pole
    phi: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def degree(self):
        """Total degree of spherical harmonics integrated exactly."""
        return self.order if self.grading else 2 * self.order + 1

    @property
    def size(self):
        return self.weights.size

    @property
    def points(self):
        s = np.sqrt(self.up * self.down)
        return np.stack([s * np.cos(self.phi), s * np.sin(self.phi), (self.up - self.down) / 2], axis=-1)

    @property
    def spinors(self):
        """Node spinors ``(p, q)`` with ``|p|^2 = up/2`` and ``|q|^2 = down/2``."""
        p = np.sqrt(self.up / 2) * np.exp(1j * self.phi)
        q = np.sqrt(self.down / 2) + 0j
        return normalize_spinors(p, q)

    @property
    def nodes(self):
        return [(SpherePoint(tuple(v)), float(w)) for v, w in zip(self.points, self.weights)]

    def integrate(self, func):
        """Apply the rule to ``func`` evaluated on the (N, 3) node array."""
        vals = np.asarray(func(self.points))
        return np.tensordot(self.weights, vals, axes=(0, 0))


def _panel(a, b, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (a + b) / 2 + (b - a) / 2 * x, (b - a) / 2 * w


@lru_cache(maxsize=32)
def make_quadrature(order: int, grading: int = 0, ratio: float = 0.125, poles: str = "both") -> QuadratureRule:
    """Build a product rule exact for spherical harmonics up to ``rule.degree``.

    ``order`` controls the Gauss-Legendre count (order + 1 nodes in height on
    the main panel) and the azimuth count (2*order + 2).  With ``grading=g``
    each pole additionally gets ``g`` panels whose widths in ``1 -+ x3``
    shrink by ``ratio``; graded panels use ``order//2 + 1`` nodes each, which
    keeps exactness at degree ``order``.  ``poles="south"`` grades only the
    south pole (the layout is then no longer antipodally symmetric).
    """
    if not isinstance(order, (int, np.integer)) or order < 3:
        raise ConfigError(f"quadrature order must be an integer >= 3, got {order!r}")
    if order > 400:
        raise ConfigError(f"quadrature order {order} is not supported (max 400)")
    if grading < 0 or grading > 40:
        raise ConfigError(f"grading must lie in [0, 40], got {grading}")
    if not 0 < ratio < 1:
        raise ConfigError("grading ratio must lie in (0, 1)")
    if poles not in ("both", "south"):
        raise ConfigError(f"poles must be 'both' or 'south', got {poles!r}")

    n_main = order + 1
    n_phi = 2 * order + 2
    ups, downs, hw = [], [], []
    if grading == 0:
        t, w = _panel(-1.0, 1.0, n_main)
        # 1 +- x3 from the symmetric node set keeps antipodal pairs exact
        ups.append(1 + t)
        downs.append(1 - t)
        hw.append(w)
    else:
        n_g = order // 2 + 1
        edge = ratio
        t, w = _panel(-1 + edge, 1 - edge if poles == "both" else 1.0, n_main)
        ups.append(1 + t)
        downs.append(1 - t)
        hw.append(w)
        # panels in s = 1 + x3 on [0, edge]; mirrored for the north pole
        bounds = [edge * ratio ** k for k in range(grading)] + [0.0]
        for hi, lo in zip(bounds[:-1], bounds[1:]):
            s, ws = _panel(lo, hi, n_g)
            ups.append(s)
            downs.append(2 - s)
            hw.append(ws)
            if poles == "both":
                ups.append(2 - s)
                downs.append(s)
                hw.append(ws)
    up = np.concatenate(ups)
    down = np.concatenate(downs)
    hweights = np.concatenate(hw) / 2  # dx3 / 2 is the height marginal of the round measure

    phis = 2 * np.pi * np.arange(n_phi) / n_phi
    UP, PHI = np.meshgrid(up, phis, indexing="ij")
    DOWN, _ = np.meshgrid(down, phis, indexing="ij")
    W = np.repeat(hweights[:, None] / n_phi, n_phi, axis=1)
    weights = W.ravel()
    weights = weights / weights.sum()
    rule = QuadratureRule(order, grading, poles, UP.ravel(), DOWN.ravel(), PHI.ravel(), weights)
    for arr in (rule.up, rule.down, rule.phi, rule.weights):
        arr.setflags(write=False)
    assert rule.weights.max() < 0.25
    return rule
