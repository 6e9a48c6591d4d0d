"""Hyperbolic 3-space: ball model points, isometries as SL(2, C) matrices.

Every isometry is stored as a 2x2 complex matrix acting on the boundary sphere
by Moebius transformations (in the stereographic chart of ``sphere``) and on
H^3 by the Poincare extension.  Interior points are converted to the upper
half-space model ``(w, s)``, ``s > 0`` for all group computations; the ball
model is used only at the interface.  The two models are glued so that the
ball origin is ``(0, 1)`` and the boundary identification is exactly the
stereographic projection ``P`` of ``sphere``.

Deep points are best carried as *frames*: an isometry ``A`` stands for the
point ``A(origin)``.  Frames keep full relative precision at distances where
ball coordinates have already rounded onto the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError
from .sphere import PlanePoint, SpherePoint, as_plane, spinor_to_vec, vec_to_spinor

BALL_EDGE = 1e-14
TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class BallPoint:
    p: tuple

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise DomainError(f"ball point needs 3 finite coordinates, got {self.p!r}")
        if np.linalg.norm(p) >= 1 - BALL_EDGE:
            raise DomainError(f"|p| = {np.linalg.norm(p)!r} is not inside the unit ball")
        object.__setattr__(self, "p", tuple(float(c) for c in p))

    @property
    def array(self):
        return np.array(self.p)

    def __neg__(self):
        return BallPoint(tuple(-c for c in self.p))


ORIGIN = BallPoint((0.0, 0.0, 0.0))


@dataclass(frozen=True)
class CylindricalPoint:
    """Coordinates about the geodesic from 0 to infinity.

    ``r`` is the distance to the axis, ``theta`` the angle, and ``h`` the
    signed position along the axis of the foot of the perpendicular, with
    ``h = 0`` on the plane bounded by the unit circle and ``h > 0`` towards
    infinity.  The plane ``h = 0`` is the equatorial disc of the ball.
    """

    r: float
    theta: float
    h: float

    def __post_init__(self):
        if self.r < 0:
            raise DomainError("cylindrical radius must be nonnegative")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "theta", float(np.mod(self.theta, TWO_PI)))
        object.__setattr__(self, "h", float(self.h))


class Isometry:
    """Orientation preserving isometry of H^3, an element of PSL(2, C)."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.array(m, dtype=complex)
        if m.shape != (2, 2):
            raise DomainError("isometry needs a 2x2 matrix")
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if det == 0 or not np.isfinite(det):
            raise DegenerateInputError("singular matrix is not a Moebius map")
        m = m / np.sqrt(det)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    def __setattr__(self, name, value):
        raise AttributeError("Isometry is immutable")

    @classmethod
    def identity(cls):
        return cls(np.eye(2))

    def __matmul__(self, other):
        return Isometry(self.m @ other.m)

    def inverse(self):
        a, b, c, d = self.m.ravel()
        return Isometry([[d, -b], [-c, a]])

    def halfspace(self):
        """Upper half-space coordinates ``(w, s)`` of the image of the origin."""
        return frame_halfspace(self.m)

    def point(self):
        return halfspace_to_ball(*self.halfspace())

    def __repr__(self):
        return f"Isometry({self.m.tolist()!r})"


# ---------------------------------------------------------------------------
# model conversions (vectorised)


def ball_to_halfspace(x):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    dn = x[..., 0] ** 2 + x[..., 1] ** 2 + (x[..., 2] - 1) ** 2
    s = (1 - r) * (1 + r) / dn
    w = 2 * (x[..., 0] + 1j * x[..., 1]) / dn
    return w, s


def halfspace_to_ball(w, s):
    w = np.asarray(w, dtype=complex)
    s = np.asarray(s, dtype=float)
    aw = np.abs(w) ** 2
    dn = aw + (s + 1) ** 2
    x3 = (aw + (s - 1) * (s + 1)) / dn
    out = np.stack([2 * w.real / dn, 2 * w.imag / dn, x3], axis=-1)
    if out.ndim == 1:
        return BallPoint(tuple(out))
    return out


def frame_halfspace(m):
    """Half-space coordinates of ``m(j)`` for a (stack of) SL(2, C) matrices."""
    m = np.asarray(m)
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    den = np.abs(c) ** 2 + np.abs(d) ** 2
    return (a * np.conj(c) + b * np.conj(d)) / den, 1 / den


def halfspace_dist(w1, s1, w2, s2):
    num = np.sqrt(np.abs(w1 - w2) ** 2 + (s1 - s2) ** 2)
    return 2 * np.arcsinh(num / (2 * np.sqrt(s1 * s2)))


def poincare_extension(m, w, s):
    """Act by the Poincare extension of ``m`` on half-space points."""
    m = np.asarray(m)
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    cwd = c * w + d
    den = np.abs(cwd) ** 2 + np.abs(c) ** 2 * s ** 2
    return ((a * w + b) * np.conj(cwd) + a * np.conj(c) * s ** 2) / den, s / den


def rotation_to(u):
    """SU(2) matrices rotating the north pole onto unit vectors ``u`` (..., 3)."""
    p, q = vec_to_spinor(u)
    n = np.sqrt(np.abs(p) ** 2 + np.abs(q) ** 2)
    a, b = p / n, q / n
    out = np.empty(np.shape(a) + (2, 2), dtype=complex)
    out[..., 0, 0] = a
    out[..., 0, 1] = -np.conj(b)
    out[..., 1, 0] = b
    out[..., 1, 1] = np.conj(a)
    return out


def _unit(x):
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    u = np.where(n > 0, x / safe, np.array([0.0, 0.0, 1.0]))
    return u, n[..., 0]


def frames_from(direction, distance):
    """Frames ``R D``: rotate north to ``direction`` after translating by ``distance``.

    ``R D`` sends the origin to the point at hyperbolic ``distance`` along
    ``direction``; it differs from the pure translation ``R D R^-1`` by the
    rotation ``R`` at the source, which aligns the poles of a quadrature rule
    with the translation axis.
    """
    u, _ = _unit(direction)
    R = rotation_to(u)
    lam = np.exp(np.asarray(distance, dtype=float) / 2)
    D = np.zeros(np.shape(lam) + (2, 2), dtype=complex)
    D[..., 0, 0] = lam
    D[..., 1, 1] = 1 / lam
    return R @ D


def translations_from(direction, distance):
    """Pure translations along ``direction`` by ``distance`` (vectorised)."""
    u, _ = _unit(direction)
    p, q = vec_to_spinor(u)
    n = np.sqrt(np.abs(p) ** 2 + np.abs(q) ** 2)
    psi = np.stack([p / n, q / n], axis=-1)
    half = np.asarray(distance, dtype=float) / 2
    proj = psi[..., :, None] * np.conj(psi[..., None, :])
    eye = np.eye(2)
    em = np.exp(-half)[..., None, None]
    gap = (2 * np.sinh(half))[..., None, None]
    return em * eye + gap * proj


def ball_distance_from_origin(x):
    """Hyperbolic distance from the origin for ball vectors (..., 3)."""
    t = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    return np.log1p(t) - np.log1p(-t)


def ball_translations(x):
    """Pure translations sending the origin to ball vectors ``x`` (..., 3)."""
    x = np.asarray(x, dtype=float)
    return translations_from(x, ball_distance_from_origin(x))


def _as_array(x):
    return x.array if isinstance(x, BallPoint) else np.asarray(x, dtype=float)


def frame_of(x) -> Isometry:
    """A frame ``R D`` for ball point ``x`` (see ``frames_from``)."""
    if isinstance(x, Isometry):
        return x
    v = _as_array(x)
    return Isometry(frames_from(v, ball_distance_from_origin(v)))


# ---------------------------------------------------------------------------
# public operations


def mx_translation(x) -> Isometry:
    """The translation ``M_x`` along the geodesic through the origin and ``x``."""
    return Isometry(ball_translations(_as_array(x)))


def mx_closed_form(x, z):
    """Closed form of ``M_x`` on vectors ``z`` of the closed ball (vectorised).

    M_x(z) = (z (1 - |x|^2) + x (1 + |z|^2 + 2<x, z>)) / (1 + |x|^2 |z|^2 + 2<x, z>)
    """
    x = _as_array(x)
    z = np.asarray(z, dtype=float)
    xx = x @ x
    zz = np.sum(z * z, axis=-1)
    xz = z @ x
    num = z * (1 - xx) + np.multiply.outer(1 + zz + 2 * xz, x)
    return num / (1 + xx * zz + 2 * xz)[..., None]


def boundary_jacobian(x, zeta) -> float:
    """Area distortion of ``M_x`` at a boundary point: ((1-|x|^2)/|zeta+x|^2)^2."""
    x = _as_array(x)
    z = zeta.array if isinstance(zeta, SpherePoint) else np.asarray(zeta, dtype=float)
    val = ((1 - x @ x) / np.sum((z + x) ** 2, axis=-1)) ** 2
    return float(val) if np.ndim(val) == 0 else val


def apply_boundary(M: Isometry, z) -> PlanePoint:
    a, b, c, d = M.m.ravel()
    p, q = as_plane(z).spinor()
    return PlanePoint.from_spinor(a * p + b * q, c * p + d * q)


def apply_boundary_vec(m, v):
    """Moebius action on unit vectors (..., 3) by a matrix ``m``."""
    p, q = vec_to_spinor(v)
    m = np.asarray(m)
    return spinor_to_vec(m[..., 0, 0] * p + m[..., 0, 1] * q, m[..., 1, 0] * p + m[..., 1, 1] * q)


def apply_ball(M: Isometry, x):
    """Poincare extension of ``M`` applied to a ball point or ball vectors."""
    if isinstance(x, BallPoint):
        w, s = ball_to_halfspace(x.array)
        return halfspace_to_ball(*poincare_extension(M.m, w, s))
    w, s = ball_to_halfspace(x)
    return halfspace_to_ball(*poincare_extension(M.m, w, s))


def hyp_dist(a, b) -> float:
    """Hyperbolic distance between two ball points or two frames."""
    if isinstance(a, Isometry) or isinstance(b, Isometry):
        return frame_dist(frame_of(a), frame_of(b))
    a, b = _as_array(a), _as_array(b)
    na = (1 - np.linalg.norm(a)) * (1 + np.linalg.norm(a))
    nb = (1 - np.linalg.norm(b)) * (1 + np.linalg.norm(b))
    return float(2 * np.arcsinh(np.linalg.norm(a - b) / np.sqrt(na * nb)))


def frame_dist(A: Isometry, B: Isometry) -> float:
    w1, s1 = A.halfspace()
    w2, s2 = B.halfspace()
    return float(halfspace_dist(w1, s1, w2, s2))


def halfspace_to_cylindrical(w, s) -> CylindricalPoint:
    w = complex(w)
    return CylindricalPoint(float(np.arcsinh(abs(w) / s)), float(np.angle(w)) if w != 0 else 0.0,
                            float(np.log(np.hypot(abs(w), s))))


def to_cylindrical(x) -> CylindricalPoint:
    """Cylindrical coordinates of a ball point or a frame."""
    if isinstance(x, Isometry):
        return halfspace_to_cylindrical(*x.halfspace())
    w, s = ball_to_halfspace(_as_array(x))
    return halfspace_to_cylindrical(w, s)


def cylindrical_to_halfspace(c: CylindricalPoint):
    rho = np.exp(c.h)
    return rho * np.tanh(c.r) * np.exp(1j * c.theta), rho / np.cosh(c.r)


def cylindrical_frame(c: CylindricalPoint) -> Isometry:
    """Frame for a cylindrical point: rotate, slide along the axis, push out radially."""
    axis = np.array([[np.exp(c.h / 2), 0], [0, np.exp(-c.h / 2)]], dtype=complex)
    spin = np.array([[np.exp(0.5j * c.theta), 0], [0, np.exp(-0.5j * c.theta)]])
    radial = translations_from(np.array([1.0, 0.0, 0.0]), c.r)
    return Isometry(axis @ spin @ radial)


def from_cylindrical(c: CylindricalPoint) -> BallPoint:
    return halfspace_to_ball(*cylindrical_to_halfspace(c))


@dataclass(frozen=True, eq=False)
class PairAnnulus:
    """Round annulus ``inner < |z| < outer`` after applying ``normalizer``.

    The normalizer sends the first point of the pair to the origin and the
    second onto the axis towards infinity, so ``labels[0]`` names the inner
    boundary circle (|z| = inner) and ``labels[1]`` the outer one.
    """

    inner: float
    outer: float
    normalizer: Isometry
    labels: tuple = ("x", "y")

    @property
    def modulus(self):
        return round_annulus_modulus(self.inner, self.outer)

    def boundary_points(self, which: int, n: int = 64):
        """Points of a boundary circle in the original (un-normalized) chart."""
        radius = (self.inner, self.outer)[which]
        inv = self.normalizer.inverse()
        angles = TWO_PI * np.arange(n) / n
        return [apply_boundary(inv, radius * np.exp(1j * t)) for t in angles]


def pair_annulus(x, y, labels=("x", "y")) -> PairAnnulus:
    """The annulus cut out by the planes through ``x`` and ``y`` orthogonal to [x, y]."""
    A = frame_of(x)
    B = frame_of(y)
    dist = frame_dist(A, B)
    if dist < 1e-12:
        raise DegenerateInputError("pair annulus needs two distinct points")
    w, s = poincare_extension(A.inverse().m, *B.halfspace())
    u = np.asarray(halfspace_to_ball(w, s).array)
    R = Isometry(rotation_to(u / np.linalg.norm(u)))
    N = (A @ R).inverse()
    return PairAnnulus(1.0, float(np.exp(dist)), N, tuple(labels))


def round_annulus_modulus(r_inner: float, r_outer: float) -> float:
    if not (0 < r_inner < r_outer):
        raise DomainError(f"need 0 < inner < outer, got ({r_inner}, {r_outer})")
    return float(np.log(r_outer / r_inner) / TWO_PI)


def random_isometry(rng, spread: float = 1.0) -> Isometry:
    """A random Moebius map; ``spread`` scales the Gaussian entries around identity."""
    m = np.eye(2) + spread * (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
    return Isometry(m)


def random_ball_point(rng, max_dist: float = 3.0) -> BallPoint:
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    r = rng.uniform(0, max_dist)
    return BallPoint(tuple(np.tanh(r / 2) * u))
