"""Factored frames for points deep in H^3.

A point ``y`` far from the origin is stored as the frame ``G = R D(l) K`` with

* ``R`` a rotation (an SU(2) matrix held in extended precision),
* ``D(l) = diag(e^{l/2}, e^{-l/2})`` the translation by ``l`` towards the
  north pole, kept as the exact real ``l``,
* ``K`` a double precision SL(2, C) matrix of moderate size.

``y = G(origin)``.  Plain 2x2 double matrices lose roughly ``e^l * 1e-16`` of
relative accuracy when used to pull points back from distance ``l``; the
factored form keeps every step well conditioned, because the only
ill-conditioned factor ``D(l)`` acts on spinors by exact rescaling.

The rotation lives in mpmath so that rational maps can be recentred exactly:
``recentre(f, R_dom, R_img)`` returns the double coefficients of
``R_img^-1 o f o R_dom``, accurate coefficient by coefficient.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np

from .errors import DomainError
from .h3 import BallPoint, CylindricalPoint, Isometry, frames_from, rotation_to

DEFAULT_DPS = 30
MAX_DEPTH = 1400.0


def dps_for_depth(depth: float) -> int:
    """Decimal digits needed to resolve structure at hyperbolic scale ``depth``."""
    return DEFAULT_DPS + int(math.ceil(max(depth, 0.0) / math.log(10)))


# ---------------------------------------------------------------------------
# extended precision 2x2 helpers (matrices are 4-tuples a, b, c, d)


def _mp(z):
    return mpmath.mpc(complex(z))


def mp_matrix(m):
    m = np.asarray(m, dtype=complex)
    return (_mp(m[0, 0]), _mp(m[0, 1]), _mp(m[1, 0]), _mp(m[1, 1]))


def mp_mul(x, y):
    a, b, c, d = x
    e, f, g, h = y
    return (a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h)


def mp_to_numpy(x):
    return np.array([[complex(x[0]), complex(x[1])], [complex(x[2]), complex(x[3])]])


def mp_rotation_to_spinor(p, q):
    """SU(2) matrix sending the north pole (1 : 0) to (p : q)."""
    n = mpmath.sqrt(abs(p) ** 2 + abs(q) ** 2)
    a, b = p / n, q / n
    return (a, -mpmath.conj(b), b, mpmath.conj(a))


def mp_inverse_su2(x):
    a, b, c, d = x
    return (d, -b, -c, a)


def mp_halfspace(x):
    a, b, c, d = x
    den = abs(c) ** 2 + abs(d) ** 2
    return (a * mpmath.conj(c) + b * mpmath.conj(d)) / den, 1 / den


# ---------------------------------------------------------------------------


class Frame:
    """The isometry ``R D(l) K``; see the module docstring."""

    __slots__ = ("R", "ell", "K")

    def __init__(self, R, ell: float, K=None):
        if len(R) != 4:
            raise DomainError("R must be a 4-tuple of mpmath numbers")
        ell = float(ell)
        if not np.isfinite(ell) or abs(ell) > MAX_DEPTH:
            raise DomainError(f"frame depth {ell} outside the supported range")
        K = np.eye(2, dtype=complex) if K is None else np.array(K, dtype=complex)
        det = K[0, 0] * K[1, 1] - K[0, 1] * K[1, 0]
        K = K / np.sqrt(det)
        K.setflags(write=False)
        object.__setattr__(self, "R", tuple(R))
        object.__setattr__(self, "ell", ell)
        object.__setattr__(self, "K", K)

    def __setattr__(self, name, value):
        raise AttributeError("Frame is immutable")

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls):
        one, zero = mpmath.mpc(1), mpmath.mpc(0)
        return cls((one, zero, zero, one), 0.0)

    @classmethod
    def from_direction(cls, direction, distance: float):
        """The frame ``rotation_to(direction) D(distance)`` (see ``h3.frames_from``)."""
        u = np.asarray(direction, dtype=float)
        n = np.linalg.norm(u)
        u = u / n if n > 0 else np.array([0.0, 0.0, 1.0])
        R = rotation_to(u)
        return cls(mp_matrix(R), float(distance))

    @classmethod
    def from_ball(cls, x):
        v = x.array if isinstance(x, BallPoint) else np.asarray(x, dtype=float)
        t = float(np.linalg.norm(v))
        dist = math.log1p(t) - math.log1p(-t)
        return cls.from_direction(v if t > 0 else np.array([0.0, 0.0, 1.0]), dist)

    @classmethod
    def from_isometry(cls, M):
        """Factor a double matrix as ``U Sigma V^H`` = ``R D K``."""
        m = M.m if isinstance(M, Isometry) else np.asarray(M, dtype=complex)
        U, sig, Vh = np.linalg.svd(m)
        phase = np.sqrt(np.linalg.det(U))
        U = U / phase
        Vh = Vh * phase
        ell = 2 * math.log(sig[0]) if sig[0] > 0 else 0.0
        return cls(mp_matrix(U), ell, Vh)

    @classmethod
    def coerce(cls, x):
        if isinstance(x, Frame):
            return x
        if isinstance(x, Isometry):
            return cls.from_isometry(x)
        if isinstance(x, CylindricalPoint):
            from .h3 import cylindrical_frame
            return cls.from_isometry(cylindrical_frame(x))
        return cls.from_ball(x)

    # -- algebra ------------------------------------------------------------

    def then(self, M):
        """The frame ``self @ M`` for a moderate double matrix ``M``."""
        m = M.m if isinstance(M, Isometry) else np.asarray(M, dtype=complex)
        return Frame(self.R, self.ell, self.K @ m)

    def mp(self, dps=None):
        """The full matrix in extended precision (as a 4-tuple)."""
        with mpmath.workdps(dps or dps_for_depth(abs(self.ell))):
            e = mpmath.exp(mpmath.mpf(self.ell) / 2)
            D = (e, mpmath.mpc(0), mpmath.mpc(0), 1 / e)
            return mp_mul(mp_mul(self.R, D), mp_matrix(self.K))

    def to_isometry(self) -> Isometry:
        """Double precision matrix (loses accuracy at large depth)."""
        return Isometry(mp_to_numpy(self.mp()))

    def halfspace_mp(self, dps=None):
        dps = dps or dps_for_depth(abs(self.ell))
        with mpmath.workdps(dps):
            return mp_halfspace(self.mp(dps))

    def distance_from_origin(self) -> float:
        with mpmath.workdps(dps_for_depth(abs(self.ell))):
            return float(mp_dist(self.halfspace_mp(), (mpmath.mpc(0), mpmath.mpf(1))))

    def dist(self, other: "Frame") -> float:
        dps = dps_for_depth(max(abs(self.ell), abs(other.ell)) * 2)
        with mpmath.workdps(dps):
            return float(mp_dist(self.halfspace_mp(dps), other.halfspace_mp(dps)))

    def point(self) -> BallPoint:
        """Ball model point; raises ``DomainError`` when too close to the sphere."""
        with mpmath.workdps(dps_for_depth(abs(self.ell))):
            w, s = self.halfspace_mp()
            aw = abs(w) ** 2
            dn = aw + (s + 1) ** 2
            x = (2 * w.real / dn, 2 * w.imag / dn, (aw + (s - 1) * (s + 1)) / dn)
            return BallPoint(tuple(float(c) for c in x))

    def ball_vector(self):
        """Ball coordinates without the strict interior check (may round to |x| = 1)."""
        with mpmath.workdps(dps_for_depth(abs(self.ell))):
            w, s = self.halfspace_mp()
            aw = abs(w) ** 2
            dn = aw + (s + 1) ** 2
            return np.array([float(2 * w.real / dn), float(2 * w.imag / dn),
                             float((aw + (s - 1) * (s + 1)) / dn)])

    def direction(self):
        """Unit vector pointing from the origin towards the point."""
        with mpmath.workdps(dps_for_depth(abs(self.ell))):
            w, s = self.halfspace_mp()
            aw = abs(w) ** 2
            v = (2 * w.real, 2 * w.imag, aw + (s - 1) * (s + 1))
            n = mpmath.sqrt(sum(c ** 2 for c in v))
            if n == 0:
                return np.array([0.0, 0.0, 1.0])
            return np.array([float(c / n) for c in v])

    def cylindrical(self) -> CylindricalPoint:
        """Coordinates about the 0-infinity axis, computed without cancellation."""
        with mpmath.workdps(dps_for_depth(abs(self.ell))):
            w, s = self.halfspace_mp()
            r = mpmath.asinh(abs(w) / s)
            theta = float(mpmath.arg(w)) if abs(w) > 0 else 0.0
            h = mpmath.log(mpmath.sqrt(abs(w) ** 2 + s ** 2))
            return CylindricalPoint(float(r), theta, float(h))

    def rotation_part(self):
        """Rotation ``S`` with ``self = P S`` and ``P`` a pure translation (double)."""
        with mpmath.workdps(dps_for_depth(abs(self.ell))):
            e = float(self.ell)
        # E = D(l) K = P_E Q_E; the polar factor of E is moderate even when E is not
        E = np.array([[math.exp(e / 2) * self.K[0, 0], math.exp(e / 2) * self.K[0, 1]],
                      [math.exp(-e / 2) * self.K[1, 0], math.exp(-e / 2) * self.K[1, 1]]])
        U, _, Vh = np.linalg.svd(E)
        Q = U @ Vh
        Q = Q / np.sqrt(np.linalg.det(Q))
        return mp_to_numpy(self.R) @ Q

    def __repr__(self):
        return f"Frame(ell={self.ell:.6g}, K={np.round(self.K, 6).tolist()})"


def mp_dist(p1, p2):
    w1, s1 = p1
    w2, s2 = p2
    num = mpmath.sqrt(abs(w1 - w2) ** 2 + (s1 - s2) ** 2)
    return 2 * mpmath.asinh(num / (2 * mpmath.sqrt(s1 * s2)))


def rotation_matrix(S) -> np.ndarray:
    """The SO(3) matrix by which an SU(2) element acts on the unit ball."""
    from .h3 import apply_boundary_vec
    return apply_boundary_vec(np.asarray(S), np.eye(3)).T


# ---------------------------------------------------------------------------
# extended precision recentring of binary forms


def _mp_linear_power(lin, n, cache):
    if n in cache:
        return cache[n]
    prev = _mp_linear_power(lin, n - 1, cache)
    out = [mpmath.mpc(0)] * (len(prev) + 1)
    for i, c in enumerate(prev):
        out[i] += c * lin[0]
        out[i + 1] += c * lin[1]
    cache[n] = out
    return out


def mp_compose_forms(P, Q, M):
    """Coefficients of ``(P, Q) o M`` for a linear substitution ``M`` (4-tuple)."""
    d = len(P) - 1
    L1 = (M[0], M[1])  # z -> a z + b w
    L2 = (M[2], M[3])  # w -> c z + d w
    c1 = {0: [mpmath.mpc(1)]}
    c2 = {0: [mpmath.mpc(1)]}
    terms = []
    for k in range(d + 1):
        a = _mp_linear_power(L1, d - k, c1)
        b = _mp_linear_power(L2, k, c2)
        prod = [mpmath.mpc(0)] * (d + 1)
        for i, x in enumerate(a):
            if x == 0:
                continue
            for j, y in enumerate(b):
                prod[i + j] += x * y
        terms.append(prod)
    Pn = [mpmath.mpc(0)] * (d + 1)
    Qn = [mpmath.mpc(0)] * (d + 1)
    for k in range(d + 1):
        pk, qk = P[k], Q[k]
        for i in range(d + 1):
            t = terms[k][i]
            if pk != 0:
                Pn[i] += pk * t
            if qk != 0:
                Qn[i] += qk * t
    return Pn, Qn


def mp_form_eval(c, p, q):
    d = len(c) - 1
    acc = mpmath.mpc(0)
    # sum c_k p^(d-k) q^k via Horner in the ratio appropriate for the larger entry
    if abs(p) >= abs(q):
        t = q / p
        for k in range(d, -1, -1):
            acc = acc * t + c[k]
        return acc * p ** d
    t = p / q
    for k in range(d + 1):
        acc = acc * t + c[k]
    return acc * q ** d


def image_rotation(f, R_dom, dps):
    """Rotation sending north to ``f(R_dom(north))``, in extended precision."""
    with mpmath.workdps(dps):
        P = [_mp(c) for c in f.P]
        Q = [_mp(c) for c in f.Q]
        p, q = R_dom[0], R_dom[2]
        return mp_rotation_to_spinor(mp_form_eval(P, p, q), mp_form_eval(Q, p, q))


def recentre(f, R_dom, R_img, dps):
    """Double coefficients of ``R_img^-1 o f o R_dom``, normalised to max modulus 1."""
    with mpmath.workdps(dps):
        P = [_mp(c) for c in f.P]
        Q = [_mp(c) for c in f.Q]
        Pc, Qc = mp_compose_forms(P, Q, R_dom)
        a, b, c, d = mp_inverse_su2(R_img)
        Ph = [a * x + b * y for x, y in zip(Pc, Qc)]
        Qh = [c * x + d * y for x, y in zip(Pc, Qc)]
        scale = max(max(abs(x) for x in Ph), max(abs(x) for x in Qh))
        Ph = np.array([complex(x / scale) for x in Ph])
        Qh = np.array([complex(x / scale) for x in Qh])
    return Ph, Qh


def _np_compose_forms(P, Q, M):
    """Double precision ``(P, Q) o M`` for a 2x2 complex ``M``."""
    d = len(P) - 1
    (a, b), (c, e) = M
    # coefficient lists indexed by the power of w
    l1, l2 = np.array([a, b]), np.array([c, e])
    pw1 = [np.ones(1, dtype=complex)]
    pw2 = [np.ones(1, dtype=complex)]
    for _ in range(d):
        pw1.append(np.convolve(pw1[-1], l1))
        pw2.append(np.convolve(pw2[-1], l2))
    T = np.stack([np.convolve(pw1[d - k], pw2[k]) for k in range(d + 1)])
    return np.asarray(P) @ T, np.asarray(Q) @ T


def recentre_double(f, R_dom, R_img):
    """Double precision ``recentre``, adequate when the domain frame is shallow."""
    Rd = np.array([[complex(R_dom[0]), complex(R_dom[1])], [complex(R_dom[2]), complex(R_dom[3])]])
    Ri = np.array([[complex(R_img[0]), complex(R_img[1])], [complex(R_img[2]), complex(R_img[3])]])
    Pc, Qc = _np_compose_forms(f.P, f.Q, Rd)
    Ri_inv = np.array([[Ri[1, 1], -Ri[0, 1]], [-Ri[1, 0], Ri[0, 0]]])
    Ph = Ri_inv[0, 0] * Pc + Ri_inv[0, 1] * Qc
    Qh = Ri_inv[1, 0] * Pc + Ri_inv[1, 1] * Qc
    scale = max(np.abs(Ph).max(), np.abs(Qh).max())
    return Ph / scale, Qh / scale


def image_rotation_double(f, R_dom):
    from .rational import form_eval
    p, q = complex(R_dom[0]), complex(R_dom[2])
    return mp_rotation_to_spinor(_mp(complex(form_eval(f.P, p, q))), _mp(complex(form_eval(f.Q, p, q))))


def refactor(frame: Frame, dps=None) -> Frame:
    """Rewrite ``frame`` as ``R' D(l') K'`` with ``K'`` a rotation."""
    dps = dps or dps_for_depth(abs(frame.ell) + 10)
    with mpmath.workdps(dps):
        G = frame.mp(dps)
        w, s = mp_halfspace(G)
        aw = abs(w) ** 2
        dn = aw + (s + 1) ** 2
        x = (2 * w.real / dn, 2 * w.imag / dn, (aw + (s - 1) * (s + 1)) / dn)
        nx = mpmath.sqrt(sum(c ** 2 for c in x))
        if nx == 0:
            Rn = (mpmath.mpc(1), mpmath.mpc(0), mpmath.mpc(0), mpmath.mpc(1))
            ell = mpmath.mpf(0)
        else:
            u = [c / nx for c in x]
            # spinor of u, chart chosen away from the pole as in sphere.vec_to_spinor
            if u[2] < 0:
                p, q = mpmath.mpc(u[0], u[1]), mpmath.mpc(1 - u[2])
            else:
                p, q = mpmath.mpc(1 + u[2]), mpmath.mpc(u[0], -u[1])
            Rn = mp_rotation_to_spinor(p, q)
            ell = mpmath.log((1 + nx) / (1 - nx)) if nx < 1 else 2 * mpmath.asinh(
                mpmath.sqrt(aw + (s - 1) ** 2) / (2 * mpmath.sqrt(s)))
        ell_f = float(ell)
        e = mpmath.exp(mpmath.mpf(ell_f) / 2)
        Dinv = (1 / e, mpmath.mpc(0), mpmath.mpc(0), e)
        Kn = mp_mul(mp_mul(Dinv, mp_inverse_su2(Rn)), G)
        return Frame(Rn, ell_f, mp_to_numpy(Kn))


__all__ = ["Frame", "recentre", "image_rotation", "refactor", "rotation_matrix", "frames_from"]
