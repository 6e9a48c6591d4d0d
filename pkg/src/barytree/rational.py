"""Rational maps as pairs of binary forms of equal degree.

A map of degree ``d`` is stored as ``(P, Q)`` with ``P(z, w) = sum_k P[k] z^(d-k) w^k``
(coefficients listed from ``z^d`` down to ``w^d``) and likewise for ``Q``; the
map is ``z -> P(z, 1) / Q(z, 1)``.  Coefficients are normalised so that the
largest modulus is 1.  All evaluation happens on spinors, so poles and the
point at infinity need no special casing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, NearDegenerateMapError, ResourceError
from .h3 import Isometry
from .roots import aberth
from .sphere import INF, PlanePoint, as_plane, normalize_spinors, spinor_chordal

MAX_DEGREE = 64
# log of the smallest accepted |Res(P, Q)| after normalisation; see notes in README
LOG_RESULTANT_FLOOR = math.log(1e-300)
EVAL_FLOOR = 1e-280
CRITICAL_TOL = 1e-10


class ParabolicCollisionWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# binary forms


def form_eval(c, p, q):
    """Evaluate a form on normalised spinors, divided by ``max(|p|,|q|)^deg``.

    The returned values share the scale factor for every form of the same
    degree, which is all that projective ratios need.
    """
    c = np.asarray(c)
    p = np.asarray(p, dtype=complex)
    q = np.asarray(q, dtype=complex)
    big_p = np.abs(p) >= np.abs(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(big_p, q / np.where(big_p, p, 1), p / np.where(big_p, 1, q))
        lead = np.where(big_p, p / np.abs(p), q / np.abs(q))
    deg = c.size - 1
    # big_p: sum c_k t^k ; else sum c_k t^(deg-k)
    acc_p = np.zeros(t.shape, dtype=complex)
    acc_q = np.zeros(t.shape, dtype=complex)
    for k in range(deg, -1, -1):
        acc_p = acc_p * t + c[k]
    for k in range(deg + 1):
        acc_q = acc_q * t + c[k]
    # |p| (or |q|) is 1 after normalisation but the phase matters
    return np.where(big_p, acc_p, acc_q) * lead ** deg


def form_dz(c):
    d = c.size - 1
    return c[:-1] * np.arange(d, 0, -1)


def form_dw(c):
    d = c.size - 1
    return c[1:] * np.arange(1, d + 1)


def form_power(c, n):
    out = np.array([1.0 + 0j])
    for _ in range(n):
        out = np.convolve(out, c)
    return out


def form_roots(c):
    """Roots of a binary form as ``PlanePoint``s, with multiplicity.

    Exactly vanishing extreme coefficients are read as roots at infinity
    (leading) or at zero (trailing); the rest go to the Aberth solver.
    """
    c = np.asarray(c, dtype=complex)
    nz = np.flatnonzero(c)
    if nz.size == 0:
        raise DomainError("the zero form has no isolated roots")
    n_inf = int(nz[0])
    n_zero = int(c.size - 1 - nz[-1])
    middle = c[nz[0]: nz[-1] + 1]
    roots = [INF] * n_inf + [PlanePoint(0j)] * n_zero
    roots += [PlanePoint(complex(z)) for z in aberth(middle)]
    return roots


# ---------------------------------------------------------------------------


def _normalise(P, Q):
    s = max(np.abs(P).max(), np.abs(Q).max())
    if s == 0 or not np.isfinite(s):
        raise DomainError("coefficients must be finite and not all zero")
    return P / s, Q / s


def sylvester(P, Q):
    d = P.size - 1
    S = np.zeros((2 * d, 2 * d), dtype=complex)
    for i in range(d):
        S[i, i:i + d + 1] = P
        S[d + i, i:i + d + 1] = Q
    return S


def log_resultant(P, Q) -> float:
    sign, logdet = np.linalg.slogdet(sylvester(np.asarray(P, complex), np.asarray(Q, complex)))
    return float(logdet) if sign != 0 else -math.inf


@dataclass(frozen=True, eq=False)
class RationalMap:
    """A rational map of degree ``d >= 1`` with nonvanishing resultant."""

    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        P = np.atleast_1d(np.asarray(self.P, dtype=complex)).copy()
        Q = np.atleast_1d(np.asarray(self.Q, dtype=complex)).copy()
        if P.ndim != 1 or P.shape != Q.shape or P.size < 2:
            raise DomainError("P and Q need d+1 coefficients each, d >= 1")
        if P.size - 1 > MAX_DEGREE:
            raise ResourceError(f"degree {P.size - 1} exceeds the supported maximum {MAX_DEGREE}")
        P, Q = _normalise(P, Q)
        lr = log_resultant(P, Q)
        if lr < LOG_RESULTANT_FLOOR:
            raise DomainError("P and Q have a common root (resultant vanishes)")
        P.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Q", Q)

    @property
    def degree(self) -> int:
        return self.P.size - 1

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_polys(cls, num, den=(1,)):
        """From ordinary polynomial coefficients (highest power first)."""
        num = np.trim_zeros(np.atleast_1d(np.asarray(num, dtype=complex)), "f")
        den = np.trim_zeros(np.atleast_1d(np.asarray(den, dtype=complex)), "f")
        if num.size == 0 or den.size == 0:
            raise DomainError("numerator and denominator must be nonzero")
        d = max(num.size, den.size) - 1
        P = np.concatenate([np.zeros(d + 1 - num.size), num])
        Q = np.concatenate([np.zeros(d + 1 - den.size), den])
        return cls(P, Q)

    @classmethod
    def power(cls, d: int, a: complex = 1.0):
        """``a * z^d``."""
        P = np.zeros(d + 1, dtype=complex)
        Q = np.zeros(d + 1, dtype=complex)
        P[0] = a
        Q[-1] = 1
        return cls(P, Q)

    @classmethod
    def identity(cls):
        return cls([1, 0], [0, 1])

    @classmethod
    def mobius(cls, M):
        m = M.m if isinstance(M, Isometry) else np.asarray(M, dtype=complex)
        return cls(m[0], m[1])

    @classmethod
    def from_json(cls, record):
        try:
            P = [complex(re, im) for re, im in record["P"]]
            Q = [complex(re, im) for re, im in record["Q"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"malformed rational map record: {exc}") from exc
        return cls(P, Q)

    def to_json(self):
        return {"P": [[float(c.real), float(c.imag)] for c in self.P],
                "Q": [[float(c.real), float(c.imag)] for c in self.Q]}

    def __repr__(self):
        return f"RationalMap(d={self.degree}, P={np.round(self.P, 6).tolist()}, Q={np.round(self.Q, 6).tolist()})"

    # -- evaluation ---------------------------------------------------------

    def eval_spinor(self, p, q):
        """Image spinors of (arrays of) spinors; output normalised to max modulus 1."""
        p, q = normalize_spinors(np.asarray(p, dtype=complex), np.asarray(q, dtype=complex))
        fp = form_eval(self.P, p, q)
        fq = form_eval(self.Q, p, q)
        scale = np.maximum(np.abs(fp), np.abs(fq))
        if np.any(scale < EVAL_FLOOR):
            raise NearDegenerateMapError("P and Q vanish simultaneously (numerically)")
        return fp / scale, fq / scale

    def __call__(self, z):
        return eval_map(self, z)

    @property
    def jacobian_form(self):
        """J = P_z Q_w - P_w Q_z, a form of degree 2d - 2 vanishing at critical points."""
        P, Q = self.P, self.Q
        return np.convolve(form_dz(P), form_dw(Q)) - np.convolve(form_dw(P), form_dz(Q))

    def spherical_derivative_spinor(self, p, q):
        p, q = normalize_spinors(np.asarray(p, dtype=complex), np.asarray(q, dtype=complex))
        fp = form_eval(self.P, p, q)
        fq = form_eval(self.Q, p, q)
        if self.degree == 1:
            jac = np.full(np.shape(p), self.P[0] * self.Q[1] - self.P[1] * self.Q[0])
            jac = jac * 1.0
        else:
            jac = form_eval(self.jacobian_form, p, q)
        norm = np.abs(p) ** 2 + np.abs(q) ** 2
        return np.abs(jac) * norm / (self.degree * (np.abs(fp) ** 2 + np.abs(fq) ** 2))


def eval_map(f: RationalMap, z) -> PlanePoint:
    """Evaluate ``f`` at an extended complex number, exactly at poles and infinity."""
    p, q = as_plane(z).spinor()
    fp, fq = f.eval_spinor(np.array([p]), np.array([q]))
    return PlanePoint.from_spinor(fp[0], fq[0])


def spherical_derivative(f: RationalMap, z) -> float:
    """|f'(z)| (1 + |z|^2) / (1 + |f(z)|^2), computed chart free."""
    p, q = as_plane(z).spinor()
    return float(f.spherical_derivative_spinor(np.array([p]), np.array([q]))[0])


def critical_points(f: RationalMap):
    if f.degree < 2:
        raise DomainError("critical points need degree >= 2")
    return form_roots(f.jacobian_form)


def resultant_magnitude(f: RationalMap) -> float:
    return math.exp(log_resultant(f.P, f.Q))


def compose(f: RationalMap, g: RationalMap) -> RationalMap:
    """The map ``f o g``."""
    d = f.degree * g.degree
    if d > MAX_DEGREE:
        raise ResourceError(f"composed degree {d} exceeds {MAX_DEGREE}")
    df = f.degree
    pw_p = [np.array([1.0 + 0j])]
    pw_q = [np.array([1.0 + 0j])]
    for _ in range(df):
        pw_p.append(np.convolve(pw_p[-1], g.P))
        pw_q.append(np.convolve(pw_q[-1], g.Q))
    terms = [np.convolve(pw_p[df - k], pw_q[k]) for k in range(df + 1)]
    P = sum(c * t for c, t in zip(f.P, terms))
    Q = sum(c * t for c, t in zip(f.Q, terms))
    return RationalMap(P, Q)


def iterate(f: RationalMap, n: int) -> RationalMap:
    if n < 1:
        raise DomainError("iterate needs n >= 1")
    if f.degree ** n > MAX_DEGREE:
        raise ResourceError(f"degree {f.degree}^{n} exceeds {MAX_DEGREE}")
    g = f
    for _ in range(n - 1):
        g = compose(f, g)
    return g


def conjugate(f: RationalMap, M: Isometry) -> RationalMap:
    """``M o f o M^-1``."""
    return compose(RationalMap.mobius(M), compose(f, RationalMap.mobius(M.inverse())))


# ---------------------------------------------------------------------------
# periodic cycles


@dataclass(frozen=True)
class PeriodicCycle:
    points: tuple
    period: int
    multiplier: complex


def _spinors(points):
    sp = [as_plane(z).spinor() for z in points]
    return np.array([s[0] for s in sp]), np.array([s[1] for s in sp])


def _cycle_multiplier(f: RationalMap, points):
    """prod J(z_i) / (d lambda_i^2) with F(z_i) = lambda_i z_{i+1} on spinor lifts."""
    p, q = _spinors(points)
    fp = form_eval(f.P, p, q)
    fq = form_eval(f.Q, p, q)
    if f.degree == 1:
        jac = np.full(p.shape, f.P[0] * f.Q[1] - f.P[1] * f.Q[0])
    else:
        jac = form_eval(f.jacobian_form, p, q)
    pn, qn = np.roll(p, -1), np.roll(q, -1)
    lam = (fp * np.conj(pn) + fq * np.conj(qn)) / (np.abs(pn) ** 2 + np.abs(qn) ** 2)
    return complex(np.prod(jac / (f.degree * lam ** 2)))


def find_cycles(f: RationalMap, q: int, match_tol: float = 1e-6, period_tol: float = 1e-8):
    """All cycles of exact period ``q``, sorted deterministically."""
    if q < 1 or q > 4:
        raise DomainError("cycle search supports periods 1..4")
    g = iterate(f, q)
    fix = np.concatenate([[0], g.P]) - np.concatenate([g.Q, [0]])
    try:
        roots = form_roots(fix)
    except ConvergenceError as exc:
        raise ConvergenceError(f"fixed points of f^{q}: {exc}", residual=exc.residual) from exc
    p, qq = _spinors(roots)
    n = len(roots)
    if n > 1:
        dist = spinor_chordal(p[:, None], qq[:, None], p[None, :], qq[None, :])
        dist[np.arange(n), np.arange(n)] = np.inf
        if dist.min() < match_tol:
            warnings.warn(f"two period-{q} points within {dist.min():.2g}: possible parabolic collision",
                          ParabolicCollisionWarning, stacklevel=2)
    # primitive period filter
    keep = []
    for i, z in enumerate(roots):
        primitive = True
        for qp in range(1, q):
            if q % qp == 0:
                w = eval_map(iterate(f, qp), z)
                if spinor_chordal(*as_plane(w).spinor(), p[i], qq[i]) < period_tol:
                    primitive = False
                    break
        if primitive:
            keep.append(i)
    order = sorted(keep, key=lambda i: _sort_key(roots[i]))
    unused = list(order)
    cycles = []
    while unused:
        i0 = unused.pop(0)
        orbit = [roots[i0]]
        z = roots[i0]
        for _ in range(q - 1):
            z = eval_map(f, z)
            zp, zq = as_plane(z).spinor()
            if unused:
                d = [float(spinor_chordal(zp, zq, p[j], qq[j])) for j in unused]
                j = int(np.argmin(d))
                if d[j] < match_tol:
                    z = roots[unused.pop(j)]
            orbit.append(z)
        cycles.append(PeriodicCycle(tuple(orbit), q, _cycle_multiplier(f, orbit)))
    return cycles


def _sort_key(z: PlanePoint):
    if z.is_inf:
        return (1, 0.0, 0.0)
    return (0, round(z.value.real, 9), round(z.value.imag, 9))


def cycle_length(f: RationalMap, C: PeriodicCycle, crit_tol: float = CRITICAL_TOL) -> float:
    """log |(f^q)'(z_1)|, or ``-inf`` when a critical point lies on the cycle."""
    p, q = _spinors(C.points)
    sd = f.spherical_derivative_spinor(p, q)
    if np.any(sd < crit_tol):
        return -math.inf
    return float(np.sum(np.log(sd)))
