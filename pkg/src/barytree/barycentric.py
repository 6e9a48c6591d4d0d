"""Conformal barycenters and the barycentric extension of rational maps.

The extension ``E f(x)`` is the conformal barycenter of ``(f o M_x)_* mu``.
All solves run in normalised frames: the domain point is moved to the origin
by a frame ``A`` (so the quadrature rule is used as is), and the image point
is tracked as a frame ``G`` (see ``frames``).  The balance equation at the
current image frame is

    b(G) = sum_i w_i G^-1(f(A(zeta_i))) = 0,

and each Newton step uses the closed form Jacobian ``-2 I + 2 sum_i w_i v_i v_i^T``
of the balance vector in the moving frame.  Far from the solution, when the
pulled back measure is concentrated, the solver instead steps towards the
centroid by half its hyperbolic distance.  Every step is safeguarded by a
backtracking line search on the (geodesically convex) sum of Busemann
functions, whose critical point is the barycenter.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .adaptive import adaptive_rule, vectors_to_spinors
from .errors import (ConcentrationError, ConvergenceError, DomainError, InternalConsistencyError,
                     NearDegenerateMapError, PreconditionError)
from .frames import (Frame, dps_for_depth, image_rotation, image_rotation_double, mp_matrix,
                     recentre, recentre_double, refactor, rotation_matrix)
from .h3 import (BallPoint, CylindricalPoint, ORIGIN, ball_translations,
                 cylindrical_frame, mx_closed_form, mx_translation, translations_from)
from .rational import RationalMap, critical_points, form_eval
from .sphere import QuadratureRule, make_quadrature, spinor_to_vec, vec_to_spinor

log = logging.getLogger(__name__)

DEFAULT_ORDER = 30
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
NEWTON_RADIUS = 0.5       # |b| below which Newton steps are used
LINE_SEARCH_OFF = 1e-6    # |b| below which full Newton steps are taken
MAX_STEP = 1.0            # hyperbolic length cap for Newton steps
MAX_CENTROID_STEP = 16.0  # hyperbolic length cap for centroid steps
COND_LIMIT = 1e8
ABSORB = 0.25
REFACTOR_DIST = 3.0
DOUBLE_DEPTH = 26.0       # depth budgets up to this are recentred in double precision
GRADE_FROM = 0.5          # domain depth from which the rule is graded at the south pole
MAX_GRADING = 12
REFINE_TOL = 1e-10        # per unit mass error target of the adaptive polishing rule

C_LIPSCHITZ = 27 / (2 * math.log(3))
M_SPECTRAL = 27 / (8 * math.log(3))


def default_rule():
    return make_quadrature(DEFAULT_ORDER)


def rule_for_depth(rule: QuadratureRule, ell: float) -> QuadratureRule:
    """The rule actually used for a domain frame of depth ``ell``.

    Moving a domain point at distance ``ell`` to the origin squeezes most of
    the structure of ``f`` into a south polar cap of area about ``e^(-2 ell)``.
    Ungraded rules get enough south panels to resolve that cap down to a
    relative size of 1e-2 (capped at ``MAX_GRADING``); rules that are already
    graded are used as given.
    """
    ell = abs(float(ell))
    if rule.grading > 0 or ell <= GRADE_FROM:
        return rule
    g = math.ceil((2 * ell + math.log(100)) / math.log(8))
    return make_quadrature(rule.order, min(max(g, 1), MAX_GRADING), poles="south")


# ---------------------------------------------------------------------------
# public value types


@dataclass(frozen=True, eq=False)
class WeightedSpherePoints:
    """A discrete probability measure on the sphere."""

    points: np.ndarray
    weights: np.ndarray
    note: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or w.shape != (pts.shape[0],):
            raise DomainError("points must be (N, 3) and weights (N,)")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise DomainError("weights must be positive and sum to 1")
        pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        pts.setflags(write=False)
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True, eq=False)
class ExtensionResult:
    """Barycenter found by the solver.

    ``frame`` carries the point at full precision; ``point`` converts it to
    the ball model and raises ``DomainError`` for points too close to the
    sphere to be represented there.
    """

    frame: Frame
    residual: float
    iterations: int

    @property
    def point(self) -> BallPoint:
        return self.frame.point()

    @property
    def distance_from_origin(self) -> float:
        return self.frame.distance_from_origin()

    @property
    def cylindrical(self) -> CylindricalPoint:
        return self.frame.cylindrical()


@dataclass(frozen=True, eq=False)
class DerivativeMatrix:
    """Differential of ``E f`` at ``x`` in normalised frames.

    ``raw`` is ``d(G^-1 o E f o A)`` at the origin for the solver frames
    ``A`` (domain) and ``G`` (image).  ``matrix`` is the same differential
    expressed in the frames given by the pure translations from the origin to
    ``x`` and to ``E f(x)``, so that its axes are parallel to the coordinate
    axes of the ball.  ``fx`` and ``fy`` are the two partial derivatives of
    the balance equation in the solver frames.
    """

    matrix: np.ndarray
    raw: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    domain: Frame
    image: Frame


# ---------------------------------------------------------------------------
# elementary operations


def pushforward(f: RationalMap, x=ORIGIN, rule: QuadratureRule | None = None) -> WeightedSpherePoints:
    """Node ``i`` carries ``f(M_x(zeta_i))`` with the rule's weight."""
    rule = rule or default_rule()
    x = x if isinstance(x, BallPoint) else BallPoint(tuple(x))
    m = ball_translations(x.array)
    p, q = rule.spinors
    mp_, mq_ = m[0, 0] * p + m[0, 1] * q, m[1, 0] * p + m[1, 1] * q
    fp, fq = f.eval_spinor(mp_, mq_)
    return WeightedSpherePoints(spinor_to_vec(fp, fq), rule.weights, note=f"pushforward by {f!r} at {x.p}")


def balance_vector(m: WeightedSpherePoints, y=ORIGIN) -> np.ndarray:
    """``sum_i w_i M_{-y}(zeta_i)``."""
    y = y.array if isinstance(y, BallPoint) else np.asarray(y, dtype=float)
    moved = mx_closed_form(-y, m.points)
    return m.weights @ moved


def fy_operator(m: WeightedSpherePoints, tol: float = 1e-8) -> np.ndarray:
    """``F_y(0, 0) = -2 I + 2 int f f^T``; requires ``m`` balanced at the origin."""
    b = m.weights @ m.points
    if np.linalg.norm(b) > tol:
        raise PreconditionError(f"measure is not balanced at the origin (|b| = {np.linalg.norm(b):.3g})")
    T = np.einsum("n,ni,nj->ij", m.weights, m.points, m.points)
    return -2 * np.eye(3) + 2 * T


def fx_operator(m: WeightedSpherePoints, nodes, tol: float = 1e-8) -> np.ndarray:
    """``F_x(0, 0) = 4 int f zeta^T``, with ``nodes`` the domain nodes matching ``m``."""
    b = m.weights @ m.points
    if np.linalg.norm(b) > tol:
        raise PreconditionError(f"measure is not balanced at the origin (|b| = {np.linalg.norm(b):.3g})")
    nodes = np.asarray(nodes, dtype=float)
    return 4 * np.einsum("n,ni,nj->ij", m.weights, m.points, nodes)


def hyperbolic_operator_norm(D) -> float:
    """Spectral norm in normalised frames (conformal factors cancel at the origin)."""
    mat = D.matrix if isinstance(D, DerivativeMatrix) else np.asarray(D, dtype=float)
    return float(np.linalg.norm(mat, 2))


# ---------------------------------------------------------------------------
# batched solver core


def _eval_forms_batched(P, Q, p, q):
    """Evaluate per-row forms ``P[b], Q[b]`` on spinors ``p[b, n], q[b, n]``."""
    B, N = p.shape
    d = P.shape[1] - 1
    big_p = np.abs(p) >= np.abs(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(big_p, q / np.where(big_p, p, 1), p / np.where(big_p, 1, q))
        lead = np.where(big_p, p / np.abs(p), q / np.abs(q))
    accP_p = np.zeros((B, N), dtype=complex)
    accQ_p = np.zeros((B, N), dtype=complex)
    for k in range(d, -1, -1):
        accP_p = accP_p * t + P[:, k, None]
        accQ_p = accQ_p * t + Q[:, k, None]
    accP_q = np.zeros((B, N), dtype=complex)
    accQ_q = np.zeros((B, N), dtype=complex)
    for k in range(d + 1):
        accP_q = accP_q * t + P[:, k, None]
        accQ_q = accQ_q * t + Q[:, k, None]
    ld = lead ** d
    fp = np.where(big_p, accP_p, accP_q) * ld
    fq = np.where(big_p, accQ_p, accQ_q) * ld
    return fp, fq


def _normalised_images(P, Q, p, q):
    fp, fq = _eval_forms_batched(P, Q, p, q)
    s = np.maximum(np.abs(fp), np.abs(fq))
    if np.any(s < 1e-280):
        raise NearDegenerateMapError("P and Q vanish simultaneously (numerically)")
    return fp / s, fq / s


class _Problem:
    """Supplies image spinors ``R_img^-1 (f(A zeta_i))`` for each batch item."""

    def __init__(self, f: RationalMap | None, domains, rule: QuadratureRule, measure=None):
        self.f = f
        self.domains = list(domains)
        self.rule = rule
        self.measure = measure
        zp, zq = rule.spinors
        self.zp, self.zq = zp, zq

    def domain_spinors(self, idx, zp=None, zq=None):
        """Spinors of ``D(l_A) K_A zeta`` for the selected items, shape (B, N)."""
        zp = self.zp if zp is None else zp
        zq = self.zq if zq is None else zq
        K = np.stack([self.domains[i].K for i in idx])
        ell = np.array([self.domains[i].ell for i in idx])
        p = K[:, 0, 0, None] * zp + K[:, 0, 1, None] * zq
        q = K[:, 1, 0, None] * zp + K[:, 1, 1, None] * zq
        p = p * np.exp(ell / 2)[:, None]
        q = q * np.exp(-ell / 2)[:, None]
        s = np.maximum(np.abs(p), np.abs(q))
        return p / s, q / s

    def initial_rotation(self, i, depth):
        if self.f is None:
            return mp_matrix(np.eye(2))
        if depth <= DOUBLE_DEPTH:
            return image_rotation_double(self.f, self.domains[i].R)
        return image_rotation(self.f, self.domains[i].R, dps_for_depth(depth))

    def depth_hint(self, i):
        d = 1 if self.f is None else self.f.degree
        return d * abs(self.domains[i].ell) + 20.0

    def images(self, idx, rotations, depths):
        """Image spinors for items ``idx`` given image rotations (extended precision)."""
        if self.f is None:
            p, q = vec_to_spinor(self.measure.points)
            out_p, out_q = [], []
            for R in rotations:
                Rinv = np.linalg.inv(np.array([[complex(R[0]), complex(R[1])], [complex(R[2]), complex(R[3])]]))
                out_p.append(Rinv[0, 0] * p + Rinv[0, 1] * q)
                out_q.append(Rinv[1, 0] * p + Rinv[1, 1] * q)
            return np.array(out_p), np.array(out_q)
        coeffs = [self.coefficients(i, R, dep) for i, R, dep in zip(idx, rotations, depths)]
        P = np.stack([c[0] for c in coeffs])
        Q = np.stack([c[1] for c in coeffs])
        p, q = self.domain_spinors(idx)
        return _normalised_images(P, Q, p, q)

    def coefficients(self, i, R, depth):
        """Double coefficients of ``R^-1 o f o R_A`` for item ``i``."""
        if depth <= DOUBLE_DEPTH:
            return recentre_double(self.f, self.domains[i].R, R)
        return recentre(self.f, self.domains[i].R, R, dps_for_depth(depth))

    @property
    def weights(self):
        return self.rule.weights if self.measure is None else self.measure.weights


STATUS_OK, STATUS_MAXITER, STATUS_CONCENTRATED, STATUS_DEGENERATE = 0, 1, 2, 3


@dataclass
class _BatchResult:
    frames: list
    residuals: np.ndarray
    iterations: np.ndarray
    status: np.ndarray
    pulled: np.ndarray | None = None  # final pulled back image vectors (B, N, 3)
    messages: list = field(default_factory=list)


def _pull_back(HP, HQ, ell, K):
    """Unit vectors of ``K^-1 D(-l) (HP, HQ)`` for each row."""
    sp = HP * np.exp(-ell / 2)[:, None]
    sq = HQ * np.exp(ell / 2)[:, None]
    a, b, c, d = K[:, 0, 0, None], K[:, 0, 1, None], K[:, 1, 0, None], K[:, 1, 1, None]
    return spinor_to_vec(d * sp - b * sq, -c * sp + a * sq)


def _merit(w, v, u, ell):
    """Sum of Busemann functions at the point ``tanh(ell/2) u`` (rows of a batch)."""
    tau = np.tanh(ell / 2)
    one_minus = 2 / (np.exp(ell) + 1)
    half_gap = 0.5 * np.sum((v - u[:, None, :]) ** 2, axis=-1)  # 1 - <v, u>
    num = one_minus[:, None] ** 2 + 2 * tau[:, None] * half_gap
    with np.errstate(divide="ignore"):
        vals = np.log(num) - np.log((1 - tau) * (1 + tau))[:, None]
    return vals @ w


def _solve_batch(problem: _Problem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, keep_pulled=False,
                 newton_radius=NEWTON_RADIUS, seed_rotations=None, seed_frames=None):
    B = len(problem.domains)
    w = problem.weights
    depths = [problem.depth_hint(i) for i in range(B)]
    ell = np.zeros(B)
    K = np.tile(np.eye(2, dtype=complex), (B, 1, 1))
    if seed_frames is not None:
        rotations = [fr.R for fr in seed_frames]
        ell[:] = [fr.ell for fr in seed_frames]
        K[:] = [fr.K for fr in seed_frames]
        depths = [max(dep, abs(fr.ell) + 20.0) for dep, fr in zip(depths, seed_frames)]
    elif seed_rotations is None:
        rotations = [problem.initial_rotation(i, depths[i]) for i in range(B)]
    else:
        rotations = list(seed_rotations)
    HP, HQ = problem.images(range(B), rotations, depths)
    resid = np.full(B, np.inf)
    iters = np.zeros(B, dtype=int)
    status = np.full(B, STATUS_MAXITER)
    active = np.ones(B, dtype=bool)
    pulled = np.zeros((B, w.size, 3)) if keep_pulled else None

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        v = _pull_back(HP[idx], HQ[idx], ell[idx], K[idx])
        b = v.transpose(0, 2, 1) @ w
        nb = np.linalg.norm(b, axis=1)
        resid[idx] = nb
        done = nb < tol
        if keep_pulled:
            pulled[idx[done]] = v[done]
        status[idx[done]] = STATUS_OK
        active[idx[done]] = False
        if it == max_iter:
            if keep_pulled:
                pulled[idx[~done]] = v[~done]
            break
        go = ~done
        idx, v, b, nb = idx[go], v[go], b[go], nb[go]
        if idx.size == 0:
            continue

        # step direction and length in the current image frame
        u = np.zeros((idx.size, 3))
        length = np.zeros(idx.size)
        newton = nb < newton_radius
        if np.any(newton):
            vn = v[newton]
            T = np.einsum("n,bni,bnj->bij", w, vn, vn)
            J = -2 * np.eye(3) + 2 * T
            eig = np.linalg.eigvalsh(J)
            cond = np.abs(eig[:, 0]) / np.maximum(np.abs(eig[:, -1]), 1e-300)
            bad = cond > COND_LIMIT
            if np.any(bad):
                bi = idx[newton][bad]
                status[bi] = STATUS_CONCENTRATED
                active[bi] = False
            s = np.linalg.solve(J, -b[newton][..., None])[..., 0]
            ns = np.linalg.norm(s, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                lens = np.where(ns < 1, 2 * np.arctanh(np.minimum(ns, 1 - 1e-16)), MAX_STEP)
                u[newton] = s / np.where(ns > 0, ns, 1)[:, None]
            length[newton] = np.minimum(lens, MAX_STEP)
            length[newton] = np.where(bad, 0.0, length[newton])
        far = ~newton
        if np.any(far):
            bf = b[far]
            nf = nb[far]
            uf = bf / nf[:, None]
            gap = np.einsum("n,bn->b", w, 0.5 * np.sum((v[far] - uf[:, None, :]) ** 2, axis=-1))
            gap = np.maximum(gap, 1e-300)
            # half of the hyperbolic distance from the origin to the centroid
            length[far] = np.minimum(0.5 * np.log((2 - gap) / gap), MAX_CENTROID_STEP)
            u[far] = uf

        # backtracking line search on the Busemann merit
        search = (nb > LINE_SEARCH_OFF) & (length > 0)
        slope = np.einsum("bi,bi->b", b, u)  # merit decreases at rate -slope
        alpha = np.ones(idx.size)
        pending = search.copy()
        for _ in range(40):
            if not np.any(pending):
                break
            pi = np.flatnonzero(pending)
            val = _merit(w, v[pi], u[pi], alpha[pi] * length[pi])
            ok = val <= -1e-4 * alpha[pi] * length[pi] * slope[pi]
            pending[pi[ok]] = False
            alpha[pi[~ok]] *= 0.5
        step_len = alpha * length
        M = translations_from(u, step_len)
        K[idx] = K[idx] @ M
        iters[idx] += 1

        # keep K moderate: absorb translation along the axis, refactor otherwise
        Kx = K[idx]
        den = np.abs(Kx[:, 1, 0]) ** 2 + np.abs(Kx[:, 1, 1]) ** 2
        wK = (Kx[:, 0, 0] * np.conj(Kx[:, 1, 0]) + Kx[:, 0, 1] * np.conj(Kx[:, 1, 1])) / den
        sK = 1 / den
        ellK = 0.5 * np.log(np.abs(wK) ** 2 + sK ** 2)
        absorb = np.abs(ellK) > ABSORB
        if np.any(absorb):
            ai = idx[absorb]
            e = ellK[absorb]
            K[ai, 0, :] *= np.exp(-e / 2)[:, None]
            K[ai, 1, :] *= np.exp(e / 2)[:, None]
            ell[ai] += e
        radial = np.arcsinh(np.abs(wK) / sK)
        needs = (radial > REFACTOR_DIST) | (np.abs(ell[idx]) + 10 > np.array([depths[i] for i in idx]))
        for j in np.flatnonzero(needs):
            i = idx[j]
            if not active[i]:
                continue
            depths[i] = max(depths[i], abs(ell[i]) + 40.0)
            fr = refactor(Frame(rotations[i], ell[i], K[i]), dps_for_depth(depths[i]))
            rotations[i] = fr.R
            ell[i] = fr.ell
            K[i] = fr.K
            hp, hq = problem.images([i], [fr.R], [depths[i]])
            HP[i], HQ[i] = hp[0], hq[0]

    frames = [Frame(rotations[i], ell[i], K[i]) for i in range(B)]
    return _BatchResult(frames, resid, iters, status, pulled)


def _raise_for_status(res: _BatchResult, i: int):
    st = res.status[i]
    if st == STATUS_OK:
        return
    if st == STATUS_CONCENTRATED:
        raise ConcentrationError("balance Jacobian is ill-conditioned: the measure is concentrated",
                                 residual=float(res.residuals[i]))
    raise ConvergenceError(f"barycenter iteration did not converge (residual {res.residuals[i]:.3g})",
                           residual=float(res.residuals[i]))


def _solve_with_fallback(problem, tol, max_iter, keep_pulled=False):
    res = _solve_batch(problem, tol, max_iter, keep_pulled)
    failed = np.flatnonzero(res.status != STATUS_OK)
    if failed.size:
        # second attempt: start from the origin of an unrotated image frame and
        # use gradient-like centroid steps for longer before switching to Newton
        sub = _Problem(problem.f, [problem.domains[i] for i in failed], problem.rule, problem.measure)
        eye = mp_matrix(np.eye(2))
        res2 = _solve_batch(sub, tol, 2 * max_iter, keep_pulled, newton_radius=0.1,
                            seed_rotations=[eye] * failed.size)
        for j, i in enumerate(failed):
            if res2.status[j] == STATUS_OK or res2.residuals[j] < res.residuals[i]:
                res.frames[i] = res2.frames[j]
                res.residuals[i] = res2.residuals[j]
                res.iterations[i] += res2.iterations[j]
                res.status[i] = res2.status[j]
                if keep_pulled:
                    res.pulled[i] = res2.pulled[j]
    return res


# ---------------------------------------------------------------------------
# barycenter and extension


def barycenter(m: WeightedSpherePoints, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> ExtensionResult:
    """Conformal barycenter of a discrete measure whose atoms all weigh < 1/2."""
    if m.weights.max() >= 0.5:
        raise PreconditionError("an atom of mass >= 1/2 has no unique barycenter")
    # a dummy rule carries the weights; the measure supplies the image points
    problem = _Problem(None, [Frame.identity()], _RuleStub(m.weights), measure=m)
    res = _solve_with_fallback(problem, tol, max_iter)
    _raise_for_status(res, 0)
    return ExtensionResult(res.frames[0], float(res.residuals[0]), int(res.iterations[0]))


class _RuleStub:
    def __init__(self, weights):
        self.weights = weights
        self.spinors = (np.zeros(weights.size, complex), np.ones(weights.size, complex))


def _refine_item(f, A: Frame, G: Frame, base_rule, tol, max_iter, keep_pulled, refine_tol):
    """Re-solve one item on an adaptive rule built for the integrand near ``G``.

    The integrand is the pulled back image vector ``v = G^-1 f A (zeta)``
    together with the moments ``v v^T`` and ``v zeta^T`` that enter the
    derivative, so the rule resolves whatever small features ``f o A`` has.
    """
    probe = _Problem(f, [A], base_rule)
    depth = max(probe.depth_hint(0), abs(G.ell) + 20.0)
    P, Q = probe.coefficients(0, G.R, depth)
    ell = np.array([G.ell])
    K = G.K[None]
    iu = np.triu_indices(3)

    def integrand(u):
        zp, zq = vectors_to_spinors(u)
        p, q = probe.domain_spinors([0], zp, zq)
        HP, HQ = _normalised_images(P[None], Q[None], p, q)
        v = _pull_back(HP, HQ, ell, K)[0]
        zeta = u / np.linalg.norm(u, axis=1, keepdims=True)
        vv = (v[:, :, None] * v[:, None, :])[:, iu[0], iu[1]]
        vz = (v[:, :, None] * zeta[:, None, :]).reshape(-1, 9)
        return np.concatenate([v, vv, vz], axis=1)

    rule = adaptive_rule(integrand, tol=refine_tol)
    problem = _Problem(f, [A], rule)
    return problem, _solve_batch(problem, tol, max_iter, keep_pulled, seed_frames=[G])


def _solve_grouped(f, frames, rule, tol, max_iter, keep_pulled=False, auto_grade=True, chunk=64,
                   refine=False, refine_tol=REFINE_TOL):
    """Solve for many domain frames, batching items that share a quadrature rule.

    Yields ``(indices, problem, result)`` with ``indices`` into ``frames``.
    Refined items are yielded one at a time since each has its own rule.
    """
    groups = {}
    for i, fr in enumerate(frames):
        r = rule_for_depth(rule, fr.ell) if auto_grade else rule
        groups.setdefault((r.order, r.grading, r.poles), (r, []))[1].append(i)
    for key in sorted(groups):
        r, members = groups[key]
        for start in range(0, len(members), chunk):
            idx = members[start:start + chunk]
            problem = _Problem(f, [frames[i] for i in idx], r)
            res = _solve_with_fallback(problem, tol, max_iter, keep_pulled and not refine)
            if not refine:
                yield idx, problem, res
                continue
            for j, i in enumerate(idx):
                if res.status[j] != STATUS_OK:
                    yield [i], *_single(problem, res, j)
                    continue
                yield [i], *_refine_item(f, frames[i], res.frames[j], r, tol, max_iter, keep_pulled, refine_tol)


def _single(problem, res, j):
    sub = _Problem(problem.f, [problem.domains[j]], problem.rule, problem.measure)
    pulled = None if res.pulled is None else res.pulled[j:j + 1]
    return sub, _BatchResult([res.frames[j]], res.residuals[j:j + 1], res.iterations[j:j + 1],
                             res.status[j:j + 1], pulled)


def extend(f: RationalMap, x=ORIGIN, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER, auto_grade: bool = True, refine: bool = True,
           refine_tol: float = REFINE_TOL) -> ExtensionResult:
    """``E f(x)`` for a ball point, isometry, cylindrical point or frame ``x``.

    With ``auto_grade`` an ungraded rule is refined at the south pole
    according to the depth of ``x`` (see ``rule_for_depth``).  With
    ``refine`` the solution found with ``rule`` is polished on an adaptive
    rule, so the result approximates the barycenter of the continuous
    pushforward measure; with ``refine=False`` and ``auto_grade=False`` it is
    exactly the barycenter of ``pushforward(f, x, rule)``.
    """
    rule = rule or default_rule()
    ((_, _, res),) = _solve_grouped(f, [Frame.coerce(x)], rule, tol, max_iter, auto_grade=auto_grade,
                                    refine=refine, refine_tol=refine_tol)
    _raise_for_status(res, 0)
    return ExtensionResult(res.frames[0], float(res.residuals[0]), int(res.iterations[0]))


def extend_many(f: RationalMap, xs, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, chunk: int = 64, auto_grade: bool = True,
                refine: bool = True):
    """Batched ``extend``; failed items are returned as exception instances."""
    rule = rule or default_rule()
    frames = [Frame.coerce(x) for x in xs]
    out = [None] * len(frames)
    for idx, _, res in _solve_grouped(f, frames, rule, tol, max_iter, auto_grade=auto_grade, chunk=chunk,
                                      refine=refine):
        for j, i in enumerate(idx):
            try:
                _raise_for_status(res, j)
                out[i] = ExtensionResult(res.frames[j], float(res.residuals[j]), int(res.iterations[j]))
            except (ConvergenceError, ConcentrationError) as exc:
                out[i] = exc
    return out


def _derivatives_from(res: _BatchResult, problem: _Problem):
    w = problem.weights
    zeta = problem.rule.points
    out = []
    for i in range(len(problem.domains)):
        if res.status[i] != STATUS_OK:
            out.append(None)
            continue
        v = res.pulled[i]
        fy = -2 * np.eye(3) + 2 * np.einsum("n,ni,nj->ij", w, v, v)
        fx = 4 * np.einsum("n,ni,nj->ij", w, v, zeta)
        raw = -np.linalg.solve(fy, fx)
        out.append((raw, fx, fy))
    return out


def _pure_frame_matrix(raw, A: Frame, G: Frame):
    SA = rotation_matrix(A.rotation_part())
    SG = rotation_matrix(G.rotation_part())
    return SG @ raw @ SA.T


def derivative(f: RationalMap, x=ORIGIN, rule: QuadratureRule | None = None,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               auto_grade: bool = True, refine: bool = True) -> DerivativeMatrix:
    """``D E f(x) = -F_y^-1 F_x`` in normalised frames (options as in ``extend``)."""
    rule = rule or default_rule()
    A = Frame.coerce(x)
    ((_, problem, res),) = _solve_grouped(f, [A], rule, tol, max_iter, keep_pulled=True,
                                          auto_grade=auto_grade, refine=refine)
    _raise_for_status(res, 0)
    raw, fx, fy = _derivatives_from(res, problem)[0]
    G = res.frames[0]
    return DerivativeMatrix(_pure_frame_matrix(raw, A, G), raw, fx, fy, A, G)


def derivative_norms(f: RationalMap, xs, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, chunk: int = 64, auto_grade: bool = True,
                     refine: bool = True):
    """Operator norms of ``D E f`` at many points; ``nan`` where the solve failed."""
    rule = rule or default_rule()
    frames = [Frame.coerce(x) for x in xs]
    norms = np.full(len(frames), np.nan)
    for idx, problem, res in _solve_grouped(f, frames, rule, tol, max_iter, keep_pulled=True,
                                            auto_grade=auto_grade, chunk=chunk, refine=refine):
        for i, item in zip(idx, _derivatives_from(res, problem)):
            if item is not None:
                norms[i] = np.linalg.norm(item[0], 2)
    return norms


def derivatives_many(f: RationalMap, xs, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, chunk: int = 64, auto_grade: bool = True,
                     refine: bool = True):
    """Batched ``derivative``; failed items are returned as exception instances."""
    rule = rule or default_rule()
    frames = [Frame.coerce(x) for x in xs]
    out = [None] * len(frames)
    for idx, problem, res in _solve_grouped(f, frames, rule, tol, max_iter, keep_pulled=True,
                                            auto_grade=auto_grade, chunk=chunk, refine=refine):
        for j, (i, item) in enumerate(zip(idx, _derivatives_from(res, problem))):
            if item is None:
                try:
                    _raise_for_status(res, j)
                except (ConvergenceError, ConcentrationError) as exc:
                    out[i] = exc
                continue
            raw, fx, fy = item
            A, G = frames[i], res.frames[j]
            out[i] = DerivativeMatrix(_pure_frame_matrix(raw, A, G), raw, fx, fy, A, G)
    return out


def relative_ball_vector(G: Frame, Y: Frame):
    """Ball coordinates of ``G^-1(Y(origin))`` computed in extended precision."""
    import mpmath

    from .frames import mp_halfspace, mp_mul
    dps = dps_for_depth(2 * max(abs(G.ell), abs(Y.ell)) + 20)
    with mpmath.workdps(dps):
        g = G.mp(dps)
        ginv = (g[3], -g[1], -g[2], g[0])
        w, s = mp_halfspace(mp_mul(ginv, Y.mp(dps)))
        aw = abs(w) ** 2
        dn = aw + (s + 1) ** 2
        return np.array([float(2 * w.real / dn), float(2 * w.imag / dn), float((aw + (s - 1) * (s + 1)) / dn)])


def finite_difference_derivative(f: RationalMap, x=ORIGIN, rule: QuadratureRule | None = None,
                                 step: float = 1e-4, tol: float = 1e-13, refine: bool = True) -> np.ndarray:
    """Central differences of ``G^-1 o E f o A`` at the origin (solver frames of ``derivative``)."""
    A = Frame.coerce(x)
    # one base rule for all stencil points, the one ``derivative`` uses at ``x``
    rule = rule_for_depth(rule or default_rule(), A.ell)
    G = extend(f, A, rule, tol=tol, refine=refine).frame
    cols = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        plus = extend(f, A.then(mx_translation(e)), rule, tol=tol, auto_grade=False, refine=refine).frame
        minus = extend(f, A.then(mx_translation(-e)), rule, tol=tol, auto_grade=False, refine=refine).frame
        cols.append((relative_ball_vector(G, plus) - relative_ball_vector(G, minus)) / (2 * step))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Lipschitz scan

SCAN_RADIUS = 20.0
SCAN_CHUNK = 256
CRITICAL_FRACTION = 5     # every fifth sample is taken near a critical geodesic
HIST_EDGES = np.linspace(0.0, 13.0, 27)  # in units of the degree


@dataclass
class LipschitzScan:
    """Outcome of ``lipschitz_scan``; ``rows`` holds one record per sample."""

    degree: int
    samples: int
    max_norm: float
    argmax: np.ndarray          # ball coordinates (may round onto the sphere when deep)
    argmax_distance: float
    histogram: np.ndarray       # counts of norm/degree over HIST_EDGES
    failures: int
    bound: float
    within_bound: bool
    within_conjecture: bool     # max <= degree, reported only
    rows: list = field(repr=False, default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["index", "kind", "distance", "x1", "x2", "x3", "norm"])
        for row in self.rows:
            wr.writerow([row[0], row[1], f"{row[2]:.10f}"] + [f"{c:.15e}" for c in row[3]]
                        + ["nan" if not np.isfinite(row[4]) else f"{row[4]:.12e}"])
        return buf.getvalue()


def _geodesic_frame(a, b):
    """Frame sending 0 and infinity to the plane points ``a`` and ``b``."""
    a1, a2 = a.spinor()
    b1, b2 = b.spinor()
    m = np.array([[b1, a1], [b2, a2]], dtype=complex)
    det = np.linalg.det(m)
    if abs(det) < 1e-14:
        return None
    return Frame.from_isometry(m / np.sqrt(det))


def _scan_samples(f: RationalMap, n: int, seed: int, chunk: int):
    """Sample frames for chunk ``chunk``; reproducible independently of other chunks."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, chunk])))
    try:
        crit = critical_points(f) if f.degree >= 2 else []
    except DomainError:
        crit = []
    pairs = [(crit[i], crit[j]) for i in range(len(crit)) for j in range(i + 1, len(crit))]
    geos = [g for g in (_geodesic_frame(a, b) for a, b in pairs) if g is not None]
    out = []
    for g in range(chunk * SCAN_CHUNK, min(n, (chunk + 1) * SCAN_CHUNK)):
        u = rng.standard_normal(3)
        if geos and g % CRITICAL_FRACTION == CRITICAL_FRACTION - 1:
            base = geos[int(rng.integers(len(geos)))]
            c = CylindricalPoint(float(rng.uniform(0, 0.5)), float(rng.uniform(0, 2 * np.pi)),
                                 float(rng.uniform(-SCAN_RADIUS / 2, SCAN_RADIUS / 2)))
            out.append((g, "critical", base.then(cylindrical_frame(c))))
        else:
            # stratified in hyperbolic radius, uniform in direction
            r = SCAN_RADIUS * (g + rng.uniform()) / n
            out.append((g, "radial", Frame.from_direction(u, r)))
    return out


def _scan_chunk(args):
    f, n, seed, chunk, rule, accurate = args
    samples = _scan_samples(f, n, seed, chunk)
    frames = [fr for _, _, fr in samples]
    norms = derivative_norms(f, frames, rule, refine=accurate, auto_grade=accurate)
    rows = []
    for (g, kind, fr), nm in zip(samples, norms):
        rows.append((g, kind, fr.distance_from_origin(), fr.ball_vector(), float(nm)))
    return rows


def lipschitz_scan(f: RationalMap, sample_count: int = 10000, seed: int = 0,
                   rule: QuadratureRule | None = None, workers: int = 1,
                   accurate: bool = False) -> LipschitzScan:
    """Maximum of ``|D E f|`` over stratified samples out to distance ``SCAN_RADIUS``.

    Samples come in fixed chunks seeded by ``(seed, chunk index)``, so the
    output does not depend on ``workers``.  By default each solve uses the
    base rule as is (no depth grading, no adaptive polishing); this keeps
    10^4 solves per map affordable and perturbs norms only at the 1e-4 level.
    Failed solves are counted, not raised.  Raises
    ``InternalConsistencyError`` if the universal bound is exceeded.
    """
    if sample_count < 1:
        raise DomainError("sample_count must be positive")
    rule = rule or default_rule()
    n_chunks = -(-sample_count // SCAN_CHUNK)
    jobs = [(f, sample_count, seed, k, rule, accurate) for k in range(n_chunks)]
    if workers > 1:
        import multiprocessing as mp_
        with mp_.get_context("spawn").Pool(workers) as pool:
            parts = pool.map(_scan_chunk, jobs)
    else:
        parts = [_scan_chunk(j) for j in jobs]
    rows = [row for part in parts for row in part]
    norms = np.array([row[4] for row in rows])
    ok = np.isfinite(norms)
    d = f.degree
    if not np.any(ok):
        raise ConvergenceError("every solve of the scan failed", residual=float("nan"))
    k = int(np.argmax(np.where(ok, norms, -np.inf)))
    mx = float(norms[k])
    bound = C_LIPSCHITZ * d
    hist, _ = np.histogram(norms[ok] / d, bins=HIST_EDGES)
    result = LipschitzScan(d, len(rows), mx, rows[k][3], rows[k][2], hist, int((~ok).sum()), bound,
                           mx <= bound * (1 + 1e-3), mx <= d * (1 + 1e-6), rows)
    if not result.within_bound:
        raise InternalConsistencyError(f"derivative norm {mx} exceeds the bound {bound}")
    return result


# ---------------------------------------------------------------------------
# recentring, spectral and belt checks


def recenter(f: RationalMap, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL) -> RationalMap:
    """Post-compose ``f`` with the pure translation moving ``E f(0)`` to the origin."""
    import mpmath

    from .frames import mp_mul
    res = extend(f, ORIGIN, rule, tol=tol)
    G = res.frame
    dps = dps_for_depth(abs(G.ell) + 20)
    with mpmath.workdps(dps):
        g = G.mp(dps)
        S = G.rotation_part()
        # pure translation P = G S^-1, so P^-1 = S G^-1
        Smp = mp_matrix(S)
        ginv = (g[3], -g[1], -g[2], g[0])
        a, b, c, d = mp_mul(Smp, ginv)
        P = [mpmath.mpc(complex(z)) for z in f.P]
        Q = [mpmath.mpc(complex(z)) for z in f.Q]
        Pn = [a * x + b * y for x, y in zip(P, Q)]
        Qn = [c * x + d * y for x, y in zip(P, Q)]
        s = max(max(abs(z) for z in Pn), max(abs(z) for z in Qn))
        return RationalMap([complex(z / s) for z in Pn], [complex(z / s) for z in Qn])


def fy_spectrum(f: RationalMap, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Eigenvalues of ``F_y`` at the balanced image of the origin (ascending)."""
    D = derivative(f, ORIGIN, rule, tol=tol)
    return np.linalg.eigvalsh(0.5 * (D.fy + D.fy.T))


@dataclass(frozen=True)
class BeltVolume:
    V: float
    V1: float
    V2: float


def belt_volume(f: RationalMap, n_azimuth: int = 720, n_grid: int = 512, check_balanced: bool = True,
                rule: QuadratureRule | None = None, tol: float = 1e-6) -> BeltVolume:
    """Round measure of ``1/sqrt3 < |f| < sqrt3`` and of the two complementary caps.

    Each meridian is split at the exact crossings of ``|P|^2 = c |Q|^2``
    (bracketed on a grid, refined with Brent's method); the meridian lengths
    are then averaged over equally spaced azimuths.
    """
    if check_balanced:
        res = extend(f, ORIGIN, rule)
        dist = res.distance_from_origin
        if dist > tol:
            raise PreconditionError(f"E f(0) is at distance {dist:.3g} from the origin; recenter f first")
    phis = 2 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    alphas = np.linspace(0.0, np.pi / 2, n_grid + 1)

    def levels(alpha, phi, c):
        p = np.cos(alpha) * np.exp(1j * phi)
        q = np.sin(alpha) + 0j
        fp = form_eval(f.P, p, q)
        fq = form_eval(f.Q, p, q)
        return np.abs(fp) ** 2 - c * np.abs(fq) ** 2

    inner_total = 0.0
    outer_total = 0.0
    for phi in phis:
        measures = []
        for c, sign in ((1 / 3, -1), (3.0, 1)):
            g = levels(alphas, phi, c)
            # measure of {sign * g > 0} along the meridian, in the height x3 = cos(2 alpha)
            cuts = [0.0]
            for k in np.flatnonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0):
                cuts.append(optimize.brentq(lambda a: float(levels(np.array([a]), phi, c)[0]),
                                            alphas[k], alphas[k + 1], xtol=1e-15))
            cuts.append(np.pi / 2)
            total = 0.0
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                mid = float(levels(np.array([(lo + hi) / 2]), phi, c)[0])
                if sign * mid > 0:
                    total += (np.cos(2 * lo) - np.cos(2 * hi)) / 2
            measures.append(total)
        inner_total += measures[0]
        outer_total += measures[1]
    V1 = inner_total / n_azimuth
    V2 = outer_total / n_azimuth
    return BeltVolume(1 - V1 - V2, V1, V2)


def belt_lower_bound(d: int) -> float:
    return 16 * math.log(3) / (81 * d)


# ---------------------------------------------------------------------------
# the z^2 example


Z2 = RationalMap.power(2)


def delta_rule():
    """Rule with polar grading, used for the z^2 cylindrical computations."""
    return make_quadrature(40, grading=10)


def delta_value(r: float, rule: QuadratureRule | None = None, tol: float = 1e-13) -> float:
    """``log cosh r`` minus the radial coordinate of ``E(z^2)`` at ``(r, 0, 0)``."""
    rule = rule or delta_rule()
    res = extend(Z2, CylindricalPoint(r, 0.0, 0.0), rule, tol=tol)
    return float(_log_cosh(r) - res.cylindrical.r)


def _log_cosh(r):
    r = abs(r)
    return r + math.log1p(math.exp(-2 * r)) - math.log(2)


def delta_curve(r_grid, rule: QuadratureRule | None = None, tol: float = 1e-13):
    """List of ``(r, delta(r))``; checks positivity and the decay trend."""
    rule = rule or delta_rule()
    out = []
    for r in r_grid:
        if r <= 0:
            raise DomainError("delta_curve needs positive radii")
        out.append((float(r), delta_value(r, rule, tol)))
    return out


def delta_curve_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["r", "delta"])
    for r, d in rows:
        wr.writerow([repr(r), repr(d)])
    return buf.getvalue()


def blaschke_family(t: float) -> RationalMap:
    """``f_t(z) = z (z - t) / (1 - t z)``."""
    return RationalMap([1, -t, 0], [0, -t, 1])


def kappa(t: float, rule: QuadratureRule | None = None, tol: float = DEFAULT_TOL) -> ExtensionResult:
    """``E f_t(0)`` for the Blaschke family; its cylindrical radius is ``kappa(t)``."""
    if not 0 < t < 1:
        raise DomainError("kappa needs 0 < t < 1")
    return extend(blaschke_family(t), ORIGIN, rule, tol=tol)


def _j_integrand(t, r, phi):
    z = r * np.exp(1j * phi)
    # 2 f / (1 + |f|^2) written with f = P / Q, smooth through the pole z = 1/t
    P = z * (z - t)
    Q = 1 - t * z
    return 2 * P * np.conj(Q) / (np.abs(P) ** 2 + np.abs(Q) ** 2) * 4 * r / (1 + r * r) ** 2


def lemma_a2_check(t: float, r: float, n: int = 256, rtol: float = 1e-15):
    """``(J_numeric, J_residue)`` for the circle integral ``J_t(r)``.

    ``J_numeric`` is the periodic trapezoid rule (doubled until it settles);
    ``J_residue`` is the closed form from the residue of ``F / G`` at the
    root ``x1 < r`` of ``G``.
    """
    if not 0 < t < 1 or r <= 0 or abs(r - 1) <= 1e-3:
        raise DomainError("need 0 < t < 1, r > 0 and |r - 1| > 1e-3")
    prev = None
    while True:
        phi = 2 * np.pi * np.arange(n) / n
        val = complex(np.mean(_j_integrand(t, r, phi)) * 2 * np.pi)
        if prev is not None and abs(val - prev) <= rtol * (1 + abs(val)) * 10:
            break
        if n > 1 << 22:
            raise ConvergenceError("contour quadrature did not settle", residual=abs(val - prev))
        prev, n = val, 2 * n
    J_num = val.real
    # G(z) = (1 - t z)(z - t r^2) + r^2 (z - t)(r^2 - t z)
    a2 = -t * (1 + r * r)
    a1 = 1 + t * t * r * r + r ** 4 + t * t * r * r
    a0 = -t * r * r - t * r ** 4
    roots = np.sort(np.roots([a2, a1, a0]).real)
    x1, x2 = roots
    if not (x1 < r < x2) or abs(x1) >= r:
        raise InternalConsistencyError(f"root ordering violated: x1={x1}, r={r}, x2={x2}")
    F = (x1 - t) * (x1 - t * r * r)
    J_res = 16 * r * np.pi / (1 + r * r) ** 2 * F / (a2 * (x1 - x2))
    return J_num, float(J_res)


def g_at_r(t: float, r: float) -> float:
    """``G(r) = r (1 - t r)^2 + r^3 (r - t)^2``."""
    return r * (1 - t * r) ** 2 + r ** 3 * (r - t) ** 2
