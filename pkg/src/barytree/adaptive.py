"""Adaptive cubature on the sphere for integrands with small localised features.

The sphere is covered by the six faces of a cube (gnomonic charts).  Each
panel carries a tensor Gauss-Legendre rule; a panel is split into four when
the rule on its children disagrees with the rule on the panel itself by more
than the panel's share of the tolerance.  The resulting node set is a plain
weighted rule for the round probability measure, usable wherever a
``QuadratureRule`` is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .sphere import normalize_spinors

PANEL_NODES = 8
MAX_LEVEL = 40


@lru_cache(maxsize=8)
def _gl01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1) / 2, w / 2


def _face_frame(face):
    """Permutation and sign placing gnomonic coordinates ``(a, b)`` on ``face``."""
    axis, sign = divmod(face, 2)
    sign = 1.0 if sign == 0 else -1.0
    others = [k for k in range(3) if k != axis]
    return axis, sign, others


def _panel_nodes(face, a0, a1, b0, b1, n):
    """Unnormalised vectors and probability weights for a batch of panels on one face.

    Returns ``u`` of shape (P, n*n, 3) and weights of shape (P, n*n).
    """
    t, w = _gl01(n)
    da = (a1 - a0)[:, None]
    db = (b1 - b0)[:, None]
    a = a0[:, None] + da * t[None, :]
    b = b0[:, None] + db * t[None, :]
    A = np.repeat(a, n, axis=1)
    B = np.tile(b, (1, n))
    W = np.outer(w, w).ravel()[None, :] * da * db
    jac = (1 + A ** 2 + B ** 2) ** -1.5
    axis, sign, (i, j) = _face_frame(face)
    u = np.empty(A.shape + (3,))
    u[..., axis] = sign
    u[..., i] = A
    u[..., j] = B
    return u, W * jac / (4 * np.pi)


def vectors_to_spinors(u):
    """Spinors of the directions ``u`` (not necessarily unit) without cancellation."""
    rho = np.linalg.norm(u, axis=-1)
    south = u[..., 2] <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(south, u[..., 0] + 1j * u[..., 1], rho + u[..., 2])
        q = np.where(south, rho - u[..., 2], u[..., 0] - 1j * u[..., 1])
    return normalize_spinors(p, q)


@dataclass(frozen=True, eq=False)
class AdaptiveRule:
    """Weighted nodes produced by ``adaptive_rule`` (round probability measure)."""

    vectors: np.ndarray = field(repr=False)   # unnormalised node directions
    weights: np.ndarray = field(repr=False)
    panels: int
    error_estimate: float
    order: int = 0
    grading: int = -1
    poles: str = "adaptive"

    @property
    def size(self):
        return self.weights.size

    @property
    def points(self):
        return self.vectors / np.linalg.norm(self.vectors, axis=-1, keepdims=True)

    @property
    def spinors(self):
        return vectors_to_spinors(self.vectors)

    def integrate(self, func):
        vals = np.asarray(func(self.points))
        return np.tensordot(self.weights, vals, axes=(0, 0))


def adaptive_rule(func, tol: float = 1e-10, n: int = PANEL_NODES, initial_split: int = 2,
                  max_panels: int = 40000, floor: float = 1e-15) -> AdaptiveRule:
    """Refine cube-sphere panels until ``func`` is integrated to about ``tol``.

    ``func(u)`` receives unnormalised node directions of shape (M, 3) and
    returns values of shape (M, k).  A panel of probability mass ``m`` is
    accepted when its children change the integral by at most
    ``max(tol * m, floor)`` in every component, so the accumulated error is
    of order ``tol``.  When ``max_panels`` is reached the remaining panels are
    accepted as they are and the returned ``error_estimate`` says so.
    """
    if n < 2 or initial_split < 1:
        raise ConfigError("adaptive rule needs n >= 2 and initial_split >= 1")
    edges = np.linspace(-1.0, 1.0, initial_split + 1)
    lo, hi = np.meshgrid(edges[:-1], edges[:-1], indexing="ij"), np.meshgrid(edges[1:], edges[1:], indexing="ij")
    a0, b0 = lo[0].ravel(), lo[1].ravel()
    a1, b1 = hi[0].ravel(), hi[1].ravel()

    def evaluate(face, a0, a1, b0, b1):
        u, w = _panel_nodes(face, a0, a1, b0, b1, n)
        vals = np.asarray(func(u.reshape(-1, 3)))
        vals = vals.reshape(u.shape[0], u.shape[1], -1)
        return u, w, np.einsum("pn,pnk->pk", w, vals)

    def split(a0, a1, b0, b1):
        am, bm = (a0 + a1) / 2, (b0 + b1) / 2
        ca0 = np.concatenate([a0, am, a0, am])
        ca1 = np.concatenate([am, a1, am, a1])
        cb0 = np.concatenate([b0, b0, bm, bm])
        cb1 = np.concatenate([bm, bm, b1, b1])
        return ca0, ca1, cb0, cb1

    out_u, out_w = [], []
    total_err = 0.0
    count = 0
    for face in range(6):
        pa0, pa1, pb0, pb1 = a0, a1, b0, b1
        _, _, parent = evaluate(face, pa0, pa1, pb0, pb1)
        level = 0
        while pa0.size:
            P = pa0.size
            ca0, ca1, cb0, cb1 = split(pa0, pa1, pb0, pb1)
            cu, cw, cint = evaluate(face, ca0, ca1, cb0, cb1)
            child_sum = cint.reshape(4, P, -1).sum(axis=0)
            err = np.abs(child_sum - parent).max(axis=1)
            mass = cw.reshape(4, P, -1).sum(axis=(0, 2))
            ok = err <= np.maximum(tol * mass, floor)
            level += 1
            count += 4 * P
            if level >= MAX_LEVEL or count >= max_panels:
                ok[:] = True
            total_err += float(err[ok].sum())
            keep = np.tile(ok, 4)
            out_u.append(cu[keep].reshape(-1, 3))
            out_w.append(cw[keep].ravel())
            ref = ~ok
            if not np.any(ref):
                break
            sel = np.tile(ref, 4)
            pa0, pa1, pb0, pb1 = ca0[sel], ca1[sel], cb0[sel], cb1[sel]
            parent = cint[sel]
    u = np.concatenate(out_u)
    w = np.concatenate(out_w)
    w = w / w.sum()
    return AdaptiveRule(u, w, count, total_err)
