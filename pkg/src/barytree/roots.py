"""Aberth-Ehrlich simultaneous root finder with Newton-polygon starting points."""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError


def _newton_ratio(a, z):
    """p(z)/p'(z) for coefficients ``a`` (highest power first), overflow safe."""
    n = a.size - 1
    big = np.abs(z) > 1
    out = np.empty_like(z)
    zs = z[~big]
    if zs.size:
        p = np.full(zs.shape, a[0], dtype=complex)
        dp = np.zeros(zs.shape, dtype=complex)
        for c in a[1:]:
            dp = dp * zs + p
            p = p * zs + c
        out[~big] = p / dp
    zb = z[big]
    if zb.size:
        # p(z) = z^n R(1/z), R with reversed coefficients
        w = 1 / zb
        r = np.full(zb.shape, a[-1], dtype=complex)
        dr = np.zeros(zb.shape, dtype=complex)
        for c in a[-2::-1]:
            dr = dr * w + r
            r = r * w + c
        out[big] = zb * r / (n * r - w * dr)
    return out


def backward_error(a, z):
    """|p(z)| / sum |a_k| |z|^(n-k), evaluated in the chart where |z| <= 1."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    out = np.empty(z.shape)
    for i, zi in enumerate(z):
        if abs(zi) <= 1:
            coeffs, t = a, zi
        else:
            coeffs, t = a[::-1], 1 / zi
        p = 0j
        s = 0.0
        for c in coeffs:
            p = p * t + c
            s = s * abs(t) + abs(c)
        out[i] = abs(p) / s if s > 0 else 0.0
    return out


def _initial_guesses(a):
    """Points on circles read off the upper convex hull of (k, log|a_k|)."""
    n = a.size - 1
    mags = np.abs(a[::-1])  # index k = power of z
    with np.errstate(divide="ignore"):
        logs = np.log(mags)
    pts = [k for k in range(n + 1) if mags[k] > 0]
    hull = []
    for k in pts:
        while len(hull) >= 2:
            k1, k2 = hull[-2], hull[-1]
            if (logs[k2] - logs[k1]) * (k - k1) <= (logs[k] - logs[k1]) * (k2 - k1):
                hull.pop()
            else:
                break
        hull.append(k)
    guesses = []
    offset = 0.4
    for k1, k2 in zip(hull[:-1], hull[1:]):
        m = k2 - k1
        radius = np.exp((logs[k1] - logs[k2]) / m)
        ang = 2 * np.pi * np.arange(m) / m + offset + 2 * np.pi * k1 / n
        guesses.append(radius * np.exp(1j * ang))
    return np.concatenate(guesses)


def aberth(coeffs, tol: float = 1e-15, max_iter: int = 800, accept: float = 1e-9):
    """All roots of a polynomial given by coefficients, highest power first.

    Raises ``ConvergenceError`` (with per-root backward errors as ``residual``)
    when the iteration stalls with a backward error above ``accept``.
    """
    a = np.asarray(coeffs, dtype=complex)
    nz = np.flatnonzero(a)
    if nz.size == 0:
        raise ValueError("zero polynomial has no isolated roots")
    a = a[nz[0]:]
    n = a.size - 1
    if n == 0:
        return np.zeros(0, dtype=complex)
    if n == 1:
        return np.array([-a[1] / a[0]])
    z = _initial_guesses(a)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ratio = _newton_ratio(a, z[idx])
        diff = z[idx, None] - z[None, :]
        diff[np.arange(idx.size), idx] = np.inf
        s = np.sum(1 / diff, axis=1)
        corr = ratio / (1 - ratio * s)
        bad = ~np.isfinite(corr)
        corr[bad] = ratio[bad]
        z[idx] -= corr
        done = np.abs(corr) <= tol * np.maximum(np.abs(z[idx]), 1e-300)
        active[idx[done]] = False
    for _ in range(2):
        step = _newton_ratio(a, z)
        ok = np.isfinite(step) & (np.abs(step) < 1e-6 * np.maximum(np.abs(z), 1e-300))
        z[ok] -= step[ok]
    err = backward_error(a, z)
    if np.any(err > accept) or not np.all(np.isfinite(z)):
        raise ConvergenceError(f"Aberth iteration did not converge (max backward error {err.max():.3g})",
                               residual=err)
    return z
