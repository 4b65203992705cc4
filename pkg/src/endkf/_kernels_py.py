"""Pure-numpy reference implementation of the gain kernels.

Signatures mirror the compiled ``_kernels`` extension exactly; see
:mod:`endkf.kernels` for the selection logic.  Blocks are given as three
intp arrays ``kinds`` (0 Euclid, 1 sphere), ``starts`` and ``sizes``.
"""
from __future__ import annotations

import numpy as np

ZERO_TANGENT = 1e-12
ANTIPODAL_TOL = 1e-9
# below this angle sin(t)/t and (t cos t - sin t)/t^3 use their Taylor series
SERIES_ANGLE = 1e-4


def _sphere_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t2 = theta * theta
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    s1 = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    f3 = np.where(
        small,
        -1.0 / 3.0 + t2 / 30.0,
        (safe * np.cos(safe) - np.sin(safe)) / (safe * safe * safe),
    )
    return s1, f3


def log_map(base, target, kinds, starts, sizes):
    """Blockwise log map; returns ``(tangents, antipodal)``."""
    out = np.empty_like(base)
    antipodal = False
    for kind, a, n in zip(kinds, starts, sizes):
        s = slice(a, a + n)
        x1, x2 = base[:, s], target[:, s]
        if kind == 0:
            out[:, s] = x2 - x1
            continue
        c = np.einsum("ij,ij->i", x1, x2)[:, None]
        if np.any(c < -1.0 + ANTIPODAL_TOL):
            antipodal = True
        c = np.clip(c, -1.0, 1.0)
        d = x2 - x1 * c
        nrm = np.sqrt(np.einsum("ij,ij->i", d, d))[:, None]
        zero = nrm < 1e-15
        out[:, s] = np.where(zero, 0.0, np.arctan2(nrm, c) * d / np.where(zero, 1.0, nrm))
    return out, antipodal


def _forward(G, prior, innov, kinds, starts, sizes):
    U = innov @ G.T
    post = np.empty_like(prior)
    cache = {}
    for kind, a, n in zip(kinds, starts, sizes):
        s = slice(a, a + n)
        x = prior[:, s]
        u = U[:, s]
        if kind == 0:
            post[:, s] = x + u
            continue
        w = u - x * np.sum(x * u, axis=1, keepdims=True)
        theta = np.linalg.norm(w, axis=1, keepdims=True)
        s1, f3 = _sphere_coeffs(theta)
        y = np.cos(theta) * x + s1 * w
        y = np.where(theta < ZERO_TANGENT, x, y)
        post[:, s] = y / np.linalg.norm(y, axis=1, keepdims=True)
        cache[a] = (w, s1, f3)
    return post, cache


def apply_gain(G, prior, innov, kinds, starts, sizes):
    """Posterior members ``exp_{x_i}(P_{x_i}(G t_i))`` for every member i."""
    post, _ = _forward(G, prior, innov, kinds, starts, sizes)
    return post


def objective_grad(G, prior, innov, kinds, starts, sizes, weights, want_grad=True):
    """Weighted product variance of the gained ensemble and its gradient in ``G``.

    Returns ``(value, grad)``; ``grad`` is None when ``want_grad`` is false.
    """
    N = prior.shape[0]
    post, cache = _forward(G, prior, innov, kinds, starts, sizes)
    value = 0.0
    dU = np.zeros_like(prior) if want_grad else None
    for kind, a, n, wb in zip(kinds, starts, sizes, weights):
        s = slice(a, a + n)
        y = post[:, s]
        if kind == 0:
            A = y - y.mean(axis=0)
            value += wb * np.sum(A * A) / (N - 1)
            if want_grad:
                dU[:, s] = (2.0 * wb / (N - 1)) * A
            continue
        m = y.mean(axis=0)
        value += wb * (1.0 - m @ m)
        if not want_grad:
            continue
        c = np.broadcast_to((-2.0 * wb / N) * m, y.shape)
        x = prior[:, s]
        w, s1, f3 = cache[a]
        wc = np.sum(w * c, axis=1, keepdims=True)
        xc = np.sum(x * c, axis=1, keepdims=True)
        dw = s1 * c + (f3 * wc - s1 * xc) * w
        dU[:, s] = dw - x * np.sum(x * dw, axis=1, keepdims=True)
    grad = dU.T @ innov if want_grad else None
    return float(value), grad
