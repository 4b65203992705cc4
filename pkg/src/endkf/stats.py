"""Sampling, generalized variances and quaternion algebra.

Quaternions are scalar-first Hamilton quaternions ``(w, x, y, z)`` stored
as float arrays with the components on the last axis.
"""
from __future__ import annotations

import math

import numpy as np

from .manifold import EUCLID, Layout, ManifoldError, normalize

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

def _wood_cosines(kappa: float, dim: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` cosines ``t = x.mu`` of an FML variate on S^{dim-1}.

    Wood's beta-envelope rejection scheme, rearranged so that ``1 - t`` is
    computed without cancellation (concentrations up to ~1e12 are common in
    the process model).  Returns ``(t, 1 - t)``.
    """
    m = dim - 1
    b = m / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m * m))
    one_m_x0 = 2.0 * b / (1.0 + b)
    x0 = 1.0 - one_m_x0
    log_one_m_x0sq = math.log(4.0 * b) - 2.0 * math.log1p(b)

    t = np.empty(n)
    one_m_t = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        # oversample so that one batch almost always suffices
        batch = need + need // 4 + 8
        z = rng.beta(m / 2.0, m / 2.0, size=batch)
        u = rng.uniform(size=batch)
        denom = 1.0 - (1.0 - b) * z
        omt = 2.0 * b * z / denom
        one_m_x0t = one_m_x0 + x0 * omt
        accept = kappa * (one_m_x0 - omt) + m * (np.log(one_m_x0t) - log_one_m_x0sq) >= np.log(u)
        got = omt[accept][:need]
        k = got.shape[0]
        t[filled:filled + k] = 1.0 - got
        one_m_t[filled:filled + k] = got
        filled += k
    return t, one_m_t


def fml_sample(mu, kappa: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Sample the Fisher-von Mises-Langevin distribution, density ∝ exp(kappa x.mu).

    ``mu`` is either one mean direction ``(d,)`` (then ``size`` draws are
    returned, or a single point when ``size`` is None) or a stack of mean
    directions ``(n, d)`` giving one draw per row.  ``kappa = inf`` is the
    degenerate limit and returns the mean directions without consuming the
    random stream.
    """
    if not kappa > 0:
        raise ValueError(f"FML concentration must be positive, got {kappa}")
    mu = normalize(np.asarray(mu, dtype=float))
    single = mu.ndim == 1
    if single:
        mus = np.broadcast_to(mu, (1 if size is None else size, mu.shape[0]))
    else:
        if size is not None and size != mu.shape[0]:
            raise ValueError("size must match the number of mean directions")
        mus = mu
    n, d = mus.shape
    if math.isinf(kappa):
        out = np.array(mus)
        return out[0] if single and size is None else out

    t, one_m_t = _wood_cosines(float(kappa), d, n, rng)
    # uniform direction orthogonal to mu
    g = rng.standard_normal((n, d))
    g -= mus * np.einsum("ij,ij->i", g, mus)[:, None]
    g = normalize(g)
    s = np.sqrt(one_m_t * (1.0 + t))
    out = normalize(t[:, None] * mus + s[:, None] * g)
    return out[0] if single and size is None else out


def fml_mean_resultant(kappa: float, dim: int) -> float:
    """E[x.mu] for FML on S^{dim-1}: I_{d/2}(kappa) / I_{d/2-1}(kappa)."""
    from scipy.special import ive

    return float(ive(dim / 2.0, kappa) / ive(dim / 2.0 - 1.0, kappa))


def gaussian_sample(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``L`` the Cholesky factor of ``cov``.

    ``mean`` may be a stack ``(n, d)``, one draw per row.  A covariance whose
    entries are all below 1e-300 in magnitude is treated as exactly zero and
    returns the mean without touching the stream.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = mean.shape[-1]
    if cov.shape != (d, d):
        raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
    shape = mean.shape if size is None else (size, d)
    if np.all(np.abs(cov) < 1e-300):
        return np.array(np.broadcast_to(mean, shape))
    if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
        raise ValueError("covariance is not symmetric")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    z = rng.standard_normal(shape)
    return mean + z @ L.T


# ---------------------------------------------------------------------------
# Generalized variances
# ---------------------------------------------------------------------------

def euclid_variance(ensemble) -> float:
    """Trace of the sample covariance of an ``(N, n)`` ensemble."""
    E = np.asarray(ensemble, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    N = E.shape[0]
    if N < 2:
        raise ValueError("euclid_variance needs at least two members")
    A = (E - E.mean(axis=0)) / math.sqrt(N - 1)
    return float(np.sum(A * A))


def sphere_variance(ensemble) -> float:
    """One minus the squared norm of the mean of unit vectors; lies in [0, 1]."""
    E = np.asarray(ensemble, dtype=float)
    if E.shape[0] == 0:
        raise ValueError("sphere_variance of an empty ensemble")
    m = E.mean(axis=0)
    return float(min(1.0, max(0.0, 1.0 - m @ m)))


def product_variance(layout: Layout, ensemble, weights=None) -> float:
    """Sum of block variances; ``weights`` optionally scales each block."""
    E = np.asarray(ensemble, dtype=float)
    if E.ndim != 2 or E.shape[1] != layout.dim:
        raise ManifoldError(f"ensemble shape {E.shape} does not match layout dimension {layout.dim}")
    w = np.ones(len(layout)) if weights is None else np.asarray(weights, dtype=float)
    total = 0.0
    for wb, blk in zip(w, layout):
        part = E[:, blk.slice]
        total += wb * (euclid_variance(part) if blk.kind == EUCLID else sphere_variance(part))
    return total


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_mul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)
    return normalize(out)


def quat_inv(a) -> np.ndarray:
    a = normalize(a)
    return a * np.array([1.0, -1.0, -1.0, -1.0])


def quat_pow(a, t: float) -> np.ndarray:
    """``exp(t log a)``: scale the rotation half-angle of ``a`` by ``t``."""
    a = normalize(a)
    if t == 1:
        return a
    vec = a[..., 1:]
    s = np.sqrt(np.einsum("...i,...i->...", vec, vec))[..., None]
    half = np.arctan2(s, a[..., :1])
    axis = np.where(s > 0, vec / np.where(s > 0, s, 1.0), 0.0)
    out = np.concatenate([np.cos(t * half), np.sin(t * half) * axis], axis=-1)
    return normalize(out)


def canonicalize_sign(q, reference) -> np.ndarray:
    """Return ``q`` or ``-q``, whichever lies in the hemisphere of ``reference``."""
    q, reference = np.asarray(q, dtype=float), np.asarray(reference, dtype=float)
    sign = np.where(np.sum(q * reference, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return q * sign


def continuous_signs(qs) -> np.ndarray:
    """Flip quaternions of a sequence so consecutive ones have q_k.q_{k+1} >= 0."""
    qs = np.array(qs, dtype=float)
    for k in range(1, len(qs)):
        if qs[k] @ qs[k - 1] < 0:
            qs[k] = -qs[k]
    return qs


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    """Rotation matrix to versor by the largest-diagonal branch; returns w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize(np.array(q))
    return -q if q[0] < 0 else q


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = normalize(axis)
    return np.concatenate([[math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis])
