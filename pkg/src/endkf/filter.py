"""Ensemble directional Kalman filter analysis and the bootstrap particle filter.

The analysis chooses the gain ``K`` by minimizing, with Adam, the expected
product variance of the gained ensemble over realizations of the perturbed
observations, starting from the ordinary ensemble Kalman gain.  The
posterior is the gained ensemble for one further independent realization.

Notes on the optimizer: the update divides by ``sqrt(V + eps)`` and has no
bias-correction terms, and the very first step uses ``M_0 = 0``, so it leaves
the gain unchanged.  ``steps`` therefore counts that no-op as well; 25 steps
mean 24 effective updates.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .manifold import OBS, SPHERE, Layout, layout_for, normalize
from .models import Measurement, NoiseSpec, ProcessNoise, cvcr_propagate, measurement_operator
from .stats import canonicalize_sign, fml_sample

REGULARIZATION = 1e-10


class SingularInnovationWarning(RuntimeWarning):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class DegenerateWeightsWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Perturbed observations and the linear estimator family
# ---------------------------------------------------------------------------

def perturbed_observations(y: Measurement, spec: NoiseSpec, N: int, rng: np.random.Generator) -> np.ndarray:
    """``(N, 7)`` perturbed copies ``[y_p - eta_i, FML(y_w, rho)]`` of a measurement."""
    if N < 2:
        raise ValueError("need at least two perturbed observations")
    obs = np.empty((N, OBS.dim))
    if spec.R_chol is None:
        obs[:, :3] = y.y_p
    else:
        obs[:, :3] = y.y_p - rng.standard_normal((N, 3)) @ spec.R_chol.T
    if math.isinf(spec.rho):
        obs[:, 3:] = y.y_q
    else:
        obs[:, 3:] = canonicalize_sign(fml_sample(y.y_q, spec.rho, rng, size=N), y.y_q)
    return obs


def innovations(prior, obs, h: Callable) -> np.ndarray:
    """Log map at each predicted observation ``h(x_i)`` of the matching ``obs_i``."""
    return kernels.log_map(h(prior), obs, OBS)


def estimator_apply(G, prior, obs, h: Callable, layout: Layout | None = None) -> np.ndarray:
    """Gained ensemble ``exp_{x_i}(P_{x_i}[G log_{h(x_i)}(obs_i)])``."""
    prior = np.asarray(prior, dtype=float)
    layout = layout or layout_for(prior.shape[1])
    G = np.asarray(G, dtype=float)
    if G.shape != (layout.dim, OBS.dim):
        raise ValueError(f"gain shape {G.shape} does not match ({layout.dim}, {OBS.dim})")
    if len(obs) != len(prior):
        raise ValueError("observation count differs from ensemble size")
    return kernels.apply_gain(G, prior, innovations(prior, obs, h), layout)


def naive_gain(prior, h: Callable, obs) -> np.ndarray:
    """Ensemble Kalman gain ``Cxh (Chh + Cyy)^-1`` on embedded coordinates.

    ``Cyy`` is the sample covariance of the perturbed observations.  The
    innovations fed to the gain are tangent vectors, so the observation-side
    anomalies of each sphere block are first projected onto the tangent plane
    at the normalized mean of ``h(prior)``.  Left in, the radial direction
    carries a variance of second order in the spread, and inverting it turns
    sampling noise in ``Cxh`` into large spurious gain entries.  The radial
    slot of the innovation covariance is filled with the unit normal so the
    solve stays well posed; ``Cxh`` is zero there, so that column of the gain
    is zero.

    A singular innovation covariance is regularized by ``1e-10 I`` with a
    :class:`SingularInnovationWarning`.
    """
    prior = np.asarray(prior, dtype=float)
    obs = np.asarray(obs, dtype=float)
    N = prior.shape[0]
    if N < 2:
        raise ValueError("naive_gain needs at least two members")
    hx = h(prior)
    A = prior - prior.mean(axis=0)
    Ah = hx - hx.mean(axis=0)
    Ay = obs - obs.mean(axis=0)
    fill = np.zeros((OBS.dim, OBS.dim))
    for blk in OBS:
        if blk.kind != SPHERE:
            continue
        s = blk.slice
        n = normalize(hx[:, s].mean(axis=0))
        Ah[:, s] -= np.outer(Ah[:, s] @ n, n)
        Ay[:, s] -= np.outer(Ay[:, s] @ n, n)
        fill[s, s] = np.outer(n, n)
    Cxh = A.T @ Ah / (N - 1)
    S = (Ah.T @ Ah + Ay.T @ Ay) / (N - 1) + fill
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        warnings.warn("singular innovation covariance; adding 1e-10 I", SingularInnovationWarning, stacklevel=2)
        S = S + REGULARIZATION * np.eye(S.shape[0])
    return np.linalg.solve(S, Cxh.T).T


# ---------------------------------------------------------------------------
# Stochastic variance objective
# ---------------------------------------------------------------------------

def variance_objective(G, prior, innov, layout: Layout, weights=None) -> float:
    """Product variance of the gained ensemble for fixed innovations."""
    value, _ = kernels.objective_grad(G, prior, innov, layout, weights, want_grad=False)
    return value


def variance_gradient(G, prior, innov, layout: Layout, weights=None) -> np.ndarray:
    _, grad = kernels.objective_grad(G, prior, innov, layout, weights)
    return grad


def _draw_innovations(prior, y, spec, h, rng):
    obs = perturbed_observations(y, spec, len(prior), rng)
    return innovations(prior, obs, h)


def gain_objective(G, prior, y: Measurement, spec: NoiseSpec, h, rng, weights=None) -> float:
    """One stochastic sample of the objective: a fresh noise draw, then the variance."""
    prior = np.asarray(prior, dtype=float)
    innov = _draw_innovations(prior, y, spec, h, rng)
    return variance_objective(G, prior, innov, layout_for(prior.shape[1]), weights)


def gain_objective_grad(G, prior, y: Measurement, spec: NoiseSpec, h, rng, weights=None) -> np.ndarray:
    """Gradient in ``G`` of the objective sample drawn from the same stream state."""
    prior = np.asarray(prior, dtype=float)
    innov = _draw_innovations(prior, y, spec, h, rng)
    return variance_gradient(G, prior, innov, layout_for(prior.shape[1]), weights)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    M: np.ndarray
    V: np.ndarray
    alpha: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


def adam_optimize(
    G0,
    steps: int,
    alpha: float,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    callback: Callable[[AdamState, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Run ``steps`` Adam iterations; ``grad_fn(G)`` returns a fresh stochastic gradient.

    Step 1 initializes ``M = 0`` and ``V = D^2`` and returns ``G0`` unchanged.
    """
    if steps < 1:
        raise ValueError("adam_optimize needs at least one step")
    G = np.array(G0, dtype=float)

    def _grad(G):
        D = np.asarray(grad_fn(G), dtype=float)
        if not np.all(np.isfinite(D)):
            raise NonFiniteGradientError(f"non-finite gradient at Adam step {state.step}")
        return D

    state = AdamState(step=1, M=np.zeros_like(G), V=np.zeros_like(G), alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)
    D = _grad(G)
    state.V = D * D
    G = G - alpha * state.M / np.sqrt(state.V + eps)
    if callback:
        callback(state, G)
    for i in range(1, steps):
        state.step = i + 1
        D = _grad(G)
        state.M = beta1 * state.M + (1.0 - beta1) * D
        state.V = beta2 * state.V + (1.0 - beta2) * D * D
        G = G - alpha * state.M / np.sqrt(state.V + eps)
        if callback:
            callback(state, G)
    return G


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainConfig:
    """Gain optimization settings; ``steps = 0`` is the plain perturbed-observations EnKF."""

    steps: int = 25
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weights: tuple[float, ...] | None = None


def endkf_analysis(
    prior,
    y: Measurement,
    spec: NoiseSpec,
    rng: np.random.Generator,
    config: GainConfig = GainConfig(),
    h: Callable | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Assimilate one measurement; returns ``(posterior, K)``."""
    prior = np.asarray(prior, dtype=float)
    N, d = prior.shape
    if N < 2:
        raise ValueError("endkf_analysis needs at least two members")
    layout = layout_for(d)
    h = h or measurement_operator(d)
    weights = None if config.weights is None else np.asarray(config.weights, dtype=float)

    hx = h(prior)
    ref = hx[:, 3:].mean(axis=0)
    y = Measurement(y.frame, y.y_p, canonicalize_sign(y.y_q, ref))

    obs0 = perturbed_observations(y, spec, N, rng)
    K = naive_gain(prior, h, obs0)
    innov0 = innovations(prior, obs0, h)
    if config.steps == 0:
        return kernels.apply_gain(K, prior, innov0, layout), K

    first = [innov0]

    def grad_fn(G):
        innov = first.pop() if first else _draw_innovations(prior, y, spec, h, rng)
        return variance_gradient(G, prior, innov, layout, weights)

    K = adam_optimize(K, config.steps, config.alpha, grad_fn, config.beta1, config.beta2, config.eps)
    innov_star = _draw_innovations(prior, y, spec, h, rng)
    return kernels.apply_gain(K, prior, innov_star, layout), K


# ---------------------------------------------------------------------------
# Bootstrap particle filter
# ---------------------------------------------------------------------------

def _gauss_loglik(y_p, particles_p, R):
    r = particles_p - y_p
    if np.all(np.abs(R) < 1e-300):
        return np.where(np.all(r == 0.0, axis=1), 0.0, -np.inf)
    L = np.linalg.cholesky(R)
    z = np.linalg.solve(L, r.T)
    return -0.5 * np.sum(z * z, axis=0)


def _fml_loglik(y_q, particles_q, rho):
    dots = particles_q @ y_q
    if math.isinf(rho):
        return np.where(dots >= 1.0 - 1e-15, 0.0, -np.inf)
    return rho * (dots - 1.0)


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    N = len(weights)
    positions = (rng.uniform() + np.arange(N)) / N
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def bpf_step(
    particles,
    weights,
    y: Measurement,
    spec: NoiseSpec,
    noise: ProcessNoise,
    rng: np.random.Generator,
    h: Callable | None = None,
    resample_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate, reweight by the measurement likelihood, resample when ESS < N/2."""
    particles = cvcr_propagate(particles, noise, rng)
    N, d = particles.shape
    h = h or measurement_operator(d)
    hx = h(particles)
    logw = np.log(np.asarray(weights, dtype=float))
    logw = logw + _gauss_loglik(y.y_p, hx[:, :3], spec.R) + _fml_loglik(y.y_q, hx[:, 3:], spec.rho)
    top = logw.max()
    if not np.isfinite(top):
        warnings.warn("all particle weights vanished; resetting to uniform", DegenerateWeightsWarning, stacklevel=2)
        w = np.full(N, 1.0 / N)
    else:
        w = np.exp(logw - top)
        w /= w.sum()
    ess = 1.0 / np.sum(w * w)
    if ess < resample_threshold * N:
        idx = systematic_resample(w, rng)
        particles = particles[idx]
        w = np.full(N, 1.0 / N)
    return particles, w
