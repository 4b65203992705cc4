"""Constant-velocity constant-angular-velocity pose model and its generators.

States use the canonical embeddings of :mod:`endkf.manifold`: 14 columns
``[v, p, wd, w]`` or 21 columns with ``[b, beta]`` appended.  Every function
accepts one state ``(d,)`` or an ensemble ``(N, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .manifold import POSE, POSE_BIAS, ManifoldError, layout_for, normalize
from .stats import (
    IDENTITY_QUAT,
    axis_angle_quat,
    canonicalize_sign,
    fml_sample,
    gaussian_sample,
    quat_inv,
    quat_mul,
    quat_pow,
)

V, P, WD, W = POSE["v"].slice, POSE["p"].slice, POSE["wd"].slice, POSE["w"].slice
B, BETA = POSE_BIAS["b"].slice, POSE_BIAS["beta"].slice

TWIN_VELOCITY = np.array([0.1, 0.1, 0.1])
TWIN_ANGULAR_VELOCITY = np.array([math.sqrt(47 / 50), math.sqrt(1 / 50), math.sqrt(1 / 50), math.sqrt(1 / 50)])


def _cov(c, dim: int = 3) -> np.ndarray:
    """Scalar, diagonal or full covariance spec to a ``(dim, dim)`` matrix."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 0:
        return float(c) * np.eye(dim)
    if c.shape == (dim,):
        return np.diag(c)
    if c.shape == (dim, dim):
        return c
    raise ValueError(f"cannot interpret covariance of shape {c.shape}")


def _check_cov(c: np.ndarray, name: str) -> None:
    if not np.allclose(c, c.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(c).min() < -1e-15:
        raise ValueError(f"{name} must be positive semidefinite")


def _check_conc(k: float, name: str) -> None:
    if not k > 0:
        raise ValueError(f"{name} must be a positive concentration (inf for no noise), got {k}")


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise: position covariance ``R`` (cm^2) and attitude concentration ``rho``.

    ``R = 0`` together with ``rho = inf`` is the noiseless limit.
    """

    R: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    rho: float = 1e2

    def __post_init__(self):
        object.__setattr__(self, "R", _cov(self.R))
        _check_cov(self.R, "R")
        _check_conc(self.rho, "rho")
        chol = None if _is_zero(self.R) else np.linalg.cholesky(self.R)
        object.__setattr__(self, "R_chol", chol)


@dataclass(frozen=True)
class ProcessNoise:
    """Process noise of the pose model; ``None`` bias terms disable the bias blocks."""

    Qv: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(3))
    Qp: np.ndarray = field(default_factory=lambda: 1e-8 * np.eye(3))
    Qoppa_wd: float = 1e4
    Qoppa_w: float = 1e6
    Qb: np.ndarray | None = None
    Qoppa_beta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "Qv", _cov(self.Qv))
        object.__setattr__(self, "Qp", _cov(self.Qp))
        _check_cov(self.Qv, "Qv")
        _check_cov(self.Qp, "Qp")
        _check_conc(self.Qoppa_wd, "Qoppa_wd")
        _check_conc(self.Qoppa_w, "Qoppa_w")
        if self.Qb is not None:
            object.__setattr__(self, "Qb", _cov(self.Qb))
            _check_cov(self.Qb, "Qb")
        if self.Qoppa_beta is not None:
            _check_conc(self.Qoppa_beta, "Qoppa_beta")

    @classmethod
    def zero(cls, bias: bool = False) -> "ProcessNoise":
        z = np.zeros((3, 3))
        return cls(z, z, math.inf, math.inf, z if bias else None, math.inf if bias else None)


@dataclass(frozen=True)
class Measurement:
    frame: int
    y_p: np.ndarray
    y_q: np.ndarray

    def __post_init__(self):
        y_p = np.asarray(self.y_p, dtype=float)
        y_q = np.asarray(self.y_q, dtype=float)
        if y_p.shape != (3,) or y_q.shape != (4,):
            raise ValueError("measurement needs a 3-vector position and a 4-vector versor")
        if not (np.all(np.isfinite(y_p)) and np.all(np.isfinite(y_q))):
            raise ValueError("measurement contains non-finite values")
        object.__setattr__(self, "y_p", y_p)
        object.__setattr__(self, "y_q", normalize(y_q))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.y_p, self.y_q])


@dataclass(frozen=True)
class TruthTrajectory:
    states: np.ndarray  # (T, 14)

    @property
    def frames(self) -> int:
        return self.states.shape[0]

    @property
    def v(self):
        return self.states[:, V]

    @property
    def p(self):
        return self.states[:, P]

    @property
    def wd(self):
        return self.states[:, WD]

    @property
    def w(self):
        return self.states[:, W]


def _is_zero(c) -> bool:
    return c is None or bool(np.all(np.abs(c) < 1e-300))


def cvcr_propagate(x, noise: ProcessNoise, rng: np.random.Generator | None = None, dt: float = 1.0) -> np.ndarray:
    """Advance states one step of ``dt`` frames through the stochastic model.

    Zero covariances and infinite concentrations skip sampling entirely, so
    ``rng`` may be None for a noiseless model.
    """
    x = np.asarray(x, dtype=float)
    layout = layout_for(x.shape[-1])
    out = np.empty_like(x)
    mean_p = x[..., P] + dt * x[..., V]
    mean_w = quat_mul(quat_pow(x[..., WD], dt), x[..., W])
    out[..., V] = _gauss(x[..., V], dt * noise.Qv, rng)
    out[..., P] = _gauss(mean_p, dt * noise.Qp, rng)
    out[..., WD] = _fml(x[..., WD], noise.Qoppa_wd / dt, rng)
    out[..., W] = _fml(canonicalize_sign(mean_w, x[..., W]), noise.Qoppa_w / dt, rng)
    if layout is POSE_BIAS:
        if noise.Qb is None or noise.Qoppa_beta is None:
            raise ValueError("bias-augmented state needs Qb and Qoppa_beta")
        out[..., B] = _gauss(x[..., B], dt * noise.Qb, rng)
        out[..., BETA] = _fml(x[..., BETA], noise.Qoppa_beta / dt, rng)
    return out


def _gauss(mean, cov, rng):
    if _is_zero(cov):
        return np.array(mean)
    return gaussian_sample(mean, cov, rng)


def _fml(mu, kappa, rng):
    if math.isinf(kappa):
        return normalize(mu)
    return fml_sample(mu, kappa, rng)


def h_pos_att(x) -> np.ndarray:
    """Observed ``[p, w]`` (7 columns) of pose states without bias."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != POSE.dim:
        raise ManifoldError(f"h_pos_att expects {POSE.dim}-dimensional states, got {x.shape[-1]}")
    return np.concatenate([x[..., P], x[..., W]], axis=-1)


def h_pos_att_bias(x) -> np.ndarray:
    """Observed ``[p + b, beta * w]`` of bias-augmented states.

    The attitude product is sign-canonicalized against ``w``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != POSE_BIAS.dim:
        raise ManifoldError(f"h_pos_att_bias expects {POSE_BIAS.dim}-dimensional states, got {x.shape[-1]}")
    att = canonicalize_sign(quat_mul(x[..., BETA], x[..., W]), x[..., W])
    return np.concatenate([x[..., P] + x[..., B], att], axis=-1)


def measurement_operator(dim: int):
    return h_pos_att if dim == POSE.dim else h_pos_att_bias


def synth_truth(
    frames: int = 100,
    p0=(0.0, 0.0, 0.0),
    v=TWIN_VELOCITY,
    q0=IDENTITY_QUAT,
    qdot=TWIN_ANGULAR_VELOCITY,
) -> TruthTrajectory:
    """Noiseless constant-velocity constant-angular-velocity trajectory."""
    x = np.concatenate([v, p0, normalize(qdot), normalize(q0)]).astype(float)
    noise = ProcessNoise.zero()
    states = np.empty((frames, POSE.dim))
    for k in range(frames):
        states[k] = x
        x = cvcr_propagate(x, noise)
    return TruthTrajectory(states)


def _measure(p_true, q_true, spec: NoiseSpec, rng, frames) -> list[Measurement]:
    out = []
    prev = None
    for k in range(len(p_true)):
        y_p = _gauss(p_true[k], spec.R, rng)
        y_q = _fml(q_true[k], spec.rho, rng)
        if prev is not None:
            y_q = canonicalize_sign(y_q, prev)
        prev = y_q
        out.append(Measurement(int(frames[k]), y_p, y_q))
    return out


def synth_measurements(truth: TruthTrajectory, spec: NoiseSpec, rng) -> list[Measurement]:
    """``y_p ~ N(p, R)``, ``y_w ~ FML(w, rho)`` at every truth frame."""
    return _measure(truth.p, truth.w, spec, rng, np.arange(truth.frames))


def bias_injected_measurements(truth: TruthTrajectory, b_true, beta_true, spec: NoiseSpec, rng) -> list[Measurement]:
    """Measurements of a biased sensor: ``N(p + b, R)`` and ``FML(beta * w, rho)``."""
    b_true = np.asarray(b_true, dtype=float)
    q = canonicalize_sign(quat_mul(beta_true, truth.w), truth.w)
    return _measure(truth.p + b_true, q, spec, rng, np.arange(truth.frames))


def yaw_versor(degrees: float) -> np.ndarray:
    return axis_angle_quat([0.0, 0.0, 1.0], math.radians(degrees))


@dataclass(frozen=True)
class InitSpread:
    """Spread of the initial ensemble around the two-measurement mean state.

    ``None`` fields derive from the measurement noise: ``R`` for position,
    ``2R`` for velocity, ``rho`` for attitude and ``rho / 2`` for angular
    velocity.  The bias blocks default to ``R`` and ``1e4``.
    """

    p_cov: np.ndarray | None = None
    v_cov: np.ndarray | None = None
    w_conc: float | None = None
    wd_conc: float | None = None
    b_cov: np.ndarray | None = None
    beta_conc: float | None = 1e4

    def resolve(self, spec: NoiseSpec) -> dict:
        return {
            "p_cov": spec.R if self.p_cov is None else _cov(self.p_cov),
            "v_cov": 2.0 * spec.R if self.v_cov is None else _cov(self.v_cov),
            "w_conc": spec.rho if self.w_conc is None else float(self.w_conc),
            "wd_conc": spec.rho / 2.0 if self.wd_conc is None else float(self.wd_conc),
            "b_cov": spec.R if self.b_cov is None else _cov(self.b_cov),
            "beta_conc": math.inf if self.beta_conc is None else float(self.beta_conc),
        }


def initial_mean(y0: Measurement, y1: Measurement, bias: bool = False) -> np.ndarray:
    """Crude state from two measurements: forward differences for the rates."""
    wd = quat_mul(y1.y_q, quat_inv(y0.y_q))
    wd = canonicalize_sign(wd, IDENTITY_QUAT)
    parts = [y1.y_p - y0.y_p, y0.y_p, wd, y0.y_q]
    if bias:
        parts += [np.zeros(3), IDENTITY_QUAT]
    return np.concatenate(parts)


def init_from_measurements(
    y0: Measurement,
    y1: Measurement,
    N: int,
    rng: np.random.Generator,
    spec: NoiseSpec,
    spread: InitSpread = InitSpread(),
    bias: bool = False,
) -> np.ndarray:
    """Initial ``(N, d)`` ensemble drawn around :func:`initial_mean`."""
    mean = initial_mean(y0, y1, bias)
    s = spread.resolve(spec)
    ens = np.empty((N, mean.shape[0]))
    ens[:, V] = _gauss(np.broadcast_to(mean[V], (N, 3)), s["v_cov"], rng)
    ens[:, P] = _gauss(np.broadcast_to(mean[P], (N, 3)), s["p_cov"], rng)
    ens[:, WD] = _fml(np.broadcast_to(mean[WD], (N, 4)), s["wd_conc"], rng)
    ens[:, W] = _fml(np.broadcast_to(mean[W], (N, 4)), s["w_conc"], rng)
    if bias:
        ens[:, B] = _gauss(np.zeros((N, 3)), s["b_cov"], rng)
        ens[:, BETA] = _fml(np.broadcast_to(IDENTITY_QUAT, (N, 4)), s["beta_conc"], rng)
    return ens
