"""Twin experiments: Monte Carlo sweeps, metrics and consistency diagnostics.

Every run stores, per frame, the member average of each state coordinate and
the per-coordinate ensemble standard deviation.  The cosine metric averages
member dot products with the true versor, which equals the dot product of
the truth with the member average, so those two arrays are all the metrics
and traces need.

Random streams: run ``m`` draws its measurements from ``[seed, m, 0]`` and
each filter from ``[seed, m, 1 + variant index, N]``, so variants see the
same measurements and nothing depends on the order in which runs execute.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .filter import GainConfig, bpf_step, endkf_analysis
from .manifold import EUCLID, POSE, POSE_BIAS, Layout, layout_for, normalize
from .models import (
    TWIN_ANGULAR_VELOCITY,
    TWIN_VELOCITY,
    InitSpread,
    Measurement,
    NoiseSpec,
    ProcessNoise,
    TruthTrajectory,
    bias_injected_measurements,
    cvcr_propagate,
    init_from_measurements,
    synth_measurements,
    synth_truth,
    yaw_versor,
)
from .stats import IDENTITY_QUAT, canonicalize_sign, quat_inv, quat_mul

log = logging.getLogger(__name__)

ENDKF, NOADAM, BPF, MEASUREMENT = "endkf", "endkf-noadam", "bpf", "measurement"
VARIANTS = (ENDKF, NOADAM, BPF, MEASUREMENT)
FILTERS = (ENDKF, NOADAM, BPF)
METRICS = ("rmse_v", "rmse_p", "cos_wd", "cos_w")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a twin experiment needs; mirrored by the flat config files."""

    frames: int = 100
    runs: int = 100
    ensemble_sizes: tuple[int, ...] = (10, 20, 30, 40, 50)
    variants: tuple[str, ...] = VARIANTS
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    process: ProcessNoise = field(default_factory=ProcessNoise)
    spread: InitSpread = field(default_factory=InitSpread)
    adam_steps: int = 25
    adam_alpha: float = 0.1
    weights: tuple[float, ...] | None = None
    bias: bool = False
    b_true: tuple[float, float, float] = (0.0, 0.0, 0.0)
    beta_yaw_deg: float = 0.0
    p0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, ...] = tuple(TWIN_VELOCITY)
    q0: tuple[float, ...] = tuple(IDENTITY_QUAT)
    qdot: tuple[float, ...] = tuple(TWIN_ANGULAR_VELOCITY)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("frames must be at least 2")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if not self.ensemble_sizes or min(self.ensemble_sizes) < 2:
            raise ValueError("ensemble sizes must be at least 2")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown or not self.variants:
            raise ValueError(f"unknown variants {sorted(unknown)}; choose from {VARIANTS}")
        if self.adam_steps < 0 or not self.adam_alpha > 0:
            raise ValueError("adam_steps must be >= 0 and adam_alpha > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.weights is not None and len(self.weights) != len(self.layout):
            raise ValueError(f"weights need {len(self.layout)} entries")
        if self.bias and (self.process.Qb is None or self.process.Qoppa_beta is None):
            raise ValueError("the bias model needs process noise Qb and Qoppa_beta")

    @property
    def layout(self) -> Layout:
        return POSE_BIAS if self.bias else POSE

    def gain(self, variant: str) -> GainConfig:
        steps = 0 if variant == NOADAM else self.adam_steps
        return GainConfig(steps=steps, alpha=self.adam_alpha, weights=self.weights)

    def truth(self) -> TruthTrajectory:
        return synth_truth(self.frames, self.p0, np.array(self.velocity), np.array(self.q0), np.array(self.qdot))

    def beta_true(self) -> np.ndarray:
        return yaw_versor(self.beta_yaw_deg)


@dataclass
class RunOutput:
    """Per-frame member averages and ensemble standard deviations of one run."""

    variant: str
    N: int
    run: int
    mean: np.ndarray | None
    std: np.ndarray | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_aligned(est, truth):
    est, truth = np.asarray(est, dtype=float), np.asarray(truth, dtype=float)
    if est.shape[-2:] != truth.shape[-2:]:
        raise ValueError(f"estimate shape {est.shape} does not align with truth {truth.shape}")
    return est, truth


def rmse(estimates, truth) -> float:
    """Root mean square over frames and coordinates, averaged over runs.

    ``estimates`` is ``(T, 3)`` or ``(M, T, 3)`` of ensemble means; ``truth`` is
    ``(T, 3)``.
    """
    est, truth = _check_aligned(estimates, truth)
    err = est - truth
    per_run = np.sqrt(np.mean(err * err, axis=(-2, -1)))
    return float(np.mean(per_run))


def cosine_metric(members, truth) -> float:
    """Member dot products with the true versor, averaged over members, frames and runs.

    ``members`` is ``(..., T, N, 4)`` member versors or ``(..., T, 4)`` member
    averages (the two give the same value).  Signs are used as given.
    """
    members = np.asarray(members, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if members.ndim >= 3 and members.shape[-3] == truth.shape[0] and members.shape[-2] != truth.shape[0]:
        members = members.mean(axis=-2)
    members, truth = _check_aligned(members, truth)
    return float(np.mean(np.einsum("...tj,tj->...t", members, truth)))


def run_metrics(mean: np.ndarray, truth: TruthTrajectory) -> dict[str, float]:
    """The four twin metrics of a single run from its per-frame member averages."""
    L = POSE
    return {
        "rmse_v": rmse(mean[:, L["v"].slice], truth.v),
        "rmse_p": rmse(mean[:, L["p"].slice], truth.p),
        "cos_wd": cosine_metric(mean[:, L["wd"].slice], truth.wd),
        "cos_w": cosine_metric(mean[:, L["w"].slice], truth.w),
    }


def improvement(metric: str, value: float, baseline: float) -> float:
    """Percent error reduction versus the baseline; on ``1 - cos`` for directional metrics."""
    if metric.startswith("cos"):
        value, baseline = 1.0 - value, 1.0 - baseline
    if baseline == 0.0:
        return 0.0 if value == 0.0 else -math.inf
    return 100.0 * (baseline - value) / baseline


# ---------------------------------------------------------------------------
# Baseline and filters
# ---------------------------------------------------------------------------

def measurement_only_baseline(measurements) -> np.ndarray:
    """``(T, 14)`` states read straight off the measurements.

    Rates are forward differences; the last frame holds the final difference.
    """
    ys = list(measurements)
    if len(ys) < 2:
        raise ValueError("the measurement baseline needs at least two measurements")
    P = np.array([y.y_p for y in ys])
    Q = np.array([y.y_q for y in ys])
    V = np.empty_like(P)
    V[:-1] = P[1:] - P[:-1]
    V[-1] = V[-2]
    WD = np.empty_like(Q)
    WD[:-1] = quat_mul(Q[1:], quat_inv(Q[:-1]))
    WD[-1] = WD[-2]
    WD = canonicalize_sign(WD, IDENTITY_QUAT)
    return np.concatenate([V, P, WD, Q], axis=1)


def _summarize(ens: np.ndarray, layout: Layout, weights=None):
    """Member average and standard deviation after aligning versor signs to the ensemble mean."""
    ens = np.array(ens)
    for blk in layout:
        if blk.kind != EUCLID:
            s = blk.slice
            ref = ens[:, s].mean(axis=0) if weights is None else weights @ ens[:, s]
            if np.linalg.norm(ref) > 0:
                ens[:, s] = canonicalize_sign(ens[:, s], ref)
    if weights is None:
        mean = ens.mean(axis=0)
        std = ens.std(axis=0, ddof=1)
    else:
        mean = weights @ ens
        var = weights @ (ens - mean) ** 2
        std = np.sqrt(var * len(weights) / max(len(weights) - 1, 1))
    return mean, std


def run_filter(measurements, N: int, cfg: ExperimentConfig, variant: str, rng: np.random.Generator):
    """Filter a measurement sequence; returns ``(mean, std)`` per frame.

    Frame 0 holds the initial ensemble; every later frame is a forecast
    followed by an analysis of that frame's measurement.
    """
    ys = list(measurements)
    layout = cfg.layout
    ens = init_from_measurements(ys[0], ys[1], N, rng, cfg.noise, cfg.spread, bias=cfg.bias)
    T = len(ys)
    means = np.empty((T, layout.dim))
    stds = np.empty((T, layout.dim))
    means[0], stds[0] = _summarize(ens, layout)
    if variant == BPF:
        w = np.full(N, 1.0 / N)
        for k in range(1, T):
            ens, w = bpf_step(ens, w, ys[k], cfg.noise, cfg.process, rng)
            means[k], stds[k] = _summarize(ens, layout, w)
        return means, stds
    gain = cfg.gain(variant)
    for k in range(1, T):
        ens = cvcr_propagate(ens, cfg.process, rng)
        ens, _ = endkf_analysis(ens, ys[k], cfg.noise, rng, gain)
        means[k], stds[k] = _summarize(ens, layout)
    return means, stds


def run_measurements(cfg: ExperimentConfig, truth: TruthTrajectory, run: int) -> list[Measurement]:
    rng = np.random.default_rng([cfg.seed, run, 0])
    if cfg.bias:
        return bias_injected_measurements(truth, cfg.b_true, cfg.beta_true(), cfg.noise, rng)
    return synth_measurements(truth, cfg.noise, rng)


def _one_run(args) -> list[RunOutput]:
    cfg, run = args
    truth = cfg.truth()
    ys = run_measurements(cfg, truth, run)
    out = []
    for N in cfg.ensemble_sizes:
        for vi, variant in enumerate(VARIANTS):
            if variant not in cfg.variants:
                continue
            if variant == MEASUREMENT:
                base = measurement_only_baseline(ys)
                out.append(RunOutput(variant, N, run, base, np.zeros_like(base)))
                continue
            rng = np.random.default_rng([cfg.seed, run, 1 + vi, N])
            try:
                mean, std = run_filter(ys, N, cfg, variant, rng)
                if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
                    raise FloatingPointError("non-finite ensemble statistics")
                out.append(RunOutput(variant, N, run, mean, std))
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                log.warning("run %d, %s, N=%d failed: %s", run, variant, N, exc)
                out.append(RunOutput(variant, N, run, None, None, f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    truth: TruthTrajectory
    runs: dict[tuple[str, int], list[RunOutput]]

    def outputs(self, variant: str, N: int) -> list[RunOutput]:
        return self.runs[(variant, N)]

    def failures(self) -> list[RunOutput]:
        return [r for rs in self.runs.values() for r in rs if not r.ok]


def run_twin_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every variant and ensemble size over ``cfg.runs`` Monte Carlo runs."""
    jobs = [(cfg, m) for m in range(cfg.runs)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_one_run, jobs))
    else:
        chunks = [_one_run(j) for j in jobs]
    runs: dict[tuple[str, int], list[RunOutput]] = {}
    for chunk in chunks:
        for r in chunk:
            runs.setdefault((r.variant, r.N), []).append(r)
    for rs in runs.values():
        rs.sort(key=lambda r: r.run)
    return ExperimentResult(cfg, cfg.truth(), runs)


# ---------------------------------------------------------------------------
# Tables, traces and calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    variant: str
    ensemble_size: int
    metric: str
    value: float
    stderr: float
    improvement: float
    runs: int


def _metric_samples(outputs: list[RunOutput], truth: TruthTrajectory) -> dict[str, np.ndarray]:
    per = [run_metrics(r.mean, truth) for r in outputs if r.ok]
    return {m: np.array([p[m] for p in per]) for m in METRICS}


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if len(x) == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan
    return float(np.mean(x)), se


def results_table(result: ExperimentResult) -> list[ResultRow]:
    """Rows of (variant, N, metric, mean over runs, standard error, improvement %, runs)."""
    cfg, truth = result.config, result.truth
    rows = []
    for N in cfg.ensemble_sizes:
        baseline = None
        if MEASUREMENT in cfg.variants:
            samples = _metric_samples(result.outputs(MEASUREMENT, N), truth)
            baseline = {m: _mean_se(samples[m])[0] for m in METRICS}
        for variant in VARIANTS:
            if variant not in cfg.variants:
                continue
            samples = _metric_samples(result.outputs(variant, N), truth)
            for m in METRICS:
                value, se = _mean_se(samples[m])
                impr = improvement(m, value, baseline[m]) if baseline is not None else math.nan
                rows.append(ResultRow(variant, N, m, value, se, impr, len(samples[m])))
    return rows


def lookup(rows: list[ResultRow], variant: str, N: int, metric: str) -> ResultRow:
    for r in rows:
        if r.variant == variant and r.ensemble_size == N and r.metric == metric:
            return r
    raise KeyError((variant, N, metric))


def run_errors(outputs: list[RunOutput], truth_states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``(M, T, d)`` errors (member average minus truth) and ensemble stds."""
    ok = [r for r in outputs if r.ok]
    if not ok:
        raise ValueError("no successful runs")
    d = truth_states.shape[1]
    err = np.stack([r.mean[:, :d] - truth_states for r in ok])
    std = np.stack([r.std[:, :d] for r in ok])
    return err, std


@dataclass(frozen=True)
class Traces:
    """Per-frame, per-coordinate predicted and realized 3-sigma bands."""

    predicted: np.ndarray  # (T, d)
    actual: np.ndarray  # (T, d)
    per_run: np.ndarray  # (M, T, d)


def traces(errors: np.ndarray, stds: np.ndarray) -> Traces:
    """3 x RMS over runs of the ensemble std, and 3 x RMS over runs of the error."""
    errors, stds = np.asarray(errors, dtype=float), np.asarray(stds, dtype=float)
    return Traces(
        predicted=3.0 * np.sqrt(np.mean(stds ** 2, axis=0)),
        actual=3.0 * np.sqrt(np.mean(errors ** 2, axis=0)),
        per_run=errors,
    )


@dataclass(frozen=True)
class BlockCalibration:
    coverage: float
    mean_error: np.ndarray
    stderr: np.ndarray
    biased: np.ndarray


def consistency_report(errors, stds, layout: Layout = POSE) -> dict[str, BlockCalibration]:
    """Per block: share of errors inside the predicted 3-sigma band, and a bias flag.

    ``errors`` and ``stds`` are ``(M, T, d)``.  The bias check time-averages
    each run's error per coordinate and flags coordinates whose mean over runs
    lies beyond three standard errors of zero.
    """
    errors, stds = np.asarray(errors, dtype=float), np.asarray(stds, dtype=float)
    if errors.shape != stds.shape or errors.ndim != 3:
        raise ValueError("errors and stds must both be (runs, frames, coordinates)")
    report = {}
    for blk in layout:
        if blk.start + blk.size > errors.shape[2]:
            continue
        e, s = errors[..., blk.slice], stds[..., blk.slice]
        coverage = float(np.mean(np.abs(e) <= 3.0 * s))
        per_run = e.mean(axis=1)
        M = per_run.shape[0]
        mean = per_run.mean(axis=0)
        se = per_run.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.full_like(mean, np.inf)
        report[blk.name] = BlockCalibration(coverage, mean, se, np.abs(mean) > 3.0 * se)
    return report


# ---------------------------------------------------------------------------
# Bias experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasEstimate:
    """Final-frame posterior of the position bias, per run."""

    mean: np.ndarray  # (M, 3)
    std: np.ndarray  # (M, 3)
    b_true: np.ndarray

    def within(self, k: float = 3.0) -> np.ndarray:
        return np.all(np.abs(self.mean - self.b_true) <= k * self.std, axis=1)


def bias_experiment_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """The bias variant of ``cfg``: bias model on, EnDKF against the measurements only."""
    return replace(cfg, bias=True, variants=tuple(v for v in cfg.variants if v in (ENDKF, NOADAM, MEASUREMENT)))


def run_bias_experiment(cfg: ExperimentConfig) -> tuple[ExperimentResult, dict[int, BiasEstimate]]:
    if not cfg.bias:
        cfg = bias_experiment_config(cfg)
    result = run_twin_experiment(cfg)
    b = POSE_BIAS["b"].slice
    estimates = {}
    for N in cfg.ensemble_sizes:
        ok = [r for r in result.outputs(ENDKF, N) if r.ok] if ENDKF in cfg.variants else []
        if ok:
            estimates[N] = BiasEstimate(
                np.stack([r.mean[-1, b] for r in ok]),
                np.stack([r.std[-1, b] for r in ok]),
                np.asarray(cfg.b_true, dtype=float),
            )
    return result, estimates


def replay(measurements, cfg: ExperimentConfig, N: int, variant: str = ENDKF):
    """Filter an external measurement sequence; returns per-frame ``(mean, std)``."""
    if variant == MEASUREMENT:
        base = measurement_only_baseline(measurements)
        return base, np.zeros_like(base)
    vi = VARIANTS.index(variant)
    rng = np.random.default_rng([cfg.seed, 0, 1 + vi, N])
    return run_filter(measurements, N, cfg, variant, rng)


def normalized_states(mean: np.ndarray) -> np.ndarray:
    """Member averages with sphere blocks projected back to unit versors."""
    out = np.array(mean, dtype=float)
    for blk in layout_for(out.shape[1]):
        if blk.kind != EUCLID:
            out[:, blk.slice] = normalize(out[:, blk.slice])
    return out
