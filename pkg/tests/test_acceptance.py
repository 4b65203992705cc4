"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1 to 5 share one twin experiment on the bundled ``paper_synth``
settings with M = 20 runs at N = 10 and N = 50.  Criterion 6 runs the
``bias_demo`` preset as shipped (M = 20, N = 500).
"""
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from endkf import harness as H
from endkf import io
from endkf.cli import main
from endkf.filter import GainConfig, SingularInnovationWarning, adam_optimize, endkf_analysis, variance_gradient
from endkf.filter import variance_objective
from endkf.manifold import EUCLID, POSE, SPHERE, Layout, product_exp, product_log, product_proj
from endkf.manifold import sphere_exp, sphere_log, sphere_proj
from endkf.models import Measurement, NoiseSpec
from endkf.stats import IDENTITY_QUAT, fml_mean_resultant, fml_sample, sphere_variance

from conftest import acceptance_line

RUNS = 20
SIZES = (10, 50)


@pytest.fixture(scope="module")
def twin():
    cfg = replace(io.load_config("paper_synth"), runs=RUNS, ensemble_sizes=SIZES, seed=0)
    result = H.run_twin_experiment(cfg)
    return result, H.results_table(result)


def err(metric, value):
    return 1.0 - value if metric.startswith("cos") else value


def test_criterion_1_twin_reproduction(twin):
    _, rows = twin
    targets = {"rmse_v": 60.0, "rmse_p": 15.0, "cos_wd": 80.0, "cos_w": 15.0}
    parts, ok = [], True
    for m, need in targets.items():
        got = H.lookup(rows, H.ENDKF, 50, m).improvement
        ok &= got >= need
        parts.append(f"{m} {got:+.1f}% (need >= {need:.0f}%)")
    assert acceptance_line(1, "EnDKF vs measurements, N=50, M=20", ok, "; ".join(parts))


def test_criterion_2_ensemble_size_trend(twin):
    _, rows = twin
    a = H.lookup(rows, H.ENDKF, 10, "rmse_v").value
    b = H.lookup(rows, H.ENDKF, 50, "rmse_v").value
    assert acceptance_line(2, "EnDKF velocity RMSE at N=50 <= at N=10", b <= a, f"N=10 {a:.5g}, N=50 {b:.5g}")


def test_criterion_3_noadam_ordering(twin):
    _, rows = twin
    parts, ok = [], True
    for m in H.METRICS:
        e = H.lookup(rows, H.ENDKF, 50, m)
        n = H.lookup(rows, H.NOADAM, 50, m)
        good = err(m, n.value) >= err(m, e.value) - e.stderr
        ok &= good
        parts.append(f"{m} noAdam {err(m, n.value):.4g} vs EnDKF {err(m, e.value):.4g} +- {e.stderr:.2g}")
    assert acceptance_line(3, "noAdam error >= EnDKF error - 1 SE, N=50", ok, "; ".join(parts))


def test_criterion_4_bpf_position(twin):
    _, rows = twin
    b = H.lookup(rows, H.BPF, 50, "rmse_p").value
    m = H.lookup(rows, H.MEASUREMENT, 50, "rmse_p").value
    assert acceptance_line(4, "BPF position RMSE > measurements, N=50", b > m, f"BPF {b:.5g}, measurements {m:.5g}")


def test_criterion_5_calibration(twin):
    result, _ = twin
    err_, std = H.run_errors(result.outputs(H.ENDKF, 50), result.truth.states)
    rep = H.consistency_report(err_, std)
    parts, ok = [], True
    for blk in ("v", "p"):
        cal = rep[blk]
        z = np.abs(cal.mean_error) / cal.stderr
        ok &= not cal.biased.any()
        parts.append(f"{blk} |mean|/SE = " + ", ".join(f"{x:.2f}" for x in z))
    assert acceptance_line(5, "EnDKF errors unbiased within 3 SE, N=50", ok, "; ".join(parts))


def test_criterion_6_bias_model():
    cfg = io.load_config("bias_demo")
    result, estimates = H.run_bias_experiment(cfg)
    rows = H.results_table(result)
    N = cfg.ensemble_sizes[0]
    impr = H.lookup(rows, H.ENDKF, N, "cos_w").improvement
    est = estimates[N]
    inside = est.within(3.0)
    ok = impr >= 10.0 and bool(inside.all())
    noadam = H.lookup(rows, H.NOADAM, N, "cos_w").improvement
    detail = (f"attitude (1-cos) {impr:+.1f}% (need >= 10%); b within 3 sigma in {inside.sum()}/{len(inside)} runs; "
              f"mean b {np.round(est.mean.mean(axis=0), 4).tolist()} vs {list(cfg.b_true)}; "
              f"noAdam attitude {noadam:+.1f}% (M={cfg.runs}, N={N})")
    assert acceptance_line(6, "bias-augmented EnDKF", ok, detail)


def _property_checks():
    rng = np.random.default_rng(2024)
    worst = {}

    def note(name, value):
        worst[name] = max(worst.get(name, 0.0), float(value))

    for _ in range(500):
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        if a @ b < -0.999:
            continue
        note("sphere round trip", np.abs(sphere_exp(a, sphere_log(a, b)) - b).max())
        w = 5 * rng.standard_normal(4)
        p = sphere_proj(a, w)
        note("sphere unit", abs(np.linalg.norm(sphere_exp(a, p)) - 1))
        note("proj idempotence", np.abs(sphere_proj(a, p) - p).max())
        note("proj orthogonality", abs(a @ p))
        x, y = POSE.normalize_spheres(rng.standard_normal((2, 14)))
        for blk in POSE:
            if blk.kind == SPHERE and x[blk.slice] @ y[blk.slice] < 0:
                y[blk.slice] *= -1
        note("product round trip", np.abs(product_exp(POSE, x, product_log(POSE, x, y)) - y).max())
        note("product proj idempotence",
             np.abs(product_proj(POSE, x, product_proj(POSE, x, w.repeat(4)[:14])) - product_proj(POSE, x, w.repeat(4)[:14])).max())

    lay = Layout.of(("a", EUCLID, 3), ("b", SPHERE, 4), ("c", SPHERE, 3))
    for N in (2, 5):
        for _ in range(5):
            prior = lay.normalize_spheres(rng.standard_normal((N, lay.dim)))
            innov = 0.3 * rng.standard_normal((N, 7))
            G = 0.4 * rng.standard_normal((lay.dim, 7))
            g = variance_gradient(G, prior, innov, lay)
            fd = np.empty_like(G)
            for idx in np.ndindex(G.shape):
                Gp, Gm = G.copy(), G.copy()
                Gp[idx] += 1e-6
                Gm[idx] -= 1e-6
                fd[idx] = (variance_objective(Gp, prior, innov, lay) - variance_objective(Gm, prior, innov, lay)) / 2e-6
            scale = np.abs(fd).max()
            note("gradient rel error", (np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3 * scale)).max())

    G = adam_optimize(np.zeros((1, 1)), 2, 0.1, np.ones_like)
    note("adam step 2", abs(-G[0, 0] - 0.1 * 0.1 / math.sqrt(1 + 1e-8)))

    E = np.eye(4)
    note("sphere variance 0", abs(sphere_variance(np.stack([E[0], E[0]]))))
    note("sphere variance 1", abs(sphere_variance(np.stack([E[0], -E[0]])) - 1))
    note("sphere variance 0.5", abs(sphere_variance(np.stack([E[0], E[1]])) - 0.5))

    draws = fml_sample(E[0], 100.0, np.random.default_rng(7), size=100_000)
    oracle = fml_mean_resultant(100.0, 4)
    note("FML resultant rel error", abs(draws[:, 0].mean() - oracle) / oracle)

    # Euclid-only Gaussian problem: sphere blocks carry no spread and no noise
    krng = np.random.default_rng(0)
    C = 1e-2 * np.block([[4 * np.eye(3), 1.5 * np.eye(3)], [1.5 * np.eye(3), np.eye(3)]])
    N = 1000
    ens = np.zeros((N, 14))
    ens[:, :6] = krng.multivariate_normal([0.1, 0.1, 0.1, 0, 0, 0], C, size=N)
    ens[:, 6:10] = IDENTITY_QUAT
    ens[:, 10:14] = IDENTITY_QUAT
    H_ = np.hstack([np.zeros((3, 3)), np.eye(3)])
    R = 1e-2 * np.eye(3)
    y = Measurement(1, [0.05, -0.1, 0.12], IDENTITY_QUAT)
    ms, Cs = ens[:, :6].mean(axis=0), np.cov(ens[:, :6].T)
    want = ms + Cs @ H_.T @ np.linalg.solve(H_ @ Cs @ H_.T + R, y.y_p - H_ @ ms)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularInnovationWarning)
        post, _ = endkf_analysis(ens, y, NoiseSpec(R, math.inf), krng, GainConfig(steps=25, alpha=0.01))
    se = post[:, :6].std(axis=0, ddof=1) / math.sqrt(N)
    note("Kalman mean z-score", (np.abs(post[:, :6].mean(axis=0) - want) / se).max())
    return worst


LIMITS = {
    "sphere round trip": 1e-9,
    "product round trip": 1e-9,
    "sphere unit": 1e-12,
    "proj idempotence": 1e-12,
    "proj orthogonality": 1e-12,
    "product proj idempotence": 1e-12,
    "gradient rel error": 1e-5,
    "adam step 2": 1e-6,
    "sphere variance 0": 1e-12,
    "sphere variance 1": 1e-12,
    "sphere variance 0.5": 1e-12,
    "FML resultant rel error": 0.01,
    "Kalman mean z-score": 3.0,
}


def test_criterion_7_property_suite():
    worst = _property_checks()
    bad = [k for k, lim in LIMITS.items() if not worst[k] < lim]
    detail = "; ".join(f"{k} {worst[k]:.2g} < {LIMITS[k]:g}" for k in LIMITS)
    assert acceptance_line(7, "property suites", not bad, detail + (f"; violated: {bad}" if bad else ""))


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text("frames = 40\nruns = 3\nensemble_sizes = 10, 20\n")
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["twin", "--config", str(cfg), "--seed", "17", "--out", str(d)]) == 0
        outs.append({p.name: p.read_bytes() for p in d.iterdir()})
    same = outs[0] == outs[1]
    detail = f"{len(outs[0])} files compared: " + ", ".join(sorted(outs[0]))
    assert acceptance_line(8, "twin runs byte-identical", same, detail)
