"""Compare the compiled and numpy gain kernels.

    python3 benchmarks/bench_kernels.py [--N 50] [--repeat 200]

Times ``objective_grad`` and ``apply_gain`` on a synthetic 14-dimensional
ensemble, then one full analysis step with 25 Adam steps, for each backend
that is available, and checks that the backends agree.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from endkf import kernels
from endkf.filter import GainConfig, endkf_analysis, innovations, perturbed_observations
from endkf.manifold import POSE
from endkf.models import NoiseSpec, init_from_measurements, measurement_operator, synth_measurements, synth_truth


def setup(N: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    spec = NoiseSpec()
    ys = synth_measurements(synth_truth(3), spec, rng)
    prior = init_from_measurements(ys[0], ys[1], N, rng, spec)
    h = measurement_operator(POSE.dim)
    innov = innovations(prior, perturbed_observations(ys[2], spec, N, rng), h)
    G = 0.3 * rng.standard_normal((POSE.dim, 7))
    return prior, innov, G, ys[2], spec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    prior, innov, G, y, spec = setup(args.N)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}; N = {args.N}")
    ref = None
    times = {}
    for b in backends:
        value, grad = kernels.objective_grad(G, prior, innov, POSE, backend=b)
        if ref is None:
            ref = (value, grad)
        else:
            print(f"  {b} vs {backends[0]}: value diff {abs(value - ref[0]):.2e}, grad diff {np.abs(grad - ref[1]).max():.2e}")
        t_grad = min(timeit.repeat(lambda: kernels.objective_grad(G, prior, innov, POSE, backend=b), number=args.repeat, repeat=3)) / args.repeat
        t_apply = min(timeit.repeat(lambda: kernels.apply_gain(G, prior, innov, POSE, backend=b), number=args.repeat, repeat=3)) / args.repeat
        times[b] = (t_grad, t_apply)
        print(f"  {b:7s} objective_grad {1e6 * t_grad:9.1f} us   apply_gain {1e6 * t_apply:9.1f} us")
    if len(backends) == 2:
        g = times["python"][0] / times["cython"][0]
        a = times["python"][1] / times["cython"][1]
        print(f"  speedup: objective_grad x{g:.1f}, apply_gain x{a:.1f}")

    # full analysis; the backend switch is process-wide, so swap the module in place
    saved = kernels._impl
    for b in backends:
        kernels._impl = kernels._module(b)
        reps = max(3, args.repeat // 20)
        t = min(timeit.repeat(lambda: endkf_analysis(prior, y, spec, np.random.default_rng(1), GainConfig()), number=reps, repeat=3)) / reps
        print(f"  {b:7s} endkf_analysis (25 Adam steps) {1e3 * t:8.2f} ms")
    kernels._impl = saved


if __name__ == "__main__":
    main()
