"""Command line interface: ``endkf simulate | twin | replay | bias-demo``.

Exit codes: 0 success, 1 bad input (arguments, config, pose log), 2 runtime
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from . import io

log = logging.getLogger("endkf")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="endkf", description="Ensemble directional Kalman filter for pose tracking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--config", required=True,
                        help="config file or preset name (" + ", ".join(io.preset_names()) + ")")
        sp.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
        sp.add_argument("--out", type=Path, default=Path(out_default), help="output directory")

    s = sub.add_parser("simulate", help="generate a truth trajectory and one measurement log")
    common(s, "sim")
    s.add_argument("--format", choices=("csv", "mat4"), default="csv", help="pose log format")
    s.add_argument("--units", choices=tuple(io.UNIT_SCALE), default="cm", help="pose log position units")
    s.add_argument("--run", type=int, default=0, help="Monte Carlo run whose measurements to write")

    t = sub.add_parser("twin", help="run the synthetic twin experiment")
    common(t, "twin")
    t.add_argument("--variant", choices=H.VARIANTS, help="run only this variant (plus the measurement baseline)")
    t.add_argument("--ensemble-size", type=_positive, help="run only this ensemble size")
    t.add_argument("--runs", type=_positive, help="Monte Carlo runs (overrides the config)")

    r = sub.add_parser("replay", help="filter an external pose log")
    common(r, "replay")
    r.add_argument("--log", required=True, type=Path, help="pose log to filter")
    r.add_argument("--format", choices=("csv", "mat4"), default="csv", help="pose log format")
    r.add_argument("--variant", choices=H.VARIANTS, default=H.ENDKF)
    r.add_argument("--ensemble-size", type=_positive, help="ensemble size (default: largest in the config)")
    r.add_argument("--truth", type=Path, help="truth file from `simulate`; adds a results table")

    b = sub.add_parser("bias-demo", help="run the bias-injection experiment")
    common(b, "bias")
    b.add_argument("--variant", choices=(H.ENDKF, H.NOADAM), help="run only this filter variant")
    b.add_argument("--ensemble-size", type=_positive, help="run only this ensemble size")
    b.add_argument("--runs", type=_positive, help="Monte Carlo runs (overrides the config)")
    return p


def _config(args, **extra):
    cfg = io.load_config(args.config)
    changes = {"seed": args.seed}
    if getattr(args, "runs", None):
        changes["runs"] = args.runs
    if getattr(args, "ensemble_size", None):
        changes["ensemble_sizes"] = (args.ensemble_size,)
    variant = getattr(args, "variant", None)
    if variant and args.command in ("twin", "bias-demo"):
        changes["variants"] = tuple(v for v in H.VARIANTS if v in (variant, H.MEASUREMENT))
    changes.update(extra)
    return io.override(cfg, **changes)


def _write_experiment(result: H.ExperimentResult, out: Path) -> None:
    cfg = result.config
    io.write_results(H.results_table(result), out / "results.csv")
    layout = cfg.layout
    truth = result.truth.states
    reports = {}
    for N in cfg.ensemble_sizes:
        for variant in H.FILTERS:
            if variant not in cfg.variants:
                continue
            ok = [r for r in result.outputs(variant, N) if r.ok]
            if not ok:
                continue
            err, std = H.run_errors(ok, truth)
            io.write_traces(H.traces(err, std), out / f"traces_{variant}_N{N}.csv", layout)
            reports[(variant, N)] = H.consistency_report(err, std, layout)
    io.write_consistency(reports, out / "consistency.csv", layout)
    io.write_failures(result.failures(), out / "failures.csv")
    (out / "config.cfg").write_text(io.dump_config(cfg))


def cmd_simulate(args) -> int:
    cfg = _config(args)
    truth = cfg.truth()
    ys = H.run_measurements(cfg, truth, args.run)
    args.out.mkdir(parents=True, exist_ok=True)
    io.write_truth(truth, args.out / "truth.csv")
    ext = "csv" if args.format == "csv" else "txt"
    io.write_pose_log(ys, args.out / f"measurements.{ext}", args.format, args.units)
    (args.out / "config.cfg").write_text(io.dump_config(cfg))
    return EXIT_OK


def cmd_twin(args) -> int:
    cfg = _config(args)
    result = H.run_twin_experiment(cfg)
    _write_experiment(result, args.out)
    return _status(result)


def cmd_bias_demo(args) -> int:
    cfg = H.bias_experiment_config(_config(args))
    result, estimates = H.run_bias_experiment(cfg)
    _write_experiment(result, args.out)
    io.write_bias_estimates(estimates, args.out / "bias_estimate.csv")
    return _status(result)


def cmd_replay(args) -> int:
    ys = io.parse_pose_log(args.log, args.format)
    if len(ys) < 2:
        raise io.PoseLogError(f"{args.log}: need at least two poses")
    cfg = _config(args)
    N = args.ensemble_size or max(cfg.ensemble_sizes)
    truth = io.read_truth(args.truth) if args.truth else None
    if truth is not None and truth.frames != len(ys):
        raise io.PoseLogError(f"truth has {truth.frames} frames, log has {len(ys)}")
    mean, std = H.replay(ys, cfg, N, args.variant)
    args.out.mkdir(parents=True, exist_ok=True)
    io.write_trajectory(H.normalized_states(mean), std, args.out / "filtered.csv", [y.frame for y in ys])
    if truth is not None:
        rows = []
        base = H.run_metrics(H.measurement_only_baseline(ys), truth)
        est = H.run_metrics(mean, truth)
        for name, vals in ((H.MEASUREMENT, base), (args.variant, est)):
            for m in H.METRICS:
                rows.append(H.ResultRow(name, N, m, vals[m], float("nan"), H.improvement(m, vals[m], base[m]), 1))
        io.write_results(rows, args.out / "results.csv")
    (args.out / "config.cfg").write_text(io.dump_config(cfg))
    return EXIT_OK


def _status(result: H.ExperimentResult) -> int:
    failures = result.failures()
    for f in failures:
        log.error("run %d of %s at N=%d failed: %s", f.run, f.variant, f.N, f.error)
    total = sum(len(v) for v in result.runs.values())
    return EXIT_RUNTIME if failures and len(failures) == total else EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "twin": cmd_twin, "replay": cmd_replay, "bias-demo": cmd_bias_demo}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"endkf: error: {exc}\n")
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (io.ConfigError, io.PoseLogError) as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"endkf: error: {exc}\n")
        return EXIT_INPUT
    except OSError as exc:
        sys.stderr.write(f"endkf: error: {exc}\n")
        return EXIT_INPUT
    except Exception as exc:  # anything else is a failure of the computation itself
        log.exception("runtime failure")
        sys.stderr.write(f"endkf: runtime failure: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
