"""Configuration files, pose logs and result files.

Config files are flat ``key = value`` text, one setting per line, ``#`` for
comments.  Lists are comma separated; covariances are a scalar (times the
identity), three diagonal entries or nine row-major entries; ``inf`` and
``none`` are accepted where they make sense.  Unknown keys are rejected.

Pose logs come in two shapes.  ``csv`` has the header
``frame,px,py,pz,qw,qx,qy,qz``; ``mat4`` has one row-major 4x4 homogeneous
transform per line, frames numbered by line order.  Either may start with a
``# units: m`` or ``# units: cm`` comment (default cm); positions are
converted to cm on ingest.
"""
from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .harness import VARIANTS, ExperimentConfig, ResultRow, Traces
from .manifold import POSE, POSE_BIAS, Layout
from .models import InitSpread, Measurement, NoiseSpec, ProcessNoise, TruthTrajectory
from .stats import continuous_signs, quat_to_rotmat, rotmat_to_quat

UNIT_SCALE = {"cm": 1.0, "m": 100.0}
CSV_HEADER = ["frame", "px", "py", "pz", "qw", "qx", "qy", "qz"]
ROTATION_TOL = 1e-3
NORM_TOL = 1e-3


class ConfigError(ValueError):
    pass


class PoseLogError(ValueError):
    pass


def fmt(x: float) -> str:
    """17 significant digits: enough to read back the identical double."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_NOISE_KEYS = ("R", "rho")
_PROCESS_KEYS = ("Qv", "Qp", "Qoppa_wd", "Qoppa_w", "Qb", "Qoppa_beta")
_SPREAD_KEYS = ("init_p_cov", "init_v_cov", "init_w_conc", "init_wd_conc", "init_b_cov", "init_beta_conc")
_PLAIN_KEYS = tuple(f.name for f in fields(ExperimentConfig) if f.name not in ("noise", "process", "spread"))
KEYS = _PLAIN_KEYS + _NOISE_KEYS + _PROCESS_KEYS + _SPREAD_KEYS


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {text!r}") from exc


def _none(text: str) -> bool:
    return text.strip().lower() in ("none", "")


def _matrix(text: str):
    if _none(text):
        return None
    vals = _floats(text)
    if len(vals) == 1:
        return vals[0] * np.eye(3)
    if len(vals) == 3:
        return np.diag(vals)
    if len(vals) == 9:
        return np.array(vals).reshape(3, 3)
    raise ConfigError(f"covariance needs 1, 3 or 9 numbers, got {len(vals)}")


def _scalar(text: str):
    if _none(text):
        return None
    vals = _floats(text)
    if len(vals) != 1:
        raise ConfigError(f"expected one number, got {text!r}")
    return vals[0]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _parse_plain(key: str, text: str):
    if key in ("frames", "runs", "adam_steps", "seed", "workers"):
        return _int(text)
    if key == "ensemble_sizes":
        return tuple(_int(t) for t in text.replace(",", " ").split())
    if key == "variants":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if key == "bias":
        return _bool(text)
    if key in ("adam_alpha", "beta_yaw_deg"):
        return _scalar(text)
    if key == "weights":
        return None if _none(text) else tuple(_floats(text))
    return tuple(_floats(text))  # vector-valued truth and bias settings


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse flat ``key = value`` text into an :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[endkf]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    raw = dict(parser["endkf"])
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    try:
        plain = {k: _parse_plain(k, v) for k, v in raw.items() if k in _PLAIN_KEYS}
        noise_kw = {}
        if "R" in raw:
            noise_kw["R"] = _matrix(raw["R"])
        if "rho" in raw:
            noise_kw["rho"] = _scalar(raw["rho"])
        proc_kw = {}
        for k in _PROCESS_KEYS:
            if k in raw:
                proc_kw[k] = _matrix(raw[k]) if k in ("Qv", "Qp", "Qb") else _scalar(raw[k])
        spread_kw = {}
        for k in _SPREAD_KEYS:
            if k in raw:
                name = k[len("init_"):]
                spread_kw[name] = _matrix(raw[k]) if name.endswith("cov") else _scalar(raw[k])
        return ExperimentConfig(
            noise=NoiseSpec(**noise_kw),
            process=ProcessNoise(**proc_kw),
            spread=InitSpread(**spread_kw),
            **plain,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def preset_names() -> list[str]:
    files = resources.files("endkf").joinpath("presets").iterdir()
    return sorted(f.name[:-4] for f in files if f.name.endswith(".cfg"))


def load_config(name_or_path: str | os.PathLike) -> ExperimentConfig:
    """Read a config file, or a bundled preset by name (``paper_synth``, ``bias_demo``)."""
    path = Path(name_or_path)
    if path.is_file():
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return parse_config(text, str(path))
    name = str(name_or_path)
    if name in preset_names():
        text = resources.files("endkf").joinpath("presets", name + ".cfg").read_text()
        return parse_config(text, name)
    raise ConfigError(f"no config file or preset named {name!r} (presets: {', '.join(preset_names())})")


def _short(x) -> str:
    return repr(float(x))


def _fmt_matrix(M) -> str:
    if M is None:
        return "none"
    M = np.asarray(M, dtype=float)
    if np.array_equal(M, M[0, 0] * np.eye(3)):
        return _short(M[0, 0])
    if np.array_equal(M, np.diag(np.diag(M))):
        return ", ".join(_short(x) for x in np.diag(M))
    return ", ".join(_short(x) for x in M.ravel())


def _fmt_scalar(x) -> str:
    return "none" if x is None else _short(x)


def dump_config(cfg: ExperimentConfig) -> str:
    """Config text that :func:`parse_config` reads back to the same settings."""
    lines = []
    for key in _PLAIN_KEYS:
        v = getattr(cfg, key)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, int):
            s = str(v)
        elif v is None:
            s = "none"
        elif isinstance(v, float):
            s = _short(v)
        elif key in ("ensemble_sizes", "variants"):
            s = ", ".join(str(x) for x in v)
        else:
            s = ", ".join(_short(x) for x in v)
        lines.append(f"{key} = {s}")
    lines.append(f"R = {_fmt_matrix(cfg.noise.R)}")
    lines.append(f"rho = {_short(cfg.noise.rho)}")
    p = cfg.process
    for k in _PROCESS_KEYS:
        v = getattr(p, k)
        lines.append(f"{k} = {_fmt_matrix(v) if k in ('Qv', 'Qp', 'Qb') else _fmt_scalar(v)}")
    for k in _SPREAD_KEYS:
        v = getattr(cfg.spread, k[len("init_"):])
        lines.append(f"{k} = {_fmt_matrix(v) if k.endswith('cov') else _fmt_scalar(v)}")
    return "\n".join(lines) + "\n"


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """``cfg`` with the non-None ``changes`` applied (CLI flag overrides)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Pose logs
# ---------------------------------------------------------------------------

def _units_comment(line: str) -> str | None:
    body = line.lstrip("#").strip()
    if body.lower().startswith("units"):
        unit = body.split(":", 1)[-1].split("=", 1)[-1].strip().lower()
        if unit not in UNIT_SCALE:
            raise PoseLogError(f"unknown units {unit!r}; use cm or m")
        return unit
    return None


def _mat4_measurement(vals: list[float], frame: int, lineno: int, scale: float) -> Measurement:
    T = np.array(vals).reshape(4, 4)
    R = T[:3, :3]
    dev = np.linalg.norm(R.T @ R - np.eye(3))
    if dev > ROTATION_TOL:
        raise PoseLogError(f"line {lineno}: rotation block is not orthonormal (Frobenius deviation {dev:.3g})")
    if np.linalg.det(R) < 0:
        raise PoseLogError(f"line {lineno}: rotation block is a reflection")
    return Measurement(frame, scale * T[:3, 3], rotmat_to_quat(R))


def parse_pose_log(path: str | os.PathLike, fmt_name: str = "csv") -> list[Measurement]:
    """Read a pose log into measurements in cm with sign-continuous versors."""
    if fmt_name not in ("csv", "mat4"):
        raise PoseLogError(f"unknown pose log format {fmt_name!r}")
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise PoseLogError(f"cannot read {path}: {exc}") from exc
    scale = 1.0
    out: list[Measurement] = []
    header_seen = False
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            unit = _units_comment(s)
            if unit is not None:
                scale = UNIT_SCALE[unit]
            continue
        if fmt_name == "csv" and not header_seen:
            if [c.strip() for c in s.split(",")] != CSV_HEADER:
                raise PoseLogError(f"line {lineno}: expected header {','.join(CSV_HEADER)}")
            header_seen = True
            continue
        parts = s.replace(",", " ").split() if fmt_name == "mat4" else s.split(",")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise PoseLogError(f"line {lineno}: malformed number ({exc})") from exc
        if not all(math.isfinite(v) for v in vals):
            raise PoseLogError(f"line {lineno}: non-finite value")
        try:
            if fmt_name == "mat4":
                if len(vals) != 16:
                    raise PoseLogError(f"line {lineno}: expected 16 values, got {len(vals)}")
                m = _mat4_measurement(vals, len(out), lineno, scale)
            else:
                if len(vals) != 8:
                    raise PoseLogError(f"line {lineno}: expected 8 fields, got {len(vals)}")
                if vals[0] != int(vals[0]):
                    raise PoseLogError(f"line {lineno}: frame must be an integer")
                q = np.array(vals[4:])
                if abs(np.linalg.norm(q) - 1.0) > NORM_TOL:
                    raise PoseLogError(f"line {lineno}: quaternion norm {np.linalg.norm(q):.6g} is not 1")
                m = Measurement(int(vals[0]), scale * np.array(vals[1:4]), q)
        except PoseLogError:
            raise
        except ValueError as exc:
            raise PoseLogError(f"line {lineno}: {exc}") from exc
        if out and m.frame <= out[-1].frame:
            raise PoseLogError(f"line {lineno}: frame {m.frame} does not increase")
        out.append(m)
    if fmt_name == "csv" and not header_seen:
        raise PoseLogError(f"{path}: missing header")
    qs = continuous_signs([m.y_q for m in out])
    return [Measurement(m.frame, m.y_p, q) for m, q in zip(out, qs)]


def write_pose_log(measurements, path: str | os.PathLike, fmt_name: str = "csv", units: str = "cm") -> None:
    """Write measurements (held in cm) as a csv or mat4 pose log in ``units``."""
    if units not in UNIT_SCALE:
        raise PoseLogError(f"unknown units {units!r}")
    scale = 1.0 / UNIT_SCALE[units]
    rows = [f"# units: {units}"]
    if fmt_name == "csv":
        rows.append(",".join(CSV_HEADER))
        for m in measurements:
            rows.append(",".join([str(m.frame)] + [fmt(x) for x in scale * m.y_p] + [fmt(x) for x in m.y_q]))
    elif fmt_name == "mat4":
        for m in measurements:
            T = np.eye(4)
            T[:3, :3] = quat_to_rotmat(m.y_q)
            T[:3, 3] = scale * m.y_p
            rows.append(" ".join(fmt(x) for x in T.ravel()))
    else:
        raise PoseLogError(f"unknown pose log format {fmt_name!r}")
    _write(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# Trajectories and results
# ---------------------------------------------------------------------------

def coordinate_names(layout: Layout) -> list[str]:
    axes = {3: ["x", "y", "z"], 4: ["w", "x", "y", "z"]}
    return [f"{blk.name}_{a}" for blk in layout for a in axes[blk.size]]


def _write(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _csv_text(header: list[str], rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(r) for r in rows)
    return "\n".join(lines) + "\n"


def write_truth(truth: TruthTrajectory, path) -> None:
    header = ["frame"] + coordinate_names(POSE)
    rows = ([str(k)] + [fmt(x) for x in s] for k, s in enumerate(truth.states))
    _write(path, _csv_text(header, rows))


def read_truth(path) -> TruthTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame"] + coordinate_names(POSE):
            raise PoseLogError(f"{path}: not a truth file")
        states = [[float(x) for x in row[1:]] for row in reader if row]
    return TruthTrajectory(np.array(states))


def write_trajectory(mean: np.ndarray, std: np.ndarray, path, frames=None) -> None:
    """Filtered states and their ensemble standard deviations, one frame per row."""
    layout = POSE_BIAS if mean.shape[1] == POSE_BIAS.dim else POSE
    names = coordinate_names(layout)
    header = ["frame"] + names + [f"std_{n}" for n in names]
    frames = range(len(mean)) if frames is None else frames
    rows = ([str(f)] + [fmt(x) for x in m] + [fmt(x) for x in s] for f, m, s in zip(frames, mean, std))
    _write(path, _csv_text(header, rows))


RESULTS_HEADER = ["variant", "ensemble_size", "metric", "value", "stderr", "improvement_pct", "runs"]


def write_results(rows: list[ResultRow], path) -> None:
    out = (
        [r.variant, str(r.ensemble_size), r.metric, fmt(r.value), fmt(r.stderr), fmt(r.improvement), str(r.runs)]
        for r in rows
    )
    _write(path, _csv_text(RESULTS_HEADER, out))


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != RESULTS_HEADER:
            raise ValueError(f"{path}: not a results file")
        return [
            ResultRow(r[0], int(r[1]), r[2], float(r[3]), float(r[4]), float(r[5]), int(r[6]))
            for r in reader
            if r
        ]


def write_traces(tr: Traces, path, layout: Layout = POSE) -> None:
    """Rows of (frame, coordinate, predicted 3-sigma, actual 3-sigma error, per-run errors)."""
    names = coordinate_names(layout)
    M, T, d = tr.per_run.shape
    header = ["frame", "coordinate", "predicted_3sigma", "actual_3sigma_error"] + [f"err_run{m}" for m in range(M)]
    rows = (
        [str(k), names[j], fmt(tr.predicted[k, j]), fmt(tr.actual[k, j])] + [fmt(x) for x in tr.per_run[:, k, j]]
        for k in range(T)
        for j in range(d)
    )
    _write(path, _csv_text(header, rows))


def write_consistency(reports: dict[tuple[str, int], dict], path, layout: Layout = POSE) -> None:
    header = ["variant", "ensemble_size", "block", "coverage", "coordinate", "mean_error", "stderr", "biased"]
    names = coordinate_names(layout)
    rows = []
    for (variant, N), report in reports.items():
        for blk in layout:
            if blk.name not in report:
                continue
            cal = report[blk.name]
            for i in range(blk.size):
                rows.append([
                    variant, str(N), blk.name, fmt(cal.coverage), names[blk.start + i],
                    fmt(cal.mean_error[i]), fmt(cal.stderr[i]), "true" if cal.biased[i] else "false",
                ])
    _write(path, _csv_text(header, rows))


def write_failures(failures, path) -> None:
    rows = ([f.variant, str(f.N), str(f.run), f.error.replace(",", ";").replace("\n", " ")] for f in failures)
    _write(path, _csv_text(["variant", "ensemble_size", "run", "error"], rows))


def write_bias_estimates(estimates: dict, path) -> None:
    header = ["ensemble_size", "run", "b_x", "b_y", "b_z", "std_x", "std_y", "std_z", "within_3sigma"]
    rows = []
    for N, est in estimates.items():
        inside = est.within(3.0)
        for m in range(est.mean.shape[0]):
            rows.append([str(N), str(m)] + [fmt(x) for x in est.mean[m]] + [fmt(x) for x in est.std[m]]
                        + ["true" if inside[m] else "false"])
    _write(path, _csv_text(header, rows))


__all__ = [
    "ConfigError", "PoseLogError", "VARIANTS", "parse_config", "load_config", "dump_config", "override",
    "preset_names", "parse_pose_log", "write_pose_log", "write_truth", "read_truth", "write_trajectory",
    "write_results", "read_results", "write_traces", "write_consistency", "write_failures",
    "write_bias_estimates", "coordinate_names", "fmt",
]
