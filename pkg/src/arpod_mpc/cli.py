"""Command-line front end: scenario files, episode runs, sweeps and Monte Carlo.

Exit codes: 0 docked, 2 failed to dock, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .dynamics import INPUT_NAMES, STATE_NAMES, RelativeState, SpacecraftParams
from .ocp import CostWeights, InputBounds
from .sim import (EpisodeError, PerturbationModel, ScenarioConfig, TrajectoryLog, monte_carlo, run_episode,
                  run_interleaved, timing_report, warm_up)

log = logging.getLogger(__name__)

EXIT_DOCKED = 0
EXIT_ERROR = 1
EXIT_NOT_DOCKED = 2

SCHEMA_VERSION = 1
CSV_HEADER = ("k",) + STATE_NAMES + INPUT_NAMES + ("jk", "solve_time_s", "err_2norm", "z_err_infnorm")


class ScenarioError(ValueError):
    """Malformed scenario document; the message names the key and line."""


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def _vec(n):
    def conv(v, key):
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            # a single bound applies to all three axes
            v = [v] * n if key.endswith(("bound_N", "bound_N_m")) else v
        if not isinstance(v, list) or len(v) != n:
            raise ValueError(f"expected a list of {n} numbers")
        out = []
        for e in v:
            if isinstance(e, bool) or not isinstance(e, (int, float)):
                raise ValueError(f"expected a list of {n} numbers")
            out.append(float(e))
        return out
    return conv


def _num(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _int(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _bool(v, key):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _jmax(v, key):
    if v is None or (isinstance(v, str) and v.lower() in ("inf", "unbounded")) or v == math.inf:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected a positive integer or 'inf'")
    return v


def _opt_num(v, key):
    return None if v is None else _num(v, key)


_D = ScenarioConfig()
_P = _D.params
_X = _D.x_init
_W = _D.weights
_B = _D.bounds
_PM = _D.perturbation

# key -> (converter, default); defaults reproduce the headline experiment
SCENARIO_SCHEMA = {
    "schema_version": (_int, SCHEMA_VERSION),
    "mean_motion_rad_s": (_num, _P.n),
    "deputy_mass_kg": (_num, _P.m_d),
    "inertia_diag_kg_m2": (_vec(3), list(_P.J)),
    "accel_scale": (_num, _P.accel_scale),
    "initial_position_km": (_vec(3), _X.dr.tolist()),
    "initial_velocity_km_s": (_vec(3), _X.dv.tolist()),
    "initial_quaternion": (_vec(4), _X.q_err.tolist()),
    "initial_angular_velocity_rad_s": (_vec(3), _X.w_err.tolist()),
    "horizon_steps": (_int, _D.N),
    "dt_s": (_num, _D.dt),
    "state_weights": (_vec(13), _W.Q.tolist()),
    "input_weights": (_vec(6), _W.R.tolist()),
    "thrust_bound_N": (_vec(3), _B.u_max[:3].tolist()),
    "torque_bound_N_m": (_vec(3), _B.u_max[3:].tolist()),
    "j_max": (_jmax, _D.j_max),
    "perturbed": (_bool, _D.perturbed),
    "noise_position_km": (_num, _PM.pos),
    "noise_velocity_km_s": (_num, _PM.vel),
    "noise_quaternion": (_num, _PM.quat),
    "noise_angular_velocity_rad_s": (_num, _PM.omega),
    "docking_tol": (_opt_num, _D.docking_tol),
    "rng_seed": (_int, _D.rng_seed),
    "max_episode_steps": (_int, _D.max_episode_steps),
}


def _key_lines(text: str) -> dict:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from a YAML scenario document.

    Missing keys take their defaults; unknown keys are rejected.

    Raises
    ------
    ScenarioError
        With the offending key and its line number.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ScenarioError(f"{source}:{where} not valid YAML: {getattr(exc, 'problem', exc)}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: top level must be a mapping of keys to values")
    lines = _key_lines(text)

    def where(key):
        return f"{source}: line {lines[key]}: " if key in lines else f"{source}: "

    vals = {}
    for key, raw in doc.items():
        if key not in SCENARIO_SCHEMA:
            raise ScenarioError(f"{where(key)}unknown key {key!r}")
        conv, _ = SCENARIO_SCHEMA[key]
        try:
            vals[key] = conv(raw, key)
        except ValueError as exc:
            raise ScenarioError(f"{where(key)}key {key!r}: {exc}") from None
    for key, (_, default) in SCENARIO_SCHEMA.items():
        vals.setdefault(key, default)
    if vals["schema_version"] != SCHEMA_VERSION:
        raise ScenarioError(f"{where('schema_version')}unsupported schema_version {vals['schema_version']}")
    try:
        return _to_config(vals)
    except ValueError as exc:
        raise ScenarioError(f"{source}: {exc}") from None


def _to_config(v: dict) -> ScenarioConfig:
    params = SpacecraftParams(n=v["mean_motion_rad_s"], m_d=v["deputy_mass_kg"],
                              J=tuple(v["inertia_diag_kg_m2"]), accel_scale=v["accel_scale"])
    x0 = RelativeState(np.array(v["initial_position_km"]), np.array(v["initial_velocity_km_s"]),
                       np.array(v["initial_quaternion"]), np.array(v["initial_angular_velocity_rad_s"]))
    ub = np.r_[v["thrust_bound_N"], v["torque_bound_N_m"]]
    return ScenarioConfig(
        params=params, x_init=x0, N=v["horizon_steps"], dt=v["dt_s"],
        weights=CostWeights(np.array(v["state_weights"]), np.array(v["input_weights"])),
        bounds=InputBounds(-ub, ub), j_max=v["j_max"], perturbed=v["perturbed"],
        perturbation=PerturbationModel(v["noise_position_km"], v["noise_velocity_km_s"],
                                       v["noise_quaternion"], v["noise_angular_velocity_rad_s"]),
        docking_tol=v["docking_tol"], rng_seed=v["rng_seed"], max_episode_steps=v["max_episode_steps"],
    )


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    if not np.allclose(cfg.bounds.u_min, -cfg.bounds.u_max, rtol=0, atol=0):
        raise ValueError("scenario files describe symmetric input bounds only")
    p, x, pm = cfg.params, cfg.x_init, cfg.perturbation
    return {
        "schema_version": SCHEMA_VERSION,
        "mean_motion_rad_s": p.n,
        "deputy_mass_kg": p.m_d,
        "inertia_diag_kg_m2": [float(j) for j in p.J],
        "accel_scale": p.accel_scale,
        "initial_position_km": x.dr.tolist(),
        "initial_velocity_km_s": x.dv.tolist(),
        "initial_quaternion": x.q_err.tolist(),
        "initial_angular_velocity_rad_s": x.w_err.tolist(),
        "horizon_steps": int(cfg.N),
        "dt_s": float(cfg.dt),
        "state_weights": cfg.weights.Q.tolist(),
        "input_weights": cfg.weights.R.tolist(),
        "thrust_bound_N": cfg.bounds.u_max[:3].tolist(),
        "torque_bound_N_m": cfg.bounds.u_max[3:].tolist(),
        "j_max": "inf" if cfg.j_max is None else int(cfg.j_max),
        "perturbed": bool(cfg.perturbed),
        "noise_position_km": pm.pos,
        "noise_velocity_km_s": pm.vel,
        "noise_quaternion": pm.quat,
        "noise_angular_velocity_rad_s": pm.omega,
        "docking_tol": cfg.docking_tol,
        "rng_seed": int(cfg.rng_seed),
        "max_episode_steps": int(cfg.max_episode_steps),
    }


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False, default_flow_style=None)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario: {exc.strerror}") from None
    return parse_scenario(text, str(path))


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def atomic_write(path, data: str) -> None:
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_csv(tlog: TrajectoryLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i, k in enumerate(tlog.k):
        row = [str(k)]
        row += [repr(float(v)) for v in tlog.x[i]]
        row += [repr(float(v)) for v in tlog.u[i]]
        row += [str(tlog.jk[i]), repr(float(tlog.solve_time[i])),
                repr(float(tlog.err_2norm[i])), repr(float(tlog.z_err_inf[i]))]
        w.writerow(row)
    return buf.getvalue()


def read_trajectory_csv(path) -> dict:
    """Columns of a trajectory CSV as arrays keyed by header name."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected trajectory header")
        rows = list(r)
    cols = {}
    for j, name in enumerate(header):
        vals = [row[j] for row in rows]
        cols[name] = np.array([int(v) for v in vals] if name in ("k", "jk") else [float(v) for v in vals])
    return cols


def episode_summary(cfg: ScenarioConfig, tlog: TrajectoryLog) -> dict:
    t = tlog.times
    return {
        "j_max": "inf" if cfg.j_max is None else cfg.j_max,
        "perturbed": cfg.perturbed,
        "rng_seed": cfg.rng_seed,
        "docking_tol": tlog.docking_tol,
        "docked": tlog.docked,
        "docking_step": tlog.docking_step,
        "docking_time_s": None if tlog.docking_step is None else tlog.docking_step * cfg.dt,
        "steps": len(tlog),
        "terminal_err_2norm": tlog.terminal_error,
        "terminal_z_err_infnorm": tlog.z_err_inf[-1] if tlog.z_err_inf else None,
        "max_jk": max(tlog.jk, default=0),
        "avg_loop_time_s": float(t.mean()) if t.size else None,
        "max_loop_time_s": float(t.max()) if t.size else None,
        "total_time_s": tlog.total_time,
        "error": tlog.error,
    }


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _series_csv(header, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    n = max((len(c) for c in columns), default=0)
    for i in range(n):
        w.writerow([repr(float(c[i])) if i < len(c) else "" for c in columns])
    return buf.getvalue()


def error_difference(capped: TrajectoryLog, optimal: TrajectoryLog) -> np.ndarray:
    """``e(k) = | |x~(k) - x_d| - |x*(k) - x_d| |`` over the steps both logs cover."""
    n = min(len(capped), len(optimal))
    return np.abs(np.asarray(capped.err_2norm[:n]) - np.asarray(optimal.err_2norm[:n]))


def _plot_svg(path, series: dict, dt: float, ylabel: str, logy: bool = True) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, y in series.items():
        y = np.asarray(y, dtype=float)
        ax.plot(np.arange(y.size) * dt, y, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("time (s)")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def _label(j_max) -> str:
    return "inf" if j_max is None else str(j_max)


def write_run(out: Path, cfg: ScenarioConfig, tlog: TrajectoryLog, plots: bool = False, stem: str = "") -> dict:
    summary = episode_summary(cfg, tlog)
    atomic_write(out / f"{stem}trajectory.csv", trajectory_csv(tlog))
    atomic_write(out / f"{stem}summary.json", _json(summary))
    if plots and len(tlog):
        _plot_svg(out / f"{stem}error.svg", {f"j_max={_label(cfg.j_max)}": tlog.err_2norm}, cfg.dt,
                  "|x - x_d|_2")
    return summary


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

# distinguishes "no --jmax flag" from "--jmax inf", which parses to None
_UNSET = object()


def _override(cfg: ScenarioConfig, args) -> ScenarioConfig:
    kw = {}
    if getattr(args, "jmax", _UNSET) is not _UNSET and not isinstance(args.jmax, list):
        kw["j_max"] = args.jmax
    if args.seed is not None:
        kw["rng_seed"] = args.seed
    if args.perturbed is not None:
        kw["perturbed"] = args.perturbed
    return replace(cfg, **kw) if kw else cfg


def _scenario(args) -> ScenarioConfig:
    cfg = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    return _override(cfg, args)


def cmd_run(args) -> int:
    cfg = _scenario(args)
    out = Path(args.out)
    try:
        tlog = run_episode(cfg)
    except EpisodeError as exc:
        write_run(out, cfg, exc.log)
        log.error("episode failed: %s", exc)
        return EXIT_ERROR
    s = write_run(out, cfg, tlog, plots=args.plots)
    print(f"j_max={_label(cfg.j_max)} docked={s['docked']} step={s['docking_step']} "
          f"terminal_err={s['terminal_err_2norm']:.3e} avg_loop={s['avg_loop_time_s']:.4f}s")
    return EXIT_DOCKED if tlog.docked else EXIT_NOT_DOCKED


def run_sweep(cfg: ScenarioConfig, caps: list) -> tuple[dict, TrajectoryLog]:
    """Episodes for each cap plus the uncapped baseline, same scenario and seed.

    The episodes are stepped round-robin after a warm-up so their loop times
    are measured under the same host conditions.
    """
    warm_up(cfg)
    *capped, baseline = run_interleaved([replace(cfg, j_max=j) for j in caps] + [replace(cfg, j_max=None)])
    return dict(zip(caps, capped)), baseline


def cmd_sweep(args) -> int:
    cfg = _scenario(args)
    caps = sorted({j for j in args.jmax if j is not None})
    out = Path(args.out)
    try:
        logs, baseline = run_sweep(cfg, caps)
    except EpisodeError as exc:
        log.error("episode failed: %s", exc)
        return EXIT_ERROR
    everything = {**logs, None: baseline}
    summaries = {}
    for j, tl in everything.items():
        summaries[_label(j)] = write_run(out, replace(cfg, j_max=j), tl, stem=f"jmax_{_label(j)}_")
    keys = list(everything)
    atomic_write(out / "error_vs_time.csv",
                 _series_csv(["t_s"] + [f"err_jmax_{_label(j)}" for j in keys],
                             [np.arange(max(len(t) for t in everything.values())) * cfg.dt]
                             + [everything[j].err_2norm for j in keys]))
    diffs = {j: error_difference(tl, baseline) for j, tl in logs.items()}
    atomic_write(out / "error_difference.csv",
                 _series_csv(["t_s"] + [f"e_jmax_{_label(j)}" for j in diffs],
                             [np.arange(max((d.size for d in diffs.values()), default=0)) * cfg.dt]
                             + list(diffs.values())))
    rows = timing_report(logs, baseline)
    table = [{"j_max": r.j_max, "avg_time_s": r.avg_time, "max_time_s": r.max_time,
              "avg_reduction_s": r.avg_reduction_s, "avg_reduction_pct": r.avg_reduction_pct,
              "max_reduction_s": r.max_reduction_s, "max_reduction_pct": r.max_reduction_pct} for r in rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["j_max", "avg_time_loop_reduction_s", "avg_time_loop_reduction_pct",
                "max_loop_time_reduction_s", "max_loop_time_reduction_pct"])
    for r in rows:
        w.writerow([r.j_max, repr(r.avg_reduction_s), repr(r.avg_reduction_pct),
                    repr(r.max_reduction_s), repr(r.max_reduction_pct)])
    atomic_write(out / "timing.csv", buf.getvalue())
    atomic_write(out / "sweep_summary.json", _json({"runs": summaries, "timing": table}))
    if args.plots:
        _plot_svg(out / "error_vs_time.svg", {f"j_max={_label(j)}": everything[j].err_2norm for j in keys},
                  cfg.dt, "|x - x_d|_2")
        if diffs:
            _plot_svg(out / "error_difference.svg", {f"j_max={_label(j)}": d for j, d in diffs.items()},
                      cfg.dt, "e(k)")
    print("j_max  avg_red_s  avg_red_%  max_red_s  max_red_%")
    for r in rows:
        print(f"{r.j_max:>5}  {r.avg_reduction_s:9.4f}  {r.avg_reduction_pct:8.2f}%  "
              f"{r.max_reduction_s:9.4f}  {r.max_reduction_pct:8.2f}%")
    return EXIT_DOCKED if all(t.docked for t in everything.values()) else EXIT_NOT_DOCKED


def cmd_montecarlo(args) -> int:
    cfg = _scenario(args)
    out = Path(args.out)
    summary = monte_carlo(cfg, args.runs, workers=args.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed"] + [f"x0_{n}" for n in STATE_NAMES]
               + ["docked", "docking_step", "terminal_err_2norm", "steps", "max_jk", "error"])
    for r in summary.runs:
        w.writerow([r.run_index, r.seed] + [repr(float(v)) for v in r.x_init]
                   + [int(r.docked), "" if r.docking_step is None else r.docking_step,
                      repr(r.terminal_error), r.steps, r.max_jk, r.error or ""])
    atomic_write(out / "montecarlo_runs.csv", buf.getvalue())
    agg = {
        "runs": args.runs,
        "j_max": _label(cfg.j_max),
        "master_seed": cfg.rng_seed,
        "docked": summary.n_docked,
        "failed": summary.n_failed,
        "mean_terminal_err_2norm": summary.mean_terminal_error,
        "max_terminal_err_2norm": float(np.nanmax(summary.terminal_errors)),
    }
    atomic_write(out / "montecarlo_summary.json", _json(agg))
    print(f"runs={args.runs} docked={summary.n_docked} mean_terminal_err={summary.mean_terminal_error:.3e}")
    if summary.n_failed:
        return EXIT_ERROR
    return EXIT_DOCKED if summary.n_docked == args.runs else EXIT_NOT_DOCKED


def cmd_scenario(args) -> int:
    text = dump_scenario(_scenario(args))
    if args.out == "-":
        sys.stdout.write(text)
    else:
        atomic_write(args.out, text)
    return EXIT_DOCKED


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _jmax_arg(s: str):
    if s.lower() in ("inf", "infinity", "none", "unbounded"):
        return None
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer or 'inf', got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("j_max must be at least 1")
    return v


def _bool_arg(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arpod-mpc", description="Iteration-capped MPC for spacecraft docking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jmax_many=False):
        sp.add_argument("--scenario", metavar="PATH", help="YAML scenario file (defaults to the reference docking scenario)")
        if jmax_many:
            sp.add_argument("--jmax", type=_jmax_arg, nargs="*", default=[2, 3, 4, 5],
                            metavar="INT", help="caps to compare with the uncapped baseline")
        else:
            sp.add_argument("--jmax", type=_jmax_arg, default=_UNSET, metavar="INT|inf")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--perturbed", type=_bool_arg, metavar="BOOL")
        sp.add_argument("--out", default="out", metavar="DIR")

    sp = sub.add_parser("run", help="one closed-loop episode")
    common(sp)
    sp.add_argument("--plots", action="store_true", help="also write SVG charts")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="episodes for several caps plus the uncapped baseline")
    common(sp, jmax_many=True)
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("montecarlo", help="episodes from sampled initial states")
    common(sp)
    sp.add_argument("--runs", type=int, default=50)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("scenario", help="write the effective scenario file")
    common(sp)
    sp.set_defaults(func=cmd_scenario, out="-")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", 1) is not None and getattr(args, "runs", 1) < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
