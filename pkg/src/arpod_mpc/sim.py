"""Closed-loop execution, perturbations, Monte Carlo campaigns and timing tables.

One episode runs the shrinking-horizon loop: solve the OCP from the current
plant state with at most ``j_max`` SQP iterations, apply the first input,
propagate the plant with the same RK4 map (plus an additive disturbance when
perturbed) and stop at the first step whose ``z = [u; x]`` is within the
docking tolerance of ``z_d``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import NU, NX, QUAT, REFERENCE_PARAMS, REFERENCE_STATE, DockingTarget, RelativeState, SpacecraftParams, rk4_step
from .ocp import CostWeights, InputBounds, build_instance, warm_start_from
from .solver import SolverConfig, solve

DOCK_TOL_NOMINAL = 1e-3
DOCK_TOL_PERTURBED = 5e-3


@dataclass(frozen=True)
class PerturbationModel:
    """Additive Gaussian state disturbance with one scale per state block.

    Defaults: position 1e-3 km, velocity 1e-6 km/s, quaternion 1e-8,
    angular velocity 1e-6 rad/s.
    """

    pos: float = 1e-3
    vel: float = 1e-6
    quat: float = 1e-8
    omega: float = 1e-6

    def __post_init__(self):
        for name in ("pos", "vel", "quat", "omega"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"perturbation scale {name} must be finite and non-negative")

    @property
    def scales(self) -> np.ndarray:
        return np.repeat([self.pos, self.vel, self.quat, self.omega], [3, 3, 4, 3])


def draw_perturbation(model: PerturbationModel, rng: np.random.Generator) -> np.ndarray:
    """One 13-vector of block-scaled standard-normal noise."""
    return model.scales * rng.standard_normal(NX)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one closed-loop episode needs.

    ``j_max=None`` runs the solver uncapped. ``docking_tol=None`` picks 1e-3
    for nominal runs and 5e-3 for perturbed ones.
    """

    params: SpacecraftParams = REFERENCE_PARAMS
    x_init: RelativeState = REFERENCE_STATE
    N: int = 1000
    dt: float = 3.0
    weights: CostWeights = field(default_factory=CostWeights)
    bounds: InputBounds = field(default_factory=InputBounds)
    j_max: int | None = 3
    perturbed: bool = False
    perturbation: PerturbationModel = field(default_factory=PerturbationModel)
    docking_tol: float | None = None
    rng_seed: int = 0
    max_episode_steps: int = 3000
    target: DockingTarget = field(default_factory=DockingTarget)
    solver: SolverConfig | None = None

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError("N must be at least 1")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if self.docking_tol is not None and not self.docking_tol > 0:
            raise ValueError("docking_tol must be positive")
        if self.j_max is not None and self.j_max < 1:
            raise ValueError("j_max must be at least 1 or None")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be at least 1")
        if not isinstance(self.x_init, RelativeState):
            object.__setattr__(self, "x_init", RelativeState.from_array(self.x_init))

    @property
    def tol(self) -> float:
        if self.docking_tol is not None:
            return float(self.docking_tol)
        return DOCK_TOL_PERTURBED if self.perturbed else DOCK_TOL_NOMINAL

    def scenario_key(self) -> tuple:
        """Identity of the scenario apart from the iteration cap."""
        return (tuple(self.x_init.as_array()), int(self.N), float(self.dt), self.perturbed,
                int(self.rng_seed), self.tol, self.params)

    def solver_config(self) -> SolverConfig:
        base = self.solver or SolverConfig()
        return replace(base, j_max=self.j_max)


@dataclass
class TrajectoryLog:
    """Per-step records of one episode.

    Row ``k`` holds the plant state ``x(k)``, the applied input ``u(k)``, the
    SQP and inner QP iteration counts, the solve time (instance build plus solve) and the two
    error norms. ``noise[k]`` is the disturbance added after step ``k``.
    """

    j_max: int | None
    perturbed: bool
    docking_tol: float
    k: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    jk: list = field(default_factory=list)
    qp_iters: list = field(default_factory=list)
    termination: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    err_2norm: list = field(default_factory=list)
    z_err_inf: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    docking_step: int | None = None
    total_time: float = 0.0
    scenario: tuple | None = None
    error: str | None = None

    def __len__(self) -> int:
        return len(self.k)

    @property
    def docked(self) -> bool:
        return self.docking_step is not None

    @property
    def states(self) -> np.ndarray:
        return np.array(self.x).reshape(-1, NX)

    @property
    def inputs(self) -> np.ndarray:
        return np.array(self.u).reshape(-1, NU)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.solve_time, dtype=float)

    @property
    def terminal_error(self) -> float:
        """``|x - x_d|_2`` at the docking step, or at the last step if never docked."""
        return float(self.err_2norm[-1]) if self.err_2norm else math.nan


class EpisodeError(RuntimeError):
    """Solver or plant failure inside an episode; carries the partial log."""

    def __init__(self, msg: str, log: TrajectoryLog):
        super().__init__(msg)
        self.log = log


class Episode:
    """One closed loop advanced a step at a time.

    ``clock`` is only used to time each step; passing a fake clock makes the
    whole log reproducible to the bit.
    """

    def __init__(self, cfg: ScenarioConfig, clock: Callable[[], float] = time.perf_counter):
        self.cfg = cfg
        self.clock = clock
        self.log = TrajectoryLog(cfg.j_max, cfg.perturbed, cfg.tol, scenario=cfg.scenario_key())
        self._z_d = cfg.target.z_d
        self._scfg = cfg.solver_config()
        self._rng = np.random.default_rng(cfg.rng_seed)
        self._x = cfg.x_init.as_array()
        self._prev = None
        self._k = 0
        self._steps = min(int(cfg.N), int(cfg.max_episode_steps))
        self._t_start = clock()
        self.done = False

    def step(self) -> bool:
        """Solve, log and propagate one step. Returns True once the episode is over."""
        if self.done:
            return True
        cfg, log, x, k = self.cfg, self.log, self._x, self._k
        try:
            t0 = self.clock()
            inst = build_instance(x, k, cfg)
            init = warm_start_from(self._prev, inst)
            out = solve(inst, init, self._scfg)
            t1 = self.clock()
        except Exception as exc:
            log.error = f"step {k}: {exc}"
            self._finish()
            raise EpisodeError(log.error, log) from exc
        u = out.first_input
        log.k.append(k)
        log.x.append(x.copy())
        log.u.append(u)
        log.jk.append(out.iterations)
        log.qp_iters.append(int(sum(out.qp_iterations)))
        log.termination.append(out.termination)
        log.solve_time.append(t1 - t0)
        log.err_2norm.append(float(np.linalg.norm(x - cfg.target.x_d)))
        z_err = float(np.max(np.abs(np.concatenate([u, x]) - self._z_d)))
        log.z_err_inf.append(z_err)
        if z_err <= cfg.tol:
            log.docking_step = k
            return self._finish()
        x = rk4_step(x, u, cfg.params, cfg.dt)
        if cfg.perturbed:
            w = draw_perturbation(cfg.perturbation, self._rng)
            x = x + w
            x[QUAT] /= np.linalg.norm(x[QUAT])
            log.noise.append(w)
        self._x, self._prev, self._k = x, out, k + 1
        if self._k >= self._steps:
            return self._finish()
        return False

    def _finish(self) -> bool:
        self.log.total_time = self.clock() - self._t_start
        self.done = True
        return True


def run_episode(cfg: ScenarioConfig, clock: Callable[[], float] = time.perf_counter) -> TrajectoryLog:
    """Run the closed loop until docking, horizon end or the step budget.

    Raises
    ------
    EpisodeError
        If a step fails; the partial log is attached.
    """
    ep = Episode(cfg, clock)
    while not ep.step():
        pass
    return ep.log


def run_interleaved(cfgs: list, clock: Callable[[], float] = time.perf_counter) -> list[TrajectoryLog]:
    """Run several episodes round-robin, one step of each in turn.

    Each log is identical to a separate :func:`run_episode` call except for
    the measured times. Interleaving exposes all episodes to the same slow
    and fast periods of the host, which keeps loop-time comparisons between
    them fair on machines with drifting throughput. The starting episode
    rotates every round so none of them always runs first or last.
    """
    eps = [Episode(c, clock) for c in cfgs]
    active = list(eps)
    r = 0
    while active:
        s = r % len(active)
        order = active[s:] + active[:s]
        done = {id(e) for e in order if e.step()}
        active = [e for e in active if id(e) not in done]
        r += 1
    return [e.log for e in eps]


def warm_up(cfg: ScenarioConfig | None = None) -> None:
    """Run one short solve so compilation and first-call costs stay out of timed loops."""
    cfg = replace(cfg or ScenarioConfig(), N=5, max_episode_steps=2, j_max=2)
    run_episode(cfg)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialStateSampler:
    """Seedable distribution over initial relative states.

    Position uniform in a box of half-width ``pos_box`` km per axis with a
    ball of radius ``pos_exclude`` km around the origin rejected, velocity
    uniform within ``vel_box`` km/s per axis, attitude uniform on the unit
    quaternion sphere (sign chosen with ``eta >= 0``) and angular velocity
    uniform within ``omega_box`` rad/s per axis.
    """

    pos_box: float = 2.0
    pos_exclude: float = 0.1
    vel_box: float = 5e-3
    omega_box: float = 1e-2

    def __call__(self, rng: np.random.Generator) -> RelativeState:
        while True:
            dr = rng.uniform(-self.pos_box, self.pos_box, 3)
            if np.linalg.norm(dr) > self.pos_exclude:
                break
        dv = rng.uniform(-self.vel_box, self.vel_box, 3)
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        w = rng.uniform(-self.omega_box, self.omega_box, 3)
        return RelativeState(dr, dv, q, w)


@dataclass
class MonteCarloRun:
    run_index: int
    seed: int
    x_init: np.ndarray
    docked: bool
    docking_step: int | None
    terminal_error: float
    steps: int
    max_jk: int
    error: str | None = None


@dataclass
class MonteCarloSummary:
    runs: list

    @property
    def terminal_errors(self) -> np.ndarray:
        return np.array([r.terminal_error for r in self.runs])

    @property
    def mean_terminal_error(self) -> float:
        ok = [r.terminal_error for r in self.runs if r.error is None]
        return float(np.mean(ok)) if ok else math.nan

    @property
    def n_docked(self) -> int:
        return sum(r.docked for r in self.runs)

    @property
    def n_failed(self) -> int:
        return sum(r.error is not None for r in self.runs)


def _mc_one(args) -> MonteCarloRun:
    cfg, i, seed, sampler = args
    rng = np.random.default_rng(seed)
    x0 = sampler(rng) if sampler is not None else cfg.x_init
    run_cfg = replace(cfg, x_init=x0, rng_seed=seed)
    try:
        log = run_episode(run_cfg)
        err = None
    except EpisodeError as exc:
        log, err = exc.log, str(exc)
    return MonteCarloRun(
        run_index=i, seed=seed, x_init=x0.as_array(), docked=log.docked,
        docking_step=log.docking_step, terminal_error=log.terminal_error,
        steps=len(log), max_jk=max(log.jk, default=0), error=err,
    )


def monte_carlo(cfg: ScenarioConfig, n_runs: int, init_sampler=InitialStateSampler(),
                workers: int = 1) -> MonteCarloSummary:
    """Run ``n_runs`` episodes, run ``i`` seeded with ``cfg.rng_seed + i``.

    ``init_sampler=None`` keeps ``cfg.x_init`` for every run. Failures are
    recorded per run. Results come back in run order whatever ``workers`` is.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    jobs = [(cfg, i, cfg.rng_seed + i, init_sampler) for i in range(n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_mc_one, jobs))
    else:
        runs = [_mc_one(j) for j in jobs]
    return MonteCarloSummary(runs)


# ---------------------------------------------------------------------------
# Timing tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRow:
    j_max: int | None
    avg_time: float
    max_time: float
    avg_reduction_s: float
    avg_reduction_pct: float
    max_reduction_s: float
    max_reduction_pct: float


def timing_report(logs: dict, baseline: TrajectoryLog) -> list[TimingRow]:
    """Average and maximum loop-time reductions of each capped log versus ``baseline``.

    Raises
    ------
    ValueError
        If a log comes from a different scenario than the baseline.
    """
    b_avg = float(np.mean(baseline.times))
    b_max = float(np.max(baseline.times))
    rows = []
    for j_max, log in logs.items():
        if log.scenario != baseline.scenario:
            raise ValueError(f"log for j_max={j_max} comes from a different scenario than the baseline")
        avg = float(np.mean(log.times))
        mx = float(np.max(log.times))
        rows.append(TimingRow(
            j_max=j_max, avg_time=avg, max_time=mx,
            avg_reduction_s=b_avg - avg, avg_reduction_pct=100.0 * (b_avg - avg) / b_avg if b_avg else 0.0,
            max_reduction_s=b_max - mx, max_reduction_pct=100.0 * (b_max - mx) / b_max if b_max else 0.0,
        ))
    return rows
