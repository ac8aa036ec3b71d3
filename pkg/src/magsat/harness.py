"""Baseline-versus-fit experiment on the polar grid of initial states and references.

Pipeline: grid -> MPC dataset -> certified fit -> baseline gain ->
closed-loop evaluation of both gains (and the MPC itself) on every
``(x_init, x_ref)`` pair -> report, per-case table and figure data.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import config as cfg
from .certify import K_BASE_REFERENCE, Gain, certify_gain
from .model import MAX_STEPS, STOP_TOL, STOP_WINDOW, PlantParams, build_plant, simulate
from .mpc import GRAD_TOL, MAX_ITER, MPC_MAX_STEPS, N_RANDOM, generate_dataset
from .synthesis import LqrWeights, fit_gain, lqr_gain

log = logging.getLogger(__name__)

# A run is "stuck" when the stop rule fires while the state sits on the
# current limit far from the reference. The stop rule itself halts at an
# error of about stop_tol / (1 - sigma), so the error threshold must sit
# well above that.
STUCK_ERROR = 1e-2
BOUNDARY_TOL = 1e-6


# --- grids -------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    radii: tuple
    angles: tuple
    angle_offset: float = math.pi / 4
    dedupe_origin: bool = False

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if any(r < 0 for r in self.radii):
            raise ValueError("radii must be >= 0")
        if any(not 0.0 <= a < 2.0 * math.pi for a in self.angles):
            raise ValueError("angles must lie in [0, 2*pi)")

    @classmethod
    def polar(cls, r_max, n_radii=3, n_angles=4, angle_offset=math.pi / 4, dedupe_origin=False):
        """``n_radii`` radii from 0 to ``r_max`` and ``n_angles`` equally spaced angles."""
        step = 2.0 * math.pi / n_angles
        return cls(
            radii=np.linspace(0.0, r_max, n_radii),
            angles=np.linspace(0.0, 2.0 * math.pi - step, n_angles),
            angle_offset=angle_offset,
            dedupe_origin=dedupe_origin,
        )


def build_grid(spec):
    """Points ``r (cos(theta + offset), sin(theta + offset))``, radius-major order."""
    pts = []
    origin_seen = False
    for r in spec.radii:
        for a in spec.angles:
            if r == 0.0 and spec.dedupe_origin:
                if origin_seen:
                    continue
                origin_seen = True
            c = a + spec.angle_offset
            pts.append((r * math.cos(c), r * math.sin(c)))
    return np.array(pts, dtype=float).reshape(-1, 2)


def grid_cases(init_grid, ref_grid):
    return [(x0, xr) for x0 in init_grid for xr in ref_grid]


# --- evaluation --------------------------------------------------------------


@dataclass
class CaseRecord:
    case: int
    controller: str
    x_init: tuple
    x_ref: tuple
    converged: bool
    stuck: bool
    cost: float
    settle_steps: int
    steps: int
    final_error: float

    CSV_HEADER = (
        "case", "controller", "x_init_d", "x_init_q", "x_ref_d", "x_ref_q",
        "converged", "stuck", "cost", "settle_steps", "steps", "final_error",
    )

    def csv_row(self):
        return [
            self.case, self.controller, repr(self.x_init[0]), repr(self.x_init[1]),
            repr(self.x_ref[0]), repr(self.x_ref[1]), int(self.converged), int(self.stuck),
            repr(self.cost), self.settle_steps, self.steps, repr(self.final_error),
        ]


@dataclass
class ExperimentReport:
    records: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict, repr=False)  # (controller, case) -> Trajectory

    def controllers(self):
        seen = []
        for r in self.records:
            if r.controller not in seen:
                seen.append(r.controller)
        return seen

    def merge(self, other):
        self.records.extend(other.records)
        self.trajectories.update(other.trajectories)
        return self

    def aggregates(self, dedupe=False):
        """Mean cost, stuck count and convergence count per controller.

        With ``dedupe`` each distinct ``(x_init, x_ref)`` pair counts once.
        """
        out = {}
        for name in self.controllers():
            recs = [r for r in self.records if r.controller == name]
            if dedupe:
                unique = {}
                for r in sorted(recs, key=lambda r: r.case):
                    unique.setdefault((r.x_init, r.x_ref), r)
                recs = list(unique.values())
            costs = sorted(r.cost for r in recs)  # sorted: sum independent of case order
            out[name] = {
                "cases": len(recs),
                "average_cost": math.fsum(costs) / len(costs) if costs else float("nan"),
                "stuck": sum(r.stuck for r in recs),
                "converged": sum(r.converged for r in recs),
            }
        return out

    def as_dict(self):
        return {
            "info": self.info,
            "aggregates": self.aggregates(),
            "aggregates_deduped": self.aggregates(dedupe=True),
            "stuck_cases": {
                name: [r.case for r in sorted(self.records, key=lambda r: r.case) if r.controller == name and r.stuck]
                for name in self.controllers()
            },
        }

    def to_json(self):
        return json.dumps(_plain(self.as_dict()), indent=2, sort_keys=True)

    def write_cases_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CaseRecord.CSV_HEADER)
            for r in sorted(self.records, key=lambda r: (self.controllers().index(r.controller), r.case)):
                w.writerow(r.csv_row())


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def is_stuck(traj, i_max, stuck_error=STUCK_ERROR, boundary_tol=BOUNDARY_TOL):
    """Stopped by the stop rule on the current limit, away from the reference."""
    x = traj.final_state
    on_limit = math.hypot(x[0], x[1]) >= i_max * (1.0 - boundary_tol)
    return bool(traj.converged and traj.error > stuck_error and on_limit)


def record_for(traj, case, controller, x_init, weights, i_max, stuck_error=STUCK_ERROR, boundary_tol=BOUNDARY_TOL):
    stuck = is_stuck(traj, i_max, stuck_error, boundary_tol)
    return CaseRecord(
        case=case,
        controller=controller,
        x_init=tuple(float(v) for v in x_init),
        x_ref=tuple(float(v) for v in traj.x_ref),
        converged=bool(traj.converged and traj.error <= stuck_error),
        stuck=stuck,
        cost=traj.cost(weights.Q, weights.R_cost),
        settle_steps=int(traj.settled_at),
        steps=len(traj),
        final_error=traj.error,
    )


def _evaluate_chunk(args):
    plant, K, chunk, weights, name, sim_kw, stuck_kw, keep = args
    rep = ExperimentReport()
    for case, (x0, xr) in chunk:
        traj = simulate(plant, K, x0, xr, **sim_kw)
        rep.records.append(record_for(traj, case, name, x0, weights, plant.i_max, **stuck_kw))
        if keep:
            rep.trajectories[(name, case)] = traj
    return rep


def evaluate_controller(
    plant,
    gain,
    cases,
    weights,
    name="K",
    stop_tol=STOP_TOL,
    stop_window=STOP_WINDOW,
    max_steps=MAX_STEPS,
    stuck_error=STUCK_ERROR,
    boundary_tol=BOUNDARY_TOL,
    jobs=1,
    keep_trajectories=False,
):
    """Simulate ``gain`` on every case and collect costs and stuck flags."""
    if len(cases) == 0:
        raise ValueError("no cases to evaluate")
    K = np.asarray(getattr(gain, "K", gain), dtype=float)
    sim_kw = {"stop_tol": stop_tol, "stop_window": stop_window, "max_steps": max_steps}
    stuck_kw = {"stuck_error": stuck_error, "boundary_tol": boundary_tol}
    indexed = list(enumerate(cases))
    jobs = max(1, int(jobs))
    chunks = [indexed[k::jobs] for k in range(jobs)]
    tasks = [(plant, K, c, weights, name, sim_kw, stuck_kw, keep_trajectories) for c in chunks if c]
    if len(tasks) == 1:
        parts = [_evaluate_chunk(tasks[0])]
    else:
        with ProcessPoolExecutor(max_workers=len(tasks)) as pool:
            parts = list(pool.map(_evaluate_chunk, tasks))
    report = ExperimentReport()
    for p in parts:
        report.merge(p)
    report.records.sort(key=lambda r: r.case)
    return report


def evaluate_mpc(plant, weights, cases, mpc_trajectories, name="MPC", stuck_error=STUCK_ERROR,
                 boundary_tol=BOUNDARY_TOL, keep_trajectories=False):
    """Records for closed-loop MPC runs already computed (one per case)."""
    report = ExperimentReport()
    for case, ((x0, _), traj) in enumerate(zip(cases, mpc_trajectories)):
        report.records.append(record_for(traj, case, name, x0, weights, plant.i_max, stuck_error, boundary_tol))
        if keep_trajectories:
            report.trajectories[(name, case)] = traj
    return report


# --- plot data ---------------------------------------------------------------


def _wide_csv(path, trajectories, labels, columns, dt):
    """One row per step; series shorter than the longest leave blank cells."""
    if len(trajectories) != len(labels):
        raise ValueError("need one label per trajectory")
    header = ["step", "t"]
    for lab in labels:
        header += [f"{lab}_{c}" for c, _ in columns]
    n = max((len(tr) for tr in trajectories), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header if labels else ["step", "t"])
        cols = [[fn(tr) for _, fn in columns] for tr in trajectories]
        for k in range(n):
            row = [k, repr(k * dt)]
            for tr, vals in zip(trajectories, cols):
                row += [repr(float(v[k])) if k < len(tr) else "" for v in vals]
            w.writerow(row)


ERROR_COLUMNS = (
    ("abs_di_d", lambda tr: np.abs(tr.states[:, 0] - tr.x_ref[0])),
    ("abs_di_q", lambda tr: np.abs(tr.states[:, 1] - tr.x_ref[1])),
)
INPUT_COLUMNS = (
    ("dv", lambda tr: tr.inputs[:, 0] - tr.u_ref[0]),
    ("ddelta", lambda tr: tr.inputs[:, 1] - tr.u_ref[1]),
)


def emit_plotdata(trajectories, labels, out_dir, dt=10e-6, prefix=("fig2", "fig3")):
    """Write the tracking-error and input-deviation tables; returns the two paths."""
    err_path = os.path.join(out_dir, f"{prefix[0]}.csv")
    inp_path = os.path.join(out_dir, f"{prefix[1]}.csv")
    _wide_csv(err_path, trajectories, labels, ERROR_COLUMNS, dt)
    _wide_csv(inp_path, trajectories, labels, INPUT_COLUMNS, dt)
    return err_path, inp_path


# --- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    Q: str = "1 0.1"
    R_cost: str = "5B"
    r_max: float = None  # None: the plant's current limit
    n_radii: int = 3
    n_angles: int = 4
    angle_offset: float = math.pi / 4
    dedupe_origin: bool = False
    horizon: int = 5
    n_random: int = N_RANDOM
    mpc_max_steps: int = MPC_MAX_STEPS
    mpc_tol: float = GRAD_TOL
    mpc_max_iter: int = MAX_ITER
    fit_margin: float = 1e-6
    stop_tol: float = STOP_TOL
    stop_window: int = STOP_WINDOW
    max_steps: int = MAX_STEPS
    stuck_error: float = STUCK_ERROR
    boundary_tol: float = BOUNDARY_TOL
    baseline: str = "reference"  # "reference": printed LQR gain; "lqr": recomputed on this plant
    seed: int = 0
    plots: bool = True

    # section -> {file key: (attribute, parser)}
    KEYS = {
        "weights": {"Q": ("Q", str), "R_cost": ("R_cost", str)},
        "grid": {
            "r_max": ("r_max", float),
            "n_radii": ("n_radii", int),
            "n_angles": ("n_angles", int),
            "angle_offset": ("angle_offset", float),
            "dedupe_origin": ("dedupe_origin", cfg.parse_bool),
        },
        "mpc": {
            "horizon": ("horizon", int),
            "n_random": ("n_random", int),
            "max_steps": ("mpc_max_steps", int),
            "tol": ("mpc_tol", float),
            "max_iter": ("mpc_max_iter", int),
        },
        "fit": {"margin": ("fit_margin", float)},
        "thresholds": {
            "stop_tol": ("stop_tol", float),
            "stop_window": ("stop_window", int),
            "max_steps": ("max_steps", int),
            "stuck_error": ("stuck_error", float),
            "boundary_tol": ("boundary_tol", float),
        },
        "experiment": {
            "baseline": ("baseline", str),
            "seed": ("seed", int),
            "plots": ("plots", cfg.parse_bool),
        },
    }

    @classmethod
    def from_sections(cls, sections):
        out = cls()
        if "plant" in sections:
            out.plant = PlantParams.from_mapping(sections["plant"])
        for name, values in sections.items():
            if name == "plant":
                continue
            if name == cfg.ROOT:
                if values:
                    raise ValueError(f"keys outside any section: {sorted(values)}")
                continue
            keys = cls.KEYS.get(name)
            if keys is None:
                raise ValueError(f"unknown config section [{name}]")
            for key, raw in values.items():
                if key not in keys:
                    raise ValueError(f"unknown key {key!r} in [{name}]")
                attr, parse = keys[key]
                setattr(out, attr, parse(raw))
        return out.validate()

    @classmethod
    def from_file(cls, path):
        return cls.from_sections(cfg.read_sections(path))

    def validate(self):
        if self.baseline not in ("reference", "lqr"):
            raise ValueError(f"baseline must be 'reference' or 'lqr', got {self.baseline!r}")
        if self.n_radii < 2 or self.n_angles < 1:
            raise ValueError("grid needs n_radii >= 2 and n_angles >= 1")
        self.plant.validate()
        self.weights(build_plant(self.plant))
        return self

    def weights(self, plant):
        return LqrWeights.parse(plant, self.Q, self.R_cost)

    def grid_spec(self):
        r_max = self.plant.I_max if self.r_max is None else self.r_max
        return GridSpec.polar(r_max, self.n_radii, self.n_angles, self.angle_offset, self.dedupe_origin)

    def as_dict(self):
        d = asdict(self)
        d["plant"] = asdict(self.plant)
        return d


# --- pipeline ----------------------------------------------------------------


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _gain_json(gain, plant):
    rep = certify_gain(plant, gain.K)
    d = json.loads(gain.to_json())
    d["check"] = rep.as_dict()
    return json.dumps(_plain(d), indent=2, sort_keys=True) + "\n"


def figure_case(config):
    """Origin to the grid point at full radius and zero angle (the stuck example)."""
    spec = config.grid_spec()
    c = spec.angles[0] + spec.angle_offset
    r = max(spec.radii)
    return np.zeros(2), np.array([r * math.cos(c), r * math.sin(c)])


def run_full_experiment(config, out_dir, seed=None, jobs=1):
    """Run the whole pipeline and write its artifacts into ``out_dir``.

    Returns ``(report, fit_gain)``. A failing stage raises
    :class:`StageError` after writing ``failure.json`` next to whatever
    artifacts were already produced.
    """
    os.makedirs(out_dir, exist_ok=True)
    if os.path.exists(os.path.join(out_dir, "failure.json")):
        os.remove(os.path.join(out_dir, "failure.json"))
    seed = config.seed if seed is None else int(seed)
    stage = "setup"

    def path(name):
        return os.path.join(out_dir, name)

    try:
        plant = build_plant(config.plant)
        weights = config.weights(plant)

        stage = "grid"
        grid = build_grid(config.grid_spec())
        cases = grid_cases(grid, grid)
        log.info("grid: %d points, %d cases", len(grid), len(cases))

        stage = "dataset"
        dataset, mpc_trajs = generate_dataset(
            plant, weights, grid, grid, config.horizon, seed,
            n_random=config.n_random, max_steps=config.mpc_max_steps,
            tol=config.mpc_tol, max_iter=config.mpc_max_iter,
            stop_tol=config.stop_tol, stop_window=config.stop_window,
        )
        dataset.write_csv(path("dataset.csv"))
        log.info("dataset: %d samples", len(dataset))

        stage = "fit"
        fitted, fit_info = fit_gain(plant, dataset, margin=config.fit_margin, return_info=True)
        with open(path("gain_fit.json"), "w") as fh:
            fh.write(_gain_json(fitted, plant))
        if fitted.certificate is None:
            raise RuntimeError("fitted gain failed certification")

        stage = "baseline"
        lqr = lqr_gain(plant, weights)
        base = Gain(K_BASE_REFERENCE) if config.baseline == "reference" else lqr
        with open(path("gain_base.json"), "w") as fh:
            fh.write(_gain_json(base, plant))

        stage = "evaluate"
        ev = {
            "stop_tol": config.stop_tol, "stop_window": config.stop_window, "max_steps": config.max_steps,
            "stuck_error": config.stuck_error, "boundary_tol": config.boundary_tol, "jobs": jobs,
        }
        fig_x0, fig_ref = figure_case(config)
        fig_idx = next(
            k for k, (x0, xr) in enumerate(cases) if np.allclose(x0, fig_x0) and np.allclose(xr, fig_ref)
        )
        report = evaluate_controller(plant, fitted, cases, weights, "K_fit", keep_trajectories=True, **ev)
        report.merge(evaluate_controller(plant, base, cases, weights, "K_base", keep_trajectories=True, **ev))
        report.merge(evaluate_mpc(plant, weights, cases, mpc_trajs, "MPC", config.stuck_error,
                                  config.boundary_tol, keep_trajectories=True))
        agg = report.aggregates()
        report.info = {
            "config": config.as_dict(),
            "seed": seed,
            "grid": grid.tolist(),
            "n_cases": len(cases),
            "dataset_samples": len(dataset),
            "dataset_failures": dataset.provenance.get("failures", []),
            "fit": {
                "K": fitted.K.tolist(),
                "sigma_closed": fitted.certificate.sigma_closed,
                "objective": fit_info.objective,
                "constrained": fit_info.constrained,
                "iterations": fit_info.iterations,
            },
            "baseline": {
                "source": config.baseline,
                "K": base.K.tolist(),
                "check": certify_gain(plant, base.K).as_dict(),
            },
            "lqr_recomputed": {"K": lqr.K.tolist(), "check": certify_gain(plant, lqr.K).as_dict()},
            "cost_ratio_fit_over_base": (
                agg["K_fit"]["average_cost"] / agg["K_base"]["average_cost"]
                if agg["K_base"]["average_cost"] > 0 else None
            ),
            "figure_case": {"case": fig_idx, "x_init": fig_x0.tolist(), "x_ref": fig_ref.tolist()},
        }
        with open(path("report.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        report.write_cases_csv(path("cases.csv"))

        stage = "plotdata"
        labels = ["K_base", "K_fit", "MPC"]
        trajs = [report.trajectories[(lab, fig_idx)] for lab in labels]
        emit_plotdata(trajs, labels, out_dir, dt=config.plant.dt)
        if config.plots:
            from . import plotting

            plotting.error_figure(trajs, labels, path("fig2.png"), dt=config.plant.dt)
            plotting.input_figure(trajs, labels, path("fig3.png"), dt=config.plant.dt)
    except Exception as exc:
        with open(path("failure.json"), "w") as fh:
            json.dump({"stage": stage, "error": f"{type(exc).__name__}: {exc}"}, fh, indent=2)
        raise StageError(stage, exc) from exc
    return report, fitted
