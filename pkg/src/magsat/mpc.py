"""Saturated finite-horizon optimal control and rolling-horizon MPC.

The optimal control problem over inputs ``u[0..T-1]`` (deviations from the
equilibrium input of ``x_ref``) is::

    minimise  sum_{i<T} u[i]' R u[i] + (x[i+1] - x_ref)' Q (x[i+1] - x_ref)
    s.t.      x[i+1] = sat(x_ref + A (x[i] - x_ref) + B u[i]),  x[0] = x_init

It is nonconvex because of the radial saturation. We solve it by direct
shooting: the gradient comes from a reverse sweep through the
piecewise-smooth dynamics and the descent direction is ``-R^{-1} grad``
(gradient descent in coordinates where the input cost is the identity),
with Armijo backtracking and several starting points.

All routines are vectorised over a leading batch axis so many problems
(cases x restarts) advance in lockstep.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import STOP_TOL, STOP_WINDOW, DomainError, Trajectory, equilibrium_input
from .synthesis import Dataset, SolverError, lqr_gain

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_ITER = 200
ARMIJO_C = 1e-4
MAX_BACKTRACK = 50
ROUNDOFF = 1e-13
N_RANDOM = 3
PERTURB_SCALE = 1.0
MPC_MAX_STEPS = 20_000


@dataclass
class OcpSpec:
    plant: object
    horizon: int
    weights: object
    x_init: np.ndarray
    x_ref: np.ndarray

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        self.horizon = int(self.horizon)
        self.x_init = np.asarray(self.x_init, dtype=float)
        self.x_ref = np.asarray(self.x_ref, dtype=float)


@dataclass
class OcpSolution:
    inputs: np.ndarray  # (T, 2) deviations from the equilibrium input
    states: np.ndarray  # (T+1, 2)
    objective: float
    iterations: int
    restarts: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


# --- batched dynamics, cost and gradient -------------------------------------


def rollout(plant, x0, x_ref, U):
    """States ``(N, T+1, 2)`` and pre-saturation states ``(N, T, 2)``."""
    N, T, _ = U.shape
    X = np.empty((N, T + 1, 2))
    Z = np.empty((N, T, 2))
    X[:, 0] = x0
    At, Bt, lim = plant.A.T, plant.B.T, plant.i_max
    for i in range(T):
        z = x_ref + (X[:, i] - x_ref) @ At + U[:, i] @ Bt
        Z[:, i] = z
        n = np.sqrt(np.einsum("ij,ij->i", z, z))
        scale = np.where(n > lim, lim / np.where(n > 0, n, 1.0), 1.0)
        X[:, i + 1] = z * scale[:, None]
    return X, Z


def objective(weights, x_ref, X, U):
    dx = X[:, 1:] - x_ref[:, None, :]
    return np.einsum("nti,ij,ntj->n", dx, weights.Q, dx) + np.einsum("nti,ij,ntj->n", U, weights.R_cost, U)


def gradient(plant, weights, x_ref, X, Z, U):
    """Reverse sweep for d objective / d U, shape ``(N, T, 2)``.

    The saturation Jacobian is the identity strictly inside the disk and
    ``(lim/|z|) (I - z z'/|z|^2)`` on or outside the circle.
    """
    N, T, _ = U.shape
    Q2, R2 = 2.0 * weights.Q, 2.0 * weights.R_cost
    A, B, lim = plant.A, plant.B, plant.i_max
    G = np.empty_like(U)
    lam = (X[:, T] - x_ref) @ Q2  # Q symmetric
    for i in range(T - 1, -1, -1):
        z = Z[:, i]
        n2 = np.einsum("ij,ij->i", z, z)
        n = np.sqrt(n2)
        out = n >= lim
        if np.any(out):
            zl = np.einsum("ij,ij->i", z, lam)
            safe = np.where(out, n, 1.0)
            proj = (lam - z * (zl / np.where(out, n2, 1.0))[:, None]) * (lim / safe)[:, None]
            lam = np.where(out[:, None], proj, lam)
        G[:, i] = U[:, i] @ R2 + lam @ B
        if i > 0:
            lam = (X[:, i] - x_ref) @ Q2 + lam @ A
    return G


def _solve_lockstep(plant, weights, x0, x_ref, U0, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Descend every problem in the batch until its gradient norm is below ``tol``.

    Returns ``(U, f, iterations, converged, failed)`` where ``failed`` marks
    problems whose very first line search found no decrease.
    """
    U = np.array(U0, dtype=float)
    N = len(U)
    Rinv = np.linalg.inv(weights.R_cost)
    X, Z = rollout(plant, x0, x_ref, U)
    f = objective(weights, x_ref, X, U)
    iters = np.zeros(N, dtype=int)
    converged = np.zeros(N, dtype=bool)
    failed = np.zeros(N, dtype=bool)
    active = np.arange(N)
    for _ in range(max_iter + 1):
        if active.size == 0:
            break
        xa, ra, Ua = x0[active], x_ref[active], U[active]
        Xa, Za = rollout(plant, xa, ra, Ua)
        g = gradient(plant, weights, ra, Xa, Za, Ua)
        gnorm = np.sqrt(np.einsum("nti,nti->n", g, g))
        done = gnorm < tol
        converged[active[done]] = True
        keep = ~done & (iters[active] < max_iter)
        active, xa, ra, Ua, g = active[keep], xa[keep], ra[keep], Ua[keep], g[keep]
        if active.size == 0:
            break
        d = -(g @ Rinv)  # R symmetric: rows of g times R^{-1}
        slope = np.einsum("nti,nti->n", g, d)
        fa = f[active]
        alpha = np.full(active.size, 0.5)
        accepted = np.zeros(active.size, dtype=bool)
        U_new = Ua.copy()
        f_new = fa.copy()
        # Below the objective's rounding resolution a decrease test is
        # meaningless; take the step (the gradient test still governs).
        tiny = -0.5 * slope <= ROUNDOFF * np.maximum(np.abs(fa), 1.0)
        if np.any(tiny):
            trial = Ua[tiny] + 0.5 * d[tiny]
            Xt, _ = rollout(plant, xa[tiny], ra[tiny], trial)
            U_new[tiny] = trial
            f_new[tiny] = objective(weights, ra[tiny], Xt, trial)
            accepted[tiny] = True
        pending = np.flatnonzero(~tiny)
        for _ in range(MAX_BACKTRACK):
            if pending.size == 0:
                break
            trial = Ua[pending] + alpha[pending, None, None] * d[pending]
            Xt, _ = rollout(plant, xa[pending], ra[pending], trial)
            ft = objective(weights, ra[pending], Xt, trial)
            ok = ft <= fa[pending] + ARMIJO_C * alpha[pending] * slope[pending]
            idx = pending[ok]
            U_new[idx] = trial[ok]
            f_new[idx] = ft[ok]
            accepted[idx] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        U[active] = U_new
        f[active] = f_new
        iters[active[accepted]] += 1
        stalled = ~accepted
        failed[active[stalled & (iters[active] == 0)]] = True
        active = active[accepted]
    return U, f, iters, converged, failed


def finite_horizon_policy_inputs(plant, K, x0, x_ref, horizon):
    """Roll the static policy ``u = -K dx`` through the saturated dynamics."""
    N = len(x0)
    U = np.empty((N, horizon, 2))
    x = np.array(x0, dtype=float)
    At, Bt, lim = plant.A.T, plant.B.T, plant.i_max
    for i in range(horizon):
        u = -(x - x_ref) @ K.T
        U[:, i] = u
        z = x_ref + (x - x_ref) @ At + u @ Bt
        n = np.sqrt(np.einsum("ij,ij->i", z, z))
        x = z * np.where(n > lim, lim / np.where(n > 0, n, 1.0), 1.0)[:, None]
    return U


class _Starts:
    """Builds the restart set for a batch of problems."""

    def __init__(self, plant, weights, horizon, n_random=N_RANDOM, scale=PERTURB_SCALE):
        self.plant, self.weights, self.horizon = plant, weights, horizon
        self.n_random, self.scale = n_random, scale
        self.K_lqr = lqr_gain(plant, weights).K
        # u = C^{-T} w with R = C C' turns unit-variance w into inputs of unit cost
        C = np.linalg.cholesky(weights.R_cost)
        self.CinvT = np.linalg.inv(C).T

    def build(self, x0, x_ref, rngs, warm=None):
        """Starts of shape ``(N, S, T, 2)``: [warm], zero, LQR policy, random."""
        N, T = len(x0), self.horizon
        lqr = finite_horizon_policy_inputs(self.plant, self.K_lqr, x0, x_ref, T)
        starts = []
        if warm is not None:
            starts.append(warm)
        starts.append(np.zeros((N, T, 2)))
        starts.append(lqr)
        if self.n_random:
            noise = np.stack([rng.standard_normal((self.n_random, T, 2)) for rng in rngs])
            noise = self.scale * noise @ self.CinvT.T
            for k in range(self.n_random):
                starts.append(lqr + noise[:, k])
        return np.stack(starts, axis=1)


def solve_batch(plant, weights, x0, x_ref, starts, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Solve N problems from S starts each; keep the best local optimum.

    ``starts`` has shape ``(N, S, T, 2)``. Returns the best inputs
    ``(N, T, 2)``, objectives, iteration counts and convergence flags.
    """
    N, S, T, _ = starts.shape
    xs = np.repeat(x0, S, axis=0)
    rs = np.repeat(x_ref, S, axis=0)
    U, f, iters, conv, failed = _solve_lockstep(plant, weights, xs, rs, starts.reshape(N * S, T, 2), tol, max_iter)
    f = f.reshape(N, S)
    # prefer converged starts; among those the lowest objective
    score = np.where(conv.reshape(N, S), f, f + np.abs(f) * 1e-9 + 1e-300)
    best = np.argmin(score, axis=1)
    flat = np.arange(N) * S + best
    all_failed = failed.reshape(N, S).all(axis=1)
    return U[flat], f.reshape(-1)[flat], iters[flat], conv[flat], all_failed


def solve_ocp(spec, warm=None, seed=0, n_random=N_RANDOM, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Locally optimal inputs for the saturated problem, best of several starts."""
    plant, T = spec.plant, spec.horizon
    x0 = spec.x_init[None, :]
    xr = spec.x_ref[None, :]
    starts = _Starts(plant, spec.weights, T, n_random).build(
        x0, xr, [np.random.default_rng(seed)], None if warm is None else np.asarray(warm, float)[None]
    )
    U, f, iters, conv, failed = solve_batch(plant, spec.weights, x0, xr, starts, tol, max_iter)
    if failed[0]:
        raise SolverError("line search failed from every start", {"objective": float(f[0])})
    X, _ = rollout(plant, x0, xr, U)
    return OcpSolution(
        inputs=U[0],
        states=X[0],
        objective=float(f[0]),
        iterations=int(iters[0]),
        restarts=starts.shape[1],
        converged=bool(conv[0]),
    )


# --- closed loop -------------------------------------------------------------


@dataclass
class _CaseState:
    x: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    rng: np.random.Generator
    warm: np.ndarray = None
    quiet: int = 0
    done: bool = False
    converged: bool = False
    rows: list = field(default_factory=list)
    nonconverged_solves: int = 0
    error: str = ""


def run_mpc_batch(
    plant,
    weights,
    cases,
    horizon=5,
    stop_tol=STOP_TOL,
    stop_window=STOP_WINDOW,
    max_steps=MPC_MAX_STEPS,
    seeds=None,
    n_random=N_RANDOM,
    tol=GRAD_TOL,
    max_iter=MAX_ITER,
):
    """Rolling-horizon MPC for many ``(x_init, x_ref)`` cases in lockstep.

    Each step solves the finite-horizon problem from the current state,
    applies the first input and warm-starts the next solve with the
    previous solution shifted by one (zero input appended). Returns one
    :class:`Trajectory` per case in the input order.
    """
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    starts_builder = _Starts(plant, weights, horizon, n_random)
    seeds = seeds if seeds is not None else [(0, k) for k in range(len(cases))]
    states = []
    for (x0, xr), seed in zip(cases, seeds):
        xr = np.asarray(xr, dtype=float)
        states.append(
            _CaseState(
                x=np.asarray(x0, dtype=float).copy(),
                x_ref=xr,
                u_ref=equilibrium_input(plant, xr),
                rng=np.random.default_rng(list(np.atleast_1d(seed))),
            )
        )
    tol2 = stop_tol * stop_tol
    step = 0
    while True:
        live = [c for c in states if not c.done]
        if not live:
            break
        x0 = np.array([c.x for c in live])
        xr = np.array([c.x_ref for c in live])
        warm = np.array([c.warm if c.warm is not None else np.zeros((horizon, 2)) for c in live])
        starts = starts_builder.build(x0, xr, [c.rng for c in live], warm)
        U, f, _, conv, failed = solve_batch(plant, weights, x0, xr, starts, tol, max_iter)
        for k, c in enumerate(live):
            if failed[k]:
                c.done = True
                c.error = f"line search failed from every start at step {step}"
                continue
            if not conv[k]:
                c.nonconverged_solves += 1
            du = U[k, 0]
            u = c.u_ref + du
            z = plant.A @ c.x + plant.B @ u
            n = float(np.hypot(z[0], z[1]))
            clipped = n > plant.i_max
            x_next = z * (plant.i_max / n) if clipped else z
            c.rows.append((c.x.copy(), u, clipped, z))
            if c.converged or step >= max_steps:
                c.done = True
                continue
            dd = x_next - c.x
            c.quiet = c.quiet + 1 if dd @ dd < tol2 else 0
            c.x = x_next
            c.warm = np.concatenate([U[k, 1:], np.zeros((1, 2))])
            if c.quiet >= stop_window:
                c.converged = True
        step += 1

    out = []
    for c in states:
        if not c.rows:
            raise SolverError(c.error or "MPC produced no steps")
        traj = Trajectory(
            states=np.array([r[0] for r in c.rows]),
            inputs=np.array([r[1] for r in c.rows]),
            saturated=np.array([r[2] for r in c.rows], dtype=bool),
            presat=np.array([r[3] for r in c.rows]),
            x_ref=c.x_ref,
            u_ref=c.u_ref,
            converged=c.converged,
            settled_at=len(c.rows) - 1 - stop_window if c.converged else -1,
            meta={"nonconverged_solves": c.nonconverged_solves, "error": c.error},
        )
        out.append(traj)
    return out


def run_mpc(plant, weights, x_init, x_ref, horizon=5, stop_tol=STOP_TOL, stop_window=STOP_WINDOW,
            max_steps=MPC_MAX_STEPS, seed=0, **kwargs):
    """Closed-loop MPC for a single case; see :func:`run_mpc_batch`."""
    traj = run_mpc_batch(
        plant, weights, [(x_init, x_ref)], horizon, stop_tol, stop_window, max_steps, seeds=[seed], **kwargs
    )[0]
    if traj.meta.get("error"):
        raise SolverError(traj.meta["error"])
    return traj


def trajectory_samples(traj, traj_id=0):
    """Dataset rows ``(x[t] - x_ref, u[t] - u_ref)`` for every recorded step."""
    n = len(traj)
    return Dataset(
        dx=traj.states - traj.x_ref,
        u=traj.inputs - traj.u_ref,
        traj_id=np.full(n, traj_id),
        t=np.arange(n),
    )


def generate_dataset(plant, weights, init_grid, ref_grid, horizon=5, seed=0, **mpc_kwargs):
    """Run MPC over the Cartesian product of the grids and pool the samples.

    Cases are numbered ``i * len(ref_grid) + j`` for ``init_grid[i]`` and
    ``ref_grid[j]``; the random restarts of each case are seeded from
    ``(seed, i, j)``. Failed cases are recorded in the provenance and
    skipped. Returns ``(dataset, trajectories)``.
    """
    if len(init_grid) == 0 or len(ref_grid) == 0:
        raise DomainError("grids must be nonempty")
    cases, seeds, index = [], [], []
    for i, x0 in enumerate(init_grid):
        for j, xr in enumerate(ref_grid):
            cases.append((x0, xr))
            seeds.append((seed, i, j))
            index.append((i, j))
    trajs = run_mpc_batch(plant, weights, cases, horizon, seeds=seeds, **mpc_kwargs)
    parts, failures, provenance = [], [], {"cases": {}}
    for k, (traj, (i, j)) in enumerate(zip(trajs, index)):
        provenance["cases"][k] = {"init_index": i, "ref_index": j, "steps": len(traj), "converged": traj.converged}
        if traj.meta.get("error"):
            failures.append({"traj_id": k, "error": traj.meta["error"]})
            log.warning("case %d skipped: %s", k, traj.meta["error"])
            continue
        parts.append(trajectory_samples(traj, k))
    provenance["failures"] = failures
    return Dataset.concat(parts, provenance), trajs
