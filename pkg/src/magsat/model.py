"""Simplified dq-frame inverter model with a current-magnitude limit.

The plant is the forward-Euler discretisation of an RL filter seen from
the inverter, with states ``x = (i_d, i_q)`` in amperes and inputs
``u = (v, delta)`` (voltage magnitude in volts, angle in radians)::

    x[t+1] = sat(A @ x[t] + B @ u[t])

where ``sat`` radially projects onto the disk of radius ``i_max``.
"""

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .config import read_sections


class DomainError(ValueError):
    """Invalid physical parameters or non-finite inputs."""


SQRT2 = math.sqrt(2.0)
POWER_SCALE = 3.0 / SQRT2  # P = POWER_SCALE * V_nom * i_d


@dataclass(frozen=True)
class PlantParams:
    """Physical constants of the simplified model (SI units).

    Defaults are the 1.5 kVA, 120 V inverter used throughout the package.
    ``S_nom`` and ``I_nom`` are informational only.
    """

    R: float = 1.3
    L: float = 3.5e-3
    E: float = 120.0
    omega_nom: float = 2.0 * math.pi * 60.0
    V_nom: float = 120.0
    dt: float = 10e-6
    I_max: float = 4.167
    S_nom: float = 1500.0
    I_nom: float = 4.167

    # parameter-file key for each field (plain class attribute, not a field)
    FILE_KEYS = {
        "R": "R_ohm",
        "L": "L_H",
        "E": "E_V",
        "omega_nom": "omega_nom_rad_s",
        "V_nom": "V_nom_V",
        "dt": "dt_s",
        "I_max": "I_max_A",
        "S_nom": "S_nom_VA",
        "I_nom": "I_nom_A",
    }

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise DomainError(f"{f.name} must be finite, got {value}")
        if self.R < 0:
            raise DomainError(f"R must be >= 0, got {self.R}")
        for name in ("L", "E", "dt", "I_max"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.dt * self.R / self.L >= 1:
            raise DomainError(f"dt*R/L = {self.dt * self.R / self.L:.3g} must be < 1 (dt too large)")
        if self.dt * abs(self.omega_nom) >= 1:
            raise DomainError(f"dt*omega_nom = {self.dt * self.omega_nom:.3g} must be < 1 (dt too large)")
        return self

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return PlantParams(**values)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a ``{file_key: value}`` mapping; missing keys keep defaults."""
        known = {v: k for k, v in cls.FILE_KEYS.items()}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise DomainError(f"unknown plant parameter {key!r}")
            kwargs[known[key]] = float(value)
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path, section="plant"):
        """Load from a key=value file, flat or with a ``[plant]`` section."""
        sections = read_sections(path)
        mapping = dict(sections.get("root", {}))
        mapping.update(sections.get(section, {}))
        return cls.from_mapping(mapping)

    def to_text(self):
        return "".join(f"{key} = {getattr(self, name)!r}\n" for name, key in self.FILE_KEYS.items())


@dataclass(frozen=True)
class LinearPlant:
    A: np.ndarray
    B: np.ndarray
    i_max: float

    def __post_init__(self):
        object.__setattr__(self, "A", np.array(self.A, dtype=float))
        object.__setattr__(self, "B", np.array(self.B, dtype=float))
        object.__setattr__(self, "i_max", float(self.i_max))
        if self.A.shape != (2, 2) or self.B.shape != (2, 2):
            raise DomainError("A and B must be 2x2")
        if self.i_max <= 0:
            raise DomainError(f"i_max must be > 0, got {self.i_max}")

    def with_limit(self, i_max):
        return LinearPlant(self.A, self.B, i_max)


def clip_xy(zd, zq, limit):
    """Scalar kernel of :func:`saturate`: returns ``(zd, zq, clipped)``."""
    norm = math.hypot(zd, zq)
    if norm > limit:
        return zd * (limit / norm), zq * (limit / norm), True
    return zd, zq, False


def saturate(z, limit):
    """Radially project ``z`` onto the disk of radius ``limit``.

    >>> saturate([3.0, 4.0], 1.0)
    array([0.6, 0.8])
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError(f"cannot saturate non-finite vector {z}")
    if not limit > 0:
        raise DomainError(f"saturation limit must be > 0, got {limit}")
    zd, zq, _ = clip_xy(float(z[0]), float(z[1]), limit)
    return np.array([zd, zq])


def build_plant(params=None):
    """Discrete-time matrices for ``params`` (Table-I defaults when None).

    A = I - dt * [[R/L, w], [-w, R/L]] and B = dt * diag(sqrt2/L, sqrt2*E/L).
    """
    p = (params or PlantParams()).validate()
    decay = p.dt * p.R / p.L
    rot = p.dt * p.omega_nom
    A = np.array([[1.0 - decay, -rot], [rot, 1.0 - decay]])
    B = p.dt * np.diag([SQRT2 / p.L, SQRT2 * p.E / p.L])
    return LinearPlant(A, B, p.I_max)


def power_to_current(p_ref, q_ref, params=None):
    """Grid-side current set-point ``(i_d, i_q)`` for active/reactive power."""
    p = params or PlantParams()
    if not p.V_nom > 0:
        raise DomainError(f"V_nom must be > 0, got {p.V_nom}")
    scale = POWER_SCALE * p.V_nom
    return np.array([p_ref / scale, -q_ref / scale])


def current_to_power(x, params=None):
    p = params or PlantParams()
    scale = POWER_SCALE * p.V_nom
    return float(scale * x[0]), float(-scale * x[1])


def step(plant, x, u):
    """One step of the saturated dynamics; returns ``(x_next, clipped)``."""
    z = plant.A @ np.asarray(x, dtype=float) + plant.B @ np.asarray(u, dtype=float)
    clipped = math.hypot(z[0], z[1]) > plant.i_max
    return saturate(z, plant.i_max), clipped


def equilibrium_input(plant, x_ref):
    """Feed-forward input holding ``x_ref`` fixed: solves ``(I - A) x = B u``."""
    x_ref = np.asarray(x_ref, dtype=float)
    return np.linalg.solve(plant.B, (np.eye(2) - plant.A) @ x_ref)


@dataclass
class Trajectory:
    """Closed-loop run of the saturated system.

    Row ``t`` holds the state ``x[t]``, the input applied at ``t``, whether
    that step was clipped, the unsaturated successor ``A x[t] + B u[t]``
    (``presat``) and the Lyapunov value ``|x[t] - x_ref|^2``.
    """

    states: np.ndarray
    inputs: np.ndarray
    saturated: np.ndarray
    presat: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    converged: bool = False
    settled_at: int = -1
    meta: dict = field(default_factory=dict)

    CSV_HEADER = ("t", "i_d", "i_q", "v", "delta", "saturated", "lyapunov")

    def __len__(self):
        return len(self.states)

    @property
    def t(self):
        return np.arange(len(self.states))

    @property
    def lyapunov(self):
        d = self.states - self.x_ref
        return np.einsum("ij,ij->i", d, d)

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def error(self):
        """Euclidean tracking error of the final state."""
        return float(math.sqrt(self.lyapunov[-1]))

    def cost(self, Q, R):
        """Sum over rows of ``dx' Q dx + du' R du`` with deviations from the references."""
        dx = self.states - self.x_ref
        du = self.inputs - self.u_ref
        return float(np.einsum("ij,jk,ik->", dx, Q, dx) + np.einsum("ij,jk,ik->", du, R, du))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            for t, (x, u, s, v) in enumerate(zip(self.states, self.inputs, self.saturated, self.lyapunov)):
                w.writerow([t, repr(float(x[0])), repr(float(x[1])), repr(float(u[0])), repr(float(u[1])), int(s), repr(float(v))])


def read_trajectory_csv(path, x_ref=None, u_ref=None):
    """Read the CSV written by :meth:`Trajectory.write_csv`.

    ``presat`` is not serialised and comes back as NaN.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    states = np.array([[float(r["i_d"]), float(r["i_q"])] for r in rows]).reshape(-1, 2)
    inputs = np.array([[float(r["v"]), float(r["delta"])] for r in rows]).reshape(-1, 2)
    saturated = np.array([bool(int(r["saturated"])) for r in rows], dtype=bool)
    if x_ref is None:
        x_ref = states[-1] if len(states) else np.zeros(2)
    return Trajectory(
        states=states,
        inputs=inputs,
        saturated=saturated,
        presat=np.full_like(states, np.nan),
        x_ref=np.asarray(x_ref, dtype=float),
        u_ref=np.zeros(2) if u_ref is None else np.asarray(u_ref, dtype=float),
    )


STOP_TOL = 1e-5
STOP_WINDOW = 10
MAX_STEPS = 200_000


def simulate(
    plant,
    gain,
    x0,
    x_ref,
    u_ref=None,
    max_steps=MAX_STEPS,
    stop_tol=STOP_TOL,
    stop_window=STOP_WINDOW,
):
    """Run ``u = u_ref - K (x - x_ref)`` on the saturated plant.

    Stops once ``|x[t+1] - x[t]| < stop_tol`` for ``stop_window`` consecutive
    steps, or after ``max_steps``. ``u_ref`` defaults to the equilibrium
    input for ``x_ref``. The last row is the final state together with the
    input the controller would apply there.
    """
    if max_steps < 1:
        raise DomainError("max_steps must be >= 1")
    if not stop_tol > 0:
        raise DomainError("stop_tol must be > 0")
    K = np.asarray(getattr(gain, "K", gain), dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    u_ref = equilibrium_input(plant, x_ref) if u_ref is None else np.asarray(u_ref, dtype=float)

    # Scalar arithmetic: this loop dominates the experiment runtime and
    # 2x2 numpy calls are ~10x slower than plain floats here.
    (a11, a12), (a21, a22) = plant.A.tolist()
    (b11, b12), (b21, b22) = plant.B.tolist()
    (k11, k12), (k21, k22) = K.tolist()
    rd, rq = x_ref.tolist()
    ud, uq = u_ref.tolist()
    lim = plant.i_max
    tol2 = stop_tol * stop_tol

    n = max_steps + 1
    states = np.empty((n, 2))
    inputs = np.empty((n, 2))
    presat = np.empty((n, 2))
    saturated = np.zeros(n, dtype=bool)

    xd, xq = (float(v) for v in x0)
    quiet = 0
    converged = False
    t = 0
    while True:
        ed, eq = xd - rd, xq - rq
        v = ud - (k11 * ed + k12 * eq)
        d = uq - (k21 * ed + k22 * eq)
        zd = a11 * xd + a12 * xq + b11 * v + b12 * d
        zq = a21 * xd + a22 * xq + b21 * v + b22 * d
        states[t] = xd, xq
        inputs[t] = v, d
        presat[t] = zd, zq
        zd, zq, saturated[t] = clip_xy(zd, zq, lim)
        if t == max_steps or converged:
            break
        dd, dq = zd - xd, zq - xq
        quiet = quiet + 1 if dd * dd + dq * dq < tol2 else 0
        xd, xq = zd, zq
        t += 1
        if quiet >= stop_window:
            converged = True
    n = t + 1
    return Trajectory(
        states=states[:n].copy(),
        inputs=inputs[:n].copy(),
        saturated=saturated[:n].copy(),
        presat=presat[:n].copy(),
        x_ref=x_ref,
        u_ref=u_ref,
        converged=converged,
        settled_at=t - stop_window if converged else -1,
    )
