"""Twelve-state inverter model: PLL, cascaded voltage/current loops, LCL filter.

State ordering (also the CSV/array layout)::

    delta_pll, pi_pll, phi_d, phi_q, gamma_d, gamma_q,
    i_id, i_iq, w_d, w_q, i_gd, i_gq

All dq quantities are expressed in the PLL frame. Voltages are peak
values (the grid is ``sqrt(2) * E`` on the d-axis of its own frame).

The outer loop is the same static gain as the simplified model::

    [V, delta] = -K (i_g - i_ref) + [V*, delta*]

``delta`` is an angle relative to the grid; the voltage loop receives it
as ``delta_i = delta - delta_pll``, the same angle seen from the PLL frame.
The inverter-side current reference is limited radially by the same
``saturate`` used in the simplified model.
"""

import csv
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .config import read_sections
from .model import SQRT2, DomainError, PlantParams, build_plant, clip_xy, power_to_current, simulate

STATE_NAMES = (
    "delta_pll", "pi_pll", "phi_d", "phi_q", "gamma_d", "gamma_q",
    "i_id", "i_iq", "w_d", "w_q", "i_gd", "i_gq",
)
N_STATES = len(STATE_NAMES)
IDX = {name: k for k, name in enumerate(STATE_NAMES)}


# 100 kHz control update (dt = 10 us) treated as the switching-equivalent rate;
# current loop at a tenth of it, voltage loop a decade slower again.
CURRENT_BW = 2.0 * math.pi * 10000.0
VOLTAGE_BW = 2.0 * math.pi * 1000.0
VOLTAGE_ZETA = 1.0 / math.sqrt(2.0)
PLL_WN = 2.0 * math.pi * 20.0
PLL_ZETA = 0.707


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FullOrderParams:
    R_i: float = 1.0
    L_i: float = 2.5e-3
    R_g: float = 0.3
    L_g: float = 1.0e-3
    C: float = 2.4e-6
    E: float = 120.0
    omega_nom: float = 2.0 * math.pi * 60.0
    V_nom: float = 120.0
    # controller gains; None means "loop-shaped from the passives" (see design)
    k_p_pll: float = None
    k_i_pll: float = None
    k_pv: float = None
    k_iv: float = None
    k_pi: float = None
    k_ii: float = None
    i_max: float = 4.167

    GAIN_FIELDS = ("k_p_pll", "k_i_pll", "k_pv", "k_iv", "k_pi", "k_ii")

    def __post_init__(self):
        if any(getattr(self, k) is None for k in self.GAIN_FIELDS):
            shaped = self.shaped_gains()
            for k in self.GAIN_FIELDS:
                if getattr(self, k) is None:
                    object.__setattr__(self, k, shaped[k])

    def validate(self):
        for name in ("R_i", "L_i", "R_g", "L_g", "C", "i_max"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.E >= 0:
            raise DomainError(f"E must be >= 0, got {self.E}")
        for name in self.GAIN_FIELDS:
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        return self

    def shaped_gains(
        self,
        current_bw=CURRENT_BW,
        voltage_bw=VOLTAGE_BW,
        pll_wn=PLL_WN,
        pll_zeta=PLL_ZETA,
        voltage_zeta=VOLTAGE_ZETA,
    ):
        """Controller gains from standard loop shaping.

        Current loop: PI zero cancels the inverter-side RL pole, giving a
        first-order loop of bandwidth ``current_bw``. Voltage loop: the
        capacitor plus PI is a second-order loop with natural frequency
        ``voltage_bw``. PLL: linearised around lock it is second order in
        ``delta_pll`` with natural frequency ``pll_wn``.
        """
        e_pk = SQRT2 * (self.E or self.V_nom)  # PLL loop gain scales with the grid voltage
        return {
            "k_pi": current_bw * self.L_i,
            "k_ii": current_bw * self.R_i,
            "k_pv": 2.0 * voltage_zeta * voltage_bw * self.C,
            "k_iv": voltage_bw**2 * self.C,
            "k_p_pll": 2.0 * pll_zeta * pll_wn / e_pk,
            "k_i_pll": pll_wn**2 / e_pk,
        }

    @classmethod
    def design(cls, current_bw=CURRENT_BW, voltage_bw=VOLTAGE_BW, pll_wn=PLL_WN, pll_zeta=PLL_ZETA,
               voltage_zeta=VOLTAGE_ZETA, **passives):
        """Parameters with all six gains loop-shaped for the given bandwidths."""
        base = cls(**{k: v for k, v in passives.items() if k not in cls.GAIN_FIELDS})
        gains = base.shaped_gains(current_bw, voltage_bw, pll_wn, pll_zeta, voltage_zeta)
        return replace(base, **gains).validate()

    def replace(self, **changes):
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, values):
        """Build from a key/value mapping (config section); unknown keys are rejected."""
        known = {f for f in cls.__dataclass_fields__}
        bad = set(values) - known
        if bad:
            raise DomainError(f"unknown full-order parameter(s): {sorted(bad)}")
        return cls(**{k: float(v) for k, v in values.items()}).validate()

    @classmethod
    def from_file(cls, path, section="fullorder"):
        """Load from a key=value file, flat or with a ``[fullorder]`` section."""
        sections = read_sections(path)
        mapping = dict(sections.get("root", {}))
        mapping.update(sections.get(section, {}))
        return cls.from_mapping(mapping)

    def simplified(self, dt=10e-6):
        """Plant parameters of the lumped RL model (series sum of both inductors)."""
        return PlantParams(
            R=self.R_i + self.R_g,
            L=self.L_i + self.L_g,
            E=self.E,
            omega_nom=self.omega_nom,
            V_nom=self.V_nom,
            dt=dt,
            I_max=self.i_max,
        )


@dataclass(frozen=True)
class Reference:
    i_d_ref: float = 0.0
    i_q_ref: float = 0.0
    v_star: float = 120.0
    delta_star: float = 0.0


def derivative(x, params, K, ref):
    """Time derivative of the 12-state model (plain floats for speed)."""
    (dpll, pi_pll, phd, phq, gmd, gmq, iid, iiq, wd, wq, igd, igq) = x
    p = params
    (k11, k12), (k21, k22) = K
    ed, eq = igd - ref.i_d_ref, igq - ref.i_q_ref
    v = ref.v_star - (k11 * ed + k12 * eq)
    delta_i = ref.delta_star - (k21 * ed + k22 * eq) - dpll
    vrd = SQRT2 * v * math.cos(delta_i)
    vrq = SQRT2 * v * math.sin(delta_i)

    dpll_dot = p.k_i_pll * pi_pll + p.k_p_pll * wq
    w = p.omega_nom + dpll_dot
    wn = p.omega_nom

    cd = -p.C * wn * wq + p.k_iv * phd + p.k_pv * (vrd - wd) + igd
    cq = p.C * wn * wd + p.k_iv * phq + p.k_pv * (vrq - wq) + igq
    cd, cq, _ = clip_xy(cd, cq, p.i_max)
    vd = -p.L_i * wn * iiq + p.k_ii * gmd + p.k_pi * (cd - iid) + wd
    vq = p.L_i * wn * iid + p.k_ii * gmq + p.k_pi * (cq - iiq) + wq

    e_pk = SQRT2 * p.E
    return np.array([
        dpll_dot,
        wq,
        vrd - wd,
        vrq - wq,
        cd - iid,
        cq - iiq,
        w * iiq - p.R_i * iid / p.L_i + (vd - wd) / p.L_i,
        -w * iid - p.R_i * iiq / p.L_i + (vq - wq) / p.L_i,
        w * wq + (iid - igd) / p.C,
        -w * wd + (iiq - igq) / p.C,
        w * igq - p.R_g * igd / p.L_g + (wd - e_pk * math.cos(dpll)) / p.L_g,
        -w * igd - p.R_g * igq / p.L_g + (wq + e_pk * math.sin(dpll)) / p.L_g,
    ])


def fullorder_derivative(state, params, gain, ref):
    K = np.asarray(getattr(gain, "K", gain), dtype=float).tolist()
    return derivative(np.asarray(state, dtype=float).tolist(), params, K, ref)


# --- steady state ------------------------------------------------------------


def currents_from_power(p_ref, q_ref, v_d, v_q):
    """Currents delivering ``(P, Q)`` at a bus with peak dq voltage ``(v_d, v_q)``.

    Inverts ``P = 1.5 (v_d i_d + v_q i_q)`` and ``Q = 1.5 (v_q i_d - v_d i_q)``;
    the matrix ``[[v_d, v_q], [v_q, -v_d]]`` squares to ``|v|^2 I``, so the
    normalisation is ``1 / (1.5 |v|^2)``.
    """
    m2 = v_d * v_d + v_q * v_q
    if not m2 > 0:
        raise DomainError("bus voltage must be nonzero")
    s = 1.0 / (1.5 * m2)
    return s * (v_d * p_ref + v_q * q_ref), s * (v_q * p_ref - v_d * q_ref)


def power_flow(p_ref, q_ref, params, tol=1e-12, max_iter=50):
    """Capacitor-bus voltage ``(V_rms, angle)`` delivering ``(P, Q)`` into the
    stiff grid through ``R_g + j w L_g``.

    Newton iteration on the bus voltage ``w`` (peak phasor) from a flat
    start, using the residual ``w - e - z conj(S / (1.5 w))``, which stays
    well scaled as the line impedance goes to zero.
    """
    e_pk = SQRT2 * params.E
    z = complex(params.R_g, params.omega_nom * params.L_g)
    target = complex(p_ref, q_ref)
    if e_pk <= 0:
        raise DomainError("power flow needs a positive grid voltage")

    def residual(w):
        return w - e_pk - z * (target / (1.5 * w)).conjugate()

    w = complex(e_pk, 0.0)
    for _ in range(max_iter):
        f = residual(w)
        if abs(f) <= tol * e_pk:
            return abs(w) / SQRT2, math.atan2(w.imag, w.real)
        h = 1e-7 * e_pk
        fr = (residual(w + h) - f) / h
        fi = (residual(w + 1j * h) - f) / h
        J = np.array([[fr.real, fi.real], [fr.imag, fi.imag]])
        try:
            dr, di = np.linalg.solve(J, [-f.real, -f.imag])
        except np.linalg.LinAlgError as exc:
            raise DivergenceError("singular power-flow Jacobian") from exc
        w += complex(dr, di)
        if not (abs(w) > 0 and math.isfinite(w.real) and math.isfinite(w.imag)):
            break
    raise DivergenceError(f"power flow did not converge for P={p_ref}, Q={q_ref}")


def reference_from_power(p_ref, q_ref, params):
    """Controller references for a power set-point at the capacitor bus.

    ``v_star`` (rms) and ``delta_star`` (angle ahead of the grid) come from
    the power flow. The current references are the currents delivering
    ``(P, Q)`` at that bus expressed in its own frame, which is the frame
    the PLL settles into; with no line drop they reduce to
    :func:`magsat.model.power_to_current`.
    """
    v_star, delta_star = power_flow(p_ref, q_ref, params)
    i_d, i_q = currents_from_power(p_ref, q_ref, SQRT2 * v_star, 0.0)
    return Reference(float(i_d), float(i_q), float(v_star), float(delta_star))


def equilibrium(params, gain, ref, x_guess=None, tol=1e-9, max_iter=100):
    """Root of the derivative map by damped Newton with a finite-difference Jacobian.

    No root exists when the current limiter is active at the target: the
    voltage-loop integrators then ramp at a constant rate while the
    electrical states hold still, and this raises :class:`DivergenceError`.
    """
    K = np.asarray(getattr(gain, "K", gain), dtype=float).tolist()
    x = initial_guess(params, ref) if x_guess is None else np.array(x_guess, dtype=float)
    return _newton(params, K, ref, x, tol, max_iter)


def _newton(params, K, ref, x, tol, max_iter):
    def F(v):
        return derivative(v.tolist(), params, K, ref)

    x = np.array(x, dtype=float)
    f = F(x)
    for _ in range(max_iter):
        if np.max(np.abs(f)) < tol:
            return x
        J = np.empty((N_STATES, N_STATES))
        for k in range(N_STATES):
            h = 1e-6 * max(1.0, abs(x[k]))
            xp = x.copy()
            xp[k] += h
            J[:, k] = (F(xp) - f) / h
        dx = np.linalg.lstsq(J, -f, rcond=None)[0]
        step = 1.0
        f0 = np.linalg.norm(f)
        while step > 1e-6:
            x_try = x + step * dx
            f_try = F(x_try)
            if np.linalg.norm(f_try) < f0:
                break
            step *= 0.5
        x, f = x_try, f_try
    if np.max(np.abs(f)) < tol:
        return x
    raise DivergenceError(f"equilibrium not found, residual {np.max(np.abs(f)):.3g}")


def initial_guess(params, ref):
    """Steady state of the lossless network, used to seed Newton."""
    w_pk = SQRT2 * ref.v_star
    x = np.zeros(N_STATES)
    x[IDX["delta_pll"]] = ref.delta_star
    x[IDX["w_d"]] = w_pk
    x[IDX["i_gd"]], x[IDX["i_gq"]] = ref.i_d_ref, ref.i_q_ref
    x[IDX["i_id"]] = ref.i_d_ref
    x[IDX["i_iq"]] = ref.i_q_ref + params.C * params.omega_nom * w_pk
    x[IDX["phi_d"]] = x[IDX["i_id"]] / params.k_iv if params.k_iv else 0.0
    x[IDX["phi_q"]] = 0.0
    x[IDX["gamma_d"]] = (params.R_i * x[IDX["i_id"]]) / params.k_ii if params.k_ii else 0.0
    return x


# --- time integration --------------------------------------------------------


@dataclass
class FullOrderTrajectory:
    t: np.ndarray
    states: np.ndarray  # (n, 12)

    def channel(self, name):
        return self.states[:, IDX[name]]

    @property
    def i_g(self):
        return self.states[:, [IDX["i_gd"], IDX["i_gq"]]]

    @property
    def mag_ig(self):
        return np.hypot(self.channel("i_gd"), self.channel("i_gq"))

    CSV_HEADER = ("t", "i_gd", "i_gq", "i_id", "i_iq", "w_d", "w_q", "delta_pll", "mag_ig")

    def write_csv(self, path):
        cols = [self.t] + [self.channel(n) for n in self.CSV_HEADER[1:-1]] + [self.mag_ig]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])


def integrate_fullorder(x0, params, gain, ref, t_end, dt_int=1e-6, sample_dt=10e-6):
    """Classic RK4 with fixed step ``dt_int``, sampled every ``sample_dt``."""
    if not dt_int > 0 or not t_end > 0:
        raise DomainError("dt_int and t_end must be > 0")
    K = np.asarray(getattr(gain, "K", gain), dtype=float).tolist()
    n_steps = int(round(t_end / dt_int))
    every = max(1, int(round(sample_dt / dt_int)))
    x = np.array(x0, dtype=float)
    h = dt_int
    t_out = [0.0]
    out = [x.copy()]
    with np.errstate(over="ignore", invalid="ignore"):  # blow-up is reported below
        return _rk4_loop(x, params, K, ref, h, n_steps, every, t_out, out)


def _rk4_loop(x, params, K, ref, h, n_steps, every, t_out, out):
    for k in range(1, n_steps + 1):
        try:
            k1 = derivative(x, params, K, ref)
            k2 = derivative(x + 0.5 * h * k1, params, K, ref)
            k3 = derivative(x + 0.5 * h * k2, params, K, ref)
            k4 = derivative(x + h * k3, params, K, ref)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except (ValueError, OverflowError):
            x = np.full_like(x, np.nan)  # math.cos of a non-finite angle
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"full-order state diverged at t = {k * h:.6g} s")
        if k % every == 0 or k == n_steps:
            t_out.append(k * h)
            out.append(x.copy())
    return FullOrderTrajectory(np.array(t_out), np.array(out))


# --- comparison with the simplified model ------------------------------------


def settling_time(t, y, y_final=None, y_initial=None, band=0.02):
    """First time after which ``|y - y_final|`` stays within ``band`` of the step size."""
    y = np.asarray(y, dtype=float).reshape(len(t), -1)
    y_final = y[-1] if y_final is None else np.asarray(y_final, dtype=float)
    y_initial = y[0] if y_initial is None else np.asarray(y_initial, dtype=float)
    size = np.linalg.norm(y_final - y_initial)
    if size <= 1e-9:
        return 0.0
    err = np.linalg.norm(y - y_final, axis=1)
    outside = np.flatnonzero(err > band * size)
    if outside.size == 0:
        return float(t[0])
    if outside[-1] + 1 >= len(t):
        return float("inf")
    return float(t[outside[-1] + 1])


@dataclass
class Comparison:
    t: np.ndarray
    simplified: np.ndarray  # (n, 2) currents
    full: np.ndarray  # (n, 2) grid-side currents
    full_traj: FullOrderTrajectory
    settle_simplified: float
    settle_full: float
    steady_simplified: np.ndarray
    steady_full: np.ndarray
    overshoot_simplified: float
    overshoot_full: float
    reference: Reference

    @property
    def steady_offset(self):
        return self.steady_full - self.steady_simplified

    @property
    def relative_offset(self):
        scale = np.linalg.norm(self.steady_simplified)
        return float(np.linalg.norm(self.steady_offset) / scale) if scale > 0 else float(np.linalg.norm(self.steady_offset))

    @property
    def settle_ratio(self):
        if self.settle_simplified == 0.0:
            return 1.0 if self.settle_full == 0.0 else float("inf")
        return self.settle_full / self.settle_simplified

    def as_dict(self):
        return {
            "reference": asdict(self.reference),
            "steady_simplified": self.steady_simplified.tolist(),
            "steady_full": self.steady_full.tolist(),
            "steady_offset": self.steady_offset.tolist(),
            "relative_offset": self.relative_offset,
            "settle_simplified_s": self.settle_simplified,
            "settle_full_s": self.settle_full,
            "settle_ratio": self.settle_ratio,
            "overshoot_simplified_A": self.overshoot_simplified,
            "overshoot_full_A": self.overshoot_full,
        }


def compare_models(params_full, gain, p_ref, q_ref, t_end=0.05, dt=10e-6, dt_int=1e-6, params_simplified=None):
    """Step both models from the zero-power steady state to ``(p_ref, q_ref)``."""
    params_simplified = params_simplified or params_full.simplified(dt)
    ps = params_simplified
    if abs(ps.R - (params_full.R_i + params_full.R_g)) > 1e-12 or abs(ps.L - (params_full.L_i + params_full.L_g)) > 1e-15:
        raise DomainError("simplified R, L must equal the series sums of the full-order passives")
    plant = build_plant(ps)

    n = int(round(t_end / ps.dt))
    x_ref = power_to_current(p_ref, q_ref, ps)
    simp = simulate(plant, gain, np.zeros(2), x_ref, max_steps=n, stop_tol=1e-300)
    simp_states = simp.states[: n + 1]

    ref0 = reference_from_power(0.0, 0.0, params_full)
    x0 = equilibrium(params_full, gain, ref0)
    ref = reference_from_power(p_ref, q_ref, params_full)
    full = integrate_fullorder(x0, params_full, gain, ref, t_end, dt_int, ps.dt)
    full_ig = full.i_g[: len(simp_states)]
    t = full.t[: len(simp_states)]

    tail = max(1, len(t) // 50)
    steady_s = simp_states[-tail:].mean(axis=0)
    steady_f = full_ig[-tail:].mean(axis=0)
    return Comparison(
        t=t,
        simplified=simp_states,
        full=full_ig,
        full_traj=full,
        settle_simplified=settling_time(t, simp_states, steady_s, simp_states[0]),
        settle_full=settling_time(t, full_ig, steady_f, full_ig[0]),
        steady_simplified=steady_s,
        steady_full=steady_f,
        overshoot_simplified=float(np.max(np.hypot(*simp_states.T)) - ps.I_max),
        overshoot_full=float(np.max(full.mag_ig) - params_full.i_max),
        reference=ref,
    )
