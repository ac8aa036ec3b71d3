import math

import numpy as np
import pytest

from magsat import fullorder as fo
from magsat.model import DomainError, PlantParams, power_to_current

# certified gain fitted by the default experiment pipeline
K_PIPELINE = np.array([[0.96331893, -0.03883027], [-0.01080807, 0.05587464]])


@pytest.fixture(scope="module")
def fparams():
    return fo.FullOrderParams()


@pytest.fixture(scope="module")
def x_zero(fparams):
    return fo.equilibrium(fparams, K_PIPELINE, fo.reference_from_power(0.0, 0.0, fparams))


def test_state_layout():
    assert fo.STATE_NAMES == (
        "delta_pll", "pi_pll", "phi_d", "phi_q", "gamma_d", "gamma_q",
        "i_id", "i_iq", "w_d", "w_q", "i_gd", "i_gq",
    )


def test_passives_match_simplified_plant(fparams):
    simp = fparams.simplified()
    base = PlantParams()
    assert simp.R == pytest.approx(base.R) and simp.L == pytest.approx(base.L)


def test_shaped_gains(fparams):
    assert fparams.k_pi == pytest.approx(2 * math.pi * 1e4 * fparams.L_i)
    assert fparams.k_ii == pytest.approx(2 * math.pi * 1e4 * fparams.R_i)
    assert fparams.k_iv == pytest.approx((2 * math.pi * 1e3) ** 2 * fparams.C)
    custom = fo.FullOrderParams(k_pi=1.0)
    assert custom.k_pi == 1.0 and custom.k_ii == fparams.k_ii


@pytest.mark.parametrize("field", ["C", "L_g", "R_i", "i_max"])
def test_validate_rejects_nonpositive_passives(fparams, field):
    with pytest.raises(DomainError, match=field):
        fparams.replace(**{field: 0.0}).validate()


def test_from_file(tmp_path):
    path = tmp_path / "full.cfg"
    path.write_text("[fullorder]\nC = 1e-6\nk_pi = 30\n")
    p = fo.FullOrderParams.from_file(path)
    assert p.C == 1e-6 and p.k_pi == 30.0
    path.write_text("bogus = 1\n")
    with pytest.raises(DomainError):
        fo.FullOrderParams.from_file(path)


@pytest.mark.parametrize("p_ref, q_ref", [(0.0, 0.0), (300.0, 200.0), (-400.0, 100.0)])
def test_equilibrium_residual(fparams, p_ref, q_ref):
    ref = fo.reference_from_power(p_ref, q_ref, fparams)
    x = fo.equilibrium(fparams, K_PIPELINE, ref)
    assert np.max(np.abs(fo.fullorder_derivative(x, fparams, K_PIPELINE, ref))) < 1e-8


def test_quiescent_system():
    p = fo.FullOrderParams(E=0.0)
    ref = fo.Reference(0.0, 0.0, 0.0, 0.0)
    d = fo.fullorder_derivative(np.zeros(12), p, K_PIPELINE, ref)
    assert np.array_equal(d, np.zeros(12))
    # a nonzero voltage set-point is the only forcing term
    d = fo.fullorder_derivative(np.zeros(12), p, K_PIPELINE, fo.Reference(0.0, 0.0, 10.0, 0.0))
    assert d[fo.IDX["phi_d"]] > 0 and d[fo.IDX["delta_pll"]] == 0.0


def test_grid_current_enters_pll_through_capacitor(fparams, x_zero):
    ref = fo.reference_from_power(0.0, 0.0, fparams)

    def pll_accel(x):
        f = fo.fullorder_derivative(x, fparams, K_PIPELINE, ref)
        return fparams.k_i_pll * f[fo.IDX["pi_pll"]] + fparams.k_p_pll * f[fo.IDX["w_q"]]

    h = 1e-4
    xp, xm = x_zero.copy(), x_zero.copy()
    xp[fo.IDX["i_gq"]] += h
    xm[fo.IDX["i_gq"]] -= h
    slope = (pll_accel(xp) - pll_accel(xm)) / (2 * h)
    assert slope < 0
    assert slope == pytest.approx(-fparams.k_p_pll / fparams.C, rel=1e-6)


def test_reference_zero_power(fparams):
    ref = fo.reference_from_power(0.0, 0.0, fparams)
    assert ref.i_d_ref == 0.0 and ref.i_q_ref == 0.0
    assert ref.delta_star == 0.0 and ref.v_star == pytest.approx(fparams.E)


def test_reference_pure_active_power(fparams):
    ref = fo.reference_from_power(50.0, 0.0, fparams)
    assert ref.delta_star > 0
    assert abs(ref.i_q_ref) < 1e-12
    assert ref.i_d_ref > 0


def test_reference_consistent_with_simplified_without_line_drop():
    p = fo.FullOrderParams(R_g=1e-9, L_g=1e-12)
    for pq in [(775.0, -775.0), (-200.0, 400.0)]:
        ref = fo.reference_from_power(*pq, p)
        assert np.allclose([ref.i_d_ref, ref.i_q_ref], power_to_current(*pq), rtol=1e-6)


def test_reference_power_flow_balances(fparams):
    ref = fo.reference_from_power(775.0, -775.0, fparams)
    w = math.sqrt(2) * ref.v_star * complex(math.cos(ref.delta_star), math.sin(ref.delta_star))
    z = complex(fparams.R_g, fparams.omega_nom * fparams.L_g)
    s = 1.5 * w * ((w - math.sqrt(2) * fparams.E) / z).conjugate()
    assert s.real == pytest.approx(775.0, rel=1e-9) and s.imag == pytest.approx(-775.0, rel=1e-9)


def test_no_equilibrium_with_active_limiter(fparams, x_zero):
    # the (775 W, -775 var) target needs more than i_max: the electrical
    # states settle while the voltage integrators wind up linearly
    ref = fo.reference_from_power(775.0, -775.0, fparams)
    with pytest.raises(fo.DivergenceError):
        fo.equilibrium(fparams, K_PIPELINE, ref, max_iter=15)
    tr = fo.integrate_fullorder(x_zero, fparams, K_PIPELINE, ref, 0.2, sample_dt=0.05)
    d = fo.fullorder_derivative(tr.states[-1], fparams, K_PIPELINE, ref)
    windup = [fo.IDX["phi_d"], fo.IDX["phi_q"]]
    assert np.max(np.abs(np.delete(d, windup))) < 1e-4
    assert np.min(np.abs(d[windup])) > 0.1
    assert np.allclose(np.diff(tr.channel("phi_d")[-3:]), np.diff(tr.channel("phi_d")[-3:])[0], rtol=1e-6)


def test_equilibrium_trajectory_constant(fparams):
    ref = fo.reference_from_power(300.0, 200.0, fparams)
    x = fo.equilibrium(fparams, K_PIPELINE, ref)
    tr = fo.integrate_fullorder(x, fparams, K_PIPELINE, ref, 0.1, sample_dt=1e-3)
    assert np.max(np.abs(tr.states - x)) < 1e-6


def test_rk4_fourth_order(fparams, x_zero):
    ref = fo.reference_from_power(200.0, -100.0, fparams)
    ends = {}
    for dt in (2e-5, 1e-5, 5e-6, 1.25e-6):
        ends[dt] = fo.integrate_fullorder(x_zero, fparams, K_PIPELINE, ref, 2e-3, dt, 1e-4).states[-1]
    e = [np.abs(ends[d] - ends[1.25e-6]).max() for d in (2e-5, 1e-5, 5e-6)]
    assert 12 < e[0] / e[1] < 20
    assert 12 < e[1] / e[2] < 20


def test_step_settles_to_new_equilibrium(fparams, x_zero):
    ref = fo.reference_from_power(300.0, 200.0, fparams)
    tr = fo.integrate_fullorder(x_zero, fparams, K_PIPELINE, ref, 0.08, sample_dt=1e-3)
    x_eq = fo.equilibrium(fparams, K_PIPELINE, ref)
    assert np.allclose(tr.i_g[-1], x_eq[[fo.IDX["i_gd"], fo.IDX["i_gq"]]], atol=1e-3)


def test_divergence_is_reported(fparams, x_zero):
    ref = fo.reference_from_power(775.0, -775.0, fparams)
    with pytest.raises(fo.DivergenceError, match="t ="):
        fo.integrate_fullorder(x_zero, fparams, K_PIPELINE, ref, 0.05, dt_int=2e-4)
    with pytest.raises(DomainError):
        fo.integrate_fullorder(x_zero, fparams, K_PIPELINE, ref, 0.0)


def test_zero_step_comparison(fparams):
    comp = fo.compare_models(fparams, K_PIPELINE, 0.0, 0.0, t_end=0.005)
    assert np.max(np.abs(comp.full)) < 1e-9 and np.max(np.abs(comp.simplified)) == 0.0
    assert comp.settle_full == 0.0 and comp.settle_simplified == 0.0
    assert comp.settle_ratio == 1.0


def test_comparison_requires_matched_passives(fparams):
    with pytest.raises(DomainError):
        fo.compare_models(fparams, K_PIPELINE, 100.0, 0.0, params_simplified=PlantParams(R=2.0))


def test_reduction_consistency_sweep():
    discrepancy = []
    for C, scale, dt in [(2.4e-6, 1, 1e-6), (0.6e-6, 2, 5e-7), (0.15e-6, 4, 2.5e-7)]:
        p = fo.FullOrderParams.design(current_bw=2 * math.pi * 1e4 * scale, voltage_bw=2 * math.pi * 1e3 * scale, C=C)
        comp = fo.compare_models(p, K_PIPELINE, 300.0, -200.0, t_end=0.01, dt_int=dt)
        discrepancy.append(np.abs(comp.full - comp.simplified).max())
    assert discrepancy[0] > discrepancy[1] > discrepancy[2]


def test_settling_time():
    t = np.linspace(0, 1, 101)
    y = 1 - np.exp(-10 * t)
    ts = fo.settling_time(t, y, 1.0, 0.0)
    assert ts == pytest.approx(-math.log(0.02) / 10, abs=0.011)
    assert fo.settling_time(t, np.zeros_like(t)) == 0.0


def test_trajectory_csv(tmp_path, fparams, x_zero):
    ref = fo.reference_from_power(0.0, 0.0, fparams)
    tr = fo.integrate_fullorder(x_zero, fparams, K_PIPELINE, ref, 1e-4)
    path = tmp_path / "full.csv"
    tr.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,i_gd,i_gq,i_id,i_iq,w_d,w_q,delta_pll,mag_ig"
    assert len(lines) == len(tr.t) + 1
