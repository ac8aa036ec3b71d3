import json

import numpy as np
import pytest

from magsat.certify import K_BASE_REFERENCE, K_FIT_REFERENCE, Gain
from magsat.cli import main
from magsat.synthesis import Dataset


@pytest.fixture
def gains(tmp_path):
    fit, base = tmp_path / "fit.json", tmp_path / "base.json"
    Gain(K_FIT_REFERENCE).save(fit)
    Gain(K_BASE_REFERENCE).save(base)
    return fit, base


def test_certify(gains, capsys):
    fit, base = gains
    assert main(["certify", "--gain", str(fit), "--robust", "3.7"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["feasible"] and out["robust"]["all_feasible"]
    assert main(["certify", "--gain", str(base)]) == 1
    assert json.loads(capsys.readouterr().out)["sigma_closed"] > 1


def test_certify_with_params_file(gains, tmp_path, capsys):
    params = tmp_path / "plant.cfg"
    params.write_text("R_ohm = 2.0\n")
    assert main(["certify", "--params", str(params), "--gain", str(gains[0])]) == 0


def test_lqr(tmp_path, plant, weights):
    out = tmp_path / "lqr.json"
    assert main(["lqr", "--q", "1 0 0 0.1", "--rcost", "5B", "--out", str(out)]) == 0
    from magsat.synthesis import lqr_gain

    assert np.allclose(Gain.load(out).K, lqr_gain(plant, weights).K)


def test_fit(tmp_path, rng):
    dx = rng.normal(size=(30, 2))
    data = Dataset.from_pairs(dx, -dx @ K_FIT_REFERENCE.T)
    data.write_csv(tmp_path / "d.csv")
    out = tmp_path / "g.json"
    assert main(["fit", "--dataset", str(tmp_path / "d.csv"), "--out", str(out)]) == 0
    g = Gain.load(out)
    assert np.allclose(g.K, K_FIT_REFERENCE) and g.certificate is not None


def test_simulate_and_mpc(tmp_path, gains):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--gain", str(gains[0]), "--x0", "0,0", "--xref", "1,1", "--out", str(out)]) == 0
    assert out.read_text().startswith("t,i_d,i_q,v,delta,saturated,lyapunov")
    out = tmp_path / "mpc.csv"
    assert main(["mpc", "--x0", "0,0", "--xref", "1,1", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) > 2


def test_dataset(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["dataset", "--radii", "2", "--angles", "1", "--out", str(out)]) == 0
    assert len(Dataset.read_csv(out)) > 0


def test_fullorder(tmp_path, gains):
    out, rep = tmp_path / "full.csv", tmp_path / "cmp.json"
    args = ["fullorder", "--gain", str(gains[0]), "--step", "300,-200", "--t-end", "0.002"]
    assert main(args + ["--out", str(out)]) == 0
    assert out.read_text().startswith("t,i_gd,i_gq")
    assert main(args + ["--out", str(out), "--compare", str(rep), "--plot"]) == 0
    assert "relative_offset" in json.loads(rep.read_text())
    assert (tmp_path / "cmp.png").stat().st_size > 0


def test_experiment(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("[grid]\nn_radii = 2\nn_angles = 2\nr_max = 2.0\n")
    out = tmp_path / "run"
    assert main(["experiment", "--config", str(cfg), "--out", str(out)]) == 0
    assert "K_fit" in capsys.readouterr().out
    for name in ("report.json", "cases.csv", "fig2.csv", "fig3.csv", "fig2.png", "fig3.png"):
        assert (out / name).exists()


def test_errors_exit_2(tmp_path, capsys):
    assert main(["certify", "--gain", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("L_H = -1\n")
    Gain(K_FIT_REFERENCE).save(tmp_path / "g.json")
    assert main(["certify", "--params", str(bad), "--gain", str(tmp_path / "g.json")]) == 2
    with pytest.raises(SystemExit):
        main(["nosuchcommand"])
