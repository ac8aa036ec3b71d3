"""Command-line entry point: ``magsat <command> [options]``."""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import certify, fullorder, harness, model, mpc, synthesis
from .config import parse_floats, read_sections


def _pair(text):
    return np.array(parse_floats(text, 2))


def _plant_params(args):
    return model.PlantParams.from_file(args.params) if args.params else model.PlantParams()


def _load_gain(path):
    return certify.Gain.load(path)


def _weights(args, plant):
    q, r = args.q, args.rcost
    if getattr(args, "weights", None):
        sec = read_sections(args.weights)
        values = dict(sec.get("root", {}))
        values.update(sec.get("weights", {}))
        q, r = values.get("Q", q), values.get("R_cost", r)
    return synthesis.LqrWeights.parse(plant, q, r)


def _emit(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def cmd_certify(args):
    params = _plant_params(args)
    plant = model.build_plant(params)
    gain = _load_gain(args.gain)
    rep = certify.certify_gain(plant, gain.K)
    out = rep.as_dict()
    if args.robust is not None:
        if rep.feasible:
            out["robust"] = certify.certify_robust(params, gain.K, args.robust).as_dict()
        else:
            out["robust"] = None
    print(json.dumps(out, indent=2))
    return 0 if rep.feasible else 1


def cmd_lqr(args):
    plant = model.build_plant(_plant_params(args))
    gain = synthesis.lqr_gain(plant, _weights(args, plant))
    _emit(gain.to_json(), args.out)
    return 0


def cmd_fit(args):
    plant = model.build_plant(_plant_params(args))
    data = synthesis.Dataset.read_csv(args.dataset)
    gain = synthesis.fit_gain(plant, data, margin=args.margin)
    _emit(gain.to_json(), args.out)
    return 0 if gain.certificate is not None else 1


def cmd_dataset(args):
    params = _plant_params(args)
    plant = model.build_plant(params)
    weights = _weights(args, plant)
    grid = harness.build_grid(harness.GridSpec.polar(params.I_max, args.radii, args.angles))
    data, _ = mpc.generate_dataset(plant, weights, grid, grid, args.horizon, args.seed)
    data.write_csv(args.out)
    logging.info("wrote %d samples to %s", len(data), args.out)
    return 0 if not data.provenance.get("failures") else 1


def cmd_mpc(args):
    plant = model.build_plant(_plant_params(args))
    weights = _weights(args, plant)
    traj = mpc.run_mpc(plant, weights, _pair(args.x0), _pair(args.xref), args.horizon, seed=args.seed)
    traj.write_csv(args.out)
    return 0


def cmd_simulate(args):
    plant = model.build_plant(_plant_params(args))
    gain = _load_gain(args.gain)
    traj = model.simulate(plant, gain, _pair(args.x0), _pair(args.xref))
    traj.write_csv(args.out)
    return 0


def cmd_fullorder(args):
    params = fullorder.FullOrderParams.from_file(args.params) if args.params else fullorder.FullOrderParams()
    gain = _load_gain(args.gain)
    p_ref, q_ref = parse_floats(args.step, 2)
    if args.compare:
        comp = fullorder.compare_models(params, gain, p_ref, q_ref, t_end=args.t_end, dt_int=args.dt_int)
        comp.full_traj.write_csv(args.out)
        with open(args.compare, "w") as fh:
            json.dump(comp.as_dict(), fh, indent=2)
        if args.plot:
            from . import plotting

            plotting.comparison_figure(comp, os.path.splitext(args.compare)[0] + ".png", params.i_max)
    else:
        ref0 = fullorder.reference_from_power(0.0, 0.0, params)
        x0 = fullorder.equilibrium(params, gain, ref0)
        ref = fullorder.reference_from_power(p_ref, q_ref, params)
        traj = fullorder.integrate_fullorder(x0, params, gain, ref, args.t_end, args.dt_int)
        traj.write_csv(args.out)
    return 0


def cmd_experiment(args):
    config = harness.ExperimentConfig.from_file(args.config) if args.config else harness.ExperimentConfig()
    if args.no_plots:
        config.plots = False
    try:
        report, fitted = harness.run_full_experiment(config, args.out, seed=args.seed, jobs=args.jobs)
    except harness.StageError as exc:
        logging.error("%s", exc)
        return 2
    agg = report.aggregates()
    for name, a in agg.items():
        print(f"{name:7s} average cost {a['average_cost']:10.3f}  stuck {a['stuck']:3d}/{a['cases']}")
    return 0 if fitted.certificate is not None else 1


def build_parser():
    p = argparse.ArgumentParser(prog="magsat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_plant(sp):
        sp.add_argument("--params", help="plant parameter file (key = value)")
        return sp

    def with_weights(sp):
        sp.add_argument("--q", default="1 0.1", help="Q as 2 (diagonal) or 4 numbers")
        sp.add_argument("--rcost", default="5B", help="R_cost as 4 numbers or '<scale>B'")
        sp.add_argument("--weights", help="file with a [weights] section (Q, R_cost)")
        return sp

    sp = with_plant(sub.add_parser("certify", help="check the stability certificate of a gain"))
    sp.add_argument("--gain", required=True)
    sp.add_argument("--robust", type=float, metavar="DR", help="also sweep R over [R, R + DR]")
    sp.set_defaults(func=cmd_certify)

    sp = with_weights(with_plant(sub.add_parser("lqr", help="discrete LQR gain")))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_lqr)

    sp = with_plant(sub.add_parser("fit", help="certified least-squares gain from a dataset"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--margin", type=float, default=1e-6)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)

    sp = with_weights(with_plant(sub.add_parser("dataset", help="MPC dataset over the polar grid")))
    sp.add_argument("--horizon", type=int, default=5)
    sp.add_argument("--radii", type=int, default=3)
    sp.add_argument("--angles", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dataset)

    sp = with_weights(with_plant(sub.add_parser("mpc", help="closed-loop MPC for one case")))
    sp.add_argument("--x0", required=True, help="d,q")
    sp.add_argument("--xref", required=True, help="d,q")
    sp.add_argument("--horizon", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mpc)

    sp = with_plant(sub.add_parser("simulate", help="closed loop with a static gain"))
    sp.add_argument("--gain", required=True)
    sp.add_argument("--x0", required=True, help="d,q")
    sp.add_argument("--xref", required=True, help="d,q")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fullorder", help="12-state model power step")
    sp.add_argument("--params", help="full-order parameter file")
    sp.add_argument("--gain", required=True)
    sp.add_argument("--step", default="775,-775", help="P,Q")
    sp.add_argument("--t-end", type=float, default=0.05)
    sp.add_argument("--dt-int", type=float, default=1e-6)
    sp.add_argument("--out", required=True, help="trajectory CSV")
    sp.add_argument("--compare", metavar="JSON", help="also run the simplified model and write a report")
    sp.add_argument("--plot", action="store_true", help="with --compare, render a PNG next to the report")
    sp.set_defaults(func=cmd_fullorder)

    sp = sub.add_parser("experiment", help="full baseline-versus-fit pipeline")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (model.DomainError, certify.PreconditionError, synthesis.SolverError, FileNotFoundError) as exc:
        logging.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
