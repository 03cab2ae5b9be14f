"""Command-line entry point: ``spatialcausal <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .confound import ESTIMATORS, ModelSpec, fit_model, write_estimates_csv
from .data import RunConfig, parse_config, read_areal_csv, read_panel_csv, read_point_csv, write_areal_csv
from .geostat import (SpilloverKernel, fit_discontinuity, fit_geostat_interference, krige_impute, make_grid,
                      write_grid_csv)
from .interference import (Policy, fit_network_interference, fit_partial_interference, policy_average,
                           write_effects_csv)
from .lattice import build_rook_grid, read_adjacency, write_adjacency
from .simstudy import FULL_SCALE, SCENARIOS, generate_dataset, get_scenario, run_study, write_study_csv, \
    write_summary_csv
from .spacetime import fit_did, fit_granger, janes_test

SCHEMA_HELP = """\
input schemas
  areal CSV   region,y,a[,rep][,x1..xp][,s1,s2][,t][,z][,group]   (region is 0-based)
  panel CSV   region,t,y,a[,x1..xp]                              (t runs 1..T)
  point CSV   s1,s2,y,a[,x1..xp]
  lattice     one line per region: '<id>: <nbr> <nbr> ...'
  config      key=value lines: scenario, grid (e.g. 20x20), datasets, iterations,
              burn_in, thin, seed, estimators (comma list), output, beta, phi
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(SCHEMA_HELP)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _base_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {k: getattr(args, k) for k in ("iterations", "burn_in", "seed") if getattr(args, k, None) is not None}
    return cfg.with_(**changes) if changes else cfg


def _mcmc_args(p):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--seed", type=int)


def _write_rows(path, header, rows):
    fh = sys.stdout if path in (None, "-") else Path(path).open("w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _est_row(e):
    return [e.estimator, repr(e.point), repr(e.lo), repr(e.hi)]


# --------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    sc = get_scenario(args.scenario, args.grid)
    data, truth = generate_dataset(sc, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{sc.name}_seed{args.seed}"
    write_areal_csv(data, out / f"{stem}.csv")
    (out / f"{stem}_truth.txt").write_text(truth.to_text(), encoding="utf-8")
    write_adjacency(build_rook_grid(*sc.grid), out / f"{stem}.adj")
    print(out / f"{stem}.csv")
    return 0


def cmd_fit(args) -> int:
    lattice = read_adjacency(args.lattice) if args.lattice else None
    data = read_areal_csv(args.data, lattice=lattice, binary=args.estimator not in ("IV",))
    spec = ModelSpec(args.estimator, n_strata=args.strata)
    res = fit_model(spec, data, lattice, _base_config(args))
    if args.out:
        write_estimates_csv([(0, res.estimate)], args.out)
    else:
        _write_rows(None, ["estimator", "point", "lo95", "hi95"], [_est_row(res.estimate)])
    return 0


def cmd_sim_study(args) -> int:
    cfg = _base_config(args)
    if args.full_scale:
        cfg = cfg.with_(**FULL_SCALE)
    names = [s for s in (args.scenarios or cfg.scenario).split(",") if s]
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for name in names:
        res = run_study(cfg.with_(scenario=name), workers=args.workers)
        write_study_csv(res, out / f"scenario_{name}.csv")
        results.append(res)
    write_summary_csv(results, out / "summary.csv")
    print(out / "summary.csv")
    return 0


def cmd_interference(args) -> int:
    cfg = _base_config(args)
    if args.mode == "partial":
        data = read_areal_csv(args.data)
        fit = fit_partial_interference(data, config=cfg)
    else:
        if not args.lattice:
            raise ValueError("network interference needs --lattice")
        lattice = read_adjacency(args.lattice)
        data = read_areal_csv(args.data, lattice=lattice)
        fit = fit_network_interference(data, lattice, cfg, spatial=args.spatial)
    pol, ref = Policy.bernoulli(args.policy), Policy.bernoulli(args.reference)
    method = "enumerate" if data.n <= 12 else "monte-carlo"
    effects = [policy_average(fit.model, pol, "DE", method, draws=args.draws, seed=cfg.seed)]
    for eff in ("IE", "TE", "OE"):
        effects.append(policy_average(fit.model, pol, eff, method, reference=ref, draws=args.draws, seed=cfg.seed))
    _write_rows(args.coef_out, ["estimator", "point", "lo95", "hi95"], [_est_row(fit.direct), _est_row(fit.indirect)])
    if args.out:
        write_effects_csv(effects, args.out)
    else:
        _write_rows(None, ["effect", "policy", "value", "mc_se", "method"],
                    [[e.effect, e.policy, repr(e.value), repr(e.mc_se), e.method] for e in effects])
    return 0


def cmd_spacetime(args) -> int:
    cfg = _base_config(args)
    lattice = read_adjacency(args.lattice) if args.lattice else None
    panel = read_panel_csv(args.data, lattice=lattice)
    if args.method == "janes":
        f = janes_test(panel, config=cfg)
        rows = [_est_row(f.eta1), _est_row(f.eta2), _est_row(f.difference)]
    elif args.method == "did":
        f = fit_did(panel, spillover=args.spillover, lattice=lattice, config=cfg)
        rows = [_est_row(e) for e in f.coefficients.values()]
    else:
        f = fit_granger(panel, args.lags, spillover=args.spillover, lattice=lattice, config=cfg)
        rows = [_est_row(b) for b in f.beta] + [["granger_causal", str(int(f.granger_causal)), "", ""]]
    _write_rows(args.out, ["estimator", "point", "lo95", "hi95"], rows)
    return 0


def cmd_geostat(args) -> int:
    cfg = _base_config(args)
    data = read_point_csv(args.data)
    if args.method == "discontinuity":
        axis = {"s1": 0, "s2": 1}[args.axis]
        inside = data.coords[:, axis] > args.threshold
        dist = data.coords[:, axis] - args.threshold
        est = fit_discontinuity(data, inside, h=args.band, boundary_distance=dist, config=cfg)
        rows = [_est_row(est)]
    else:
        lo, hi = data.coords.min(axis=0), data.coords.max(axis=0)
        grid = make_grid(lo, hi, args.grid_n)
        kernel = SpilloverKernel(args.kernel, args.scale)
        fit = fit_geostat_interference(data, kernel, grid, config=cfg, imputation=args.imputation)
        if args.grid_out:
            write_grid_csv(grid, krige_impute(data.coords, data.a, fit.gp_params, grid), args.grid_out)
        rows = [_est_row(fit.direct), _est_row(fit.indirect)]
    _write_rows(args.out, ["estimator", "point", "lo95", "hi95"], rows)
    return 0


def _grid(text):
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 20x20, got '{text}'") from None
    return r, c


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spatialcausal", description="Spatial causal inference estimators and simulation harness.",
                epilog=SCHEMA_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate one benchmark dataset")
    s.add_argument("--scenario", choices=SCENARIOS, default="a")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--grid", type=_grid, default="20x20")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit one estimator to an areal CSV")
    s.add_argument("--estimator", choices=ESTIMATORS, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--lattice")
    s.add_argument("--strata", type=int, default=5)
    s.add_argument("--out")
    _mcmc_args(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("sim-study", help="run the spatial-confounding benchmark")
    s.add_argument("--out")
    s.add_argument("--scenarios", help="comma list overriding the config scenario")
    s.add_argument("--full-scale", action="store_true", help="100 datasets on a 30x30 grid")
    s.add_argument("--workers", type=int, default=1)
    _mcmc_args(s)
    s.set_defaults(func=cmd_sim_study)

    s = sub.add_parser("interference", help="exposure-mapping regression and policy effects")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("partial", "network"), default="partial")
    s.add_argument("--lattice")
    s.add_argument("--spatial", action="store_true")
    s.add_argument("--policy", type=float, default=0.5)
    s.add_argument("--reference", type=float, default=0.0)
    s.add_argument("--draws", type=int, default=100_000)
    s.add_argument("--out")
    s.add_argument("--coef-out", help="file for the coefficient summaries (default stdout)")
    _mcmc_args(s)
    s.set_defaults(func=cmd_interference)

    s = sub.add_parser("spacetime", help="panel estimators")
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=("janes", "did", "granger"), required=True)
    s.add_argument("--lattice")
    s.add_argument("--spillover", action="store_true")
    s.add_argument("--lags", type=int, default=1)
    s.add_argument("--out")
    _mcmc_args(s)
    s.set_defaults(func=cmd_spacetime)

    s = sub.add_parser("geostat", help="point-referenced estimators")
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=("discontinuity", "interference"), required=True)
    s.add_argument("--axis", choices=("s1", "s2"), default="s1", help="half-plane boundary axis")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--band", type=float, default=np.inf)
    s.add_argument("--kernel", choices=("disc", "gaussian"), default="disc")
    s.add_argument("--scale", type=float, default=0.1)
    s.add_argument("--grid-n", type=int, default=20)
    s.add_argument("--imputation", choices=("plugin", "multiple"), default="plugin")
    s.add_argument("--grid-out")
    s.add_argument("--out")
    _mcmc_args(s)
    s.set_defaults(func=cmd_geostat)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
