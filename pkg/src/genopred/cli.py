"""Command-line interface.

Subcommands: simulate, contaminate, fit, predict, evaluate, sweep,
heritability.  Configuration files are flat key=value text in INI
sections; defaults reproduce the published simulation layout, and
``--preset desk`` shrinks everything to laptop scale.  Exit codes:
0 success, 2 usage/configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from .core import (DataValidationError, MARKER_CODINGS, load_dataset,
                   save_dataset)
from .dpd import DpdConfig
from .evaluate import run_experiment, run_sweep, write_sweep_csv
from .heritability import heritability
from .mme import SingularSystemError
from .pipelines import MethodSpec, fit_method
from .robust import RobustFitError
from .shrinkage import ShrinkageError
from .simulate import (ContaminationScheme, SimulationConfig, contaminate,
                       save_truth, simulate)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

NUMERIC_ERRORS = (SingularSystemError, RobustFitError, ShrinkageError,
                  np.linalg.LinAlgError, FloatingPointError)

DESK_PRESET = {
    "phi": 10.0, "sigma2_g": 1.0, "sigma2_b": 5.0, "sigma2_e": 25.0,
    "genotypes": 100, "replicates": 2, "markers": 100,
    "block_sizes": "5*20", "marker_maf": 0.3, "seed": 20240117,
    "replications": 30,
}


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def parse_block_sizes(text: str) -> tuple[int, ...]:
    """Block layout syntax: comma-separated sizes, each optionally
    'size*count' (e.g. "13*5,10*65")."""
    sizes: list[int] = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if "*" in token:
            size, _, count = token.partition("*")
            sizes.extend([int(size)] * int(count))
        else:
            sizes.append(int(token))
    if not sizes:
        raise ConfigError(f"block_sizes: no sizes in {text!r}")
    return tuple(sizes)


def _read_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    return parser


def simulation_config(section, preset: dict) -> SimulationConfig:
    def get(key, cast, fallback):
        raw = section.get(key) if section is not None else None
        return cast(raw) if raw is not None else fallback

    try:
        layout = parse_block_sizes(get("block_sizes", str, preset["block_sizes"]))
        return SimulationConfig(
            phi=get("phi", float, preset["phi"]),
            sigma2_g=get("sigma2_g", float, preset["sigma2_g"]),
            sigma2_b=get("sigma2_b", float, preset["sigma2_b"]),
            sigma2_e=get("sigma2_e", float, preset["sigma2_e"]),
            n_genotypes=get("genotypes", int, preset["genotypes"]),
            replicates=get("replicates", int, preset["replicates"]),
            p=get("markers", int, preset["markers"]),
            block_layout=layout,
            marker_maf=get("marker_maf", float, preset["marker_maf"]),
            seed=get("seed", int, preset["seed"]),
        )
    except (ValueError, DataValidationError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from exc


PAPER_PRESET = {
    "phi": 0.05, "sigma2_g": 0.005892, "sigma2_b": 6.27, "sigma2_e": 53.8715,
    "genotypes": 715, "replicates": 2, "markers": 11646,
    "block_sizes": "13*5,10*65", "marker_maf": 0.3, "seed": 20240117,
    "replications": 100,
}


def _preset(args) -> dict:
    return DESK_PRESET if getattr(args, "preset", None) == "desk" else PAPER_PRESET


def _parse_schemes(text: str) -> list[ContaminationScheme]:
    schemes = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "none":
            schemes.append(ContaminationScheme.none())
        elif token == "random":
            schemes.append(ContaminationScheme.random())
        elif token == "block":
            schemes.append(ContaminationScheme.block())
        else:
            raise ConfigError(f"unknown contamination scheme {token!r}")
    return schemes


def _parse_methods(text: str) -> list[MethodSpec]:
    try:
        return [MethodSpec.parse(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg_file = _read_config(args.config)
    section = cfg_file["simulation"] if cfg_file.has_section("simulation") else None
    sim_cfg = simulation_config(section, _preset(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = simulate(sim_cfg)
    save_dataset(ds, out / "phenotypes.csv", out / "markers.csv")
    save_truth(truth, out / "truth.csv")
    print(f"wrote {ds.n_obs} observations, {ds.n_markers} markers, "
          f"{ds.n_blocks} blocks to {out}")
    return EXIT_OK


def cmd_contaminate(args) -> int:
    ds = load_dataset(args.phenotypes, args.markers, args.coding)
    scheme = {"random": ContaminationScheme.random(args.fraction, args.shift),
              "block": ContaminationScheme.block(int(args.blocks), args.shift),
              "none": ContaminationScheme.none()}[args.scheme]
    ds_c, idx = contaminate(ds, scheme, args.sigma_e, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds_c, out / "phenotypes.csv", out / "markers.csv")
    with open(out / "contaminated_indices.csv", "w", encoding="utf-8") as fh:
        fh.write("index\n")
        for i in idx:
            fh.write(f"{int(i)}\n")
    print(f"contaminated {idx.size} of {ds.n_obs} observations")
    return EXIT_OK


def _write_fit(fit, ds, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    vc = fit.variances
    with open(out / "fit.csv", "w", encoding="utf-8") as fh:
        fh.write("quantity,value\n")
        for i, g in enumerate(fit.gamma_hat):
            fh.write(f"gamma_{i + 1},{_fmt(g)}\n")
        fh.write(f"sigma2_g_mean,{_fmt(vc.mean_marker_variance())}\n")
        fh.write(f"sigma2_b,{_fmt(vc.sigma2_b)}\n")
        fh.write(f"sigma2_e,{_fmt(vc.sigma2_e)}\n")
        fh.write(f"heritability,{_fmt(fit.heritability)}\n")
        fh.write("heritability_sigma2_g_convention,"
                 f"{'mean_per_marker' if vc.heteroscedastic else 'homoscedastic'}\n")
        fh.write(f"iterations,{fit.diagnostics.iterations}\n")
        fh.write(f"objective,{_fmt(fit.diagnostics.objective)}\n")
        fh.write(f"converged,{int(fit.diagnostics.converged)}\n")
        for key, value in fit.diagnostics.extra.items():
            fh.write(f"{key},{value}\n")
    with open(out / "effects.csv", "w", encoding="utf-8") as fh:
        fh.write("effect,index,value,shrinkage\n")
        for j, (u, lam) in enumerate(zip(fit.effects.u_g, fit.shrinkage)):
            fh.write(f"u_g,{j + 1},{_fmt(u)},{_fmt(lam)}\n")
        for b, u in enumerate(fit.effects.u_b):
            fh.write(f"u_b,{b + 1},{_fmt(u)},\n")
    with open(out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("id,replicate,y,fitted,breeding_value\n")
        for i in range(ds.n_obs):
            fh.write(f"{ds.ids[i]},{ds.replicate_labels[i]},{_fmt(ds.y[i])},"
                     f"{_fmt(fit.fitted[i])},{_fmt(fit.breeding_values[i])}\n")


def cmd_fit(args) -> int:
    ds = load_dataset(args.phenotypes, args.markers, args.coding)
    spec = MethodSpec(args.method, args.alpha)
    dpd_cfg = DpdConfig(alpha=spec.alpha) if spec.alpha is not None else None
    fit = fit_method(spec, ds, dpd_cfg=dpd_cfg)
    _write_fit(fit, ds, Path(args.out))
    print(f"{spec.label}: heritability={fit.heritability:.6g} "
          f"converged={fit.diagnostics.converged}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ds = load_dataset(args.phenotypes, args.markers, args.coding)
    model = Path(args.model)
    u_g, u_b, lam = [], [], []
    with open(model / "effects.csv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["effect"] == "u_g":
                u_g.append(float(row["value"]))
            else:
                u_b.append(float(row["value"]))
    gamma = []
    with open(model / "fit.csv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["quantity"].startswith("gamma_"):
                gamma.append(float(row["value"]))
    if len(u_g) != ds.n_markers or len(u_b) != ds.n_blocks or len(gamma) != ds.n_confounders:
        raise DataValidationError(
            "model dimensions do not match the dataset "
            f"(p={len(u_g)} vs {ds.n_markers}, B={len(u_b)} vs {ds.n_blocks}, "
            f"L={len(gamma)} vs {ds.n_confounders})")
    yhat = ds.Z @ np.array(gamma) + ds.Xg @ np.array(u_g) + ds.Xb @ np.array(u_b)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("id,replicate,prediction\n")
        for i in range(ds.n_obs):
            fh.write(f"{ds.ids[i]},{ds.replicate_labels[i]},{_fmt(yhat[i])}\n")
    print(f"wrote {ds.n_obs} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg_file = _read_config(args.config)
    preset = _preset(args)
    sim_section = cfg_file["simulation"] if cfg_file.has_section("simulation") else None
    sim_cfg = simulation_config(sim_section, preset)

    schemes_text = "none,random,block"
    methods_text = "mdpde1:0.0,mdpde1:1.0"
    n_reps = preset["replications"]
    base_seed = 20240117
    train_fraction = 0.7
    if cfg_file.has_section("contamination"):
        schemes_text = cfg_file["contamination"].get("schemes", schemes_text)
    if cfg_file.has_section("methods"):
        methods_text = cfg_file["methods"].get("specs", methods_text)
    if cfg_file.has_section("evaluation"):
        ev = cfg_file["evaluation"]
        n_reps = ev.getint("replications", n_reps)
        base_seed = ev.getint("base_seed", base_seed)
        train_fraction = ev.getfloat("train_fraction", train_fraction)

    schemes = _parse_schemes(schemes_text)
    methods = _parse_methods(methods_text)
    report = run_experiment(sim_cfg, schemes, methods, n_reps, base_seed,
                            train_fraction, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_summary(out / "summary.md")
    print(f"wrote report.csv and summary.md to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg_file = _read_config(args.config)
    preset = _preset(args)
    sim_section = cfg_file["simulation"] if cfg_file.has_section("simulation") else None
    sim_cfg = simulation_config(sim_section, preset)

    g_values = [sim_cfg.sigma2_g * f for f in (0.25, 1.0, 4.0)]
    e_values = [sim_cfg.sigma2_e]
    method = MethodSpec("mdpde2", 1.0)
    n_reps = 10
    base_seed = 20240117
    if cfg_file.has_section("sweep"):
        sw = cfg_file["sweep"]
        if sw.get("sigma2_g_values"):
            g_values = [float(v) for v in sw["sigma2_g_values"].split(",")]
        if sw.get("sigma2_e_values"):
            e_values = [float(v) for v in sw["sigma2_e_values"].split(",")]
        if sw.get("method"):
            method = MethodSpec.parse(sw["method"])
        n_reps = sw.getint("replications", n_reps)
        base_seed = sw.getint("base_seed", base_seed)
    rows = run_sweep(sim_cfg, g_values, e_values, method, n_reps, base_seed,
                     jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    print(f"wrote {len(rows)} sweep points to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_heritability(args) -> int:
    value = heritability(args.sigma2_g, args.sigma2_e, args.replicates)
    print(_fmt(value))
    return EXIT_OK


# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genopred",
        description="Robust genomic prediction and heritability estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p):
        p.add_argument("--phenotypes", required=True, help="phenotype CSV")
        p.add_argument("--markers", required=True, help="marker CSV")
        p.add_argument("--coding", required=True, choices=sorted(MARKER_CODINGS),
                       help="marker alphabet (binary = {0,1}, ternary = {0,1,-1})")

    p = sub.add_parser("simulate", help="draw an artificial dataset")
    p.add_argument("--config", help="INI config with a [simulation] section")
    p.add_argument("--preset", choices=["desk"], help="desk-scale defaults")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("contaminate", help="inject outliers into a dataset")
    add_io(p)
    p.add_argument("--scheme", required=True, choices=["none", "random", "block"])
    p.add_argument("--sigma-e", type=float, required=True, dest="sigma_e",
                   help="residual SD defining the shift unit")
    p.add_argument("--fraction", type=float, default=0.05,
                   help="random scheme: fraction of observations")
    p.add_argument("--blocks", type=int, default=5,
                   help="block scheme: number of blocks")
    p.add_argument("--shift", type=float, default=None,
                   help="shift in residual-SD units (default 5 random / 8 block)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_contaminate)

    p = sub.add_parser("fit", help="fit one method on a dataset")
    add_io(p)
    p.add_argument("--method", required=True,
                   choices=["rmla", "rmlv", "rob-rmla", "rob-rmlv",
                            "mdpde1", "rob1", "rob2", "mdpde2"])
    p.add_argument("--alpha", type=float, default=None,
                   help="divergence tuning parameter (mdpde methods)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict phenotypes from a saved fit")
    add_io(p)
    p.add_argument("--model", required=True, help="directory written by fit")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Monte-Carlo method comparison")
    p.add_argument("--config", help="INI config")
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads over replications")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="accuracy over a signal/noise grid")
    p.add_argument("--config", help="INI config with a [sweep] section")
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heritability", help="heritability from variance components")
    p.add_argument("--sigma2-g", type=float, required=True, dest="sigma2_g")
    p.add_argument("--sigma2-e", type=float, required=True, dest="sigma2_e")
    p.add_argument("--replicates", type=int, required=True)
    p.set_defaults(func=cmd_heritability)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "shift", None) is None and args.command == "contaminate":
        args.shift = 8.0 if args.scheme == "block" else 5.0
    try:
        return args.func(args)
    except (ConfigError, DataValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
