"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 1 computational failure.
Settings come from flags, then an optional ``--config`` JSON file, then
defaults; the effective settings are written next to any outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .equilibrium import (
    EquilibriumError,
    check_contraction,
    policy_effects,
    true_effects,
)
from .estimators import EstimationError, aie_from_elasticities, estimate
from .experiment import Design, run_experiment
from .montecarlo import MonteCarloError, ReplicationPlan, density_data, run_replications
from .model import ContinuousTreatment, ScenarioError, load_scenario

log = logging.getLogger("marketeffects")

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2

DEFAULTS = {
    "scenario": "tech",
    "n": 2500,
    "pi": 0.5,
    "h_scale": None,
    "h_exponent": 1.0 / 3.0,
    "xi_scale": None,
    "xi_exponent": None,
    "eta": None,
    "treatment": None,
    "seed": 0,
    "reps": 1000,
    "threads": 1,
    "out": None,
    "level": 0.95,
    "corrected": True,
    "density": False,
    "estimates": False,
    "kappa_s": 1.8,
    "kappa_d": -1.5,
    "tau_ade": 4.0,
}


class UsageError(ValueError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with settings (flags take precedence)")
    p.add_argument("--scenario", help="built-in scenario id (tech, goat-hay, logistic) or scenario JSON path")
    p.add_argument("--n", type=int, help="number of units")
    p.add_argument("--pi", type=float, help="treatment probability")
    p.add_argument("--h-scale", type=float, help="perturbation scale c in h_n = c n^-alpha")
    p.add_argument("--h-exponent", type=float, help="perturbation exponent alpha in (1/4, 1/2)")
    p.add_argument("--xi-scale", type=float, help="continuous arm half-width scale")
    p.add_argument("--xi-exponent", type=float, help="continuous arm half-width exponent")
    p.add_argument("--eta", type=float, help="continuous policy level")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--continuous", dest="treatment", action="store_const", const="continuous",
                      help="use a continuous treatment at level --eta")
    kind.add_argument("--binary", dest="treatment", action="store_const", const="binary",
                      help="use a binary treatment")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--reps", type=int, help="Monte Carlo replications")
    p.add_argument("--threads", type=int, help="parallel workers for replications")
    p.add_argument("--out", help="output directory")
    p.add_argument("--level", type=float, help="confidence level")
    p.add_argument("--uncorrected", dest="corrected", action="store_const", const=False,
                   help="build the indirect-effect interval from the uncorrected variance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marketeffects", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mean-field", help="mean-field price, effects and diagnostics")
    _common(p)
    p = sub.add_parser("simulate", help="run one experiment and estimate effects")
    _common(p)
    p = sub.add_parser("replicate", help="Monte Carlo replications against mean-field truth")
    _common(p)
    p.add_argument("--density", action="store_const", const=True, help="also write density.csv")
    p.add_argument("--estimates", action="store_const", const=True,
                   help="also write per-replication estimates.csv")
    p = sub.add_parser("tuition-example", help="indirect effect from supply/demand elasticities")
    _common(p)
    p.add_argument("--kappa-s", type=float, help="supply elasticity")
    p.add_argument("--kappa-d", type=float, help="demand elasticity")
    p.add_argument("--tau-ade", type=float, help="direct effect")
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if int(cfg["n"]) != cfg["n"] or cfg["n"] < 2:
        raise UsageError(f"--n must be an integer >= 2, got {cfg['n']}")
    if int(cfg["reps"]) != cfg["reps"] or cfg["reps"] < 1:
        raise UsageError(f"--reps must be an integer >= 1, got {cfg['reps']}")
    if int(cfg["threads"]) != cfg["threads"] or cfg["threads"] < 1:
        raise UsageError(f"--threads must be an integer >= 1, got {cfg['threads']}")
    if not 0.0 <= float(cfg["pi"]) <= 1.0:
        raise UsageError(f"--pi must lie in [0, 1], got {cfg['pi']}")
    if cfg["command"] in ("simulate", "replicate") and not 0.0 < float(cfg["pi"]) < 1.0:
        raise UsageError(f"--pi must lie strictly in (0, 1) for experiments, got {cfg['pi']}")
    if not 0.0 < float(cfg["level"]) < 1.0:
        raise UsageError(f"--level must lie in (0, 1), got {cfg['level']}")
    if cfg["seed"] is None or int(cfg["seed"]) != cfg["seed"] or cfg["seed"] < 0:
        raise UsageError("--seed must be a non-negative integer")


def scenario_from_config(cfg: dict):
    source = cfg["scenario"]
    if isinstance(source, dict):
        doc = dict(source)
    elif str(source).endswith(".json") or Path(str(source)).is_file():
        path = Path(str(source))
        if not path.exists():
            raise UsageError(f"scenario file not found: {path}")
        doc = json.loads(path.read_text())
    else:
        doc = {"id": str(source)}
    params = dict(doc.get("params") or {})
    treatment = doc.get("treatment")
    if isinstance(treatment, dict):
        params.update({k: v for k, v in treatment.items() if k != "kind"})
        treatment = treatment.get("kind")
    if cfg["treatment"] is not None:
        treatment = cfg["treatment"]
    if treatment is not None:
        params["treatment"] = treatment
    for key in ("eta", "xi_scale", "xi_exponent"):
        if cfg[key] is not None:
            params[key] = cfg[key]
    doc["params"] = params
    doc.pop("treatment", None)
    return load_scenario(doc)


def _out_dir(cfg: dict) -> Path | None:
    if cfg["out"] is None:
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path | None, cfg: dict, scenario=None) -> None:
    if out is None:
        return
    doc = dict(cfg)
    if scenario is not None:
        doc["scenario_resolved"] = scenario.to_dict()
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _emit(pairs) -> None:
    for key, value in pairs:
        if isinstance(value, (list, tuple)):
            value = " ".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        print(f"{key} = {value}")


def cmd_mean_field(cfg: dict) -> int:
    sc = scenario_from_config(cfg)
    out = _out_dir(cfg)
    pi = float(cfg["pi"])
    mf = true_effects(sc, pi)
    diag = check_contraction(sc, pi)
    rows = [
        ("scenario", sc.id),
        ("pi", pi),
        ("p_star", mf.p_star.tolist()),
        ("clearing_residual", mf.clearing_residual),
        ("dp_dpi", mf.dpdpi.tolist()),
        ("tau_ade_star", mf.tau_ade_star),
        ("tau_aie_star", mf.tau_aie_star),
    ]
    if mf.sigma2_D is not None:
        rows += [("sigma2_D", mf.sigma2_D), ("sigma2_I", mf.sigma2_I)]
    result = mf.to_dict()
    if isinstance(sc.treatment, ContinuousTreatment):
        pe = policy_effects(sc)
        rows += [
            ("eta", pe.eta),
            ("dp_deta", pe.dpdeta.tolist()),
            ("tau_dpe_star", pe.tau_dpe_star),
            ("tau_ipe_star", pe.tau_ipe_star),
            ("tau_mpe_star", pe.tau_mpe_star),
            ("tau_mpe_fd", pe.tau_mpe_fd),
        ]
        result["policy_effects"] = pe.to_dict()
    rows += [("contraction_max_norm", diag.max_norm), ("contractive", diag.contractive)]
    result["contraction"] = {"max_norm": diag.max_norm, "contractive": diag.contractive}
    _emit(rows)
    if out is not None:
        (out / "mean_field.json").write_text(json.dumps(result, indent=2) + "\n")
    _write_config(out, cfg, sc)
    return EXIT_OK


def _design(cfg: dict) -> Design:
    return Design(pi=cfg["pi"], h_scale=cfg["h_scale"], h_exponent=cfg["h_exponent"], seed=cfg["seed"])


def cmd_simulate(cfg: dict) -> int:
    sc = scenario_from_config(cfg)
    design = _design(cfg)
    out = _out_dir(cfg)
    data = run_experiment(sc, cfg["n"], design, cfg["seed"])
    report = estimate(data, cfg["level"], cfg["corrected"])
    rows = [
        ("scenario", sc.id),
        ("n", data.n),
        ("h_n", data.h_n),
        ("P_tilde", data.P_tilde.tolist()),
        ("clearing_residual", data.clearing_residual),
        ("tau_ade_hat", report.tau_ade_hat),
        ("tau_aie_hat", report.tau_aie_hat),
        ("ci_ade", report.ci_ade),
        ("ci_aie", report.ci_aie),
    ]
    if report.tau_mpe_hat is not None:
        rows += [("tau_mpe_hat", report.tau_mpe_hat), ("tau_dpe_hat", report.tau_dpe_hat),
                 ("tau_ipe_hat", report.tau_ipe_hat)]
    _emit(rows)
    if out is not None:
        data.to_csv(out / "dataset.csv")
        report.to_json(out / "report.json")
    _write_config(out, cfg, sc)
    return EXIT_OK


def cmd_replicate(cfg: dict) -> int:
    sc = scenario_from_config(cfg)
    plan = ReplicationPlan(sc, _design(cfg), n=cfg["n"], num_reps=cfg["reps"], base_seed=cfg["seed"],
                           level=cfg["level"], corrected=cfg["corrected"])
    out = _out_dir(cfg)
    sink = out / "estimates.csv" if (out is not None and cfg["estimates"]) else None
    result = run_replications(plan, n_jobs=cfg["threads"], sink=sink)
    summary = result.summary
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(summary.FIELDS)
    for name, s in summary.estimands.items():
        writer.writerow([name] + ["" if getattr(s, f) is None else repr(getattr(s, f))
                                  if isinstance(getattr(s, f), float) else getattr(s, f)
                                  for f in summary.FIELDS[1:]])
    print(f"# truth_source = {summary.truth_source}; failed_rep_count = {summary.failed_rep_count}")
    if out is not None:
        summary.to_csv(out / "summary.csv")
        summary.to_json(out / "summary.json")
        if cfg["density"]:
            names = [k for k in ("ADE", "MPE", "DPE") if k in summary.estimands]
            with (out / "density.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["estimand", "x", "density"])
                for k in names:
                    values = [r[k] for r in result.records]
                    if len(values) < 2:
                        continue
                    grid, dens = density_data(values)
                    for x, d in zip(grid, dens):
                        w.writerow([k, repr(float(x)), repr(float(d))])
    _write_config(out, cfg, sc)
    return EXIT_OK


def cmd_tuition(cfg: dict) -> int:
    aie = aie_from_elasticities(cfg["kappa_s"], cfg["kappa_d"], cfg["tau_ade"])
    total = float(cfg["tau_ade"]) + aie
    _emit([("kappa_s", float(cfg["kappa_s"])), ("kappa_d", float(cfg["kappa_d"])),
           ("tau_ade", float(cfg["tau_ade"])), ("tau_aie", aie), ("total", total)])
    out = _out_dir(cfg)
    if out is not None:
        (out / "tuition.json").write_text(json.dumps({"tau_aie": aie, "total": total}, indent=2) + "\n")
    _write_config(out, cfg)
    return EXIT_OK


COMMANDS = {
    "mean-field": cmd_mean_field,
    "simulate": cmd_simulate,
    "replicate": cmd_replicate,
    "tuition-example": cmd_tuition,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except (EquilibriumError, EstimationError, MonteCarloError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (UsageError, ScenarioError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
