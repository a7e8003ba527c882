"""Seeded replication engine, summaries against mean-field truth, and KDE data."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .equilibrium import (
    EquilibriumError,
    SolverSettings,
    policy_effects,
    solve_mean_field_price,
    true_effects,
)
from .estimators import EstimateReport, EstimationError, estimate
from .experiment import Design, run_experiment
from .model import ContinuousTreatment, Scenario

__all__ = [
    "ReplicationPlan",
    "EstimandSummary",
    "MonteCarloSummary",
    "ReplicationResult",
    "MonteCarloError",
    "replication_seed",
    "run_replications",
    "coverage",
    "density_data",
    "silverman_bandwidth",
    "Welford",
]

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 20


class MonteCarloError(RuntimeError):
    pass


@dataclass
class ReplicationPlan:
    scenario: Scenario
    design: Design = field(default_factory=Design)
    n: int = 2500
    num_reps: int = 1000
    base_seed: int = 0
    estimands: tuple[str, ...] | None = None
    level: float = 0.95
    corrected: bool = True
    max_failure_rate: float = 0.01
    settings: SolverSettings | None = None

    def __post_init__(self):
        if int(self.num_reps) != self.num_reps or self.num_reps < 1:
            raise ValueError(f"num_reps must be an integer >= 1, got {self.num_reps}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")
        if int(self.base_seed) != self.base_seed or self.base_seed < 0:
            raise ValueError("base_seed must be a non-negative integer")
        self.num_reps, self.n, self.base_seed = int(self.num_reps), int(self.n), int(self.base_seed)
        known = set(self.available_estimands())
        if self.estimands is not None:
            bad = set(self.estimands) - known
            if bad:
                raise ValueError(f"unknown estimands {sorted(bad)}; choose from {sorted(known)}")

    @property
    def continuous(self) -> bool:
        return isinstance(self.scenario.treatment, ContinuousTreatment)

    def available_estimands(self) -> list[str]:
        J = self.scenario.num_goods
        names = ["ADE", "AIE"]
        if self.continuous:
            names += ["MPE", "DPE", "IPE"] + [f"dp{j + 1}_deta" for j in range(J)]
        else:
            names += [f"dp{j + 1}_dpi" for j in range(J)]
        return names

    def selected(self) -> list[str]:
        return list(self.estimands) if self.estimands is not None else self.available_estimands()

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "design": self.design.to_dict(),
            "h_scale_effective": self.design.scale_for(self.scenario),
            "n": self.n,
            "num_reps": self.num_reps,
            "base_seed": self.base_seed,
            "estimands": self.selected(),
            "level": self.level,
            "corrected": self.corrected,
        }


def replication_seed(base_seed: int, rep_index: int, attempt: int = 0) -> np.random.SeedSequence:
    """Distinct, reproducible stream for each (replication, attempt) pair."""
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(rep_index), int(attempt)))


class Welford:
    """Single-pass mean and variance."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else float("nan")


@dataclass
class EstimandSummary:
    name: str
    truth: float
    mean: float
    sd: float
    bias: float
    bias_truth_minus_estimate: float
    coverage: float | None
    mc_standard_error: float
    num_reps: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MonteCarloSummary:
    estimands: dict[str, EstimandSummary]
    truth_source: str
    failed_rep_count: int
    plan: dict
    truth: dict

    FIELDS = ("estimand", "truth", "mean", "sd", "bias", "bias_truth_minus_estimate",
              "coverage", "mc_standard_error", "num_reps")

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "truth_source": self.truth_source,
            "failed_rep_count": self.failed_rep_count,
            "truth": self.truth,
            "estimands": {k: v.to_dict() for k, v in self.estimands.items()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for name, s in self.estimands.items():
                writer.writerow([name] + [_fmt(getattr(s, f)) for f in self.FIELDS[1:]])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class ReplicationResult:
    summary: MonteCarloSummary
    records: list[dict]
    reports: list[EstimateReport] | None = None


def _truth(plan: ReplicationPlan) -> tuple[dict, str, np.ndarray]:
    sc = plan.scenario
    pi = plan.design.pi
    truth = {}
    if plan.continuous:
        xi = sc.xi(plan.n)
        mf = true_effects(sc, pi, plan.settings, xi=xi)
        pe = policy_effects(sc)
        truth.update(MPE=pe.tau_mpe_star, DPE=pe.tau_dpe_star, IPE=pe.tau_ipe_star,
                     MPE_fd=pe.tau_mpe_fd)
        for j, v in enumerate(pe.dpdeta):
            truth[f"dp{j + 1}_deta"] = float(v)
        source = "numeric mean-field oracle"
    else:
        mf = true_effects(sc, pi, plan.settings)
        for j, v in enumerate(mf.dpdpi):
            truth[f"dp{j + 1}_dpi"] = float(v)
        source = "closed-form" if mf.oracle == "closed-form" else "numeric mean-field oracle"
    truth.update(ADE=mf.tau_ade_star, AIE=mf.tau_aie_star, sigma2_D=mf.sigma2_D, sigma2_I=mf.sigma2_I)
    truth["p_star"] = mf.p_star.tolist()
    return truth, source, mf.p_star


def _record(plan: ReplicationPlan, report: EstimateReport) -> dict:
    rec = {
        "ADE": (report.tau_ade_hat, report.ci_ade),
        "AIE": (report.tau_aie_hat, report.ci_aie),
    }
    key = "deta" if plan.continuous else "dpi"
    for j, v in enumerate(report.price_sensitivity_hat):
        rec[f"dp{j + 1}_{key}"] = (float(v), None)
    if plan.continuous:
        rec["MPE"] = (report.tau_mpe_hat, None)
        rec["DPE"] = (report.tau_dpe_hat, None)
        rec["IPE"] = (report.tau_ipe_hat, None)
    return rec


def _one_replication(plan: ReplicationPlan, rep: int, p0, keep_report: bool):
    failures = []
    for attempt in range(MAX_ATTEMPTS):
        seed = replication_seed(plan.base_seed, rep, attempt)
        try:
            data = run_experiment(plan.scenario, plan.n, plan.design, seed, plan.settings, p0=p0)
            report = estimate(data, plan.level, plan.corrected)
        except (EstimationError, EquilibriumError) as exc:
            failures.append(f"{type(exc).__name__}: {exc}")
            continue
        return rep, _record(plan, report), (report if keep_report else None), failures
    raise MonteCarloError(f"replication {rep} failed {MAX_ATTEMPTS} times: {failures[-1]}")


def run_replications(plan: ReplicationPlan, n_jobs: int = 1, sink=None,
                     keep_reports: bool = False) -> ReplicationResult:
    """Run ``plan.num_reps`` independent experiments and summarize them.

    Results depend only on the plan: each replication owns a stream derived
    from ``(base_seed, index)`` and aggregation runs in index order, so any
    ``n_jobs`` gives identical output. Failed attempts (degenerate arms,
    solver failures) are redrawn from a fresh stream and counted; more than
    ``max_failure_rate`` of ``num_reps`` raises :class:`MonteCarloError`.
    ``sink`` optionally receives per-replication estimates as CSV.
    """
    truth, source, p_star = _truth(plan)
    p0 = None
    if plan.scenario.num_goods > 1:
        xi = plan.scenario.xi(plan.n)
        p0 = solve_mean_field_price(plan.scenario, plan.design.pi, SolverSettings(tolerance=1e-9), xi).p_star
    reps = range(plan.num_reps)
    if n_jobs == 1:
        out = [_one_replication(plan, r, p0, keep_reports) for r in reps]
    else:
        out = Parallel(n_jobs=n_jobs)(delayed(_one_replication)(plan, r, p0, keep_reports) for r in reps)
    out.sort(key=lambda t: t[0])
    failed = sum(len(t[3]) for t in out)
    if failed > plan.max_failure_rate * plan.num_reps:
        raise MonteCarloError(
            f"{failed} failed replications exceed {plan.max_failure_rate:.1%} of {plan.num_reps}"
        )
    if failed:
        log.warning("%d replication attempts failed and were redrawn", failed)

    names = plan.selected()
    acc = {k: Welford() for k in names}
    hits = {k: 0 for k in names}
    records = []
    for rep, rec, _, _ in out:
        row = {"rep": rep}
        for k in names:
            value, ci = rec[k]
            acc[k].add(float(value))
            row[k] = float(value)
            if ci is not None and ci[0] <= truth[k] <= ci[1]:
                hits[k] += 1
        records.append(row)
    summaries = {}
    for k in names:
        w = acc[k]
        sd = math.sqrt(w.variance)
        has_ci = rec[k][1] is not None
        summaries[k] = EstimandSummary(
            name=k, truth=float(truth[k]), mean=w.mean, sd=sd, bias=w.mean - truth[k],
            bias_truth_minus_estimate=truth[k] - w.mean,
            coverage=hits[k] / plan.num_reps if has_ci else None,
            mc_standard_error=sd / math.sqrt(plan.num_reps), num_reps=plan.num_reps,
        )
    summary = MonteCarloSummary(summaries, source, failed, plan.to_dict(), truth)
    if sink is not None:
        with Path(sink).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep"] + names)
            for row in records:
                writer.writerow([row["rep"]] + [repr(row[k]) for k in names])
    reports = [t[2] for t in out] if keep_reports else None
    return ReplicationResult(summary, records, reports)


def coverage(reports, truth: float, level: float | None = None, which: str = "ade") -> float:
    """Fraction of intervals containing ``truth``.

    ``reports`` holds EstimateReports (interval picked by ``which`` in
    {"ade", "aie", "aie_uncorrected"}; ``level`` rebuilds it at another
    level) or plain ``(low, high)`` pairs.
    """
    from .estimators import confidence_intervals

    reports = list(reports)
    if not reports:
        raise ValueError("coverage needs at least one report")
    hits = 0
    for r in reports:
        if isinstance(r, EstimateReport):
            ci = confidence_intervals(r, level=level)[which] if level is not None else getattr(r, f"ci_{which}")
        else:
            ci = r
        hits += ci[0] <= truth <= ci[1]
    return hits / len(reports)


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(1.06 * np.std(x, ddof=1) * x.size ** (-0.2))


def density_data(estimates, bandwidth: float | None = None, grid_points: int = 512):
    """Gaussian kernel density on a grid spanning the data range +/- 3 bandwidths."""
    x = np.asarray(estimates, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("density needs at least two estimates")
    if not np.all(np.isfinite(x)):
        raise ValueError("estimates must be finite")
    if np.ptp(x) == 0:
        raise ValueError("estimates have zero variance")
    bw = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, grid_points)
    dens = np.zeros(grid_points)
    for chunk in np.array_split(x, max(1, x.size // 2048)):
        u = (grid[:, None] - chunk[None, :]) / bw
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * bw * math.sqrt(2 * math.pi)
    return grid, dens
