"""Direct, indirect and marginal-policy effect estimators with plug-in variances.

Notation used throughout:

* ``tau_z_ht``: Horvitz-Thompson contrast of excess demand between arms.
* ``delta_y_hat`` (J,): regression slope of Y on the price perturbations U.
* ``delta_z_hat`` (J, J): slope of Z on U, stored as an estimate of the
  excess-demand Jacobian (row = good, column = price).
* ``gamma_hat = delta_z_hat^{-T} delta_y_hat`` so that
  ``tau_aie_hat = -delta_y_hat' delta_z_hat^{-1} tau_z_ht = -gamma_hat' tau_z_ht``.

Sums over units are correctly rounded (``math.fsum``) and the small normal
equations are solved in rational arithmetic, so every estimate is exactly
invariant to the order of the units.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .experiment import ExperimentDataset

__all__ = [
    "EstimationError",
    "DegenerateArmError",
    "IllConditionedError",
    "EstimateReport",
    "ht_estimate",
    "regress_on_perturbations",
    "indirect_effect",
    "variance_direct",
    "variance_indirect",
    "confidence_intervals",
    "mpe_estimate",
    "aie_from_elasticities",
    "estimate",
    "MarketEffectEstimator",
]

MAX_CONDITION = 1e8


def _column_means(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.ndim == 1:
        return np.array([math.fsum(a.tolist()) / n])
    return np.array([math.fsum(col) / n for col in a.T.tolist()])


def _cross(A, B) -> np.ndarray:
    """``A' B`` with each entry summed exactly."""
    return np.array([[math.fsum((a * b).tolist()) for b in B.T] for a in A.T])


def _variance(x) -> float:
    x = np.asarray(x, dtype=float)
    centered = x - _column_means(x)[0]
    return math.fsum((centered * centered).tolist()) / x.size


def _covariance(X) -> np.ndarray:
    centered = X - _column_means(X)[None, :]
    return _cross(centered, centered) / X.shape[0]


def _rational_solve(G, C) -> np.ndarray:
    """Solve ``G X = C`` exactly in rationals, then round once to float."""
    J, K = C.shape
    rows = [[Fraction(v) for v in G[i]] + [Fraction(v) for v in C[i]] for i in range(J)]
    for col in range(J):
        pivot = next((r for r in range(col, J) if rows[r][col] != 0), None)
        if pivot is None:
            raise EstimationError("perturbation design is singular")
        rows[col], rows[pivot] = rows[pivot], rows[col]
        lead = rows[col][col]
        rows[col] = [v / lead for v in rows[col]]
        for r in range(J):
            if r != col and rows[r][col] != 0:
                f = rows[r][col]
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[col])]
    return np.array([[float(v) for v in row[J:]] for row in rows])


class EstimationError(RuntimeError):
    pass


class DegenerateArmError(EstimationError):
    """One treatment arm is (nearly) empty."""


class IllConditionedError(EstimationError):
    """The estimated excess-demand Jacobian cannot be inverted reliably."""


def _weights(treated, pi):
    """Signed inverse-probability weights ``W/pi - (1-W)/(1-pi)``."""
    pi = float(pi)
    if not 0.0 < pi < 1.0:
        raise ValueError(f"pi must lie strictly in (0, 1), got {pi}")
    t = np.asarray(treated, dtype=float)
    return t / pi - (1.0 - t) / (1.0 - pi)


def ht_estimate(values, W, pi) -> np.ndarray:
    """Horvitz-Thompson contrast of each column of ``values`` (n or n x K)."""
    v = np.asarray(values, dtype=float)
    w = _weights(W, pi)
    if v.shape[0] != w.shape[0]:
        raise ValueError("values and W differ in length")
    if v.ndim == 1:
        return _column_means(w * v)
    return _column_means(w[:, None] * v)


def regress_on_perturbations(targets, U, subset=None) -> np.ndarray:
    """Least-squares slopes ``(U'U)^{-1} U' targets`` (no intercept), optionally
    over a boolean/index ``subset`` of units. Returns J x K."""
    T = np.asarray(targets, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if T.ndim == 1:
        T = T[:, None]
    if subset is not None:
        U, T = U[subset], T[subset]
    gram = _cross(U, U)
    rank = np.linalg.matrix_rank(gram)
    if rank < U.shape[1]:
        raise EstimationError(f"perturbation design is singular (rank {rank} < {U.shape[1]})")
    return _rational_solve(gram, _cross(U, T))


def _check_arms(treated, minimum=2):
    t = np.asarray(treated, dtype=float)
    k = int(np.sum(t == 1.0))
    if k < minimum or t.size - k < minimum:
        raise DegenerateArmError(f"need at least {minimum} units per arm, got {k} treated of {t.size}")


def _jacobian_inverse_check(delta_z):
    cond = np.linalg.cond(delta_z)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedError(
            f"estimated excess-demand Jacobian is ill-conditioned (condition {cond:.3g}); "
            "increase the perturbation size h_n or the sample size"
        )


@dataclass
class _Pieces:
    tau_z: np.ndarray
    delta_y: np.ndarray
    delta_z: np.ndarray
    gamma: np.ndarray
    b: np.ndarray
    tau_aie: float


def _indirect_pieces(Y, Z, U, treated, pi) -> _Pieces:
    tau_z = ht_estimate(Z, treated, pi)
    delta_y = regress_on_perturbations(Y, U)[:, 0]
    delta_z = regress_on_perturbations(Z, U).T
    _jacobian_inverse_check(delta_z)
    gamma = np.linalg.solve(delta_z.T, delta_y)
    b = np.linalg.solve(delta_z, tau_z)
    return _Pieces(tau_z, delta_y, delta_z, gamma, b, float(-(delta_y @ b)))


def indirect_effect(dataset: ExperimentDataset) -> tuple[float, dict]:
    """Indirect effect estimate and its intermediates."""
    _check_arms(dataset.treated, 1)
    p = _indirect_pieces(dataset.Y, dataset.Z, dataset.U, dataset.treated, dataset.pi)
    return p.tau_aie, {
        "tau_z_ht": p.tau_z, "delta_y_hat": p.delta_y, "delta_z_hat": p.delta_z,
        "gamma_hat": p.gamma, "b_hat": p.b,
    }


def _arm_correction(targets, Z, U, treated, pi, delta_z):
    """Per-unit price-feedback term for an HT contrast of ``targets``.

    With ``M = (S_1 - S_0) delta_z^{-1}``, where ``S_k`` are the arm-specific
    perturbation slopes of ``targets``, the correction for unit i is
    ``-pi M Z_i`` if treated and ``(1 - pi) M Z_i`` otherwise.
    """
    t = np.asarray(treated, dtype=float) == 1.0
    S1 = regress_on_perturbations(targets, U, t).T
    S0 = regress_on_perturbations(targets, U, ~t).T
    M = np.linalg.solve(delta_z.T, (S1 - S0).T).T
    MZ = np.asarray(Z, dtype=float) @ M.T
    scale = np.where(t, -pi, 1.0 - pi)
    return scale[:, None] * MZ, S1, S0


def _variance_direct(Y, Z, U, treated, pi, delta_z):
    _check_arms(treated, 2)
    A, S1, S0 = _arm_correction(Y, Z, U, treated, pi, delta_z)
    psi = _weights(treated, pi) * (np.asarray(Y, dtype=float) + A[:, 0])
    return _variance(psi), S1[0], S0[0]


def variance_direct(dataset: ExperimentDataset) -> float:
    """Plug-in variance of ``sqrt(n) (tau_ade_hat - tau_ade)``.

    Empirical variance of ``(W/pi - (1-W)/(1-pi)) (Y + A_i)``, where ``A_i``
    removes the part of the contrast that moves with the clearing price.
    """
    _check_arms(dataset.treated, 2)
    if not np.any(dataset.Z):
        # no excess-demand variation, so there is no price feedback to remove
        return _variance(_weights(dataset.treated, dataset.pi) * np.asarray(dataset.Y, dtype=float))
    p = _indirect_pieces(dataset.Y, dataset.Z, dataset.U, dataset.treated, dataset.pi)
    return _variance_direct(dataset.Y, dataset.Z, dataset.U, dataset.treated, dataset.pi, p.delta_z)[0]


def _variance_indirect(Y, Z, U, treated, pi, h_n, p: _Pieces):
    Z = np.asarray(Z, dtype=float)
    resid = np.asarray(Y, dtype=float) - Z @ p.gamma
    v2 = float(_column_means(resid * resid)[0])
    sigma2 = float(p.b @ p.b * v2)
    B, _, _ = _arm_correction(Z, Z, U, treated, pi, p.delta_z)
    psi = _weights(treated, pi)[:, None] * (Z + B)
    omega = _covariance(psi)
    correction = float(h_n ** 2 * p.gamma @ omega @ p.gamma)
    return v2, sigma2, max(correction, 0.0) + sigma2, omega


def variance_indirect(dataset: ExperimentDataset, corrected: bool = False) -> float:
    """Plug-in variance of ``sqrt(n) h_n (tau_aie_hat - tau_aie)``; with
    ``corrected`` the second-order ``h_n^2 gamma' Omega gamma`` term is added."""
    _check_arms(dataset.treated, 2)
    p = _indirect_pieces(dataset.Y, dataset.Z, dataset.U, dataset.treated, dataset.pi)
    _, plain, corr, _ = _variance_indirect(dataset.Y, dataset.Z, dataset.U, dataset.treated,
                                           dataset.pi, dataset.h_n, p)
    return corr if corrected else plain


def _z_quantile(level):
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 + level / 2.0))


def _interval(center, sd, scale, z):
    half = z * math.sqrt(max(sd, 0.0)) / scale
    return (center - half, center + half)


def confidence_intervals(report: "EstimateReport", n: int | None = None, h_n: float | None = None,
                         level: float | None = None) -> dict:
    """Normal intervals ``tau_ade +/- z sigma_D / sqrt(n)`` and
    ``tau_aie +/- z sigma_I / (sqrt(n) h_n)``; ``aie`` uses the variance named
    by ``report.aie_variance``, ``aie_uncorrected`` always the plain one."""
    n = report.n if n is None else n
    h_n = report.h_n if h_n is None else h_n
    level = report.level if level is None else level
    z = _z_quantile(level)
    rn = math.sqrt(n)
    s2_aie = report.sigma2_I_corrected if report.aie_variance == "corrected" else report.sigma2_I_hat
    return {
        "ade": _interval(report.tau_ade_hat, report.sigma2_D_hat, rn, z),
        "aie": _interval(report.tau_aie_hat, s2_aie, rn * h_n, z),
        "aie_uncorrected": _interval(report.tau_aie_hat, report.sigma2_I_hat, rn * h_n, z),
    }


def mpe_estimate(report: "EstimateReport", xi_n: float | None = None) -> tuple[float, float, float]:
    """``(mpe, dpe, ipe)`` with ``dpe = tau_ade/(2 xi)``, ``ipe = tau_aie/(2 xi)``
    and ``mpe = dpe + ipe``."""
    xi_n = report.xi_n if xi_n is None else xi_n
    if xi_n is None:
        raise ValueError("marginal policy effects need a continuous design (xi_n)")
    if not xi_n > 0:
        raise ValueError(f"xi_n must be positive, got {xi_n}")
    dpe = report.tau_ade_hat / (2.0 * xi_n)
    ipe = report.tau_aie_hat / (2.0 * xi_n)
    return dpe + ipe, dpe, ipe


def aie_from_elasticities(kappa_s: float, kappa_d: float, tau_ade: float) -> float:
    """Indirect effect of a supply-side treatment in a one-good market with
    constant supply and demand elasticities."""
    kappa_s, kappa_d, tau_ade = float(kappa_s), float(kappa_d), float(tau_ade)
    if kappa_d == kappa_s:
        raise ValueError("demand and supply elasticities must differ")
    return kappa_s * tau_ade / (kappa_d - kappa_s)


def _as_list(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v


@dataclass
class EstimateReport:
    n: int
    pi: float
    h_n: float
    level: float
    tau_ade_hat: float
    tau_aie_hat: float
    tau_z_ht: np.ndarray
    delta_y_hat: np.ndarray
    delta_z_hat: np.ndarray
    delta_y1_hat: np.ndarray
    delta_y0_hat: np.ndarray
    delta_z1_hat: np.ndarray
    delta_z0_hat: np.ndarray
    gamma_hat: np.ndarray
    b_hat: np.ndarray
    v2_hat: float
    omega_hat: np.ndarray
    sigma2_D_hat: float
    sigma2_I_hat: float
    sigma2_I_corrected: float
    aie_variance: str = "corrected"
    ci_ade: tuple = ()
    ci_aie: tuple = ()
    ci_aie_uncorrected: tuple = ()
    xi_n: float | None = None
    tau_mpe_hat: float | None = None
    tau_dpe_hat: float | None = None
    tau_ipe_hat: float | None = None
    price_sensitivity_hat: np.ndarray | None = None
    P_tilde: np.ndarray | None = None
    clearing_residual: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: _as_list(v) for k, v in asdict(self).items()}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "EstimateReport":
        arrays = {"tau_z_ht", "delta_y_hat", "delta_z_hat", "delta_y1_hat", "delta_y0_hat",
                  "delta_z1_hat", "delta_z0_hat", "gamma_hat", "b_hat", "omega_hat",
                  "price_sensitivity_hat", "P_tilde"}
        kw = {}
        for k, v in data.items():
            if k in arrays and v is not None:
                kw[k] = np.asarray(v, dtype=float)
            elif k.startswith("ci_"):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)


def _estimate_arrays(Y, Z, U, treated, pi, h_n, level=0.95, corrected=True, xi_n=None):
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if U.ndim == 1:
        U = U[:, None]
    treated = np.asarray(treated, dtype=float)
    _check_arms(treated, 2)
    tau_ade = float(ht_estimate(Y, treated, pi)[0])
    p = _indirect_pieces(Y, Z, U, treated, pi)
    s2d, dy1, dy0 = _variance_direct(Y, Z, U, treated, pi, p.delta_z)
    v2, s2i, s2i_corr, omega = _variance_indirect(Y, Z, U, treated, pi, h_n, p)
    t = treated == 1.0
    dz1 = regress_on_perturbations(Z, U, t).T
    dz0 = regress_on_perturbations(Z, U, ~t).T
    report = EstimateReport(
        n=int(Y.shape[0]), pi=float(pi), h_n=float(h_n), level=float(level),
        tau_ade_hat=tau_ade, tau_aie_hat=p.tau_aie, tau_z_ht=p.tau_z,
        delta_y_hat=p.delta_y, delta_z_hat=p.delta_z, delta_y1_hat=dy1, delta_y0_hat=dy0,
        delta_z1_hat=dz1, delta_z0_hat=dz0, gamma_hat=p.gamma, b_hat=p.b, v2_hat=v2,
        omega_hat=omega, sigma2_D_hat=s2d, sigma2_I_hat=s2i, sigma2_I_corrected=s2i_corr,
        aie_variance="corrected" if corrected else "uncorrected", xi_n=xi_n,
        price_sensitivity_hat=-p.b,
    )
    ci = confidence_intervals(report)
    report.ci_ade, report.ci_aie, report.ci_aie_uncorrected = ci["ade"], ci["aie"], ci["aie_uncorrected"]
    if xi_n is not None:
        report.tau_mpe_hat, report.tau_dpe_hat, report.tau_ipe_hat = mpe_estimate(report, xi_n)
        # the arms sit 2 xi apart, so the per-unit-of-policy price response is b / (2 xi)
        report.price_sensitivity_hat = -p.b / (2.0 * xi_n)
    return report


def estimate(dataset: ExperimentDataset, level: float = 0.95, corrected: bool = True) -> EstimateReport:
    """All estimates, variances and intervals for one dataset.

    ``corrected`` selects the second-order corrected indirect-effect variance
    for ``ci_aie``; the uncorrected interval is always reported too.
    """
    report = _estimate_arrays(dataset.Y, dataset.Z, dataset.U, dataset.treated, dataset.pi,
                              dataset.h_n, level, corrected, dataset.xi_n)
    report.P_tilde = np.asarray(dataset.P_tilde, dtype=float)
    report.clearing_residual = float(dataset.clearing_residual)
    return report


class MarketEffectEstimator(BaseEstimator):
    """Estimator-style wrapper around :func:`estimate`.

    ``fit(U, Y, treatment=..., excess_demand=...)`` takes the perturbation
    matrix as ``X`` and outcomes as ``y``. ``treatment`` is the 0/1 indicator
    of the (upper) treated arm. ``h_n`` defaults to the perturbation
    magnitude found in ``U``.
    """

    def __init__(self, pi=0.5, h_n=None, xi_n=None, level=0.95, corrected=True):
        self.pi = pi
        self.h_n = h_n
        self.xi_n = xi_n
        self.level = level
        self.corrected = corrected

    def fit(self, X, y, *, treatment, excess_demand):
        U = check_array(X, dtype=float, ensure_min_samples=2)
        Y = check_array(y, dtype=float, ensure_2d=False)
        Z = check_array(excess_demand, dtype=float, ensure_2d=False)
        if Z.ndim == 1:
            Z = Z[:, None]
        W = check_array(treatment, dtype=float, ensure_2d=False)
        check_consistent_length(U, Y, Z, W)
        if Z.shape[1] != U.shape[1]:
            raise ValueError("excess_demand and X must have the same number of goods")
        if not np.all((W == 0.0) | (W == 1.0)):
            raise ValueError("treatment must be a 0/1 indicator")
        h_n = float(np.max(np.abs(U))) if self.h_n is None else float(self.h_n)
        if not h_n > 0:
            raise ValueError("h_n must be positive")
        self.report_ = _estimate_arrays(Y, Z, U, W, self.pi, h_n, self.level, self.corrected, self.xi_n)
        self.n_features_in_ = U.shape[1]
        self.tau_ade_ = self.report_.tau_ade_hat
        self.tau_aie_ = self.report_.tau_aie_hat
        self.gamma_ = self.report_.gamma_hat
        self.delta_z_ = self.report_.delta_z_hat
        self.ci_ade_ = self.report_.ci_ade
        self.ci_aie_ = self.report_.ci_aie
        self.tau_mpe_ = self.report_.tau_mpe_hat
        return self

    def fit_dataset(self, dataset: ExperimentDataset):
        """Fit from an :class:`ExperimentDataset`, taking pi, h_n and xi_n from it."""
        self.set_params(pi=dataset.pi, h_n=dataset.h_n, xi_n=dataset.xi_n)
        return self.fit(dataset.U, dataset.Y, treatment=dataset.treated, excess_demand=dataset.Z)

    def summary(self) -> dict:
        check_is_fitted(self, "report_")
        return self.report_.to_dict()
