"""Finite-sample and mean-field price equilibria.

The mean-field price ``p*`` solves ``z_pi(p) = 0`` where
``z_pi(p) = pi z(w_1, p) + (1 - pi) z(w_0, p)`` averages expected excess
demand over the two treatment arms. The finite-sample price minimizes the
norm of average unit excess demand, each unit facing its own perturbed price.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .model import ContinuousTreatment, Population, Scenario, TechScenario

__all__ = [
    "SolverSettings",
    "EquilibriumError",
    "SingularJacobianError",
    "MeanFieldSolution",
    "PolicyEffects",
    "ContractionDiagnostic",
    "FiniteSampleSolution",
    "mean_field_excess_demand",
    "mean_field_jacobian",
    "solve_mean_field_price",
    "check_contraction",
    "price_sensitivity",
    "true_effects",
    "policy_effects",
    "unit_moments",
    "solve_finite_sample_price",
    "market_objective",
]

log = logging.getLogger(__name__)

SINGULAR_CONDITION = 1e8
# objective values closer than this are treated as tied
TIE_TOL = 1e-12


class EquilibriumError(RuntimeError):
    """Solver failure. Carries the last iterate and a contraction estimate."""

    def __init__(self, message, last_iterate=None, contraction=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.contraction = contraction


class SingularJacobianError(EquilibriumError):
    """Excess-demand Jacobian is (numerically) singular."""

    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


@dataclass
class SolverSettings:
    tolerance: float = 1e-10
    max_iters: int = 10_000
    damping: float = 0.5
    breakpoint_refinement: bool = True
    max_sweeps: int = 200

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class MeanFieldSolution:
    pi: float
    p_star: np.ndarray
    clearing_residual: float
    iterations: int = 0
    xi: float | None = None
    z_jacobian: np.ndarray | None = None
    dz_dpi: np.ndarray | None = None
    dpdpi: np.ndarray | None = None
    grad_y: np.ndarray | None = None
    tau_ade_star: float | None = None
    tau_aie_star: float | None = None
    gamma: np.ndarray | None = None
    residual_var: float | None = None
    sigma2_D: float | None = None
    sigma2_I: float | None = None
    oracle: str | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass
class PolicyEffects:
    """Marginal policy effect of a continuous treatment at level ``eta``."""

    eta: float
    p_star: np.ndarray
    z_jacobian: np.ndarray
    dpdeta: np.ndarray
    grad_y: np.ndarray
    tau_dpe_star: float
    tau_ipe_star: float
    tau_mpe_star: float
    tau_mpe_fd: float

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


@dataclass
class ContractionDiagnostic:
    max_norm: float
    contractive: bool
    grid: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)


@dataclass
class FiniteSampleSolution:
    price: np.ndarray
    objective: float
    sweeps: int
    method: str


def _check_pi(pi: float) -> float:
    pi = float(pi)
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    return pi


def _arms(scenario: Scenario, xi):
    if isinstance(scenario.treatment, ContinuousTreatment):
        return scenario.arms(0.0 if xi is None else xi)
    return scenario.arms()


def mean_field_excess_demand(scenario: Scenario, pi: float, p, xi: float | None = None) -> np.ndarray:
    """Expected excess demand ``z_pi(p)`` when a fraction ``pi`` is treated.

    For continuous treatments the arms are ``eta +/- xi`` (``xi`` defaults
    to 0, i.e. both arms at ``eta``).
    """
    pi = _check_pi(pi)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    w1, w0 = _arms(scenario, xi)
    return pi * scenario.mean_excess_demand(w1, p) + (1 - pi) * scenario.mean_excess_demand(w0, p)


def mean_field_jacobian(scenario: Scenario, pi: float, p, xi: float | None = None) -> np.ndarray:
    """``grad_p z_pi(p)`` with rows = goods and columns = prices."""
    w1, w0 = _arms(scenario, xi)
    _, jd1, js1 = scenario.mean_gradients(w1, p)
    _, jd0, js0 = scenario.mean_gradients(w0, p)
    return pi * (jd1 - js1) + (1 - pi) * (jd0 - js0)


def _condition(H: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        return float(np.linalg.cond(H))


def _solve_checked(H: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = _condition(H)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise SingularJacobianError(f"{what} is singular (condition number {cond:.3g})", cond)
    return np.linalg.solve(H, rhs)


def check_contraction(scenario: Scenario, pi: float, grid_points: int | None = None,
                      xi: float | None = None) -> ContractionDiagnostic:
    """Largest spectral norm of ``grad f = I + grad z_pi`` over a price grid.

    The grid has ``grid_points`` per coordinate (default 50 for one good,
    12 per coordinate otherwise), spanning the price box.
    """
    J = scenario.num_goods
    if grid_points is None:
        grid_points = 50 if J == 1 else 12
    axes = [np.linspace(scenario.price_lower[j], scenario.price_upper[j], grid_points) for j in range(J)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, J)
    norms = np.empty(len(grid))
    eye = np.eye(J)
    for k, p in enumerate(grid):
        H = mean_field_jacobian(scenario, pi, p, xi)
        norms[k] = np.linalg.norm(eye + H, 2)
    max_norm = float(norms.max())
    return ContractionDiagnostic(max_norm, max_norm < 1.0, grid, norms)


def _newton(scenario, pi, p, xi, tol, max_steps=50):
    lo, hi = scenario.price_lower, scenario.price_upper
    z = mean_field_excess_demand(scenario, pi, p, xi)
    for _ in range(max_steps):
        if np.max(np.abs(z)) <= tol:
            break
        H = mean_field_jacobian(scenario, pi, p, xi)
        try:
            step = _solve_checked(H, z, "excess-demand Jacobian")
        except SingularJacobianError:
            break
        t = 1.0
        while t > 1e-6:
            cand = np.clip(p - t * step, lo, hi)
            zc = mean_field_excess_demand(scenario, pi, cand, xi)
            if np.max(np.abs(zc)) < np.max(np.abs(z)):
                p, z = cand, zc
                break
            t *= 0.5
        else:
            break
    return p, z


def solve_mean_field_price(scenario: Scenario, pi: float, settings: SolverSettings | None = None,
                           xi: float | None = None, p0=None) -> MeanFieldSolution:
    """Solve ``z_pi(p) = 0`` by damped fixed-point iteration ``p <- p + lambda z_pi(p)``
    inside the price box, polished with Newton steps once close."""
    settings = settings or SolverSettings()
    pi = _check_pi(pi)
    lo, hi = scenario.price_lower, scenario.price_upper
    p = 0.5 * (lo + hi) if p0 is None else np.clip(np.asarray(p0, dtype=float), lo, hi)
    z = mean_field_excess_demand(scenario, pi, p, xi)
    polish_at = max(1e-6, settings.tolerance)
    it = 0
    for it in range(1, settings.max_iters + 1):
        if np.max(np.abs(z)) <= polish_at:
            break
        p = np.clip(p + settings.damping * z, lo, hi)
        z = mean_field_excess_demand(scenario, pi, p, xi)
    if np.max(np.abs(z)) > settings.tolerance:
        p, z = _newton(scenario, pi, p, xi, settings.tolerance)
    resid = float(np.max(np.abs(z)))
    if resid > settings.tolerance:
        diag = check_contraction(scenario, pi, xi=xi)
        if not diag.contractive:
            warnings.warn(
                f"contraction condition fails (max ||grad f|| = {diag.max_norm:.3f})",
                RuntimeWarning, stacklevel=2,
            )
        raise EquilibriumError(
            f"mean-field price did not converge: residual {resid:.3g} after {it} iterations",
            last_iterate=p, contraction=diag.max_norm,
        )
    return MeanFieldSolution(pi=pi, p_star=p, clearing_residual=resid, iterations=it, xi=xi)


def price_sensitivity(scenario: Scenario, pi: float, mfs: MeanFieldSolution | None = None,
                      settings: SolverSettings | None = None, xi: float | None = None) -> np.ndarray:
    """``d p*_pi / d pi = (-grad_p z_pi)^{-1} (z(w_1, p*) - z(w_0, p*))``."""
    if mfs is None:
        mfs = solve_mean_field_price(scenario, pi, settings, xi)
    p = mfs.p_star
    w1, w0 = _arms(scenario, xi if xi is not None else mfs.xi)
    H = mean_field_jacobian(scenario, pi, p, xi if xi is not None else mfs.xi)
    dz = scenario.mean_excess_demand(w1, p) - scenario.mean_excess_demand(w0, p)
    if not np.any(dz):
        return np.zeros(scenario.num_goods)
    return _solve_checked(-H, dz, "excess-demand Jacobian")


def unit_moments(scenario: Scenario, p, arms, oracle: str = "auto", draws: int = 1_000_000,
                 seed: int = 0):
    """First and second moments of ``v = (Y(w1), Y(w0), Z(w1), Z(w0))`` at fixed
    prices ``p``, over the agent type distribution.

    Returns ``(mean, second_moment, source)``. The tech scenario has closed
    forms; otherwise ``draws`` seeded Monte Carlo draws are used.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    w1, w0 = arms
    if oracle not in ("auto", "closed-form", "monte-carlo"):
        raise ValueError(f"unknown oracle {oracle!r}")
    if oracle != "monte-carlo" and isinstance(scenario, TechScenario):
        return (*_tech_moments(scenario, float(p[0]), w1, w0), "closed-form")
    if oracle == "closed-form":
        raise ValueError(f"no closed-form moments for scenario {scenario.id}")
    rng = np.random.default_rng(seed)
    latent = scenario.sample_latent(rng, draws)
    cols = [
        scenario.outcome(latent, w1, p)[:, None],
        scenario.outcome(latent, w0, p)[:, None],
        scenario.excess_demand(latent, w1, p),
        scenario.excess_demand(latent, w0, p),
    ]
    v = np.hstack(cols)
    return v.mean(axis=0), v.T @ v / draws, "monte-carlo"


def _tech_moments(sc: TechScenario, p: float, w1: float, w0: float):
    a, b = sc.clo, sc.chi
    F = min(max((p - a) / (b - a), 0.0), 1.0)
    G = min(max((sc.vhi - p) / (sc.vhi - sc.vlo), 0.0), 1.0)
    top = min(p, b)
    if p <= a:
        q1 = q2 = 0.0
    else:
        # E[(p - C)^k 1(C < p)] for C ~ U(a, b)
        q1 = ((p - a) ** 2 - (p - top) ** 2) / (2 * (b - a))
        q2 = ((p - a) ** 3 - (p - top) ** 3) / (3 * (b - a))
    m1, m0 = float(sc._m(w1)), float(sc._m(w0))
    # v = A (Q, X, B) with Q = (p - C)^+, X = 1(C < p), B = 1(V > p); B independent of (Q, X)
    A = np.array([[m1, 0, 0], [m0, 0, 0], [0, -m1, 1], [0, -m0, 1]], dtype=float)
    mu_b = np.array([q1, F, G])
    M_b = np.array([[q2, q1, q1 * G], [q1, F, F * G], [q1 * G, F * G, G]])
    return A @ mu_b, A @ M_b @ A.T


def true_effects(scenario: Scenario, pi: float, settings: SolverSettings | None = None,
                 xi: float | None = None, oracle: str = "auto", draws: int = 1_000_000,
                 seed: int = 0) -> MeanFieldSolution:
    """Mean-field price, effects and asymptotic variances at treatment
    probability ``pi``.

    ``tau_ade_star = y(w1, p*) - y(w0, p*)``; ``tau_aie_star = grad_y . dp*/dpi``
    with ``grad_y`` the gradient of the arm-averaged mean outcome.
    ``sigma2_D`` and ``sigma2_I`` are the limiting variances of
    ``sqrt(n)(tau_ade_hat - tau_ade_star)`` and
    ``sqrt(n) h_n (tau_aie_hat - tau_aie_star)``.
    """
    pi = _check_pi(pi)
    mfs = solve_mean_field_price(scenario, pi, settings, xi)
    p = mfs.p_star
    J = scenario.num_goods
    w1, w0 = _arms(scenario, xi)
    H = mean_field_jacobian(scenario, pi, p, xi)
    y1, _, _ = scenario.mean_parts(w1, p)
    y0, _, _ = scenario.mean_parts(w0, p)
    gy1, _, _ = scenario.mean_gradients(w1, p)
    gy0, _, _ = scenario.mean_gradients(w0, p)
    grad_y = pi * gy1 + (1 - pi) * gy0
    dz = scenario.mean_excess_demand(w1, p) - scenario.mean_excess_demand(w0, p)
    dpdpi = _solve_checked(-H, dz, "excess-demand Jacobian") if np.any(dz) else np.zeros(J)
    gamma = _solve_checked(H.T, grad_y, "excess-demand Jacobian")
    mfs.z_jacobian = H
    mfs.dz_dpi = dz
    mfs.dpdpi = dpdpi
    mfs.grad_y = grad_y
    mfs.tau_ade_star = float(y1 - y0)
    mfs.tau_aie_star = float(grad_y @ dpdpi)
    mfs.gamma = gamma

    if 0 < pi < 1:
        mu, M, source = unit_moments(scenario, p, (w1, w0), oracle, draws, seed)
        # price feedback enters the HT contrast as -a' H^{-1} Z_i
        k = -_solve_checked(H.T, gy1 - gy0, "excess-demand Jacobian")
        Zsl1 = slice(2, 2 + J)
        Zsl0 = slice(2 + J, 2 + 2 * J)
        c_R = np.zeros(2 + 2 * J)
        c_R[0], c_R[1] = 1 / pi, 1 / (1 - pi)
        c_R[Zsl1], c_R[Zsl0] = k, -k
        c_T = np.zeros(2 + 2 * J)
        c_T[0], c_T[1] = 1.0, -1.0
        c_T[Zsl1], c_T[Zsl0] = pi * k, (1 - pi) * k
        ER2 = c_R @ M @ c_R
        varT = c_T @ M @ c_T - (c_T @ mu) ** 2
        mfs.sigma2_D = float(pi * (1 - pi) * ER2 + varT)
        c1 = np.zeros(2 + 2 * J)
        c1[0], c1[Zsl1] = 1.0, -gamma
        c0 = np.zeros(2 + 2 * J)
        c0[1], c0[Zsl0] = 1.0, -gamma
        v2 = pi * (c1 @ M @ c1) + (1 - pi) * (c0 @ M @ c0)
        mfs.residual_var = float(v2)
        mfs.sigma2_I = float(v2 * dpdpi @ dpdpi)
        mfs.oracle = source
    return mfs


def policy_effects(scenario: Scenario, settings: SolverSettings | None = None,
                   fd_step: float = 1e-4) -> PolicyEffects:
    """Mean-field marginal policy effect of a continuous treatment at its level
    ``eta``, split into direct and indirect (price-mediated) parts."""
    if not isinstance(scenario.treatment, ContinuousTreatment):
        raise ValueError("policy effects need a continuous treatment")
    settings = settings or SolverSettings(tolerance=1e-12)
    eta = scenario.treatment.eta

    def p_star(level):
        def z(p):
            return scenario.mean_excess_demand(level, p)
        sol = _solve_level(scenario, z, settings)
        return sol

    p = p_star(eta)
    _, jd, js = scenario.mean_gradients(eta, p)
    H = jd - js
    dy, dd, ds = scenario.mean_treatment_derivative(eta, p)
    dpdeta = _solve_checked(-H, dd - ds, "excess-demand Jacobian")
    grad_y, _, _ = scenario.mean_gradients(eta, p)
    ipe = float(grad_y @ dpdeta)
    yp, _, _ = scenario.mean_parts(eta + fd_step, p_star(eta + fd_step))
    ym, _, _ = scenario.mean_parts(eta - fd_step, p_star(eta - fd_step))
    return PolicyEffects(
        eta=eta, p_star=p, z_jacobian=H, dpdeta=dpdeta, grad_y=grad_y,
        tau_dpe_star=float(dy), tau_ipe_star=ipe, tau_mpe_star=float(dy) + ipe,
        tau_mpe_fd=float((yp - ym) / (2 * fd_step)),
    )


def _solve_level(scenario, z, settings):
    # Both arms at one treatment level: z_pi does not depend on pi.
    lo, hi = scenario.price_lower, scenario.price_upper
    p = 0.5 * (lo + hi)
    zp = z(p)
    for _ in range(settings.max_iters):
        if np.max(np.abs(zp)) <= 1e-7:
            break
        p = np.clip(p + settings.damping * zp, lo, hi)
        zp = z(p)
    sol = optimize.root(z, p, method="hybr", options={"xtol": 1e-14})
    if sol.success and np.max(np.abs(z(sol.x))) <= max(settings.tolerance, 1e-10):
        return sol.x
    if np.max(np.abs(zp)) <= settings.tolerance:
        return p
    raise EquilibriumError("mean-field price did not converge", last_iterate=p)


# --------------------------------------------------------------------------
# finite-sample price


def market_objective(population: Population, W, U, p) -> float:
    """``|| (1/n) sum_i Z_i(W_i, p + U_i) ||_2``."""
    P = np.atleast_1d(np.asarray(p, dtype=float))[None, :] + U
    zbar = population.excess_demand(W, P).mean(axis=0)
    return float(np.linalg.norm(zbar))


def _scan_coordinate(population: Population, W, U, p, j):
    """Exact minimization of the market objective along price coordinate ``j``.

    Candidates are the box ends, every unit threshold (shifted into the common
    price scale), and the midpoints between consecutive candidates. Returns
    ``(best_price_j, best_objective)``.
    """
    sc = population.scenario
    lat = population.latent
    n = population.n
    lo, hi = sc.price_lower[j], sc.price_upper[j]
    Q = p[None, :] + U
    T = np.asarray(sc.thresholds(lat, W, Q, j), dtype=float) - U[:, [j]]
    T = np.sort(T, axis=1)
    dup = np.zeros_like(T, dtype=bool)
    dup[:, 1:] = T[:, 1:] == T[:, :-1]
    T[dup] = np.nan
    T = np.sort(T, axis=1)
    K = T.shape[1]

    def eval_at(pj):
        Qx = Q.copy()
        Qx[:, j] = np.where(np.isnan(pj), p[j], pj) + U[:, j]
        return sc.excess_demand(lat, W, Qx)

    # value of each unit on each of its own segments
    reps = np.empty((n, K + 1))
    reps[:, 0] = T[:, 0] - 1.0
    for k in range(1, K):
        mid = 0.5 * (T[:, k - 1] + T[:, k])
        reps[:, k] = np.where(np.isnan(T[:, k]), T[:, k - 1] + 1.0, mid)
    reps[:, K] = T[:, K - 1] + 1.0
    seg = [eval_at(reps[:, k]) for k in range(K + 1)]
    at = [eval_at(T[:, k]) for k in range(K)]

    inside = ~np.isnan(T) & (T > lo) & (T < hi)
    ts, jumps, bumps = [], [], []
    for k in range(K):
        m = inside[:, k]
        if m.any():
            ts.append(T[m, k])
            jumps.append(seg[k + 1][m] - seg[k][m])
            bumps.append(at[k][m] - seg[k][m])
    J = sc.num_goods
    if ts:
        t_all = np.concatenate(ts)
        g, inv = np.unique(t_all, return_inverse=True)
        jump_sum = np.zeros((len(g), J))
        bump_sum = np.zeros((len(g), J))
        np.add.at(jump_sum, inv, np.concatenate(jumps))
        np.add.at(bump_sum, inv, np.concatenate(bumps))
    else:
        g = np.empty(0)
        jump_sum = bump_sum = np.zeros((0, J))

    edges = np.concatenate([[lo], g, [hi]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    Qm = Q.copy()
    Qm[:, j] = mids[0] + U[:, j]
    first = sc.excess_demand(lat, W, Qm).sum(axis=0)
    interval_sum = first[None, :] + np.vstack([np.zeros((1, J)), np.cumsum(jump_sum, axis=0)])
    point_sum = interval_sum[:-1] + bump_sum

    def direct(pj):
        Qx = Q.copy()
        Qx[:, j] = pj + U[:, j]
        return sc.excess_demand(lat, W, Qx).sum(axis=0)

    prices = np.concatenate([[lo], mids, g, [hi]])
    sums = np.vstack([direct(lo)[None, :], interval_sum, point_sum, direct(hi)[None, :]])
    is_point = np.concatenate([[True], np.zeros(len(mids), bool), np.ones(len(g), bool), [True]])
    obj = np.linalg.norm(sums / n, axis=1)
    best = obj.min()
    tied = np.flatnonzero(obj <= best + TIE_TOL)
    # ties: interval midpoints before single points, then the lowest price
    order = np.lexsort((prices[tied], is_point[tied]))
    k = tied[order[0]]
    return float(prices[k]), float(obj[k])


def _empirical_design(sc, W):
    """Treated share and arm half-width implied by a treatment vector."""
    W = np.asarray(W, dtype=float)
    if isinstance(sc.treatment, ContinuousTreatment):
        dev = np.abs(W - sc.treatment.eta)
        return float(np.mean(W > sc.treatment.eta)), float(dev.max()) if dev.size else 0.0
    return float(np.mean(W)), None


def _coordinate_descent(population, W, U, p, settings):
    J = population.scenario.num_goods
    obj = market_objective(population, W, U, p)
    sweeps = 0
    for sweeps in range(1, settings.max_sweeps + 1):
        changed = False
        for j in range(J):
            pj, oj = _scan_coordinate(population, W, U, p, j)
            if J == 1 or oj < obj - TIE_TOL:
                changed = changed or pj != p[j]
                p = p.copy()
                p[j] = pj
                obj = oj
        if J == 1 or not changed:
            break
    return p, obj, sweeps


def solve_finite_sample_price(population: Population, W, U=None,
                              settings: SolverSettings | None = None, p0=None,
                              max_restarts: int = 50) -> FiniteSampleSolution:
    """Price minimizing ``|| (1/n) sum_i Z_i(W_i, p + U_i) ||`` over the box.

    Step scenarios use an exact breakpoint scan per coordinate, cycling over
    coordinates until no coordinate improves (one scan is exact for one good).
    With several goods a coordinate fixed point can stall, so the descent is
    restarted from a Newton step on the mean-field Jacobian while that
    improves the objective. Smooth scenarios use bounded least squares.
    """
    settings = settings or SolverSettings()
    sc = population.scenario
    n, J = population.n, sc.num_goods
    W = np.asarray(W, dtype=float)
    U = np.zeros((n, J)) if U is None else np.asarray(U, dtype=float).reshape(n, J)
    if W.shape != (n,):
        raise ValueError(f"W must have length n={n}")
    lo, hi = sc.price_lower, sc.price_upper
    pi_hat, xi_hat = _empirical_design(sc, W)
    if p0 is not None:
        p = np.asarray(p0, dtype=float).copy()
    elif J == 1:
        p = 0.5 * (lo + hi)
    else:
        try:
            p = solve_mean_field_price(sc, pi_hat, SolverSettings(tolerance=1e-8), xi_hat).p_star
        except EquilibriumError:
            p = 0.5 * (lo + hi)
    p = np.clip(p, lo, hi)

    if sc.step and settings.breakpoint_refinement:
        p, obj, sweeps = _coordinate_descent(population, W, U, p, settings)
        if J > 1 and obj > 0:
            H = mean_field_jacobian(sc, pi_hat, p, xi_hat)
            if _condition(H) < SINGULAR_CONDITION:
                for _ in range(max_restarts):
                    zbar = population.excess_demand(W, p[None, :] + U).mean(axis=0)
                    start = np.clip(p - np.linalg.solve(H, zbar), lo, hi)
                    q, oq, s = _coordinate_descent(population, W, U, start, settings)
                    sweeps += s
                    if not oq < obj - TIE_TOL:
                        break
                    p, obj = q, oq
        obj = market_objective(population, W, U, p)
        return FiniteSampleSolution(p, obj, sweeps, "breakpoint-scan")

    def resid(q):
        return population.excess_demand(W, q[None, :] + U).mean(axis=0)

    sol = optimize.least_squares(resid, p, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    price = sol.x
    return FiniteSampleSolution(price, market_objective(population, W, U, price), int(sol.nfev), "least-squares")
