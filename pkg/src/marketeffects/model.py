"""Market scenarios: agent type distributions, unit-level supply/demand/outcome
functions, and i.i.d. population sampling.

Every scenario exposes two views of the same economy:

* a vectorized *unit* view (``outcome``, ``demand``, ``supply``) that evaluates
  all sampled agents at once, each at its own price vector; and
* a *mean-field* view (``mean_parts`` and its derivatives) giving the
  population expectations ``y(w, p)``, ``d(w, p)``, ``s(w, p)``.

Built-in scenarios use closed forms (or exact one-dimensional quadrature) for
the mean-field view. Custom scenarios integrate by Monte Carlo.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from scipy import integrate
from scipy.special import expit

__all__ = [
    "BinaryTreatment",
    "ContinuousTreatment",
    "Scenario",
    "TechScenario",
    "GoatHayScenario",
    "SmoothLogisticScenario",
    "CustomScenario",
    "Population",
    "UnitDraw",
    "ScenarioError",
    "SCENARIO_IDS",
    "make_scenario",
    "load_scenario",
    "sample_population",
    "population_from_latent",
]

SCENARIO_IDS = ("tech-intervention", "goat-hay-subsidy", "smooth-logistic", "custom")

# Mass a built-in box may cut off at its edges when checking boundary signs.
BOUNDARY_SIGN_SLACK = 0.01


class ScenarioError(ValueError):
    """Invalid scenario definition or parameters."""


def _check_exponent(alpha: float, name: str) -> float:
    alpha = float(alpha)
    if not 0.25 < alpha < 0.5:
        raise ScenarioError(f"{name} must lie strictly inside (1/4, 1/2), got {alpha}")
    return alpha


@dataclass(frozen=True)
class BinaryTreatment:
    """Treatment W in {0, 1}."""

    kind: str = field(default="binary", init=False)

    def arms(self, xi: float | None = None) -> tuple[float, float]:
        return 1.0, 0.0

    def to_dict(self) -> dict:
        return {"kind": "binary"}


@dataclass(frozen=True)
class ContinuousTreatment:
    """Local perturbation of a continuous policy: W in {eta - xi_n, eta + xi_n}.

    ``xi_n = xi_scale * n ** -xi_exponent``.
    """

    eta: float = 0.0
    xi_scale: float = 1.0
    xi_exponent: float = 1.0 / 3.0
    kind: str = field(default="continuous", init=False)

    def __post_init__(self):
        if not self.xi_scale > 0:
            raise ScenarioError(f"xi_scale must be positive, got {self.xi_scale}")
        _check_exponent(self.xi_exponent, "xi_exponent")

    def xi(self, n: int) -> float:
        return self.xi_scale * float(n) ** (-self.xi_exponent)

    def arms(self, xi: float | None = None) -> tuple[float, float]:
        xi = 0.0 if xi is None else xi
        return self.eta + xi, self.eta - xi

    def to_dict(self) -> dict:
        return {
            "kind": "continuous",
            "eta": self.eta,
            "xi_scale": self.xi_scale,
            "xi_exponent": self.xi_exponent,
        }


def _as_prices(prices, n: int, num_goods: int) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    if prices.ndim == 0:
        prices = prices.reshape(1)
    if prices.ndim == 1:
        prices = np.broadcast_to(prices, (n, num_goods))
    return prices


def _uniform_cdf(x, lo, hi):
    return np.clip((np.asarray(x, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


class Scenario:
    """Base class for a market blueprint.

    Subclasses implement ``sample_latent``, the unit functions and
    ``mean_parts``. Mean-field derivatives default to central finite
    differences of ``mean_parts``; closed-form scenarios override them.
    """

    id: str = "custom"
    latent_names: tuple[str, ...] = ()
    # True when unit functions are piecewise constant in each price coordinate
    # and ``thresholds`` is implemented.
    step: bool = False
    fd_step: float = 1e-5

    def __init__(self, num_goods, price_lower, price_upper, treatment=None, params=None):
        self.num_goods = int(num_goods)
        if self.num_goods < 1:
            raise ScenarioError("num_goods must be >= 1")
        self.price_lower = np.atleast_1d(np.asarray(price_lower, dtype=float)).copy()
        self.price_upper = np.atleast_1d(np.asarray(price_upper, dtype=float)).copy()
        for name, arr in (("price_lower", self.price_lower), ("price_upper", self.price_upper)):
            if arr.shape != (self.num_goods,):
                raise ScenarioError(f"{name} must have {self.num_goods} entries")
            arr.setflags(write=False)
        if not np.all(self.price_lower > 0):
            raise ScenarioError("price_lower must be strictly positive")
        if not np.all(self.price_lower < self.price_upper):
            raise ScenarioError("price box requires l < u componentwise")
        self.treatment = treatment if treatment is not None else BinaryTreatment()
        self.params = dict(params or {})

    # ---- unit view -------------------------------------------------------
    def sample_latent(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def outcome(self, latent, w, prices) -> np.ndarray:
        raise NotImplementedError

    def demand(self, latent, w, prices) -> np.ndarray:
        raise NotImplementedError

    def supply(self, latent, w, prices) -> np.ndarray:
        raise NotImplementedError

    def excess_demand(self, latent, w, prices) -> np.ndarray:
        return self.demand(latent, w, prices) - self.supply(latent, w, prices)

    def thresholds(self, latent, w, prices, coord: int) -> np.ndarray:
        """Per-unit prices (in the unit's own coordinate ``coord``) at which its
        functions may jump, holding the unit's other price coordinates fixed.

        Returns an ``(n, K)`` array; NaN marks an unused slot.
        """
        raise NotImplementedError(f"{type(self).__name__} has no step structure")

    # ---- mean-field view -------------------------------------------------
    def mean_parts(self, w: float, p) -> tuple[float, np.ndarray, np.ndarray]:
        """Return ``(y(w, p), d(w, p), s(w, p))``."""
        raise NotImplementedError

    def mean_excess_demand(self, w: float, p) -> np.ndarray:
        _, d, s = self.mean_parts(w, p)
        return d - s

    def mean_gradients(self, w: float, p):
        """Return ``(grad_y, jac_d, jac_s)``; jacobians have rows = goods,
        columns = prices."""
        p = np.asarray(p, dtype=float)
        J = self.num_goods
        grad_y = np.empty(J)
        jac_d = np.empty((J, J))
        jac_s = np.empty((J, J))
        for k in range(J):
            e = np.zeros(J)
            e[k] = self.fd_step
            yp, dp, sp = self.mean_parts(w, p + e)
            ym, dm, sm = self.mean_parts(w, p - e)
            grad_y[k] = (yp - ym) / (2 * self.fd_step)
            jac_d[:, k] = (dp - dm) / (2 * self.fd_step)
            jac_s[:, k] = (sp - sm) / (2 * self.fd_step)
        return grad_y, jac_d, jac_s

    def mean_treatment_derivative(self, w: float, p):
        """Return ``(dy/dw, dd/dw, ds/dw)`` at fixed prices."""
        h = self.fd_step
        yp, dp, sp = self.mean_parts(w + h, p)
        ym, dm, sm = self.mean_parts(w - h, p)
        return (yp - ym) / (2 * h), (dp - dm) / (2 * h), (sp - sm) / (2 * h)

    # ---- helpers ---------------------------------------------------------
    def arms(self, xi: float | None = None) -> tuple[float, float]:
        """Treatment values of the (upper, lower) arm."""
        return self.treatment.arms(xi)

    def xi(self, n: int) -> float | None:
        if isinstance(self.treatment, ContinuousTreatment):
            return self.treatment.xi(n)
        return None

    def in_box(self, p, atol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.price_lower - atol) and np.all(p <= self.price_upper + atol))

    def validate(self, grid_points: int = 50, num_units: int = 200, seed: int = 0) -> None:
        """Probe unit functions on a price grid and the mean-field boundary signs.

        Raises ScenarioError on failure.
        """
        rng = np.random.default_rng(seed)
        latent = self.sample_latent(rng, num_units)
        grid = np.linspace(self.price_lower, self.price_upper, grid_points)
        w_hi, w_lo = self.arms(self.xi(num_units) if isinstance(self.treatment, ContinuousTreatment) else None)
        for w in (w_hi, w_lo):
            for p in grid:
                D = self.demand(latent, w, p)
                S = self.supply(latent, w, p)
                Y = self.outcome(latent, w, p)
                if not (np.all(np.isfinite(D)) and np.all(np.isfinite(S)) and np.all(np.isfinite(Y))):
                    raise ScenarioError("unit functions returned non-finite values")
                if np.any(D < 0) or np.any(S < 0):
                    raise ScenarioError(f"negative demand or supply at price {p}")
            z_lo = self.mean_excess_demand(w, self.price_lower)
            z_hi = self.mean_excess_demand(w, self.price_upper)
            if np.any(z_lo < -BOUNDARY_SIGN_SLACK) or np.any(z_hi > BOUNDARY_SIGN_SLACK):
                raise ScenarioError(
                    "price box violates boundary sign conditions: "
                    f"z(l)={z_lo}, z(u)={z_hi} at w={w}"
                )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "num_goods": self.num_goods,
            "price_lower": self.price_lower.tolist(),
            "price_upper": self.price_upper.tolist(),
            "treatment": self.treatment.to_dict(),
            "params": dict(self.params),
        }

    def __repr__(self):
        return (
            f"{type(self).__name__}(id={self.id!r}, J={self.num_goods}, "
            f"l={self.price_lower.tolist()}, u={self.price_upper.tolist()}, "
            f"treatment={self.treatment.to_dict()})"
        )


class TechScenario(Scenario):
    """Single good; treated sellers produce ``multiplier`` units at the same cost.

    Buyer i demands one unit iff ``V_i > p``; seller i supplies
    ``(1 + (multiplier - 1) w)`` units iff ``C_i < p``; the outcome is seller
    profit ``(p - C_i) * S_i``. One experimental unit bundles buyer i and
    seller i.
    """

    id = "tech-intervention"
    latent_names = ("V", "C")
    step = True

    def __init__(self, value_low=7.0, value_high=12.0, cost_low=5.0, cost_high=10.0,
                 multiplier=1.2, price_lower=5.01, price_upper=11.99, treatment=None):
        if not (value_low < value_high and cost_low < cost_high):
            raise ScenarioError("uniform supports need low < high")
        if multiplier <= 0:
            raise ScenarioError("multiplier must be positive")
        super().__init__(1, [price_lower], [price_upper], treatment, dict(
            value_low=value_low, value_high=value_high, cost_low=cost_low,
            cost_high=cost_high, multiplier=multiplier,
        ))
        self.vlo, self.vhi = float(value_low), float(value_high)
        self.clo, self.chi = float(cost_low), float(cost_high)
        self.multiplier = float(multiplier)

    def _m(self, w):
        return 1.0 + (self.multiplier - 1.0) * np.asarray(w, dtype=float)

    def sample_latent(self, rng, n):
        V = rng.uniform(self.vlo, self.vhi, n)
        C = rng.uniform(self.clo, self.chi, n)
        return {"V": V, "C": C}

    def _q(self, latent, prices):
        return _as_prices(prices, len(latent["V"]), 1)[:, 0]

    def demand(self, latent, w, prices):
        q = self._q(latent, prices)
        return (latent["V"] > q).astype(float)[:, None]

    def supply(self, latent, w, prices):
        q = self._q(latent, prices)
        return (self._m(w) * (latent["C"] < q))[:, None]

    def outcome(self, latent, w, prices):
        q = self._q(latent, prices)
        return (q - latent["C"]) * self._m(w) * (latent["C"] < q)

    def thresholds(self, latent, w, prices, coord):
        return np.column_stack([latent["V"], latent["C"]])

    def mean_parts(self, w, p):
        p = float(np.asarray(p, dtype=float).reshape(-1)[0])
        m = float(self._m(w))
        d = float(_uniform_cdf(self.vhi - p + self.vlo, self.vlo, self.vhi))
        Fc = float(_uniform_cdf(p, self.clo, self.chi))
        # E[(p - C)^+] for C ~ U(a, b)
        if p <= self.clo:
            profit = 0.0
        elif p >= self.chi:
            profit = p - 0.5 * (self.clo + self.chi)
        else:
            profit = (p - self.clo) ** 2 / (2.0 * (self.chi - self.clo))
        return m * profit, np.array([d]), np.array([m * Fc])

    def mean_gradients(self, w, p):
        p = float(np.asarray(p, dtype=float).reshape(-1)[0])
        m = float(self._m(w))
        dd = -1.0 / (self.vhi - self.vlo) if self.vlo < p < self.vhi else 0.0
        ds = m / (self.chi - self.clo) if self.clo < p < self.chi else 0.0
        gy = m * float(_uniform_cdf(p, self.clo, self.chi))
        return np.array([gy]), np.array([[dd]]), np.array([[ds]])

    def mean_treatment_derivative(self, w, p):
        y, d, s = self.mean_parts(1.0, p)
        y0, _, s0 = self.mean_parts(0.0, p)
        # outcome and supply are linear in w through the multiplier
        return y - y0, np.zeros(1), s - s0


class GoatHayScenario(Scenario):
    """Two goods (goat, hay); treatment is a per-goat subsidy.

    Farmer i raises a goat iff its goat margin ``p_G + w - p_H - C^G_i`` beats
    ``max(p_H - C^H_i, 0)``, grows hay iff the hay margin is positive and beats
    the goat margin. Each goat consumes one unit of hay. Buyer i demands a goat
    iff ``V_i > p_G``. The outcome is goat profit. Unit i bundles farmer i and
    buyer i.
    """

    id = "goat-hay-subsidy"
    latent_names = ("V", "CG", "CH")
    step = True
    fd_step = 1e-5

    def __init__(self, value_low=7.0, value_high=12.0, goat_cost_low=5.0, goat_cost_high=10.0,
                 hay_cost_low=2.0, hay_cost_high=5.0, price_lower=(5.01, 2.01),
                 price_upper=(11.99, 9.99), treatment=None):
        if not (value_low < value_high and goat_cost_low < goat_cost_high and hay_cost_low < hay_cost_high):
            raise ScenarioError("uniform supports need low < high")
        if treatment is None:
            treatment = ContinuousTreatment(xi_scale=DEFAULT_XI_SCALE["goat-hay-subsidy"])
        super().__init__(2, price_lower, price_upper, treatment, dict(
            value_low=value_low, value_high=value_high, goat_cost_low=goat_cost_low,
            goat_cost_high=goat_cost_high, hay_cost_low=hay_cost_low, hay_cost_high=hay_cost_high,
        ))
        self.vlo, self.vhi = float(value_low), float(value_high)
        self.glo, self.ghi = float(goat_cost_low), float(goat_cost_high)
        self.hlo, self.hhi = float(hay_cost_low), float(hay_cost_high)

    def sample_latent(self, rng, n):
        V = rng.uniform(self.vlo, self.vhi, n)
        CG = rng.uniform(self.glo, self.ghi, n)
        CH = rng.uniform(self.hlo, self.hhi, n)
        return {"V": V, "CG": CG, "CH": CH}

    def _margins(self, latent, w, prices):
        P = _as_prices(prices, len(latent["V"]), 2)
        goat_margin = P[:, 0] + w - P[:, 1] - latent["CG"]
        hay_margin = P[:, 1] - latent["CH"]
        return P, goat_margin, hay_margin

    def _choices(self, latent, w, prices):
        P, a, b = self._margins(latent, w, prices)
        goat = a > np.maximum(b, 0.0)
        hay = b > np.maximum(a, 0.0)
        return P, a, goat, hay

    def demand(self, latent, w, prices):
        P, _, goat, _ = self._choices(latent, w, prices)
        return np.column_stack([(latent["V"] > P[:, 0]).astype(float), goat.astype(float)])

    def supply(self, latent, w, prices):
        _, _, goat, hay = self._choices(latent, w, prices)
        return np.column_stack([goat.astype(float), hay.astype(float)])

    def outcome(self, latent, w, prices):
        _, a, goat, _ = self._choices(latent, w, prices)
        return np.where(goat, a, 0.0)

    def thresholds(self, latent, w, prices, coord):
        P = _as_prices(prices, len(latent["V"]), 2)
        w = np.broadcast_to(np.asarray(w, dtype=float), (len(latent["V"]),))
        CG, CH = latent["CG"], latent["CH"]
        if coord == 0:
            qh = P[:, 1]
            goat_switch = CG - w + qh + np.maximum(qh - CH, 0.0)
            return np.column_stack([latent["V"], goat_switch])
        g = P[:, 0] + w
        return np.column_stack([g - CG, 0.5 * (g - CG + CH), CH])

    def mean_parts(self, w, p):
        pG, pH = (float(x) for x in np.asarray(p, dtype=float))
        g = pG + w - pH
        h = pH
        glo, ghi, span = self.glo, self.ghi, self.ghi - self.glo

        def Fg(x):
            return min(max((x - glo) / span, 0.0), 1.0)

        def goat(ch):
            return Fg(g - max(h - ch, 0.0))

        def hay(ch):
            return (1.0 - Fg(g - (h - ch))) if ch < h else 0.0

        def profit(ch):
            top = min(ghi, g - max(h - ch, 0.0))
            if top <= glo:
                return 0.0
            return ((g - glo) ** 2 - (g - top) ** 2) / (2.0 * span)

        kinks = [x for x in (h, h - g + glo, h - g + ghi) if self.hlo < x < self.hhi]
        width = self.hhi - self.hlo

        def avg(f):
            val, _ = integrate.quad(f, self.hlo, self.hhi, points=kinks or None,
                                    epsabs=1e-14, epsrel=1e-13, limit=200)
            return val / width

        s_goat, s_hay, y = avg(goat), avg(hay), avg(profit)
        d_goat = float(_uniform_cdf(self.vhi - pG + self.vlo, self.vlo, self.vhi))
        return y, np.array([d_goat, s_goat]), np.array([s_goat, s_hay])


class SmoothLogisticScenario(Scenario):
    """Single good with logistic (smooth) unit demand and supply.

    ``D_i = sigmoid((V_i - p)/s)``, ``S_i = m_w sigmoid((p - C_i)/s)`` and
    ``Y_i = m_w s softplus((p - C_i)/s)`` with ``m_w = 1 + (multiplier - 1) w``.
    Exists so that mean-field derivatives can be checked by finite differences
    on a smooth excess demand.
    """

    id = "smooth-logistic"
    latent_names = ("V", "C")

    def __init__(self, value_low=7.0, value_high=12.0, cost_low=5.0, cost_high=10.0,
                 multiplier=1.2, scale=0.5, price_lower=5.01, price_upper=11.99, treatment=None):
        if scale <= 0:
            raise ScenarioError("scale must be positive")
        super().__init__(1, [price_lower], [price_upper], treatment, dict(
            value_low=value_low, value_high=value_high, cost_low=cost_low,
            cost_high=cost_high, multiplier=multiplier, scale=scale,
        ))
        self.vlo, self.vhi = float(value_low), float(value_high)
        self.clo, self.chi = float(cost_low), float(cost_high)
        self.multiplier = float(multiplier)
        self.scale = float(scale)

    def _m(self, w):
        return 1.0 + (self.multiplier - 1.0) * np.asarray(w, dtype=float)

    def sample_latent(self, rng, n):
        return {"V": rng.uniform(self.vlo, self.vhi, n), "C": rng.uniform(self.clo, self.chi, n)}

    def _q(self, latent, prices):
        return _as_prices(prices, len(latent["V"]), 1)[:, 0]

    def demand(self, latent, w, prices):
        q = self._q(latent, prices)
        return expit((latent["V"] - q) / self.scale)[:, None]

    def supply(self, latent, w, prices):
        q = self._q(latent, prices)
        return (self._m(w) * expit((q - latent["C"]) / self.scale))[:, None]

    def outcome(self, latent, w, prices):
        q = self._q(latent, prices)
        return self._m(w) * self.scale * _softplus((q - latent["C"]) / self.scale)

    def mean_parts(self, w, p):
        p = float(np.asarray(p, dtype=float).reshape(-1)[0])
        s = self.scale
        m = float(self._m(w))
        d = s / (self.vhi - self.vlo) * (_softplus((self.vhi - p) / s) - _softplus((self.vlo - p) / s))
        sup = m * s / (self.chi - self.clo) * (_softplus((p - self.clo) / s) - _softplus((p - self.chi) / s))
        y, _ = integrate.quad(lambda c: s * _softplus((p - c) / s), self.clo, self.chi,
                              epsabs=1e-14, epsrel=1e-13)
        return m * y / (self.chi - self.clo), np.array([d]), np.array([sup])

    def mean_gradients(self, w, p):
        p = float(np.asarray(p, dtype=float).reshape(-1)[0])
        s = self.scale
        m = float(self._m(w))
        dd = -(expit((self.vhi - p) / s) - expit((self.vlo - p) / s)) / (self.vhi - self.vlo)
        ds = m * (expit((p - self.clo) / s) - expit((p - self.chi) / s)) / (self.chi - self.clo)
        # d/dp of E[s softplus((p - C)/s)] is E[sigmoid((p - C)/s)], the mean supply per unit
        _, _, sup = self.mean_parts(w, p)
        return np.array([sup[0]]), np.array([[dd]]), np.array([[ds]])


class CustomScenario(Scenario):
    """User-supplied market.

    ``transform(u)`` maps an ``(n, latent_dim)`` array of uniforms to a dict of
    latent arrays; ``outcome``, ``demand`` and ``supply`` are vectorized
    callbacks ``f(latent, w, prices)`` with ``prices`` of shape ``(n, J)``.
    Mean-field functions are Monte Carlo averages over a frozen antithetic
    sample of ``mc_samples`` draws.
    """

    id = "custom"
    MIN_MC_SAMPLES = 10_000

    def __init__(self, num_goods, price_lower, price_upper, latent_dim: int,
                 transform: Callable[[np.ndarray], Mapping[str, np.ndarray]],
                 outcome: Callable, demand: Callable, supply: Callable,
                 treatment=None, thresholds: Callable | None = None,
                 mc_samples: int = 1_000_000, mc_seed: int = 0, validate: bool = True):
        if mc_samples < self.MIN_MC_SAMPLES:
            raise ScenarioError(
                f"mc_samples={mc_samples} too small for mean-field integration; "
                f"need at least {self.MIN_MC_SAMPLES}"
            )
        super().__init__(num_goods, price_lower, price_upper, treatment,
                         dict(latent_dim=latent_dim, mc_samples=mc_samples, mc_seed=mc_seed))
        self.latent_dim = int(latent_dim)
        self._transform = transform
        self._outcome, self._demand, self._supply = outcome, demand, supply
        self._thresholds = thresholds
        self.step = thresholds is not None
        self.mc_samples = int(mc_samples)
        self.mc_seed = mc_seed
        self._mc_latent = None
        if validate:
            self.validate()

    def sample_latent(self, rng, n):
        return dict(self._transform(rng.random((n, self.latent_dim))))

    def outcome(self, latent, w, prices):
        n = len(next(iter(latent.values())))
        return np.asarray(self._outcome(latent, w, _as_prices(prices, n, self.num_goods)), dtype=float)

    def demand(self, latent, w, prices):
        n = len(next(iter(latent.values())))
        out = self._demand(latent, w, _as_prices(prices, n, self.num_goods))
        return np.asarray(out, dtype=float).reshape(n, self.num_goods)

    def supply(self, latent, w, prices):
        n = len(next(iter(latent.values())))
        out = self._supply(latent, w, _as_prices(prices, n, self.num_goods))
        return np.asarray(out, dtype=float).reshape(n, self.num_goods)

    def thresholds(self, latent, w, prices, coord):
        if self._thresholds is None:
            return super().thresholds(latent, w, prices, coord)
        n = len(next(iter(latent.values())))
        return np.asarray(self._thresholds(latent, w, _as_prices(prices, n, self.num_goods), coord), dtype=float)

    def _frozen_sample(self):
        if self._mc_latent is None:
            rng = np.random.default_rng(self.mc_seed)
            half = rng.random((self.mc_samples // 2, self.latent_dim))
            u = np.concatenate([half, 1.0 - half])
            self._mc_latent = dict(self._transform(u))
        return self._mc_latent

    def mean_parts(self, w, p):
        lat = self._frozen_sample()
        p = np.asarray(p, dtype=float)
        return (
            float(np.mean(self.outcome(lat, w, p))),
            self.demand(lat, w, p).mean(axis=0),
            self.supply(lat, w, p).mean(axis=0),
        )


_BUILTINS = {
    "tech-intervention": TechScenario,
    "goat-hay-subsidy": GoatHayScenario,
    "smooth-logistic": SmoothLogisticScenario,
}
_TREATMENT_KEYS = ("treatment", "eta", "xi_scale", "xi_exponent")
# Arm half-width scale when none is given; the goat-hay value reproduces the
# reference spread of the direct policy effect at n = 1000.
DEFAULT_XI_SCALE = {"goat-hay-subsidy": 3.7}


def _build_treatment(params: dict, default_kind: str, default_xi_scale: float = 1.0):
    kind = params.pop("treatment", default_kind)
    if isinstance(kind, Mapping):
        spec = dict(kind)
        kind = spec.pop("kind", default_kind)
        params = {**spec, **params}
    eta = params.pop("eta", 0.0)
    xi_scale = params.pop("xi_scale", default_xi_scale)
    xi_exponent = params.pop("xi_exponent", 1.0 / 3.0)
    _check_exponent(xi_exponent, "xi_exponent")
    if kind == "binary":
        return BinaryTreatment()
    if kind == "continuous":
        return ContinuousTreatment(eta=float(eta), xi_scale=float(xi_scale), xi_exponent=float(xi_exponent))
    raise ScenarioError(f"unknown treatment kind {kind!r}")


def make_scenario(scenario_id: str, params: Mapping[str, Any] | None = None) -> Scenario:
    """Build and validate a built-in scenario.

    ``params`` holds distribution parameters (e.g. ``value_low``), the price
    box (``price_lower``/``price_upper``) and treatment settings
    (``treatment``: ``"binary"``/``"continuous"``, ``eta``, ``xi_scale``,
    ``xi_exponent``).
    """
    aliases = {"tech": "tech-intervention", "goat-hay": "goat-hay-subsidy", "logistic": "smooth-logistic"}
    scenario_id = aliases.get(scenario_id, scenario_id)
    if scenario_id == "custom":
        raise ScenarioError("custom scenarios are built with CustomScenario(...) callbacks")
    if scenario_id not in _BUILTINS:
        raise ScenarioError(f"unknown scenario id {scenario_id!r}; expected one of {SCENARIO_IDS}")
    params = dict(params or {})
    default_kind = "continuous" if scenario_id == "goat-hay-subsidy" else "binary"
    treatment = _build_treatment(params, default_kind, DEFAULT_XI_SCALE.get(scenario_id, 1.0))
    cls = _BUILTINS[scenario_id]
    try:
        scenario = cls(treatment=treatment, **params)
    except TypeError as exc:
        raise ScenarioError(f"bad parameters for {scenario_id}: {exc}") from None
    scenario.validate()
    return scenario


def load_scenario(source: str | Path | Mapping) -> Scenario:
    """Build a scenario from a JSON document (path, JSON text, or parsed dict).

    Schema: ``{"id": str, "params": {...}, "treatment": {...},
    "price_lower": [...], "price_upper": [...]}``; top-level box and treatment
    entries are merged into ``params``.
    """
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        text = str(source)
        path = Path(text)
        if not text.lstrip().startswith("{") and path.exists():
            text = path.read_text()
        doc = json.loads(text)
    if "id" not in doc:
        raise ScenarioError("scenario document needs an 'id'")
    params = dict(doc.get("params") or {})
    for key in ("price_lower", "price_upper", "treatment"):
        if key in doc:
            params[key] = doc[key]
    for key in ("price_lower", "price_upper"):
        if key in params and isinstance(params[key], list) and doc["id"] in ("tech-intervention", "smooth-logistic", "tech", "logistic"):
            if len(params[key]) != 1:
                raise ScenarioError(f"{key} must have 1 entry for a single-good scenario")
            params[key] = params[key][0]
    return make_scenario(doc["id"], params)


class UnitDraw:
    """One sampled agent: its latent draws and scalar unit functions."""

    def __init__(self, population: "Population", index: int):
        self._pop = population
        self._i = index

    @property
    def latent(self) -> dict[str, float]:
        return {k: float(v[self._i]) for k, v in self._pop.latent.items()}

    def _lat(self):
        return {k: v[self._i:self._i + 1] for k, v in self._pop.latent.items()}

    def _p(self, p):
        return np.atleast_1d(np.asarray(p, dtype=float))[None, :]

    def outcome(self, w, p) -> float:
        return float(self._pop.scenario.outcome(self._lat(), w, self._p(p))[0])

    def demand(self, w, p) -> np.ndarray:
        return self._pop.scenario.demand(self._lat(), w, self._p(p))[0]

    def supply(self, w, p) -> np.ndarray:
        return self._pop.scenario.supply(self._lat(), w, self._p(p))[0]

    def excess_demand(self, w, p) -> np.ndarray:
        return self.demand(w, p) - self.supply(w, p)


@dataclass(frozen=True)
class Population:
    """n i.i.d. agents sampled from a scenario, stored column-wise."""

    scenario: Scenario
    latent: dict[str, np.ndarray]
    n: int
    seed: Any

    @property
    def scenario_id(self) -> str:
        return self.scenario.id

    @property
    def units(self) -> list[UnitDraw]:
        return [UnitDraw(self, i) for i in range(self.n)]

    def subset(self, idx) -> "Population":
        latent = {k: v[idx] for k, v in self.latent.items()}
        return Population(self.scenario, latent, len(next(iter(latent.values()))), self.seed)

    def outcome(self, w, prices):
        return self.scenario.outcome(self.latent, w, prices)

    def demand(self, w, prices):
        return self.scenario.demand(self.latent, w, prices)

    def supply(self, w, prices):
        return self.scenario.supply(self.latent, w, prices)

    def excess_demand(self, w, prices):
        return self.scenario.excess_demand(self.latent, w, prices)


def sample_population(scenario: Scenario, n: int, seed) -> Population:
    """Draw ``n`` i.i.d. units. ``seed`` is anything ``np.random.default_rng``
    accepts; equal seeds give bit-identical draws."""
    if int(n) != n or n < 2:
        raise ValueError(f"n must be an integer >= 2, got {n}")
    rng = np.random.default_rng(seed)
    latent = scenario.sample_latent(rng, int(n))
    for arr in latent.values():
        arr.setflags(write=False)
    return Population(scenario, latent, int(n), seed)


def population_from_latent(scenario: Scenario, latent: Mapping[str, Any], seed=None) -> Population:
    """Wrap explicit latent draws (e.g. hand-built test markets) as a Population."""
    arrays = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in latent.items()}
    sizes = {len(v) for v in arrays.values()}
    if len(sizes) != 1:
        raise ValueError("latent arrays must share one length")
    return Population(scenario, arrays, sizes.pop(), seed)
