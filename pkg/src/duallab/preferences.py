"""Utility functions, their convex conjugates, and perturbation penalties.

Conjugates are supplied in closed form per utility family but certified at
construction against a brute-force grid sup/inf oracle, so a formula error
cannot slip through silently.  The oracle scans a log-spaced grid and then
polishes the best bracket with a bounded scalar search; it never uses the
closed forms it certifies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

ORACLE_GRID = np.geomspace(1e-4, 1e4, 10_000)
CONJUGACY_TOL = 1e-6
INVERSION_TOL = 1e-8


@dataclass(frozen=True)
class UtilityPair:
    """A utility U with conjugate V(y) = sup_x {U(x) - x*y} and marginals.

    ``inverse_marginal`` is I = (U')^{-1} = -V', the map from marginal value
    back to wealth.
    """

    name: str
    u: Callable[[np.ndarray], np.ndarray]
    u_prime: Callable[[np.ndarray], np.ndarray]
    v: Callable[[np.ndarray], np.ndarray]
    v_prime: Callable[[np.ndarray], np.ndarray]

    def inverse_marginal(self, y):
        return -self.v_prime(y)


@dataclass(frozen=True)
class Penalty:
    """Convex penalty rho on drift perturbations, with rho(0) = 0 = min rho."""

    name: str
    rho: Callable[[np.ndarray], np.ndarray]
    rho_prime: Callable[[np.ndarray], np.ndarray]
    rho_prime_inv: Callable[[np.ndarray], np.ndarray]
    scale: float = 1.0


def conjugate_by_grid(u: Callable, y: float, grid: np.ndarray = ORACLE_GRID) -> float:
    """Brute-force sup_x {u(x) - x*y}, polished within the bracketing interval."""
    vals = u(grid) - grid * y
    j = int(np.argmax(vals))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(lambda x: -(u(x) - x * y), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    return float(max(vals[j], -res.fun))


def biconjugate_by_grid(v: Callable, x: float, grid: np.ndarray = ORACLE_GRID) -> float:
    """Brute-force inf_y {v(y) + x*y}, polished within the bracketing interval."""
    vals = v(grid) + grid * x
    j = int(np.argmin(vals))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(lambda y: v(y) + x * y, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    return float(min(vals[j], res.fun))


def fenchel_gap(pair: UtilityPair, x, y):
    """V(y) + x*y - U(x) >= 0, with equality iff y = U'(x)."""
    return pair.v(y) + np.asarray(x) * np.asarray(y) - pair.u(x)


def certify_pair(pair: UtilityPair,
                 x_grid: np.ndarray | None = None,
                 y_grid: np.ndarray | None = None) -> None:
    """Check conjugacy, biconjugacy, marginal inversion and shape properties.

    Raises ValueError on the first failed check.  Called by every factory.
    """
    x_grid = np.geomspace(0.1, 10.0, 13) if x_grid is None else x_grid
    y_grid = np.geomspace(0.1, 10.0, 13) if y_grid is None else y_grid

    for y in y_grid:
        ref = conjugate_by_grid(pair.u, float(y))
        if abs(pair.v(y) - ref) > CONJUGACY_TOL:
            raise ValueError(
                f"{pair.name}: conjugate differs from grid oracle at y={y:g} "
                f"({pair.v(y):.9g} vs {ref:.9g})"
            )
    for x in x_grid:
        ref = biconjugate_by_grid(pair.v, float(x))
        if abs(pair.u(x) - ref) > CONJUGACY_TOL:
            raise ValueError(
                f"{pair.name}: biconjugacy fails at x={x:g} "
                f"({pair.u(x):.9g} vs {ref:.9g})"
            )
    inv = pair.u_prime(pair.inverse_marginal(y_grid))
    if np.max(np.abs(inv - y_grid)) > INVERSION_TOL:
        raise ValueError(f"{pair.name}: marginal inversion U'(-V'(y)) != y")

    du = np.diff(pair.u(x_grid))
    if not np.all(du > 0):
        raise ValueError(f"{pair.name}: U not increasing on the test grid")
    if not np.all(np.diff(pair.u_prime(x_grid)) < 0):
        raise ValueError(f"{pair.name}: U' not decreasing (concavity fails)")
    dv = pair.v(y_grid)
    if not np.all(np.diff(dv) < 0):
        raise ValueError(f"{pair.name}: V not decreasing")
    slopes = np.diff(dv) / np.diff(y_grid)
    if not np.all(np.diff(slopes) > -1e-12):
        raise ValueError(f"{pair.name}: V not convex on the test grid")
    # Inada conditions, probed at extreme wealth levels
    if not (pair.u_prime(1e-8) > 1e2 and pair.u_prime(1e8) < 1e-2):
        raise ValueError(f"{pair.name}: Inada conditions fail numerically")


def make_log_utility() -> UtilityPair:
    """U(x) = ln x, V(y) = -ln y - 1, -V'(y) = 1/y."""
    pair = UtilityPair(
        name="log",
        u=np.log,
        u_prime=lambda x: 1.0 / np.asarray(x, dtype=float),
        v=lambda y: -np.log(y) - 1.0,
        v_prime=lambda y: -1.0 / np.asarray(y, dtype=float),
    )
    certify_pair(pair)
    return pair


def make_power_utility(alpha: float) -> UtilityPair:
    """U(x) = x^alpha / alpha for alpha in (0, 1)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    coef = (1.0 - alpha) / alpha
    expo = alpha / (alpha - 1.0)

    pair = UtilityPair(
        name=f"power({alpha:g})",
        u=lambda x: np.asarray(x, dtype=float) ** alpha / alpha,
        u_prime=lambda x: np.asarray(x, dtype=float) ** (alpha - 1.0),
        v=lambda y: coef * np.asarray(y, dtype=float) ** expo,
        v_prime=lambda y: -np.asarray(y, dtype=float) ** (1.0 / (alpha - 1.0)),
    )
    certify_pair(pair)
    return pair


def make_quadratic_penalty(scale: float = 1.0) -> Penalty:
    """rho(x) = scale * x^2 / 2, rho'(x) = scale*x, (rho')^{-1}(v) = v/scale."""
    if not scale > 0:
        raise ValueError("penalty scale must be positive")
    return Penalty(
        name="quadratic",
        rho=lambda x: 0.5 * scale * np.asarray(x, dtype=float) ** 2,
        rho_prime=lambda x: scale * np.asarray(x, dtype=float),
        rho_prime_inv=lambda v: np.asarray(v, dtype=float) / scale,
        scale=scale,
    )


def utility_from_config(section: dict) -> UtilityPair:
    name = section.get("name")
    if name == "log":
        return make_log_utility()
    if name == "power":
        if "alpha" not in section:
            raise ValueError("power utility requires 'alpha'")
        return make_power_utility(float(section["alpha"]))
    raise ValueError(f"unknown utility {name!r}")


def penalty_from_config(section: dict) -> Penalty:
    name = section.get("name", "quadratic")
    if name == "quadratic":
        return make_quadratic_penalty(float(section.get("scale", 1.0)))
    raise ValueError(f"unknown penalty {name!r}")
