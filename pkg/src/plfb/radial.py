"""Closed-form radial annulus solutions around the unit ball.

For a unit ball kept at temperature 1 and a concentric free boundary at
radius R, the temperature profile solves the radial ODE
(r^{n-1} |u'|^{p-2} u')' = 0 on [1, R] with u(1) = 1, u(R) = 0.  The closed
forms below are validated against an independent shooting/quadrature oracle
of the same ODE (see tests) before being trusted as benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .errors import ConfigError

__all__ = [
    "RadialProfile",
    "radial_p_harmonic",
    "radius_for_volume",
    "radial_lambda",
    "radial_solution",
    "shooting_profile",
]

_PN_SWITCH = 1e-12  # |p - n| below this uses the logarithmic branch


@dataclass(frozen=True)
class RadialProfile:
    """Evaluable radial solution on the annulus 1 <= r <= R."""

    n: int
    p: float
    r_outer: float
    alpha: float
    r_inner: float = 1.0

    def u(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        R = self.r_outer
        if abs(self.alpha) < _PN_SWITCH:
            return np.log(R / r) / math.log(R)
        a = self.alpha
        return (R**a - r**a) / (R**a - 1.0)

    def du(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        R = self.r_outer
        if abs(self.alpha) < _PN_SWITCH:
            return -1.0 / (r * math.log(R))
        a = self.alpha
        return -a * r ** (a - 1.0) / (R**a - 1.0)


def radial_p_harmonic(n: int, p: float, R: float) -> RadialProfile:
    """Radial profile on the annulus B_R minus B_1 with data 1 / 0."""
    if n < 2:
        raise ConfigError(f"dimension must be >= 2, got {n}")
    if p <= 1:
        raise ConfigError(f"exponent must satisfy p > 1, got {p}")
    if R <= 1:
        raise ConfigError(f"outer radius must exceed 1, got {R}")
    alpha = (p - n) / (p - 1.0)
    return RadialProfile(n=n, p=p, r_outer=R, alpha=alpha)


def radius_for_volume(n: int, target_volume: float = 1.0) -> float:
    """Outer radius making the annulus measure equal target_volume."""
    if target_volume < 0:
        raise ConfigError("target volume must be >= 0")
    omega = math.pi ** (n / 2) / math.gamma(n / 2 + 1)
    return (1.0 + target_volume / omega) ** (1.0 / n)


def radial_lambda(n: int, p: float, R: float) -> float:
    """Outer-boundary slope |u'(R)| of the radial profile."""
    prof = radial_p_harmonic(n, p, R)
    return float(abs(prof.du(R)))


def radial_solution(n: int, p: float, target_volume: float = 1.0):
    """Exact minimizer of the unit-volume insulation problem for D = B_1.

    Returns (R, profile, lambda): free-boundary radius, temperature profile
    and the constant boundary flux.
    """
    if n not in (2, 3):
        raise ConfigError("radial benchmark implemented for 2 and 3 axes")
    R = radius_for_volume(n, target_volume)
    prof = radial_p_harmonic(n, p, R)
    return R, prof, radial_lambda(n, p, R)


def shooting_profile(n: int, p: float, R: float) -> Callable[[np.ndarray], np.ndarray]:
    """Independent ODE oracle for the radial profile.

    Integrates the first-order form of (r^{n-1}|u'|^{p-2}u')' = 0: the flux
    r^{n-1}|u'|^{p-2}u' is a constant -c, so u' = -(c / r^{n-1})^{1/(p-1)}.
    The constant is found by a root solve on the u(R) = 0 condition; no
    closed-form profile enters this path.
    """
    if R <= 1 or p <= 1 or n < 2:
        raise ConfigError("need R > 1, p > 1, n >= 2")
    expo = 1.0 / (p - 1.0)

    def drop(c: float) -> float:
        val, _ = integrate.quad(lambda s: (c / s ** (n - 1)) ** expo, 1.0, R,
                                epsabs=1e-13, epsrel=1e-13, limit=200)
        return val

    # u(R) = 1 - drop(c) = 0;   drop is increasing in c
    c_star = optimize.brentq(lambda c: drop(c) - 1.0, 1e-12, 1e6, xtol=1e-15, rtol=1e-15)

    def u(r) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.empty_like(r)
        for i, ri in enumerate(r):
            val, _ = integrate.quad(lambda s: (c_star / s ** (n - 1)) ** expo, 1.0, ri,
                                    epsabs=1e-13, epsrel=1e-13, limit=200)
            out[i] = 1.0 - val
        return out

    return u
