"""Constitutive laws for unsaturated soil.

Van Genuchten-Mualem retention and conductivity curves, the water capacity
C = dtheta/dpsi, an empirical soil-strength law and the impedance factors
that modulate root elongation. All functions are pure and accept scalars or
numpy arrays of pressure head psi (cm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SoilCurveParams:
    """Van Genuchten-Mualem parameters plus the soil-strength scale.

    a: retention shape parameter (1/cm); n: retention exponent (-);
    theta_r/theta_s: residual/saturated water content (-);
    K_s: saturated conductivity (cm/day); sigma_max: strength scale (MPa).
    """

    a: float
    n: float
    theta_r: float
    theta_s: float
    K_s: float
    sigma_max: float = 1.0

    def __post_init__(self):
        if self.n <= 1:
            raise ValueError("need n > 1")
        if not (0 <= self.theta_r < self.theta_s <= 1):
            raise ValueError("need 0 <= theta_r < theta_s <= 1")
        if self.a <= 0 or self.K_s <= 0 or self.sigma_max <= 0:
            raise ValueError("a, K_s, sigma_max must be positive")

    @property
    def m(self):
        return 1.0 - 1.0 / self.n


@dataclass(frozen=True)
class ImpedanceThresholds:
    """Pressure-head magnitudes |psi_1| < |psi_2| <= |psi_3| < |psi_4| (cm).

    |psi_1| is the hypoxia threshold, |psi_4| the drought threshold;
    elongation is unimpeded between |psi_2| and |psi_3|.
    """

    psi1: float
    psi2: float
    psi3: float
    psi4: float

    def __post_init__(self):
        p = (abs(self.psi1), abs(self.psi2), abs(self.psi3), abs(self.psi4))
        object.__setattr__(self, "psi1", p[0])
        object.__setattr__(self, "psi2", p[1])
        object.__setattr__(self, "psi3", p[2])
        object.__setattr__(self, "psi4", p[3])
        if not (p[0] < p[1] <= p[2] < p[3]):
            raise ValueError("need |psi1| < |psi2| <= |psi3| < |psi4|")


def _log1p_pow(apsi, n):
    """log(1 + (a|psi|)^n), overflow-safe for large a|psi|."""
    apsi = np.asarray(apsi, dtype=float)
    # for a|psi| >> 1: log(1 + x^n) = n log x + log(1 + x^-n)
    big = n * np.log(np.maximum(apsi, 1.0)) + np.log1p(np.maximum(apsi, 1.0) ** (-n))
    small = np.log1p(np.minimum(apsi, 1e3) ** n)
    return np.where(apsi > 1e3, big, small)


def theta(psi, p: SoilCurveParams):
    """Volumetric water content theta(psi)."""
    psi = np.asarray(psi, dtype=float)
    apsi = p.a * np.abs(psi)
    L = _log1p_pow(apsi, p.n)
    th = p.theta_r + (p.theta_s - p.theta_r) * np.exp(-p.m * L)
    th = np.where(psi >= 0, p.theta_s, th)
    return th if th.ndim else float(th)


def hydraulic_K(psi, p: SoilCurveParams):
    """Unsaturated hydraulic conductivity K(psi) (cm/day)."""
    psi = np.asarray(psi, dtype=float)
    apsi = p.a * np.abs(psi)
    with np.errstate(divide="ignore"):
        la = np.where(apsi > 0, np.log(np.maximum(apsi, 1e-300)), -np.inf)
    L = _log1p_pow(apsi, p.n)
    # (a|psi|)^(n-1) [1+(a|psi|)^n]^-m  in log space
    t = np.exp(np.clip((p.n - 1) * la - p.m * L, -np.inf, 0.0))
    K = p.K_s * (1.0 - t) ** 2 * np.exp(-0.5 * p.m * L)
    K = np.where(psi >= 0, p.K_s, K)
    return K if K.ndim else float(K)


def capacity_C(psi, p: SoilCurveParams):
    """Water capacity C(psi) = dtheta/dpsi (1/cm); zero for psi >= 0."""
    psi = np.asarray(psi, dtype=float)
    apsi = p.a * np.abs(psi)
    with np.errstate(divide="ignore"):
        la = np.where(apsi > 0, np.log(np.maximum(apsi, 1e-300)), -np.inf)
    L = _log1p_pow(apsi, p.n)
    C = (
        p.a
        * p.n
        * p.m
        * (p.theta_s - p.theta_r)
        * np.exp((p.n - 1) * la - (p.m + 1.0) * L)
    )
    C = np.where(psi >= 0, 0.0, C)
    return C if C.ndim else float(C)


def effective_saturation(th, p: SoilCurveParams, tol=1e-12):
    """Theta = (theta - theta_r)/(theta_s - theta_r), clamped to [0, 1]."""
    Th = (np.asarray(th, dtype=float) - p.theta_r) / (p.theta_s - p.theta_r)
    if np.any(Th < -tol) or np.any(Th > 1.0 + tol):
        raise ValueError(f"effective saturation outside [0,1]: {Th}")
    Th = np.clip(Th, 0.0, 1.0)
    return Th if Th.ndim else float(Th)


def soil_strength(th, p: SoilCurveParams):
    """Empirical soil strength sigma = sigma_max (1 - Theta)^3 (MPa)."""
    Th = effective_saturation(th, p)
    s = p.sigma_max * (1.0 - np.asarray(Th)) ** 3
    return s if s.ndim else float(s)


def imp_sigma(sigma, p: SoilCurveParams):
    """Mechanical impedance factor: 1 - sigma/sigma_max, clamped at 0."""
    sigma = np.asarray(sigma, dtype=float)
    out = np.where(sigma >= p.sigma_max, 0.0, 1.0 - sigma / p.sigma_max)
    return out if out.ndim else float(out)


def imp_psi(psi, thr: ImpedanceThresholds):
    """Hypoxia/drought impedance: trapezoid in |psi| over the thresholds."""
    scalar = np.ndim(psi) == 0
    x = np.abs(np.atleast_1d(np.asarray(psi, dtype=float)))
    out = np.zeros_like(x)
    r1 = (thr.psi1 < x) & (x <= thr.psi2)
    out[r1] = (thr.psi1 - x[r1]) / (thr.psi1 - thr.psi2)
    out[(thr.psi2 < x) & (x <= thr.psi3)] = 1.0
    r3 = (thr.psi3 < x) & (x <= thr.psi4)
    out[r3] = (thr.psi4 - x[r3]) / (thr.psi4 - thr.psi3)
    return float(out[0]) if scalar else out


# named parameter presets for the two growth scenarios
PRESETS = {
    "TP2": SoilCurveParams(a=0.03, n=2.5, theta_r=0.06, theta_s=0.41, K_s=10.24, sigma_max=1.0),
    "TP3": SoilCurveParams(a=0.02, n=1.2, theta_r=0.06, theta_s=0.41, K_s=10.24, sigma_max=1.0),
}

TP3_THRESHOLDS = ImpedanceThresholds(1.0, 510.0, 920.0, 1.6e4)
