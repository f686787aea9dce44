"""Concave penalty family and its smooth-concave / convex split.

Every penalty here is generated by a scalar function ``kappa`` that is
concave, non-decreasing, has a Lipschitz derivative and satisfies
``kappa(0) = 0``.  Writing ``kappa0 = kappa'(0)`` the penalty splits as

    kappa(a) = [kappa(a) - kappa0 * a] + kappa0 * a

where the bracket is concave and smooth once composed with a norm, and the
remainder is a plain (convex) norm.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Argument outside the domain of a penalty function."""


class UnsupportedVariantError(ValueError):
    pass


class Variant(str, enum.Enum):
    GP = "gp"
    LSP = "lsp"
    MCP = "mcp"
    LAPLACE = "laplace"
    SCAD = "scad"


@dataclass(frozen=True)
class KappaSpec:
    """One member of the penalty family.

    Parameters
    ----------
    variant : Variant or str
        Penalty name (``gp``, ``lsp``, ``mcp``, ``laplace`` or ``scad``).
    beta : float
        Scale, must be positive.
    theta : float
        Shape, must be positive (``> 1`` for SCAD).
    """

    variant: Variant
    beta: float
    theta: float

    def __post_init__(self):
        try:
            v = Variant(str(getattr(self.variant, "value", self.variant)).lower())
        except ValueError:
            raise UnsupportedVariantError(f"unknown penalty {self.variant!r}") from None
        object.__setattr__(self, "variant", v)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "theta", float(self.theta))
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise DomainError(f"beta must be positive, got {self.beta}")
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise DomainError(f"theta must be positive, got {self.theta}")
        if v is Variant.SCAD and self.theta <= 1:
            raise DomainError(f"SCAD needs theta > 1, got {self.theta}")

    @property
    def kappa0(self) -> float:
        return derived_constants(self)[0]

    @property
    def rho(self) -> float:
        return derived_constants(self)[1]

    def __str__(self):
        return f"{self.variant.value}:beta={self.beta:g},theta={self.theta:g}"


@dataclass(frozen=True)
class SmoothedKappaSpec:
    """LSP penalty with the kink at zero replaced by a quadratic of radius ``lam``."""

    base: KappaSpec
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError(f"smoothing radius must be positive, got {self.lam}")


def parse_regularizer(text: str) -> KappaSpec:
    """Parse ``"lsp:beta=0.5,theta=1.5"`` into a :class:`KappaSpec`.

    Missing parameters default to ``beta=1`` and ``theta=1`` (``theta=3.7``
    for SCAD, the customary choice).
    """
    name, _, rest = text.strip().partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"bad regularizer parameter {item!r} in {text!r}")
        key = key.strip().lower()
        if key not in ("beta", "theta"):
            raise ValueError(f"unknown regularizer parameter {key!r}")
        params[key] = float(val)
    default_theta = 3.7 if name.strip().lower() == "scad" else 1.0
    return KappaSpec(name.strip(), params.get("beta", 1.0), params.get("theta", default_theta))


def _check_nonneg(alpha):
    a = np.asarray(alpha, dtype=float)
    if np.any(a < 0) or np.any(np.isnan(a)):
        raise DomainError("penalty argument must be non-negative")
    return a


def _out(a, res):
    return float(res) if np.ndim(a) == 0 else res


def kappa_value(spec: KappaSpec, alpha):
    """Evaluate ``kappa(alpha)`` elementwise for ``alpha >= 0``."""
    a = _check_nonneg(alpha)
    b, t = spec.beta, spec.theta
    v = spec.variant
    if v is Variant.GP:
        res = b * a / (t + a)
    elif v is Variant.LSP:
        res = b * np.log1p(a / t)
    elif v is Variant.LAPLACE:
        res = b * (-np.expm1(-a / t))
    elif v is Variant.MCP:
        res = np.where(a <= b * t, b * a - a * a / (2 * t), 0.5 * t * b * b)
    else:  # SCAD
        mid = (-a * a + 2 * t * b * a - b * b) / (2 * (t - 1))
        res = np.where(a <= b, b * a, np.where(a <= t * b, mid, 0.5 * b * b * (1 + t)))
    return _out(a, res)


def kappa_derivative(spec: KappaSpec, alpha):
    """Evaluate ``kappa'(alpha)`` elementwise for ``alpha >= 0``.

    At the MCP / SCAD joints both branches coincide, so the returned value
    is the common limit.
    """
    a = _check_nonneg(alpha)
    b, t = spec.beta, spec.theta
    v = spec.variant
    if v is Variant.GP:
        res = b * t / (t + a) ** 2
    elif v is Variant.LSP:
        res = b / (t + a)
    elif v is Variant.LAPLACE:
        res = (b / t) * np.exp(-a / t)
    elif v is Variant.MCP:
        res = np.maximum(b - a / t, 0.0)
    else:  # SCAD
        res = np.where(a <= b, b, np.maximum((t * b - a) / (t - 1), 0.0))
    return _out(a, res)


def kappa_second(spec: KappaSpec, alpha):
    """Right derivative of ``kappa'``; used for curvature bounds only."""
    a = _check_nonneg(alpha)
    b, t = spec.beta, spec.theta
    v = spec.variant
    if v is Variant.GP:
        res = -2 * b * t / (t + a) ** 3
    elif v is Variant.LSP:
        res = -b / (t + a) ** 2
    elif v is Variant.LAPLACE:
        res = -(b / t**2) * np.exp(-a / t)
    elif v is Variant.MCP:
        res = np.where(a < b * t, -1.0 / t, 0.0)
    else:
        res = np.where(a < b, 0.0, np.where(a < t * b, -1.0 / (t - 1), 0.0))
    return _out(a, res)


def derived_constants(spec: KappaSpec) -> tuple[float, float]:
    """Return ``(kappa0, rho)``: slope at zero and Lipschitz constant of kappa'."""
    b, t = spec.beta, spec.theta
    v = spec.variant
    if v is Variant.GP:
        return b / t, 2 * b / t**2
    if v in (Variant.LSP, Variant.LAPLACE):
        return b / t, b / t**2
    if v is Variant.MCP:
        return b, 1.0 / t
    return b, 1.0 / (t - 1)


def bar_scalar(spec: KappaSpec, x):
    """Elementwise concave remainder ``kappa(|x|) - kappa0 |x|`` and its derivative."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    k0 = derived_constants(spec)[0]
    val = kappa_value(spec, a) - k0 * a
    grad = (kappa_derivative(spec, a) - k0) * np.sign(x)
    return val, grad


def bar_group(spec: KappaSpec, z) -> tuple[float, np.ndarray]:
    """Concave remainder ``kappa(||z||) - kappa0 ||z||`` of a group and its gradient.

    The gradient is zero at ``z = 0``, where the function is smooth.
    """
    z = np.asarray(z, dtype=float)
    n = float(np.linalg.norm(z))
    if n == 0.0:
        return 0.0, np.zeros_like(z)
    k0 = derived_constants(spec)[0]
    val = kappa_value(spec, n) - k0 * n
    grad = ((kappa_derivative(spec, n) - k0) / n) * z
    return float(val), grad


def bar_spectral(spec: KappaSpec, sigma, mu: float) -> tuple[float, np.ndarray]:
    """Spectral remainder ``mu * sum(kappa(s) - kappa0 s)`` and its weights.

    The weights ``kappa'(s_i) - kappa0`` lie in ``[-kappa0, 0]``; the gradient
    of the remainder at ``X = U diag(s) V^T`` is ``mu * U diag(w) V^T``.
    """
    s = _check_nonneg(np.atleast_1d(np.asarray(sigma, dtype=float)))
    k0 = derived_constants(spec)[0]
    val = mu * float(np.sum(kappa_value(spec, s) - k0 * s))
    w = kappa_derivative(spec, s) - k0
    return val, np.asarray(w, dtype=float)


def huber_radius(x, lam: float):
    """``h(x) = |x|`` for ``|x| >= lam`` else ``x**2 / (2 lam) + lam / 2``, and ``h'``."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    inner = a < lam
    h = np.where(inner, x * x / (2 * lam) + lam / 2, a)
    dh = np.where(inner, x / lam, np.sign(x))
    return h, dh


def smoothed_kappa(spec: SmoothedKappaSpec, x):
    """Smoothed LSP ``beta * log(1 + h(x) / theta)`` and its derivative."""
    if spec.base.variant is not Variant.LSP:
        raise UnsupportedVariantError("smoothing is defined for LSP only")
    b, t = spec.base.beta, spec.base.theta
    h, dh = huber_radius(x, spec.lam)
    val = b * np.log1p(h / t)
    der = b * dh / (t + h)
    if np.ndim(x) == 0:
        return float(val), float(der)
    return val, der
