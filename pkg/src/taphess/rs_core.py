"""Replica-symmetric scalar layer.

Gaussian expectations, the overlap fixed point ``q``, the RS functional,
the AT and Plefka quantities, and the ``gamma``/``rho`` schedule that drives
the conditional TAP iteration.  Nothing here depends on the system size ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

MIN_BETA = 1e-8


class ConvergenceError(RuntimeError):
    """A scalar solver ran out of iterations."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class ModelParams:
    beta: float
    h: float

    def __post_init__(self):
        if not (self.beta >= MIN_BETA and math.isfinite(self.beta)):
            raise ValueError(f"beta must be >= {MIN_BETA}, got {self.beta}")
        if self.h == 0 or not math.isfinite(self.h):
            raise ValueError("external field h must be finite and nonzero")


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and normalized weights representing ``E f(Z)``, ``Z ~ N(0, 1)``."""

    nodes: np.ndarray
    weights: np.ndarray
    name: str = "custom"

    @property
    def order(self) -> int:
        return len(self.nodes)

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Contract the last axis of ``values`` (evaluated at the nodes)."""
        return values @ self.weights

    def __call__(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.expect(f(self.nodes)))

    def to_text(self) -> str:
        return "\n".join(f"{x:.17g} {w:.17g}" for x, w in zip(self.nodes, self.weights))


@lru_cache(maxsize=16)
def gauss_hermite_rule(order: int) -> QuadratureRule:
    """Gauss-Hermite rule for the standard Gaussian weight.

    Exact for polynomials up to degree ``2 * order - 1``.  Loses accuracy for
    integrands that vary on scales much below the node spacing (large beta);
    see :func:`gaussian_rule` for the default used by the rest of the package.
    """
    if int(order) != order or order < 2:
        raise ValueError(f"quadrature order must be an integer >= 2, got {order}")
    if order > 250:
        raise ValueError("Gauss-Hermite weights underflow beyond order 250")
    x, w = hermegauss(int(order))
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return QuadratureRule(x, w / w.sum(), name=f"gauss-hermite-{order}")


@lru_cache(maxsize=16)
def gaussian_rule(panels: int = 96, points: int = 10, half_width: float = 12.0) -> QuadratureRule:
    """Composite Gauss-Legendre rule for ``E f(Z)`` on ``[-half_width, half_width]``.

    The default (960 nodes, spacing ~0.025) resolves the sharply peaked
    integrands ``cosh(h + beta sqrt(q) Z)^-4`` up to beta ~ 8 to ~1e-10.
    Gaussian mass beyond 12 standard deviations is below 1e-32.
    """
    if panels < 1 or points < 2:
        raise ValueError("need at least one panel and two points per panel")
    xg, wg = leggauss(points)
    edges = np.linspace(-half_width, half_width, panels + 1)
    left, right = edges[:-1, None], edges[1:, None]
    x = (0.5 * (right - left) * xg + 0.5 * (left + right)).ravel()
    w = (0.5 * (right - left) * wg).ravel() * np.exp(-0.5 * x * x)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return QuadratureRule(x, w / w.sum(), name=f"gauss-legendre-{panels}x{points}")


def default_rule() -> QuadratureRule:
    return gaussian_rule()


# --- fixed point and RS functional -----------------------------------------


def _fields(params: ModelParams, q: float, rule: QuadratureRule) -> np.ndarray:
    return params.h + params.beta * math.sqrt(max(q, 0.0)) * rule.nodes


def tanh_sq_mean(params: ModelParams, q: float, rule: QuadratureRule | None = None) -> float:
    rule = rule or default_rule()
    return float(rule.expect(np.tanh(_fields(params, q, rule)) ** 2))


def _log_cosh(x):
    x = np.abs(x)
    return x + np.log1p(np.exp(-2.0 * x)) - math.log(2.0)


def rs_functional(params: ModelParams, q: float, rule: QuadratureRule | None = None) -> float:
    """``E log cosh(h + beta sqrt(q) Z) + beta^2 (1 - q)^2 / 4``."""
    rule = rule or default_rule()
    y = _fields(params, q, rule)
    return float(rule.expect(_log_cosh(y))) + params.beta**2 * (1.0 - q) ** 2 / 4.0


def at_value(params: ModelParams, q: float, rule: QuadratureRule | None = None) -> float:
    """Left side of the AT condition, ``beta^2 E cosh^-4(h + beta sqrt(q) Z)``."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must lie in [0, 1), got {q}")
    rule = rule or default_rule()
    sech2 = 1.0 / np.cosh(_fields(params, q, rule)) ** 2
    return params.beta**2 * float(rule.expect(sech2 * sech2))


def plefka2_limit_value(params: ModelParams, q: float, rule: QuadratureRule | None = None) -> float:
    """``2 beta^2 E (tanh^2 - tanh^4)(h + beta sqrt(q) Z)``.

    Below 1 the magnetizations with this empirical law satisfy Plefka's
    second condition for large N.
    """
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must lie in [0, 1), got {q}")
    rule = rule or default_rule()
    t2 = np.tanh(_fields(params, q, rule)) ** 2
    return 2.0 * params.beta**2 * float(rule.expect(t2 - t2 * t2))


@dataclass(frozen=True)
class RsSolution:
    params: ModelParams
    q: float
    rs_value: float
    at_value: float
    plefka2_value: float
    residual: float
    iterations: int

    @property
    def satisfies_at(self) -> bool:
        return self.at_value <= 1.0


def solve_q(
    params: ModelParams,
    tol: float = 1e-12,
    rule: QuadratureRule | None = None,
    max_iter: int = 200,
) -> RsSolution:
    """Solve ``q = E tanh^2(h + beta sqrt(q) Z)`` by bisection on ``[0, 1 - 1e-12]``.

    For ``h != 0`` the fixed point is unique, so ``F(q) - q`` changes sign
    exactly once on the bracket: ``F(0) = tanh^2(h) > 0`` and ``F < 1``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rule = rule or default_rule()
    lo, hi = 0.0, 1.0 - 1e-12
    residual = math.inf
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        residual = tanh_sq_mean(params, mid, rule) - mid
        if residual > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            q = 0.5 * (lo + hi)
            residual = tanh_sq_mean(params, q, rule) - q
            if abs(residual) < tol:
                return RsSolution(
                    params=params,
                    q=q,
                    rs_value=rs_functional(params, q, rule),
                    at_value=at_value(params, q, rule),
                    plefka2_value=plefka2_limit_value(params, q, rule),
                    residual=residual,
                    iterations=it,
                )
    raise ConvergenceError(f"solve_q did not converge for {params}", abs(residual))


def solve_q_grid(
    betas: np.ndarray, hs: np.ndarray, tol: float = 1e-12, rule: QuadratureRule | None = None
) -> np.ndarray:
    """Vectorized ``q`` for many ``(beta, h)`` pairs at once (broadcast shapes).

    Safeguarded Newton: ``d/dq E tanh^2 = beta^2 E[(1 - t^2)(1 - 3 t^2)]`` by
    Gaussian integration by parts; a step leaving the current bisection
    bracket is replaced by the midpoint.
    """
    rule = rule or default_rule()
    betas = np.asarray(betas, dtype=float)
    hs = np.asarray(hs, dtype=float)
    shape = np.broadcast(betas, hs).shape
    b = np.broadcast_to(betas, shape).ravel()
    h = np.broadcast_to(hs, shape).ravel()
    lo = np.zeros(b.shape)
    hi = np.full(b.shape, 1.0 - 1e-12)
    q = np.tanh(h) ** 2
    active = np.ones(b.shape, dtype=bool)
    for _ in range(200):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        qi = q[idx]
        t2 = np.tanh(h[idx, None] + b[idx, None] * np.sqrt(qi)[:, None] * rule.nodes) ** 2
        f = rule.expect(t2) - qi
        slope = b[idx] ** 2 * rule.expect((1.0 - t2) * (1.0 - 3.0 * t2)) - 1.0
        up = f > 0
        lo[idx] = np.where(up, qi, lo[idx])
        hi[idx] = np.where(up, hi[idx], qi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = qi - f / slope
        inside = np.isfinite(step) & (step > lo[idx]) & (step < hi[idx])
        new = np.where(inside, step, 0.5 * (lo[idx] + hi[idx]))
        q[idx] = new
        active[idx] = (np.abs(new - qi) > tol) & (hi[idx] - lo[idx] > tol)
    return q.reshape(shape)


def scalar_values_grid(
    betas: np.ndarray, hs: np.ndarray, qs: np.ndarray, rule: QuadratureRule | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """AT and Plefka-2 limit values on a grid (vectorized twin of the scalar functions)."""
    rule = rule or default_rule()
    b = np.asarray(betas, dtype=float)[..., None]
    y = np.asarray(hs, dtype=float)[..., None] + b * np.sqrt(np.asarray(qs))[..., None] * rule.nodes
    t2 = np.tanh(y) ** 2
    b2 = np.asarray(betas, dtype=float) ** 2
    at = b2 * rule.expect((1.0 - t2) ** 2)
    p2 = 2.0 * b2 * rule.expect(t2 - t2 * t2)
    return at, p2


# --- psi and the gamma schedule ---------------------------------------------


def psi(t: float, params: ModelParams, q: float, rule: QuadratureRule | None = None) -> float:
    """``E tanh(h + b sqrt(t) Z + b sqrt(q-t) Z') tanh(h + b sqrt(t) Z + b sqrt(q-t) Z'')``.

    Conditioning on ``Z`` factorizes the inner expectation, leaving a
    two-dimensional tensor-product quadrature.
    """
    if not (-1e-15 <= t <= q + 1e-15):
        raise ValueError(f"psi is defined on [0, q] = [0, {q}], got t={t}")
    t = min(max(t, 0.0), q)
    rule = rule or default_rule()
    b = params.beta
    outer = params.h + b * math.sqrt(t) * rule.nodes
    inner = np.tanh(outer[:, None] + b * math.sqrt(q - t) * rule.nodes[None, :]) @ rule.weights
    return float(rule.expect(inner * inner))


@dataclass(frozen=True)
class GammaSchedule:
    gammas: np.ndarray
    rhos: np.ndarray
    gamma_sq_partials: np.ndarray
    frozen_at: int | None = None  # first index whose denominator degenerated

    def __len__(self) -> int:
        return len(self.gammas)

    def remaining(self, q: float, k: int) -> float:
        """``q - Gamma^2_k`` clipped at zero (``k = 0`` gives ``q``)."""
        if k <= 0:
            return q
        return max(q - float(self.gamma_sq_partials[k - 1]), 0.0)


def gamma_schedule(
    params: ModelParams, q: float, k_max: int, rule: QuadratureRule | None = None
) -> GammaSchedule:
    """``gamma_1 = E tanh(h + beta sqrt(q) Z)``, ``rho_1 = sqrt(q) gamma_1``,
    ``rho_k = psi(rho_{k-1})``, ``gamma_k = (rho_k - Gamma^2_{k-1}) / sqrt(q - Gamma^2_{k-1})``.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    rule = rule or default_rule()
    gammas = np.zeros(k_max)
    rhos = np.zeros(k_max)
    partial = np.zeros(k_max)
    g1 = float(rule.expect(np.tanh(_fields(params, q, rule))))
    gammas[0], rhos[0], partial[0] = g1, math.sqrt(q) * g1, g1 * g1
    frozen = None
    for k in range(1, k_max):
        rhos[k] = psi(min(rhos[k - 1], q), params, q, rule)
        gap = q - partial[k - 1]
        if gap < -1e-10:
            raise ArithmeticError(f"q - Gamma^2_{k} = {gap:.3e} is negative beyond round-off")
        if gap < 1e-14:
            frozen = k + 1
            gammas[k:] = 0.0
            rhos[k:] = rhos[k]
            partial[k:] = partial[k - 1]
            break
        gammas[k] = (rhos[k] - partial[k - 1]) / math.sqrt(gap)
        partial[k] = partial[k - 1] + gammas[k] ** 2
    return GammaSchedule(gammas, rhos, partial, frozen)


# --- Plefka conditions on finite vectors --------------------------------------


def plefka_values(m, params: ModelParams) -> tuple[float, float]:
    """``p1 = beta^2/N sum (1 - m_i^2)^2`` and ``p2 = 2 beta^2/N sum (m_i^2 - m_i^4)``."""
    if hasattr(m, "one_minus_sq"):
        s = m.one_minus_sq()
    else:
        m = np.asarray(m, dtype=float)
        if np.any(np.abs(m) >= 1.0):
            raise ValueError("magnetizations must satisfy |m_i| < 1")
        s = 1.0 - m * m
    b2 = params.beta**2
    return b2 * float(np.mean(s * s)), 2.0 * b2 * float(np.mean(s * (1.0 - s)))
