"""Free-probability predictions for the TAP Hessian spectrum.

Stieltjes transforms follow ``g_mu(z) = int (z - x)^-1 dmu(x)``, so
``Im g < 0`` on the upper half plane and the density is ``-Im g / pi``.

``nu`` is the law of ``-cosh^2(h + beta sqrt(q) Z)``, supported on
``(-inf, -1]``.  The Hessian spectrum at the iterates converges to the
semicircle of radius ``2 beta`` freely convolved with ``nu``, translated by
``-beta^2 (1 - q)``.  Its right edge and outliers are read off the map
``H(u) = u + beta^2 g_nu(u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .rs_core import ConvergenceError, ModelParams, QuadratureRule, default_rule


@dataclass(frozen=True)
class AtomicMeasure:
    """Finitely many atoms with weights; the generic input of the solvers below."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if a.shape != w.shape or a.ndim != 1 or len(a) == 0:
            raise ValueError("atoms and weights must be equal-length 1-d arrays")
        if np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, rel_tol=1e-12):
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    def stieltjes(self, z):
        z = np.asarray(z)
        return (1.0 / (z[..., None] - self.atoms)) @ self.weights

    def mean(self) -> float:
        finite = np.isfinite(self.atoms)
        return float(self.atoms[finite] @ self.weights[finite])


@dataclass(frozen=True)
class NuMeasure:
    """``nu`` represented as the pushforward of a Gaussian quadrature rule."""

    params: ModelParams
    q: float
    rule: QuadratureRule | None = None

    def __post_init__(self):
        if not 0.0 <= self.q < 1.0:
            raise ValueError("q must lie in [0, 1)")
        if self.rule is None:
            object.__setattr__(self, "rule", default_rule())

    @property
    def beta(self) -> float:
        return self.params.beta

    @property
    def sigma(self) -> float:
        """Standard deviation of the Gaussian field ``h + beta sqrt(q) Z``."""
        return self.params.beta * math.sqrt(self.q)

    @cached_property
    def cosh_sq(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.cosh(self.params.h + self.sigma * self.rule.nodes) ** 2

    @property
    def atoms(self) -> np.ndarray:
        return -self.cosh_sq

    @property
    def weights(self) -> np.ndarray:
        return self.rule.weights

    @property
    def onsager_shift(self) -> float:
        """``beta^2 (1 - q)``, the translation between ``mu_beta [+] nu`` and the Hessian law."""
        return self.params.beta**2 * (1.0 - self.q)

    def as_atomic(self) -> AtomicMeasure:
        return AtomicMeasure(self.atoms, self.weights)

    def expect_inverse(self, u: float, power: int = 1) -> float:
        """``E[(u + cosh^2)^-power]`` for real ``u > -1``."""
        return float(self.rule.expect((u + self.cosh_sq) ** -power))

    def cdf(self, x):
        """Exact ``P(-cosh^2(Y) <= x)`` for ``Y ~ N(h, sigma^2)``."""
        x = np.asarray(x, dtype=float)
        a = np.maximum(-x, 1.0)
        y = np.arccosh(np.sqrt(a))
        h, s = self.params.h, self.sigma
        if s == 0.0:
            p = (np.cosh(h) ** 2 >= a).astype(float)
        else:
            p = ndtr((-y - h) / s) + ndtr((h - y) / s)
        return np.where(x >= -1.0, 1.0, p)


def _check_off_support(z):
    z = np.asarray(z)
    on_axis = np.imag(z) == 0
    if np.any(on_axis & (np.real(z) <= -1.0)):
        raise ValueError("z lies on the support (-inf, -1] of nu")


def stieltjes_nu(z, nu: NuMeasure):
    """``g_nu(z) = E[1 / (z + cosh^2(h + beta sqrt(q) Z))]``."""
    _check_off_support(z)
    out = (1.0 / (np.asarray(z)[..., None] + nu.cosh_sq)) @ nu.weights
    return out.item() if np.ndim(out) == 0 else out


def semicircle_stieltjes(z, sigma: float):
    """Transform of the semicircle law on ``[-2 sigma, 2 sigma]``.

    The product of principal square roots selects the branch ``g ~ 1/z``
    on all of ``C \\ [-2 sigma, 2 sigma]``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = np.asarray(z, dtype=complex)
    root = np.sqrt(z - 2.0 * sigma) * np.sqrt(z + 2.0 * sigma)
    out = (z - root) / (2.0 * sigma * sigma)
    return out.item() if out.ndim == 0 else out


# --- subordination solver ---------------------------------------------------


class FreeConvolutionError(ConvergenceError):
    pass


def _measure_parts(nu) -> tuple[np.ndarray, np.ndarray, float]:
    beta = nu.beta if hasattr(nu, "beta") else None
    return np.asarray(nu.atoms, dtype=float), np.asarray(nu.weights, dtype=float), beta


def _g_and_dg(w: np.ndarray, atoms: np.ndarray, weights: np.ndarray, chunk: int = 256):
    g = np.empty(w.shape, dtype=complex)
    dg = np.empty(w.shape, dtype=complex)
    for start in range(0, len(w), chunk):
        r = 1.0 / (w[start : start + chunk, None] - atoms)
        g[start : start + chunk] = r @ weights
        dg[start : start + chunk] = -(r * r) @ weights
    return g, dg


def free_conv_stieltjes(
    x,
    eta: float,
    nu,
    shift: float = 0.0,
    beta: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    return_omega: bool = False,
):
    """Transform of ``mu_beta [+] (nu - shift)`` at ``z = x + i eta``.

    Solves ``g = g_{nu - shift}(z - beta^2 g)`` through the subordination
    variable ``omega = z - beta^2 g``, i.e. ``omega + beta^2 G(omega) = z``
    with ``G(w) = g_nu(w + shift)``.  The solution is first obtained at a
    large imaginary part by damped fixed-point iteration (factor 0.5), then
    continued down to ``eta`` by Newton steps with backtracking, which keeps
    ``Im omega > Im z`` throughout.  Points Newton cannot settle fall back to
    the damped iteration.

    ``nu`` is any measure with ``atoms`` and ``weights``; ``beta`` defaults
    to ``nu.beta``.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    atoms, weights, nb = _measure_parts(nu)
    beta = nb if beta is None else beta
    if beta is None or beta <= 0:
        raise ValueError("a positive beta is required")
    b2 = beta * beta
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    atoms = atoms - shift

    finite = np.isfinite(atoms)
    mean = float(atoms[finite] @ weights[finite])
    eta0 = max(eta, 1.0 + b2)

    # damped iteration at large eta, started from the shifted semicircle
    z0 = xs + 1j * eta0
    g = np.asarray(semicircle_stieltjes(z0 - mean, beta), dtype=complex).reshape(xs.shape)
    for _ in range(2000):
        g_new = 0.5 * g + 0.5 * _g_and_dg(z0 - b2 * g, atoms, weights)[0]
        done = np.max(np.abs(g_new - g)) < tol
        g = g_new
        if done:
            break
    omega = z0 - b2 * g

    etas = [eta0]
    while etas[-1] > eta:
        etas.append(max(etas[-1] * 0.1, eta))
    for e in etas[1:]:
        z = xs + 1j * e
        # the previous solution is the starting point; lift it above the new Im z
        omega = np.where(omega.imag > e, omega, omega.real + 1j * 2.0 * e)
        omega, ok = _newton(omega, z, atoms, weights, b2, tol)
        if not np.all(ok):
            bad = ~ok
            omega[bad] = _damped(z[bad], omega[bad], atoms, weights, b2, tol, max_iter)
    g = (xs + 1j * etas[-1] - omega) / b2
    g = g if np.ndim(x) else g[0]
    if return_omega:
        return g, (omega if np.ndim(x) else omega[0])
    return g


def _newton(omega, z, atoms, weights, b2, tol, max_steps: int = 60):
    omega = omega.copy()
    ok = np.zeros(omega.shape, dtype=bool)
    G, dG = _g_and_dg(omega, atoms, weights)
    F = omega + b2 * G - z
    for _ in range(max_steps):
        active = ~ok
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        step = F[idx] / (1.0 + b2 * dG[idx])
        lam = np.ones(len(idx))
        w_old = omega[idx]
        f_old = np.abs(F[idx])
        pending = np.arange(len(idx))
        new_w = w_old.copy()
        new_G = G[idx].copy()
        new_dG = dG[idx].copy()
        new_F = F[idx].copy()
        for _ in range(40):
            if len(pending) == 0:
                break
            cand = w_old[pending] - lam[pending] * step[pending]
            valid = cand.imag > z[idx[pending]].imag
            Gc, dGc = _g_and_dg(cand, atoms, weights)
            Fc = cand + b2 * Gc - z[idx[pending]]
            accept = valid & (np.abs(Fc) < f_old[pending] + 1e-300) | (valid & (lam[pending] < 1e-9))
            acc = pending[accept]
            new_w[acc] = cand[accept]
            new_G[acc] = Gc[accept]
            new_dG[acc] = dGc[accept]
            new_F[acc] = Fc[accept]
            lam[pending[~accept]] *= 0.5
            pending = pending[~accept]
        moved = np.abs(new_w - w_old) / b2
        omega[idx], G[idx], dG[idx], F[idx] = new_w, new_G, new_dG, new_F
        ok[idx] = (moved < tol) & (np.abs(new_F) / b2 < 10 * tol)
    return omega, ok


def _damped(z, omega, atoms, weights, b2, tol, max_iter):
    g = (z - omega) / b2
    for it in range(max_iter):
        g_new = 0.5 * g + 0.5 * _g_and_dg(z - b2 * g, atoms, weights)[0]
        delta = np.max(np.abs(g_new - g))
        g = g_new
        if delta < tol:
            return z - b2 * g
    raise FreeConvolutionError(
        f"subordination iteration did not converge at {len(z)} points after {max_iter} iterations", delta
    )


def free_conv_density(x, nu, shift: float = 0.0, eta: float = 1e-6, beta: float | None = None):
    """``-Im g / pi`` along the real line at height ``eta``."""
    g = free_conv_stieltjes(x, eta, nu, shift=shift, beta=beta)
    return -np.imag(g) / math.pi


# --- H map, edge, outliers ---------------------------------------------------


def subordination_H(u: float, nu: NuMeasure) -> tuple[float, float]:
    """``(H(u), H'(u))`` with ``H(u) = u + beta^2 g_nu(u)`` for real ``u > -1``."""
    if not u > -1.0:
        raise ValueError("u must exceed -1 (the right end of supp nu)")
    b2 = nu.beta**2
    r = 1.0 / (u + nu.cosh_sq)
    w = nu.weights
    return u + b2 * float(r @ w), 1.0 - b2 * float((r * r) @ w)


class AtRegime(str, Enum):
    STRICT_AT = "strict_AT"
    ON_AT_LINE = "on_AT_line"
    BEYOND_AT = "beyond_AT"


@dataclass(frozen=True)
class EdgeReport:
    u_star: float
    d: float
    shifted_edge: float
    at_regime: AtRegime


EDGE_BRACKET = (-1.0 + 1e-9, 1e3)


def _bisect(f, lo: float, hi: float, tol: float) -> float:
    flo = f(lo)
    if flo * f(hi) > 0:
        raise ConvergenceError(f"no sign change of the target on [{lo}, {hi}]", flo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def support_edge(nu: NuMeasure, tol: float = 1e-12, regime_tol: float = 1e-10) -> EdgeReport:
    """Right edge of ``mu_beta [+] nu`` from the root ``u*`` of ``H'``.

    ``H'`` is strictly increasing on ``(-1, inf)``, so bisection on
    ``(-1 + 1e-9, 1e3)`` finds ``u*``; the edge is ``d = H(u*)``.  The sign of
    ``H'(0)`` equals the sign of ``1 - at_value``.
    """
    u_star = _bisect(lambda u: subordination_H(u, nu)[1], *EDGE_BRACKET, tol)
    d = subordination_H(u_star, nu)[0]
    slope0 = subordination_H(0.0, nu)[1]
    if abs(slope0) <= regime_tol:
        regime = AtRegime.ON_AT_LINE
    elif slope0 > 0:
        regime = AtRegime.STRICT_AT
    else:
        regime = AtRegime.BEYOND_AT
    return EdgeReport(u_star, d, d - nu.onsager_shift, regime)


@dataclass(frozen=True)
class OutlierReport:
    theta: float
    in_O: bool
    predicted_lambda1: float


def outlier_prediction(theta: float, nu: NuMeasure, edge: EdgeReport | None = None) -> OutlierReport:
    """Limit of the top eigenvalue of ``beta GOE + A`` when ``lambda_1(A) -> theta``.

    Outside the bulk (``H'(theta) > 0``, equivalently ``theta > u*``) the
    outlier sits at ``H(theta)``; otherwise it sticks to the edge ``d``.
    """
    if not theta > -1.0:
        raise ValueError("theta must exceed -1")
    edge = edge or support_edge(nu)
    value, slope = subordination_H(theta, nu)
    in_o = slope > 0 and theta > edge.u_star
    return OutlierReport(theta, bool(in_o), value if in_o else edge.d)


def sherman_morrison_top_eig(m, params: ModelParams) -> tuple[float, bool]:
    """Top eigenvalue ``u`` of ``diag(-1/(1 - m_i^2)) + 2 beta^2 m m^T / N``.

    Solves ``(2 beta^2 / N) sum m_i^2 / (u + 1/(1 - m_i^2)) = 1``; the left
    side decreases on ``u > -min_i 1/(1 - m_i^2)`` from ``+inf`` to 0.
    Returns ``(u, u > 0)``.
    """
    from .tap_functional import as_magnetization

    mag = as_magnetization(m)
    c = mag.inv_one_minus_sq()
    msq = mag.m * mag.m
    n = mag.n
    if not np.any(msq > 0):
        raise ConvergenceError("secular equation has no root: m vanishes identically", 0.0)
    scale = 2.0 * params.beta**2 / n
    c0 = float(np.min(c[msq > 0]))
    gaps = c - c0

    # unknown t = u + c0 > 0 keeps the pole at the origin free of cancellation
    def lhs_minus_one(t):
        return scale * float(np.sum(msq / (t + gaps))) - 1.0

    hi = 2.0 * params.beta**2 * float(msq.mean()) + 1.0 + c0
    lo = 1e-300
    while lhs_minus_one(lo) <= 0:
        lo *= 1e10
        if lo > hi:
            raise ConvergenceError("secular equation has no root above the largest diagonal entry", 0.0)
    t = brentq(lhs_minus_one, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    u = t - c0
    return u, u > 0


def population_outlier_root(nu: NuMeasure, tol: float = 1e-12) -> float | None:
    """Root ``u_inf > -1`` of ``2 beta^2 E[tanh^2 / (u + cosh^2)] = 1``, or ``None``.

    The left side decreases from ``2 beta^2 E sech^2`` at ``u = -1``; no root
    exists when that value is at most 1.
    """
    b2 = nu.beta**2
    c = nu.cosh_sq
    w = nu.weights
    with np.errstate(invalid="ignore", over="ignore"):
        t2 = np.where(np.isfinite(c), 1.0 - 1.0 / c, 1.0)

    def f(u):
        return 2.0 * b2 * float((t2 / (u + c)) @ w) - 1.0

    # at u = -1 the ratio tanh^2/(cosh^2 - 1) equals sech^2 exactly
    at_minus_one = 2.0 * b2 * float((1.0 / c) @ w) - 1.0
    if at_minus_one <= 0:
        return None
    hi = 2.0 * b2
    return _bisect(lambda u: f(u) if u > -1.0 else at_minus_one, -1.0 + 1e-15, hi, tol)


# --- free-convolution law on a grid -------------------------------------------


@dataclass
class FreeConvolutionLaw:
    """Density and CDF of ``mu_beta [+] nu`` translated by ``-shift``.

    The density is tabulated on a grid ``x = right - a sinh(t)`` with ``t``
    uniform, dense near the right edge and geometric in the far left tail.
    The CDF integrates the density leftward from the edge; beyond the grid it
    is closed by the exact tail of ``nu`` (scaled to match), which the far tail
    of the convolution follows.
    """

    nu: NuMeasure
    shift: float
    x: np.ndarray
    density: np.ndarray
    cdf_values: np.ndarray
    edge: EdgeReport

    @classmethod
    def build(
        cls,
        nu: NuMeasure,
        shift: float | None = None,
        eta: float = 1e-6,
        points: int = 4000,
        tail_mass: float = 1e-7,
        scale: float = 1.0,
    ) -> "FreeConvolutionLaw":
        shift = nu.onsager_shift if shift is None else shift
        edge = support_edge(nu)
        right = edge.d - shift + 0.5 + 0.05 * nu.beta
        left = _nu_quantile(nu, tail_mass) - shift - 2.0 * nu.beta - 1.0
        left = max(left, -1e15)
        t = np.linspace(0.0, math.asinh((right - left) / scale), points)
        x = right - scale * np.sinh(t)[::-1]
        dens = np.maximum(free_conv_density(x, nu, shift=shift, eta=eta), 0.0)
        seg = 0.5 * (dens[1:] + dens[:-1]) * np.diff(x)
        above = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
        cdf = np.clip(1.0 - above, 0.0, 1.0)
        return cls(nu, shift, x, dens, cdf, edge)

    @property
    def total_mass(self) -> float:
        return float(1.0 - self.cdf_values[0] + self._nu_shifted_cdf(self.x[0]))

    def _nu_shifted_cdf(self, x):
        return self.nu.cdf(np.asarray(x) + self.shift)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = np.interp(x, self.x, self.cdf_values)
        base = float(self._nu_shifted_cdf(self.x[0]))
        f0 = float(self.cdf_values[0])
        if base > 0:
            tail = self._nu_shifted_cdf(np.minimum(x, self.x[0])) * (f0 / base)
        else:
            tail = np.zeros_like(x)
        out = np.where(x < self.x[0], tail, inside)
        return out.item() if out.ndim == 0 else out

    __call__ = cdf

    def density_at(self, x):
        return np.interp(x, self.x, self.density, left=0.0, right=0.0)

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.x, self.density]), delimiter=",",
                   header="x,density", comments="", fmt="%.17g")


def _nu_quantile(nu: NuMeasure, p: float) -> float:
    """Point ``x`` with ``P_nu(<= x) ~ p``, by bisection on the exact CDF."""
    lo = -1.0
    while float(nu.cdf(lo)) > p and lo > -1e300:
        lo *= 10.0
    hi = -1.0
    if lo == hi:
        return -1.0
    for _ in range(200):
        mid = -math.sqrt(lo * hi)
        if float(nu.cdf(mid)) > p:
            hi = mid
        else:
            lo = mid
        if hi / lo > 1 - 1e-6:
            break
    return lo
