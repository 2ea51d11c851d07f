"""TAP free energy, its stationarity residual, and its Hessian.

For ``m in (-1, 1)^N`` and symmetrized disorder ``gbar``::

    TAP_N(m) = beta N^-1/2 sum_{i<j} gbar_ij m_i m_j + h sum m_i
               + beta^2 N (1 - |m|^2)^2 / 4 - sum I(m_i)

with ``|m|^2 = N^-1 sum m_i^2`` and ``I`` the binary entropy function below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dger

from .rng import generator
from .rs_core import ModelParams


@dataclass(frozen=True)
class Magnetization:
    """A magnetization vector, optionally with its field ``atanh(m)``.

    Carrying the field keeps ``1/(1 - m_i^2) = cosh^2(field_i)`` finite when
    ``tanh`` rounds to ``+-1`` in double precision (fields beyond ~19).
    """

    m: np.ndarray
    field: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        object.__setattr__(self, "m", m)
        if self.field is None:
            if np.any(np.abs(m) >= 1.0):
                raise ValueError("magnetizations must satisfy |m_i| < 1")
        else:
            f = np.asarray(self.field, dtype=float)
            if f.shape != m.shape or not np.all(np.isfinite(f)):
                raise ValueError("field must be finite and match m in shape")
            object.__setattr__(self, "field", f)

    @classmethod
    def from_field(cls, field) -> "Magnetization":
        field = np.asarray(field, dtype=float)
        return cls(np.tanh(field), field)

    @property
    def n(self) -> int:
        return len(self.m)

    def atanh(self) -> np.ndarray:
        return self.field if self.field is not None else np.arctanh(self.m)

    def one_minus_sq(self) -> np.ndarray:
        """``1 - m_i^2``, via ``sech^2`` of the field when available."""
        if self.field is not None:
            return 1.0 / np.cosh(self.field) ** 2
        return (1.0 - self.m) * (1.0 + self.m)

    def inv_one_minus_sq(self) -> np.ndarray:
        if self.field is not None:
            return np.cosh(self.field) ** 2
        return 1.0 / ((1.0 - self.m) * (1.0 + self.m))

    def entropy(self) -> np.ndarray:
        if self.field is not None:
            y = np.abs(self.field)
            log_cosh = y + np.log1p(np.exp(-2.0 * y)) - math.log(2.0)
            return y * np.abs(self.m) - log_cosh
        return entropy_I(self.m)


def as_magnetization(m) -> Magnetization:
    return m if isinstance(m, Magnetization) else Magnetization(m)


def entropy_I(x):
    """``I(x) = (1+x)/2 log(1+x) + (1-x)/2 log(1-x)`` for ``|x| < 1``."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) >= 1.0):
        raise ValueError("entropy_I is evaluated on the open interval (-1, 1)")
    out = 0.5 * ((1.0 + x) * np.log1p(x) + (1.0 - x) * np.log1p(-x))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TapBreakdown:
    interaction: float
    field: float
    onsager: float
    entropy: float
    total: float
    per_site: float


def _check_dims(gbar: np.ndarray, m: Magnetization) -> int:
    n = m.n
    if gbar.shape != (n, n):
        raise ValueError(f"disorder shape {gbar.shape} does not match magnetization length {n}")
    return n


def tap_free_energy(gbar: np.ndarray, m, params: ModelParams) -> TapBreakdown:
    m = as_magnetization(m)
    n = _check_dims(gbar, m)
    v = m.m
    # sum_{i<j} = (v^T gbar v - sum_i gbar_ii v_i^2) / 2
    quad = float(v @ (gbar @ v)) - float(np.diagonal(gbar) @ (v * v))
    interaction = params.beta / math.sqrt(n) * 0.5 * quad
    fld = params.h * float(v.sum())
    norm_sq = float(v @ v) / n
    onsager = params.beta**2 / 4.0 * n * (1.0 - norm_sq) ** 2
    entropy = -float(m.entropy().sum())
    total = interaction + fld + onsager + entropy
    return TapBreakdown(interaction, fld, onsager, entropy, total, total / n)


def tap_gradient(gbar: np.ndarray, m, params: ModelParams) -> np.ndarray:
    """Exact gradient of :func:`tap_free_energy` (diagonal of ``gbar`` excluded)."""
    m = as_magnetization(m)
    n = _check_dims(gbar, m)
    v = m.m
    b = params.beta
    coupling = (gbar @ v - np.diagonal(gbar) * v) * (b / math.sqrt(n))
    return coupling + params.h - b * b * (1.0 - float(v @ v) / n) * v - m.atanh()


def tap_residual(gbar: np.ndarray, m, params: ModelParams, q: float) -> tuple[np.ndarray, float]:
    """``Delta = atanh(m) - h 1 - beta N^-1/2 gbar m + beta^2 (1 - q) m``.

    Uses the full product ``gbar m`` including the diagonal; the TAP
    equations proper exclude ``j = i``, an ``O(N^-1/2)`` difference per site.
    Returns ``(Delta, ||Delta||)`` with the normalized norm.
    """
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    m = as_magnetization(m)
    n = _check_dims(gbar, m)
    v = m.m
    b = params.beta
    delta = m.atanh() - params.h - (b / math.sqrt(n)) * (gbar @ v) + b * b * (1.0 - q) * v
    return delta, math.sqrt(float(delta @ delta) / n)


def hessian(gbar: np.ndarray, m, params: ModelParams, out: np.ndarray | None = None) -> np.ndarray:
    """Hessian of ``TAP_N`` at ``m``.

    Off-diagonal: ``beta N^-1/2 gbar_ij + 2 beta^2 m_i m_j / N``;
    diagonal: ``-beta^2 (1 - |m|^2) - 1/(1 - m_i^2) + 2 beta^2 m_i^2 / N``.
    ``out`` may alias ``gbar`` to build the matrix in place.
    """
    m = as_magnetization(m)
    n = _check_dims(gbar, m)
    v = m.m
    b = params.beta
    scale = b / math.sqrt(n)
    if out is None:
        out = gbar * scale
    else:
        if out is not gbar:
            np.copyto(out, gbar)
        out *= scale
    # unit alpha keeps the update bitwise symmetric: u_i u_j == u_j u_i
    u = v * (b * math.sqrt(2.0 / n))
    dger(1.0, u, u, a=out.T, overwrite_a=1)
    d = np.arange(n)
    out[d, d] = -b * b * (1.0 - float(v @ v) / n) - m.inv_one_minus_sq() + 2.0 * b * b * v * v / n
    return out


# --- special magnetizations -------------------------------------------------


def sign_magnetization(v: np.ndarray, alpha: float) -> Magnetization:
    """``m_i = alpha sign(v_i)`` with ``sign(0) = +1``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    v = np.asarray(v, dtype=float)
    s = np.where(v >= 0, 1.0, -1.0)
    return Magnetization(alpha * s, math.atanh(alpha) * s)


RAYLEIGH_C = 1.0 / math.sqrt(1.0 + 4.0 / math.pi)
BETA0 = 0.5 * math.pi * (math.sqrt(1.0 + 4.0 / math.pi) - 1.0)


def rayleigh_prediction(beta: float, alpha_sq: float) -> float:
    """Limit of ``v^T H(m^alpha) v`` for ``v`` the top eigenvector of the coupling matrix."""
    s = 1.0 - alpha_sq
    return 2.0 * beta - beta**2 * s - 1.0 / s + 4.0 * beta**2 * alpha_sq / math.pi


def optimal_alpha(beta: float) -> tuple[float, float]:
    """Maximizer ``alpha^2 = 1 - (1 + 4/pi)^-1/2 / beta`` and the Rayleigh value there.

    Returns ``alpha^2 = 0`` when the unconstrained maximizer would be negative.
    The maximal value crosses zero at ``beta_0 = (pi/2)(sqrt(1 + 4/pi) - 1)``.
    """
    alpha_sq = max(0.0, 1.0 - RAYLEIGH_C / beta)
    return alpha_sq, rayleigh_prediction(beta, alpha_sq)


def sample_independent_magnetization(params: ModelParams, q: float, n: int, seed: int) -> Magnetization:
    """``m_i = tanh(h + beta sqrt(q) Z_i)`` with ``Z`` drawn from ``seed``.

    Callers pass a seed derived for the magnetization purpose so the draws
    are independent of the disorder stream.
    """
    z = generator(seed).standard_normal(n)
    return Magnetization.from_field(params.h + params.beta * math.sqrt(q) * z)


# --- structure of the Hessian at the TAP iterates ---------------------


@dataclass(frozen=True)
class DecompositionReport:
    a_diag: np.ndarray
    b_rank: int
    b_eigenvalues: np.ndarray
    residual_frobenius: float


def low_rank_part(state) -> np.ndarray:
    """``B^(k) = 2 beta^2 m (x) m + beta sum_{s<k} (zeta^(s) (x) phi^(s) + phi^(s) (x) zeta^(s))``."""
    n = state.n
    b = state.params.beta
    m = state.m
    B = np.zeros((n, n))
    Bt = B.T
    dger(2.0 * b * b / n, m, m, a=Bt, overwrite_a=1)
    for zeta, phi in zip(state.zetas, state.phis):
        dger(b / n, zeta, phi, a=Bt, overwrite_a=1)
        dger(b / n, phi, zeta, a=Bt, overwrite_a=1)
    return B


def hessian_decomposition(state, hess: np.ndarray, params: ModelParams, q: float) -> DecompositionReport:
    """Split ``hess = beta N^-1/2 gbar^(k) + A + B - beta^2 (1 - q) 1 + remainder``.

    ``gbar^(k)`` is the symmetrized deflated disorder carried by ``state``;
    the remainder collects the diagonal of the original coupling, the
    ``<phi, xi> phi (x) phi`` corrections and ``beta^2 (q - |m|^2) 1``.
    """
    n = state.n
    a_diag = -state.magnetization.inv_one_minus_sq()
    B = low_rank_part(state)
    eig = np.linalg.eigvalsh(B)
    top = np.max(np.abs(eig))
    rank = int(np.sum(np.abs(eig) > 1e-8 * top)) if top > 0 else 0

    resid = np.array(hess, copy=True)
    resid -= B
    resid -= (params.beta / math.sqrt(2.0 * n)) * (state.g + state.g.T)
    d = np.arange(n)
    resid[d, d] -= a_diag - params.beta**2 * (1.0 - q)
    return DecompositionReport(a_diag, rank, eig[::-1], float(np.linalg.norm(resid)))

