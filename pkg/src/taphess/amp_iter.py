"""Conditional TAP iteration on sampled Gaussian disorder.

Conventions: ``<x, y> = N^-1 sum x_i y_i`` and ``x (x) y = N^-1 x y^T``.  The
disorder ``g`` has unit-variance entries; every use carries ``N^-1/2``.

Given ``g^(k)`` and the orthonormal family ``phi^(1..k)`` one step computes

    xi   = N^-1/2 g^(k) phi^(k),   eta = N^-1/2 g^(k)^T phi^(k),
    zeta = (xi + eta) / sqrt(2),
    h^(k+1) = h 1 + beta sum_{s<k} gamma_s zeta^(s) + beta sqrt(q - Gamma^2_{k-1}) zeta^(k),
    m^(k+1) = tanh(h^(k+1)),

orthonormalizes ``m^(k+1)`` against ``phi^(1..k)``, and deflates

    g^(k+1) = g^(k) - N^-1/2 [xi phi^T + phi eta^T - <phi, xi> phi phi^T],

which annihilates ``g^(k+1) phi^(s)`` and ``g^(k+1)^T phi^(s)`` for ``s <= k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg.blas import dger

from .rng import generator
from .rs_core import GammaSchedule, ModelParams, RsSolution, gamma_schedule
from .tap_functional import Magnetization


class GramSchmidtError(ArithmeticError):
    def __init__(self, step: int, norm: float):
        super().__init__(
            f"m^({step}) is numerically in the span of phi^(1..{step - 1}) (residual norm {norm:.3e})"
        )
        self.step = step


def sample_disorder(n: int, seed: int) -> np.ndarray:
    """``n x n`` iid standard Gaussians, a deterministic function of ``(n, seed)``."""
    if n < 2:
        raise ValueError("dimension must be >= 2")
    return generator(seed).standard_normal((n, n))


def symmetrize(g: np.ndarray) -> np.ndarray:
    """``(g + g^T) / sqrt(2)``; exactly symmetric.

    ``beta N^-1/2 symmetrize(g)`` is a GOE with off-diagonal variance beta^2/N.
    """
    g = np.asarray(g)
    out = g + g.T
    out *= 1.0 / math.sqrt(2.0)
    return out


def inner(x: np.ndarray, y: np.ndarray) -> float:
    return float(x @ y) / len(x)


@dataclass
class AmpState:
    """State at step ``k``.

    ``g`` is the deflated disorder ``g^(k)``; it is updated in place by
    :func:`amp_step`, so a state is consumed by stepping it.
    """

    k: int
    params: ModelParams
    q: float
    g: np.ndarray
    phis: list[np.ndarray]
    zetas: list[np.ndarray]
    m: np.ndarray
    field: np.ndarray
    schedule: GammaSchedule
    xi: np.ndarray | None = None
    eta: np.ndarray | None = None
    phi_xi: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def magnetization(self) -> Magnetization:
        return Magnetization(self.m, self.field)


@dataclass
class AmpDiagnostics:
    k: int
    norm_m_sq: float
    gamma_overlaps: np.ndarray
    phi_xi_overlap: float
    residual_norm: float = math.nan


def amp_init(params: ModelParams, rs: RsSolution, g: np.ndarray, k_max: int = 12, copy: bool = True) -> AmpState:
    """Step ``k = 1``: ``g^(1) = g``, ``phi^(1) = 1``, ``m^(1) = sqrt(q) 1``.

    With ``copy=False`` the caller's matrix becomes the (mutated) deflated
    disorder.
    """
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    g = np.array(g, dtype=float, order="C", copy=True) if copy else np.asarray(g, dtype=float)
    if not g.flags.c_contiguous:
        raise ValueError("disorder must be C-contiguous when copy=False")
    n = g.shape[0]
    q = rs.q
    m = np.full(n, math.sqrt(q))
    return AmpState(
        k=1,
        params=params,
        q=q,
        g=g,
        phis=[np.ones(n)],
        zetas=[],
        m=m,
        field=np.full(n, math.atanh(math.sqrt(q))),
        schedule=gamma_schedule(params, q, k_max),
    )


def _orthonormalize(v: np.ndarray, basis: list[np.ndarray]) -> tuple[np.ndarray, float]:
    # modified Gram-Schmidt, two passes
    n = len(v)
    v = v.copy()
    for _ in range(2):
        for phi in basis:
            v -= (phi @ v) / n * phi
    norm = math.sqrt(float(v @ v) / n)
    return v, norm


def amp_step(state: AmpState) -> AmpState:
    k = state.k
    if k > len(state.schedule):
        raise ValueError(f"schedule has length {len(state.schedule)}, cannot step past k={k}")
    p = state.params
    g = state.g
    n = state.n
    rn = 1.0 / math.sqrt(n)
    phi = state.phis[k - 1]

    xi = (g @ phi) * rn
    eta = (phi @ g) * rn
    zeta = (xi + eta) * (1.0 / math.sqrt(2.0))
    c = inner(phi, xi)

    gammas = state.schedule.gammas
    h_new = np.full(n, p.h)
    for s, z in enumerate(state.zetas):
        h_new += p.beta * gammas[s] * z
    h_new += p.beta * math.sqrt(state.schedule.remaining(state.q, k - 1)) * zeta
    m_new = np.tanh(h_new)

    v, norm = _orthonormalize(m_new, state.phis)
    if norm < 1e-12:
        raise GramSchmidtError(k + 1, norm)
    phi_new = v / norm

    # g <- g - N^-1/2 [(xi - c phi) phi^T + phi eta^T], in place via the F-order view
    gt = g.T
    dger(-rn, phi, xi - c * phi, a=gt, overwrite_a=1)
    dger(-rn, eta, phi, a=gt, overwrite_a=1)

    return AmpState(
        k=k + 1,
        params=p,
        q=state.q,
        g=g,
        phis=state.phis + [phi_new],
        zetas=state.zetas + [zeta],
        m=m_new,
        field=h_new,
        schedule=state.schedule,
        xi=xi,
        eta=eta,
        phi_xi=state.phi_xi + [c],
    )


def run_amp(params: ModelParams, rs: RsSolution, g: np.ndarray, k: int, copy: bool = True, callback=None) -> AmpState:
    """Iterate from ``k = 1`` to ``k``; ``callback(state)`` sees every state with ``k >= 2``."""
    state = amp_init(params, rs, g, k_max=max(k, 2), copy=copy)
    while state.k < k:
        state = amp_step(state)
        if callback is not None:
            callback(state)
    return state


def projection_P(state: AmpState) -> np.ndarray:
    """``P^(k) = N^-1 sum_{s<=k} phi^(s) phi^(s)^T``."""
    phi = np.vstack(state.phis)
    return phi.T @ phi / state.n


def diagnostics(state: AmpState, rs: RsSolution | None = None) -> AmpDiagnostics:
    if state.k < 2:
        raise ValueError("diagnostics need k >= 2")
    m = state.m
    return AmpDiagnostics(
        k=state.k,
        norm_m_sq=inner(m, m),
        gamma_overlaps=np.array([inner(phi, m) for phi in state.phis]),
        phi_xi_overlap=state.phi_xi[-1],
    )


def dump_state_csv(state: AmpState, path: str | Path) -> None:
    """Write columns ``i, m_k, h_k`` (site index, magnetization, field)."""
    idx = np.arange(state.n)
    data = np.column_stack([idx, state.m, state.field])
    np.savetxt(path, data, delimiter=",", header="i,m_k,h_k", comments="", fmt=["%d", "%.17g", "%.17g"])
