"""Dense symmetric eigensolving and spectral statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

SYMMETRY_TOL = 1e-12


class SlowConvergenceError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in non-increasing order; ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    def reconstruct(self) -> np.ndarray:
        if self.eigenvectors is None:
            raise ValueError("eigenvectors were not kept")
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _check_symmetric(matrix: np.ndarray) -> np.ndarray:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    return a


def sym_eigen(matrix: np.ndarray, want_vectors: bool = False) -> EigenDecomposition:
    """Full spectrum via LAPACK ``dsyev``: Householder tridiagonalization then implicit QL/QR."""
    a = _check_symmetric(matrix)
    if want_vectors:
        w, v = scipy.linalg.eigh(a, driver="ev", check_finite=True)
        return EigenDecomposition(w[::-1].copy(), v[:, ::-1].copy())
    w = scipy.linalg.eigh(a, eigvals_only=True, driver="ev", check_finite=True)
    return EigenDecomposition(w[::-1].copy())


@dataclass(frozen=True)
class TopEigpair:
    value: float
    vector: np.ndarray
    residual: float
    iterations: int
    degenerate: bool = False

    def __iter__(self):
        # unpacks as (lambda1, v)
        return iter((self.value, self.vector))


def top_eigpair(matrix: np.ndarray, tol: float = 1e-8, method: str = "lanczos", max_iter: int = 100_000) -> TopEigpair:
    """Largest eigenvalue and a unit eigenvector with ``||M v - lambda v||_2 < tol``.

    ``method="lanczos"`` (default) uses implicitly restarted Lanczos, then
    checks the residual.  ``method="power"`` runs power iteration on
    ``M + s I`` with ``s`` the Gershgorin bound, which makes the spectrum
    nonnegative; it needs ``O(lambda / gap)`` steps and is slow when the top
    gap is small, as for GOE matrices (gap ~ N^-2/3).
    """
    a = _check_symmetric(matrix)
    n = a.shape[0]
    if method == "power":
        return _power(a, tol, max_iter)
    if method != "lanczos":
        raise ValueError(f"unknown method {method!r}")
    if n < 3:
        d = sym_eigen(a, want_vectors=True)
        lam, v = d.lambda1, d.eigenvectors[:, 0]
        return TopEigpair(lam, v, float(np.linalg.norm(a @ v - lam * v)), 1)
    v0 = np.full(n, 1.0 / math.sqrt(n))
    try:
        w, vecs = eigsh(a, k=min(2, n - 1), which="LA", tol=0.0, v0=v0, maxiter=max_iter)
    except ArpackNoConvergence as exc:
        raise SlowConvergenceError("Lanczos did not converge", math.inf) from exc
    order = np.argsort(w)[::-1]
    lam = float(w[order[0]])
    v = vecs[:, order[0]]
    v = v / np.linalg.norm(v)
    lam = float(v @ (a @ v))
    residual = float(np.linalg.norm(a @ v - lam * v))
    degenerate = len(w) > 1 and abs(w[order[0]] - w[order[1]]) < 1e-10
    if residual >= tol:
        refined = _power(a, tol, max_iter, start=v)
        return TopEigpair(refined.value, refined.vector, refined.residual, refined.iterations, degenerate)
    return TopEigpair(lam, v, residual, 1, degenerate)


def _power(a: np.ndarray, tol: float, max_iter: int, start: np.ndarray | None = None) -> TopEigpair:
    n = a.shape[0]
    shift = float(np.max(np.sum(np.abs(a), axis=1)))
    v = np.ones(n) if start is None else start.copy()
    v /= np.linalg.norm(v)
    residual = math.inf
    lam = 0.0
    for it in range(1, max_iter + 1):
        av = a @ v
        lam = float(v @ av)
        residual = float(np.linalg.norm(av - lam * v))
        if residual < tol:
            return TopEigpair(lam, v, residual, it)
        w = av + shift * v
        v = w / np.linalg.norm(w)
    raise SlowConvergenceError(f"power iteration stalled after {max_iter} steps", residual)


def _dense_top(a: np.ndarray) -> float:
    n = a.shape[0]
    return float(scipy.linalg.eigh(a, eigvals_only=True, subset_by_index=[n - 1, n - 1], driver="evr")[0])


def top_eigenvalue(matrix: np.ndarray, stiff_ratio: float = 1e4, tol: float = 1e-13, max_iter: int = 100) -> float:
    """Largest eigenvalue, accurate even when a few diagonal entries are astronomically negative.

    Dense solvers carry absolute error ``~ eps ||M||``, useless for an
    ``O(1)`` top eigenvalue when some ``M_ii ~ -1e20`` (saturated sites of a
    TAP Hessian).  Sites with ``M_ii < -stiff_ratio * r``, ``r`` the largest
    off-diagonal absolute row sum, are eliminated exactly: ``lambda`` is the
    top eigenvalue of ``S(lambda) = A + B (lambda - D)^-1 B^T``, a decreasing
    matrix function, so the fixed point ``lambda = lambda_1(S(lambda))`` is
    unique and simple iteration contracts at rate ``~ (r / stiff_ratio r)^2``.
    """
    a = _check_symmetric(matrix)
    d = np.diagonal(a).copy()
    off = np.abs(a).sum(axis=1) - np.abs(d)
    radius = max(float(off.max()), 1e-300)
    stiff = d < -stiff_ratio * max(radius, 1.0)
    if not stiff.any():
        return _dense_top(a)
    if stiff.all():
        raise ValueError("every site is stiff; rescale the matrix instead")
    keep = ~stiff
    A = a[np.ix_(keep, keep)]
    Bt = a[np.ix_(stiff, keep)]
    D = a[np.ix_(stiff, stiff)]
    dd = np.diagonal(D).copy()
    O = D - np.diag(dd)

    def schur_top(lam: float) -> float:
        r = 1.0 / (lam - dd)
        x = r[:, None] * Bt
        # (lam - D) X = B^T  <=>  X = r (B^T + O X); the Neumann series converges fast
        for _ in range(50):
            x_new = r[:, None] * (Bt + O @ x)
            if np.max(np.abs(x_new - x)) <= 1e-15 * max(np.max(np.abs(x_new)), 1e-300):
                x = x_new
                break
            x = x_new
        return _dense_top(A + Bt.T @ x)

    lam = _dense_top(A)
    for _ in range(max_iter):
        nxt = schur_top(lam)
        if abs(nxt - lam) <= tol * max(1.0, abs(lam)):
            return nxt
        lam = nxt
    raise SlowConvergenceError("Schur-complement fixed point did not settle", abs(nxt - lam))


# --- empirical spectral distributions ---------------------------------------


@dataclass(frozen=True)
class EsdCurve:
    """Empirical spectral distribution; the CDF is right-continuous."""

    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float))
        if v.size == 0:
            raise ValueError("empty spectrum")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_eigen(cls, eig: EigenDecomposition) -> "EsdCurve":
        return cls(eig.eigenvalues)

    @property
    def n(self) -> int:
        return len(self.values)

    def cdf(self, x):
        out = np.searchsorted(self.values, x, side="right") / self.n
        return float(out) if np.ndim(out) == 0 else out

    def cdf_left(self, x):
        out = np.searchsorted(self.values, x, side="left") / self.n
        return float(out) if np.ndim(out) == 0 else out

    def histogram(self, bins: int | np.ndarray = 50) -> tuple[np.ndarray, np.ndarray]:
        """``(edges, counts)`` for plotting."""
        counts, edges = np.histogram(self.values, bins=bins)
        return edges, counts


def ks_distance(esd: EsdCurve, cdf: Callable, cdf_left: Callable | None = None) -> float:
    """One-sample Kolmogorov-Smirnov statistic ``sup |F_emp - F|``.

    At each distinct eigenvalue ``x`` the empirical CDF jumps from
    ``F_emp(x-)`` to ``F_emp(x)``; both are compared, against ``F(x-)`` and
    ``F(x)`` respectively.  A continuous ``F`` needs no ``cdf_left``; for a
    reference with atoms, passing its left limit makes the distance of an
    ESD to its own law exactly 0.
    """
    pts, first = np.unique(esd.values, return_index=True)
    n = esd.n
    below = first / n
    upto = np.append(first[1:], n) / n
    f = np.asarray(cdf(pts), dtype=float)
    fl = f if cdf_left is None else np.asarray(cdf_left(pts), dtype=float)
    if np.any(np.diff(f) < -1e-12):
        raise ValueError("reference CDF is not monotone on the sample")
    return float(max(np.max(np.abs(upto - f)), np.max(np.abs(below - fl))))


def semicircle_cdf(x, beta: float = 1.0):
    """CDF of the semicircle law on ``[-2 beta, 2 beta]``."""
    t = np.clip(np.asarray(x, dtype=float) / (2.0 * beta), -1.0, 1.0)
    out = 0.5 + (t * np.sqrt(1.0 - t * t) + np.arcsin(t)) / math.pi
    return float(out) if out.ndim == 0 else out


def haar_abs_statistic(v: np.ndarray, tol: float = 1e-8) -> float:
    """``N^-1/2 sum |v_i|`` for an l2-unit vector; tends to ``sqrt(2/pi)`` for uniform directions."""
    v = np.asarray(v, dtype=float)
    if abs(float(np.linalg.norm(v)) - 1.0) > tol:
        raise ValueError("v must have unit l2 norm")
    return float(np.abs(v).sum()) / math.sqrt(len(v))


def goe(n: int, rng: np.random.Generator, beta: float = 1.0) -> np.ndarray:
    """``beta N^-1/2 (g + g^T)/sqrt(2)``: off-diagonal variance ``beta^2/N``."""
    g = rng.standard_normal((n, n))
    out = g + g.T
    out *= beta / math.sqrt(2.0 * n)
    return out


def save_eigenvalues(eig: EigenDecomposition, path) -> None:
    np.savetxt(path, eig.eigenvalues, header="eigenvalue", comments="", fmt="%.17g")


def save_histogram(esd: EsdCurve, path, bins: int = 50) -> None:
    edges, counts = esd.histogram(bins)
    rows = np.column_stack([edges[:-1], edges[1:], counts])
    np.savetxt(path, rows, delimiter=",", header="left,right,count", comments="", fmt=["%.17g", "%.17g", "%d"])
