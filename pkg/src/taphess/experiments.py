"""Experiment drivers: configuration, replica execution, and records."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import __version__
from .amp_iter import diagnostics, dump_state_csv, inner, run_amp, sample_disorder, symmetrize
from .free_prob import (
    FreeConvolutionLaw,
    NuMeasure,
    outlier_prediction,
    population_outlier_root,
    sherman_morrison_top_eig,
    subordination_H,
    support_edge,
)
from .rng import DISORDER, MAGNETIZATION, derive_seed
from .rs_core import ModelParams, RsSolution, gamma_schedule, scalar_values_grid, solve_q, solve_q_grid
from .spectra import EsdCurve, haar_abs_statistic, ks_distance, sym_eigen, top_eigenvalue, top_eigpair
from .tap_functional import (
    hessian,
    hessian_decomposition,
    optimal_alpha,
    sample_independent_magnetization,
    sign_magnetization,
    tap_free_energy,
    tap_residual,
)

log = logging.getLogger("taphess")

EXPERIMENTS = ("rs_solve", "amp_run", "tap_rs", "spectrum", "edge", "theorem12", "theorem15", "phase_diagram")
WORKERS_ENV = "TAPHESS_WORKERS"
# size of the dense Sherman-Morrison cross-check in theorem15
SM_CHECK_N = 500


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    beta: float = 1.0
    h: float = 0.5
    n: int = 1000
    k: int = 8
    replicas: int = 10
    seed: int = 0
    output_path: str | None = None
    format: str = "csv"
    beta_range: tuple[float, float] = (0.0, 6.0)
    h_range: tuple[float, float] = (0.0, 10.0)
    resolution: int = 300
    density_path: str | None = None
    state_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("n", "k", "replicas", "seed", "resolution"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be an integer")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        try:
            ModelParams(float(self.beta), float(self.h))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("beta_range", "h_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or not (0.0 <= rng[0] < rng[1]) or not all(math.isfinite(x) for x in rng):
                raise ConfigError(f"{name} must be an increasing pair of nonnegative numbers")
        if self.resolution < 10:
            raise ConfigError("phase diagram resolution must be at least 10")

    @property
    def params(self) -> ModelParams:
        return ModelParams(float(self.beta), float(self.h))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["beta_range"] = list(self.beta_range)
        d["h_range"] = list(self.h_range)
        return d

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        data = dict(data)
        for name in ("beta_range", "h_range"):
            if name in data:
                data[name] = tuple(float(x) for x in data[name])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class ReplicaResult:
    replica: int
    values: dict
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExperimentRecord:
    """Config echo, one row per replica, aggregates, and experiment-level scalars."""

    config: dict
    columns: list[str]
    rows: list[ReplicaResult]
    summary: dict = field(default_factory=dict)
    duration_seconds: float = 0.0
    version: str = __version__
    # "replicas": rows are replicas plus an aggregate; "grid": rows are plain data points
    layout: str = "replicas"

    @property
    def failures(self) -> int:
        return sum(not r.ok for r in self.rows)

    def aggregate(self) -> dict:
        """Mean and sample standard deviation per column over successful replicas.

        ``math.fsum`` is exactly rounded, so the result does not depend on
        replica order.
        """
        ok = [r for r in self.rows if r.ok]
        mean, std = {}, {}
        for c in self.columns:
            xs = [float(r.values[c]) for r in ok if r.values.get(c) is not None]
            if not xs:
                mean[c] = std[c] = None
                continue
            mu = math.fsum(xs) / len(xs)
            mean[c] = mu
            std[c] = math.sqrt(math.fsum((x - mu) ** 2 for x in xs) / (len(xs) - 1)) if len(xs) > 1 else 0.0
        return {"count": len(ok), "mean": mean, "stddev": std}

    def column(self, name: str) -> np.ndarray:
        return np.array([r.values[name] for r in self.rows if r.ok], dtype=float)


# --- replica tasks ------------------------------------------------------------


def _rs(cfg: ExperimentConfig) -> RsSolution:
    return solve_q(cfg.params)


def _normal_cdf(mu: float, sigma: float):
    return lambda x: ndtr((np.asarray(x) - mu) / sigma)


def _amp_replica(cfg: ExperimentConfig, replica: int) -> dict:
    p, rs = cfg.params, _rs(cfg)
    g = sample_disorder(cfg.n, derive_seed(cfg.seed, replica, DISORDER))
    gbar = symmetrize(g)
    st = run_amp(p, rs, g, cfg.k, copy=False)
    diag = diagnostics(st)
    mag = st.magnetization
    sigma = p.beta * math.sqrt(rs.q)
    ks = ks_distance(EsdCurve(st.field), _normal_cdf(p.h, sigma))
    _, res = tap_residual(gbar, mag, p, rs.q)
    if cfg.state_dir:
        Path(cfg.state_dir).mkdir(parents=True, exist_ok=True)
        dump_state_csv(st, Path(cfg.state_dir) / f"state_replica{replica:04d}.csv")
    return {
        "norm_m_sq": diag.norm_m_sq,
        "q": rs.q,
        "norm_m_sq_minus_q": diag.norm_m_sq - rs.q,
        "ks_field": ks,
        "residual_norm": res,
        "phi_xi_overlap": diag.phi_xi_overlap,
    }


def _tap_rs_replica(cfg: ExperimentConfig, replica: int) -> dict:
    p, rs = cfg.params, _rs(cfg)
    g = sample_disorder(cfg.n, derive_seed(cfg.seed, replica, DISORDER))
    gbar = symmetrize(g)
    residuals = {}

    def record(state):
        residuals[state.k] = tap_residual(gbar, state.magnetization, p, rs.q)[1]

    st = run_amp(p, rs, g, cfg.k, copy=False, callback=record)
    tap = tap_free_energy(gbar, st.magnetization, p)
    out = {
        "tap_per_site": tap.per_site,
        "rs_value": rs.rs_value,
        "deviation": tap.per_site - rs.rs_value,
        "norm_m_sq": inner(st.m, st.m),
        "residual_norm": residuals[cfg.k],
    }
    for k in range(2, cfg.k + 1):
        out[f"residual_k{k}"] = residuals[k]
    return out


def _spectrum_replica(cfg: ExperimentConfig, replica: int, law: FreeConvolutionLaw) -> dict:
    p, rs = cfg.params, _rs(cfg)
    g = sample_disorder(cfg.n, derive_seed(cfg.seed, replica, DISORDER))
    gbar = symmetrize(g)
    st = run_amp(p, rs, g, cfg.k, copy=False)
    hess = hessian(gbar, st.magnetization, p, out=gbar)
    dec = hessian_decomposition(st, hess, p, rs.q)
    eig = sym_eigen(hess)
    lam1 = eig.lambda1
    edge = law.edge.shifted_edge
    return {
        "ks_distance": ks_distance(EsdCurve.from_eigen(eig), law.cdf),
        "lambda1": lam1,
        "shifted_edge": edge,
        "below_half_edge": float(lam1 < edge / 2.0 < 0.0),
        "b_rank": float(dec.b_rank),
        "rank_bound_ok": float(dec.b_rank <= 2 * cfg.k - 1),
    }


def _theorem12_replica(cfg: ExperimentConfig, replica: int) -> dict:
    p = cfg.params
    n = cfg.n
    g = sample_disorder(n, derive_seed(cfg.seed, replica, DISORDER))
    gbar = symmetrize(g)
    coupling = gbar * (p.beta / math.sqrt(n))
    top = top_eigpair(coupling)
    del coupling
    alpha_sq, prediction = optimal_alpha(p.beta)
    mag = sign_magnetization(top.vector, math.sqrt(alpha_sq))
    hess = hessian(gbar, mag, p, out=gbar)
    v = top.vector
    rayleigh = float(v @ (hess @ v))
    return {
        "rayleigh": rayleigh,
        "lambda1": top_eigenvalue(hess),
        "haar_statistic": haar_abs_statistic(v),
        "prediction": prediction,
        "alpha_sq": alpha_sq,
        "goe_lambda1": top.value,
    }


def _theorem15_replica(cfg: ExperimentConfig, replica: int, prediction: float) -> dict:
    p, rs = cfg.params, _rs(cfg)
    n = cfg.n
    mag = sample_independent_magnetization(p, rs.q, n, derive_seed(cfg.seed, replica, MAGNETIZATION))
    g = sample_disorder(n, derive_seed(cfg.seed, replica, DISORDER))
    gbar = symmetrize(g)
    del g
    hess = hessian(gbar, mag, p, out=gbar)
    lam1 = top_eigenvalue(hess)
    u_n, positive = sherman_morrison_top_eig(mag, p)

    # Sherman-Morrison root against an eigensolver on a small explicit A_N
    small = sample_independent_magnetization(p, rs.q, min(n, SM_CHECK_N), derive_seed(cfg.seed, replica, MAGNETIZATION))
    u_small, _ = sherman_morrison_top_eig(small, p)
    a_n = np.diag(-small.inv_one_minus_sq())
    a_n += (2.0 * p.beta**2 / small.n) * np.outer(small.m, small.m)
    sm_error = abs(u_small - top_eigenvalue(a_n))
    return {
        "lambda1": lam1,
        "prediction": prediction,
        "u_n": u_n,
        "u_n_positive": float(positive),
        "sm_dense_error": sm_error,
    }


def _run_task(task):
    kind, cfg, replica, extra = task
    try:
        if kind == "amp_run":
            values = _amp_replica(cfg, replica)
        elif kind == "tap_rs":
            values = _tap_rs_replica(cfg, replica)
        elif kind == "spectrum":
            values = _spectrum_replica(cfg, replica, extra)
        elif kind == "theorem12":
            values = _theorem12_replica(cfg, replica)
        elif kind == "theorem15":
            values = _theorem15_replica(cfg, replica, extra)
        else:
            raise ValueError(kind)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return ReplicaResult(replica, {}, f"{type(exc).__name__}: {exc}")
    if not all(math.isfinite(v) for v in values.values()):
        return ReplicaResult(replica, {}, "non-finite observable")
    return ReplicaResult(replica, values)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _run_replicas(kind: str, cfg: ExperimentConfig, extra=None, workers: int | None = None) -> list[ReplicaResult]:
    tasks = [(kind, cfg, r, extra) for r in range(cfg.replicas)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(tasks) == 1:
        results = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_run_task, tasks))
    for r in results:
        if not r.ok:
            log.warning("replica %d failed: %s", r.replica, r.error)
    return sorted(results, key=lambda r: r.replica)


def _warn_beyond_at(rs: RsSolution) -> None:
    if rs.at_value > 1.0:
        log.warning(
            "at_value = %.6f > 1: outside the regime where the iteration approximates TAP solutions", rs.at_value
        )


def _record(cfg, rows, summary, started, columns=None) -> ExperimentRecord:
    if columns is None:
        columns = list(next((r.values for r in rows if r.ok), {}).keys())
    return ExperimentRecord(cfg.as_dict(), columns, rows, summary, time.perf_counter() - started)


# --- experiments ----------------------------------------------------------------


def run_rs_solve(cfg: ExperimentConfig) -> ExperimentRecord:
    t0 = time.perf_counter()
    rs = _rs(cfg)
    sched_len = max(cfg.k, 2)
    sched = gamma_schedule(cfg.params, rs.q, sched_len)
    row = ReplicaResult(
        0,
        {
            "q": rs.q,
            "rs_value": rs.rs_value,
            "at_value": rs.at_value,
            "plefka2_value": rs.plefka2_value,
            "residual": rs.residual,
            "schedule_gap": sched.remaining(rs.q, sched_len),
        },
    )
    return _record(cfg, [row], {"iterations": rs.iterations}, t0)


def run_amp_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentRecord:
    t0 = time.perf_counter()
    rs = _rs(cfg)
    _warn_beyond_at(rs)
    rows = _run_replicas("amp_run", cfg, workers=workers)
    return _record(cfg, rows, {"q": rs.q, "at_value": rs.at_value}, t0)


def run_tap_rs(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentRecord:
    t0 = time.perf_counter()
    rs = _rs(cfg)
    _warn_beyond_at(rs)
    rows = _run_replicas("tap_rs", cfg, workers=workers)
    return _record(cfg, rows, {"q": rs.q, "rs_value": rs.rs_value, "at_value": rs.at_value}, t0)


def run_spectrum(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentRecord:
    t0 = time.perf_counter()
    rs = _rs(cfg)
    _warn_beyond_at(rs)
    law = FreeConvolutionLaw.build(NuMeasure(cfg.params, rs.q))
    if cfg.density_path:
        law.to_csv(cfg.density_path)
    rows = _run_replicas("spectrum", cfg, extra=law, workers=workers)
    summary = {
        "q": rs.q,
        "at_value": rs.at_value,
        "shifted_edge": law.edge.shifted_edge,
        "u_star": law.edge.u_star,
        "at_regime": law.edge.at_regime.value,
    }
    return _record(cfg, rows, summary, t0)


def run_edge(cfg: ExperimentConfig) -> ExperimentRecord:
    t0 = time.perf_counter()
    rs = _rs(cfg)
    nu = NuMeasure(cfg.params, rs.q)
    edge = support_edge(nu)
    h0, dh0 = subordination_H(0.0, nu)
    if cfg.density_path:
        FreeConvolutionLaw.build(nu).to_csv(cfg.density_path)
    row = ReplicaResult(
        0,
        {
            "u_star": edge.u_star,
            "d": edge.d,
            "shifted_edge": edge.shifted_edge,
            "H_at_0": h0,
            "H_prime_at_0": dh0,
            "at_value": rs.at_value,
            "q": rs.q,
        },
    )
    return _record(cfg, [row], {"at_regime": edge.at_regime.value}, t0)


def run_theorem12(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentRecord:
    t0 = time.perf_counter()
    if cfg.beta <= 0.8:
        log.warning("beta = %.4g: the Rayleigh prediction is positive only above beta_0 ~ 0.7985", cfg.beta)
    rows = _run_replicas("theorem12", cfg, workers=workers)
    alpha_sq, prediction = optimal_alpha(cfg.beta)
    return _record(cfg, rows, {"prediction": prediction, "alpha_sq": alpha_sq}, t0)


@dataclass(frozen=True)
class Theorem15Prediction:
    case: str  # "outlier" when Plefka-2 fails, "edge" otherwise
    value: float
    u_inf: float | None
    shifted_edge: float


def theorem15_prediction(params: ModelParams, rs: RsSolution | None = None) -> Theorem15Prediction:
    """Limit of ``lambda_1(H(m))`` for ``m_i = tanh(h + beta sqrt(q) Z_i)`` independent of the disorder."""
    rs = rs or solve_q(params)
    nu = NuMeasure(params, rs.q)
    edge = support_edge(nu)
    u_inf = population_outlier_root(nu)
    if u_inf is None:
        return Theorem15Prediction("edge", edge.shifted_edge, None, edge.shifted_edge)
    out = outlier_prediction(u_inf, nu, edge)
    value = out.predicted_lambda1 - nu.onsager_shift
    return Theorem15Prediction("outlier" if out.in_O else "edge", value, u_inf, edge.shifted_edge)


def run_theorem15(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentRecord:
    t0 = time.perf_counter()
    rs = _rs(cfg)
    if rs.at_value >= 1.0:
        log.warning("at_value = %.6f >= 1: the prediction assumes a strict-AT point", rs.at_value)
    pred = theorem15_prediction(cfg.params, rs)
    rows = _run_replicas("theorem15", cfg, extra=pred.value, workers=workers)
    summary = {
        "q": rs.q,
        "at_value": rs.at_value,
        "plefka2_value": rs.plefka2_value,
        "case": pred.case,
        "prediction": pred.value,
        "u_inf": pred.u_inf,
        "shifted_edge": pred.shifted_edge,
    }
    return _record(cfg, rows, summary, t0)


# --- phase diagram ----------------------------------------------------------------


class Region(str, Enum):
    BEYOND_AT = "beyond_AT"
    AT_AND_P2 = "AT_and_P2"
    AT_NOT_P2 = "AT_not_P2"

    @property
    def code(self) -> int:
        return {"beyond_AT": 0, "AT_and_P2": 1, "AT_not_P2": 2}[self.value]


def classify(at: float, p2: float) -> Region:
    if at > 1.0:
        return Region.BEYOND_AT
    return Region.AT_AND_P2 if p2 <= 1.0 else Region.AT_NOT_P2


@dataclass(frozen=True)
class PhasePoint:
    beta: float
    h: float
    q: float
    at_value: float
    plefka2_value: float
    region: Region


@dataclass
class PhaseDiagram:
    points: list[PhasePoint]
    betas: np.ndarray
    hs: np.ndarray
    at_boundary: list[tuple[float, float]]
    plefka2_boundary: list[tuple[float, float]]

    def region_grid(self) -> np.ndarray:
        return np.array([p.region.code for p in self.points]).reshape(len(self.betas), len(self.hs))

    def blue_points(self) -> list[PhasePoint]:
        return [p for p in self.points if p.region is Region.AT_NOT_P2]

    def best_blue_point(self) -> PhasePoint | None:
        """Blue point deepest inside both conditions: maximizes ``min(p2 - 1, 1 - at)``."""
        blue = self.blue_points()
        if not blue:
            return None
        return max(blue, key=lambda p: min(p.plefka2_value - 1.0, 1.0 - p.at_value))


def axis(lo: float, hi: float, count: int) -> np.ndarray:
    """``count`` evenly spaced points on ``(lo, hi]``; the open end excludes ``beta = 0`` and ``h = 0``."""
    return lo + (hi - lo) * np.arange(1, count + 1) / count


def _bisect_h(betas: np.ndarray, lo: np.ndarray, hi: np.ndarray, which: int, tol: float) -> np.ndarray:
    """Vectorized bisection in ``h`` for ``value(beta, h) = 1``; ``which`` selects AT (0) or Plefka-2 (1)."""

    def excess(h):
        q = solve_q_grid(betas, h)
        return scalar_values_grid(betas, h, q)[which] - 1.0

    f_lo = excess(lo)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        fm = excess(mid)
        same = np.sign(fm) == np.sign(f_lo)
        lo = np.where(same, mid, lo)
        f_lo = np.where(same, fm, f_lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def _trace(betas, hs, values, which: int, tol: float) -> list[tuple[float, float]]:
    """Every sign change of ``values - 1`` along ``h`` at fixed ``beta``, refined by bisection."""
    s = np.sign(values - 1.0)
    bi, hj = np.nonzero(s[:, :-1] * s[:, 1:] < 0)
    if bi.size == 0:
        return []
    roots = _bisect_h(betas[bi], hs[hj], hs[hj + 1], which, tol)
    return sorted(zip(betas[bi].tolist(), roots.tolist()))


def phase_diagram(
    beta_range=(0.0, 6.0), h_range=(0.0, 10.0), resolution: int = 300, boundary_tol: float = 1e-6
) -> PhaseDiagram:
    if resolution < 10:
        raise ValueError("resolution must be at least 10")
    betas = axis(*beta_range, resolution)
    hs = axis(*h_range, resolution)
    bb, hh = np.meshgrid(betas, hs, indexing="ij")
    q = solve_q_grid(bb, hh)
    at, p2 = scalar_values_grid(bb, hh, q)
    points = [
        PhasePoint(float(b), float(h), float(qq), float(a), float(p), classify(a, p))
        for b, h, qq, a, p in zip(bb.ravel(), hh.ravel(), q.ravel(), at.ravel(), p2.ravel())
    ]
    return PhaseDiagram(
        points,
        betas,
        hs,
        _trace(betas, hs, at, 0, boundary_tol),
        _trace(betas, hs, p2, 1, boundary_tol),
    )


def at_boundary_h(beta: float, h_max: float = 10.0, tol: float = 1e-6) -> float | None:
    """Field ``h*`` with ``at_value(beta, h*) = 1`` (AT line at fixed beta); ``None`` for beta <= 1."""
    if beta <= 1.0:
        return None
    b = np.array([beta])
    return float(_bisect_h(b, np.array([1e-9]), np.array([h_max]), 0, tol)[0])


def run_phase_diagram(cfg: ExperimentConfig) -> ExperimentRecord:
    t0 = time.perf_counter()
    pd = phase_diagram(cfg.beta_range, cfg.h_range, cfg.resolution)
    rows = [
        ReplicaResult(i, {"beta": p.beta, "h": p.h, "region": p.region.code})
        for i, p in enumerate(pd.points)
    ]
    best = pd.best_blue_point()
    summary = {
        "region_codes": {r.value: r.code for r in Region},
        "blue_count": len(pd.blue_points()),
        "best_blue_point": None if best is None else [best.beta, best.h],
        "at_boundary": [list(x) for x in pd.at_boundary],
        "plefka2_boundary": [list(x) for x in pd.plefka2_boundary],
    }
    rec = _record(cfg, rows, summary, t0, columns=["beta", "h", "region"])
    rec.layout = "grid"
    return rec


def run(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentRecord:
    dispatch = {
        "rs_solve": lambda c: run_rs_solve(c),
        "amp_run": lambda c: run_amp_experiment(c, workers),
        "tap_rs": lambda c: run_tap_rs(c, workers),
        "spectrum": lambda c: run_spectrum(c, workers),
        "edge": lambda c: run_edge(c),
        "theorem12": lambda c: run_theorem12(c, workers),
        "theorem15": lambda c: run_theorem15(c, workers),
        "phase_diagram": lambda c: run_phase_diagram(c),
    }
    return dispatch[cfg.experiment](cfg)
