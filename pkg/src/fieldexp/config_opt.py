"""Configuration optimization: optimal spacing below unit SNR, cluster-size
sweeps, and exhaustive offset sweeps for two and three sensors per period.

The low-SNR spacing optimum solves, in the correlation variable a,

    (1 + a^2 + G (1 - a^2))^2 - 2 (r_e + a^4 / r_e) = 0,

where G is the SNR and r_e the normalized steady-state innovations variance
at correlation a.  a = 1 always satisfies the equation, so the search runs on
an interior bracket, and every root is cross-checked against a direct grid
argmax of the exponent; a mismatch is reported as an error rather than
returned as an optimum.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import NumericFailure, RootNotFound
from .field_model import Clustered, FieldParams, Periodic
from .kalman_exponent import (
    ExponentResult,
    clustering_exponent,
    scalar_exponent_from_correlation,
    scalar_riccati_fixed_point,
    vector_exponent,
)

__all__ = [
    "OptimalSpacingResult",
    "SweepPoint",
    "SweepResult",
    "optimal_correlation",
    "optimal_spacing",
    "optimal_spacing_curve",
    "correlation_sweep",
    "snr_sweep",
    "cluster_size_sweep",
    "offset_sweep_m2",
    "offset_sweep_m3",
    "classify_m3_configuration",
    "sweep_to_csv",
    "sweep_to_json",
]

# Exponent values within this absolute tolerance are treated as tied and the
# smaller grid coordinate wins (symmetric sweeps produce exact twins up to
# solver roundoff).
_TIE_TOL = 1e-9

_ROOT_GRID_STEP = 1e-3


@dataclass(frozen=True)
class OptimalSpacingResult:
    """Root of the optimality equation and its sanity checks.

    delta_star is NaN when diffusion_rate is zero (no finite spacing maps to
    the optimal correlation); optimal_spacing refuses that case up front.
    """

    a_star: float
    delta_star: float
    residual: float
    exponent_at_optimum: float


@dataclass(frozen=True)
class SweepPoint:
    grid: float | tuple[float, ...]
    k_per_sensor: float
    k_per_block: float
    approx_miss_prob: float


@dataclass
class SweepResult:
    """Exponent values over a named parameter grid.

    approx_miss_prob is exp(-n_ref * k_per_sensor): a monotone transform of
    the per-sensor exponent using the sweep's reference sensor count.
    """

    axis: str
    values: list[SweepPoint]
    argmax: float | tuple[float, ...]
    n_ref: int
    argmax_label: str | None = None
    metadata: dict = field(default_factory=dict)


def _tie_break_argmax(values: list[float]) -> int:
    best = max(values)
    for i, v in enumerate(values):
        if v >= best - _TIE_TOL:
            return i
    raise AssertionError("unreachable: max not found")


def _objective(params: FieldParams, a: float) -> float:
    snr = params.snr()
    inn = scalar_riccati_fixed_point(params, a)
    r_e = inn.r_e / params.noise_variance
    return (1.0 + a * a + snr * (1.0 - a * a)) ** 2 - 2.0 * (r_e + a ** 4 / r_e)


def optimal_correlation(params: FieldParams) -> OptimalSpacingResult:
    """Correlation maximizing the per-sensor exponent, for SNR < 1.

    Brackets interior sign changes of the optimality equation on a 1e-3 grid,
    refines each by Brent's method, and keeps the root that agrees with the
    grid argmax of the exponent.  Raises ``RootNotFound`` (with the diagnostic
    sweep attached) when no bracket exists, and ``ValueError`` at SNR >= 1
    where decreasing correlation is always better.
    """
    snr = params.snr()
    if snr >= 1.0:
        raise ValueError(f"optimal correlation is defined for SNR < 1, got {snr}")

    # uniform 1e-3 grid plus a geometric tail toward 1: the optimum approaches
    # unit correlation as SNR vanishes and a plain grid cannot bracket it.
    # Points where the fixed-point solver cannot converge (contraction -> 1
    # in the deepest tail) are skipped; the bracket uses the convergent rest.
    raw = np.concatenate([
        np.arange(_ROOT_GRID_STEP, 0.9985, _ROOT_GRID_STEP),
        1.0 - np.geomspace(1.5e-3, 1e-8, 24),
    ])
    grid, k_vals, g_vals = [], [], []
    for a in raw:
        try:
            k = scalar_exponent_from_correlation(params, float(a)).exponent_per_sensor
            g = _objective(params, float(a))
        except NumericFailure:
            continue
        grid.append(float(a))
        k_vals.append(k)
        g_vals.append(g)
    grid = np.asarray(grid)
    argmax_a = float(grid[int(np.argmax(k_vals))])

    roots = []
    for i in range(len(grid) - 1):
        if g_vals[i] == 0.0:
            roots.append(float(grid[i]))
        elif g_vals[i] * g_vals[i + 1] < 0.0:
            roots.append(float(brentq(
                lambda a: _objective(params, a), grid[i], grid[i + 1], xtol=1e-14
            )))
    sweep_table = (grid, np.asarray(g_vals), np.asarray(k_vals))
    if not roots:
        raise RootNotFound(
            f"no interior sign change of the optimality equation at SNR {snr}",
            sweep=sweep_table,
        )
    matched = [r for r in roots if abs(r - argmax_a) <= 2.0 * _ROOT_GRID_STEP]
    if not matched:
        raise RootNotFound(
            f"roots {roots} disagree with grid argmax {argmax_a}; refusing to "
            "return an optimum that does not maximize the exponent",
            sweep=sweep_table,
        )
    a_star = min(matched, key=lambda r: abs(r - argmax_a))
    rate = params.diffusion_rate
    return OptimalSpacingResult(
        a_star=a_star,
        delta_star=-math.log(a_star) / rate if rate > 0 else math.nan,
        residual=_objective(params, a_star),
        exponent_at_optimum=scalar_exponent_from_correlation(params, a_star).exponent_per_sensor,
    )


def optimal_spacing(params: FieldParams) -> OptimalSpacingResult:
    """Optimal sensor spacing for an unbounded field at SNR < 1."""
    if params.diffusion_rate <= 0:
        raise ValueError("optimal spacing needs diffusion_rate > 0")
    return optimal_correlation(params)


def optimal_spacing_curve(diffusion_rate: float, noise_variance: float,
                          snr_values) -> list[tuple[float, OptimalSpacingResult]]:
    """Optimal spacing as a function of SNR (all values must be < 1)."""
    out = []
    for snr in snr_values:
        params = FieldParams(
            diffusion_rate=diffusion_rate,
            stationary_variance=snr * noise_variance,
            noise_variance=noise_variance,
        )
        out.append((float(snr), optimal_spacing(params)))
    return out


def correlation_sweep(params: FieldParams, a_values=None, n_ref: int = 1) -> SweepResult:
    """Per-sensor exponent over a correlation grid (default 201 points in [0, 1])."""
    if a_values is None:
        a_values = np.linspace(0.0, 1.0, 201)
    pts = []
    for a in a_values:
        res = scalar_exponent_from_correlation(params, float(a))
        pts.append(_point(float(a), res, n_ref))
    return _finish("a", pts, n_ref, {"snr": params.snr()})


def snr_sweep(params: FieldParams, a: float, snr_values=None, n_ref: int = 1) -> SweepResult:
    """Per-sensor exponent over an SNR grid at fixed correlation.

    The noise variance is held at ``params.noise_variance``; the signal power
    is scaled to realize each SNR.
    """
    if snr_values is None:
        snr_values = np.logspace(-2, 2, 201)
    pts = []
    for snr in snr_values:
        p = replace(params, stationary_variance=float(snr) * params.noise_variance)
        res = scalar_exponent_from_correlation(p, a)
        pts.append(_point(float(snr), res, n_ref))
    return _finish("snr", pts, n_ref, {"correlation": a})


def cluster_size_sweep(params: FieldParams, field_length: float, n_total: int,
                       sizes) -> SweepResult:
    """Per-sensor exponent of periodic clustering for each cluster size.

    Every size must divide the total sensor budget; the cluster period is the
    field length divided by the resulting number of clusters.
    """
    if not (field_length > 0):
        raise ValueError(f"field_length must be > 0, got {field_length}")
    sizes = [int(m) for m in sizes]
    for m in sizes:
        if m < 1 or n_total % m != 0:
            raise ValueError(f"cluster size {m} does not divide n_total={n_total}")
    pts = []
    for m in sizes:
        clusters = n_total // m
        layout = Clustered(cluster_size=m, cluster_count=clusters,
                           period=field_length / clusters)
        res = clustering_exponent(params, layout)
        pts.append(_point(float(m), res, n_total))
    return _finish("cluster_size", pts, n_total,
                   {"field_length": field_length, "n_total": n_total})


def offset_sweep_m2(params: FieldParams, period: float, grid_points: int = 201,
                    n_ref: int = 1) -> SweepResult:
    """Exponent of a two-sensor period versus the first intra-period gap.

    The sweep runs the first gap over [0, period] (the second gap is the
    remainder); zero gap is periodic clustering, half the period is uniform.
    The curve is symmetric about the midpoint because the two gaps only
    relabel the sensors.
    """
    _check_sweep_args(period, grid_points)
    pts = []
    for d1 in np.linspace(0.0, period, grid_points):
        layout = Periodic(offsets=(float(d1), period - float(d1)), period_count=1)
        res = vector_exponent(params, layout)
        pts.append(_point(float(d1), res, n_ref))
    return _finish("delta1", pts, n_ref, {"period": period, "snr": params.snr()})


def offset_sweep_m3(params: FieldParams, period: float, grid_points: int = 61,
                    n_ref: int = 1, workers: int | None = None) -> SweepResult:
    """Exponent of a three-sensor period over both free positions.

    One sensor is pinned at the period start; the other two sweep [0, period]
    each.  The argmax is also classified as clustering, uniform, two_plus_one
    (a co-located pair plus one sensor at half the period), or other.
    """
    _check_sweep_args(period, grid_points)
    axis = np.linspace(0.0, period, grid_points)
    coords = [(float(x2), float(x3)) for x2 in axis for x3 in axis]

    def solve(coord):
        x2, x3 = coord
        within = np.sort([0.0, x2, x3])
        offsets = (within[1] - within[0], within[2] - within[1], period - within[2])
        return vector_exponent(params, Periodic(offsets=offsets, period_count=1))

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, coords))
    else:
        results = [solve(c) for c in coords]
    pts = [_point(c, r, n_ref) for c, r in zip(coords, results)]

    res = _finish("m3", pts, n_ref, {"period": period, "snr": params.snr()})
    tol = 0.6 * (axis[1] - axis[0])
    res.argmax_label = classify_m3_configuration(*res.argmax, period=period, tol=tol)
    return res


def classify_m3_configuration(x2: float, x3: float, period: float, tol: float) -> str:
    """Name the shape of a three-sensor period given the two free positions."""
    within = np.sort([0.0, x2, x3])
    gaps = np.sort([within[1] - within[0], within[2] - within[1], period - within[2]])
    if gaps[1] <= tol:
        return "clustering"
    if np.all(np.abs(gaps - period / 3.0) <= tol):
        return "uniform"
    if gaps[0] <= tol and np.all(np.abs(gaps[1:] - period / 2.0) <= tol):
        return "two_plus_one"
    return "other"


def _check_sweep_args(period: float, grid_points: int) -> None:
    if not (period > 0):
        raise ValueError(f"period must be > 0, got {period}")
    if grid_points < 3:
        raise ValueError(f"grid_points must be >= 3, got {grid_points}")


def _point(grid, result: ExponentResult, n_ref: int) -> SweepPoint:
    return SweepPoint(
        grid=grid,
        k_per_sensor=result.exponent_per_sensor,
        k_per_block=result.exponent_per_block,
        approx_miss_prob=math.exp(-n_ref * result.exponent_per_sensor),
    )


def _finish(axis: str, pts: list[SweepPoint], n_ref: int, metadata: dict) -> SweepResult:
    idx = _tie_break_argmax([p.k_per_sensor for p in pts])
    return SweepResult(axis=axis, values=pts, argmax=pts[idx].grid,
                       n_ref=n_ref, metadata=metadata)


# --- emission -----------------------------------------------------------

_GRID_COLUMNS = {
    "a": ("a",),
    "snr": ("snr",),
    "cluster_size": ("cluster_size",),
    "delta1": ("delta1",),
    "m3": ("x2", "x3"),
}


def sweep_to_csv(result: SweepResult) -> str:
    """Stable CSV: grid coordinate(s), k_per_sensor, k_per_block,
    approx_miss_prob, is_argmax."""
    grid_cols = _GRID_COLUMNS[result.axis]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*grid_cols, "k_per_sensor", "k_per_block", "approx_miss_prob",
                     "is_argmax"])
    for p in result.values:
        coords = p.grid if isinstance(p.grid, tuple) else (p.grid,)
        writer.writerow([
            *(repr(c) for c in coords),
            repr(p.k_per_sensor), repr(p.k_per_block), repr(p.approx_miss_prob),
            int(p.grid == result.argmax),
        ])
    return buf.getvalue()


def sweep_to_json(result: SweepResult) -> dict:
    return {
        "axis": result.axis,
        "n_ref": result.n_ref,
        "values": [
            {
                "grid": list(p.grid) if isinstance(p.grid, tuple) else p.grid,
                "k_per_sensor": p.k_per_sensor,
                "k_per_block": p.k_per_block,
                "approx_miss_prob": p.approx_miss_prob,
            }
            for p in result.values
        ],
        "argmax": list(result.argmax) if isinstance(result.argmax, tuple) else result.argmax,
        "argmax_label": result.argmax_label,
        "metadata": result.metadata,
    }
