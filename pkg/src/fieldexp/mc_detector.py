"""Monte Carlo oracle for the closed-form exponents.

Implements the exact Neyman-Pearson log-likelihood ratio two ways -- through
the signal-hypothesis Kalman filter's innovations, and directly from dense
covariance matrices -- and uses it to estimate miss probabilities at a fixed
empirical size over a grid of sensor counts.  The decay rate fitted to those
estimates is the quantity the closed forms predict.

Trials are partitioned into fixed blocks of :data:`TRIAL_BLOCK` and every
block draws from the stream ``(hypothesis, n, block_index)`` under the master
seed, so results do not depend on execution order or worker count; block size
is part of the stream layout and deliberately not configurable.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericFailure
from .field_model import (
    Clustered,
    FieldParams,
    Hypothesis,
    Periodic,
    SensorLayout,
    Uniform,
    _sample_columns,
    derive_rng,
    signal_covariance,
    step_correlations,
)
from .kalman_exponent import ExponentResult

__all__ = [
    "DetectionEstimate",
    "ValidationBudget",
    "ValidationReport",
    "llr_innovations",
    "llr_direct",
    "estimate_miss_probability",
    "validate_exponent",
    "uniform_family",
    "clustered_family",
    "periodic_family",
    "family_from_layout",
    "estimate_to_json",
    "estimate_counts_csv",
    "report_to_json",
]

TRIAL_BLOCK = 4096

# A miss-probability estimate enters the rate fit only when it rests on at
# least this many observed misses.
_MIN_FIT_MISSES = 50

_DIRECT_MAX_SENSORS = 2000

_Z95 = 1.959963984540054


@dataclass(frozen=True)
class _FilterSchedule:
    """Precomputed per-sensor filter quantities; they are data-independent."""

    step_corr: np.ndarray        # a_i between consecutive sensors, length n-1
    innovation_var: np.ndarray   # R_i = noise + P_i, length n
    filter_gain: np.ndarray      # P_i / R_i, length n
    log_norm: float              # -0.5 * sum log(R_i / noise)


def _filter_schedule(params: FieldParams, layout: SensorLayout) -> _FilterSchedule:
    n = layout.total_sensors()
    sig2 = params.noise_variance
    pi0 = params.stationary_variance
    a = step_correlations(params, layout)
    pred_var = np.empty(n)
    pred_var[0] = pi0
    for i in range(n - 1):
        filt = pred_var[i] - pred_var[i] ** 2 / (sig2 + pred_var[i])
        pred_var[i + 1] = a[i] ** 2 * filt + pi0 * (1.0 - a[i] ** 2)
    innovation_var = sig2 + pred_var
    return _FilterSchedule(
        step_corr=a,
        innovation_var=innovation_var,
        filter_gain=pred_var / innovation_var,
        log_norm=-0.5 * float(np.sum(np.log(innovation_var / sig2))),
    )


def _llr_columns(sched: _FilterSchedule, cols: np.ndarray, noise_variance: float) -> np.ndarray:
    """LLR of each column of ``cols`` (shape (n, trials))."""
    n, trials = cols.shape
    half_inv_noise = 0.5 / noise_variance
    half_inv_re = 0.5 / sched.innovation_var
    predicted = np.zeros(trials)
    acc = np.zeros(trials)
    for i in range(n):
        y = cols[i]
        e = y - predicted
        acc += half_inv_noise * y * y - half_inv_re[i] * e * e
        if i < n - 1:
            predicted = sched.step_corr[i] * (predicted + sched.filter_gain[i] * e)
    return sched.log_norm + acc


def llr_innovations(params: FieldParams, layout: SensorLayout, observations) -> float:
    """Exact log-likelihood ratio computed through the filter innovations.

    Runs the signal-hypothesis Kalman filter along the sensor line (the filter
    schedule follows the layout's gaps) and whitens the observations; the LLR
    is the whitened Gaussian log-density minus the noise-only log-density.
    """
    y = np.asarray(observations, dtype=float)
    n = layout.total_sensors()
    if y.shape != (n,):
        raise ValueError(f"observations must have shape ({n},), got {y.shape}")
    sched = _filter_schedule(params, layout)
    return float(_llr_columns(sched, y[:, None], params.noise_variance)[0])


def llr_direct(params: FieldParams, layout: SensorLayout, observations) -> float:
    """Log-likelihood ratio from dense covariance matrices (oracle route).

    Cholesky-factorizes the signal-plus-noise covariance; the measurement
    noise keeps it positive definite even with co-located sensors.  Intended
    for moderate sensor counts.
    """
    y = np.asarray(observations, dtype=float)
    n = layout.total_sensors()
    if y.shape != (n,):
        raise ValueError(f"observations must have shape ({n},), got {y.shape}")
    if n > _DIRECT_MAX_SENSORS:
        raise ValueError(f"direct route supports n <= {_DIRECT_MAX_SENSORS}, got {n}")
    sig2 = params.noise_variance
    cov1 = signal_covariance(params, layout) + sig2 * np.eye(n)
    try:
        factor = scipy.linalg.cho_factor(cov1, lower=True)
    except scipy.linalg.LinAlgError as err:
        raise NumericFailure(f"covariance factorization failed: {err}") from err
    logdet1 = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    quad1 = float(y @ scipy.linalg.cho_solve(factor, y))
    logdet0 = n * math.log(sig2)
    quad0 = float(y @ y) / sig2
    return -0.5 * (logdet1 - logdet0) - 0.5 * (quad1 - quad0)


def _collect_llrs(params, layout, hypothesis: Hypothesis, seed: int, trials: int,
                  workers: int | None = None) -> np.ndarray:
    """LLRs of ``trials`` independent draws under ``hypothesis``.

    Blocks are independent keyed streams; aggregation follows block order, so
    any worker count produces the identical array.
    """
    sched = _filter_schedule(params, layout)
    n = layout.total_sensors()
    hyp_code = 0 if hypothesis is Hypothesis.H0 else 1
    sizes = [TRIAL_BLOCK] * (trials // TRIAL_BLOCK)
    if trials % TRIAL_BLOCK:
        sizes.append(trials % TRIAL_BLOCK)

    def run_block(index_size):
        index, size = index_size
        rng = derive_rng(seed, hyp_code, n, index)
        cols = _sample_columns(params, layout, hypothesis, rng, size)
        return _llr_columns(sched, cols, params.noise_variance)

    tasks = list(enumerate(sizes))
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, tasks))
    else:
        parts = [run_block(t) for t in tasks]
    return np.concatenate(parts)


@dataclass
class DetectionEstimate:
    """Miss-probability estimates and the fitted decay rate.

    miss_prob pairs each estimate with its 95% binomial half-width (rule of
    three for zero observed misses).  fitted_rate is the least-squares slope
    of -log(miss) against n over the largest sensor counts whose estimates
    rest on at least 50 misses; NaN when fewer than three such points exist.
    """

    alpha: float
    n_values: list[int]
    threshold_per_n: list[float]
    miss_prob: list[tuple[float, float]]
    fitted_rate: float
    trials: int
    miss_counts: list[int] = field(default_factory=list)
    fitted_rate_stderr: float = math.nan
    fitted_intercept: float = math.nan
    fit_n_used: list[int] = field(default_factory=list)
    seed: int = 0


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Slope, intercept, and slope standard error of y on x."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = len(x) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else math.nan
    return slope, intercept, stderr


def estimate_miss_probability(params: FieldParams, layout_family, alpha: float,
                              n_values, trials: int, seed: int,
                              workers: int | None = None) -> DetectionEstimate:
    """Empirical miss probability of the size-``alpha`` NP test versus n.

    Per sensor count: the threshold is the empirical (1 - alpha) quantile of
    ``trials`` noise-only LLRs (the ``higher`` sample, so the realized size
    never exceeds alpha beyond sampling noise), and the miss probability is
    the fraction of signal-hypothesis LLRs below it.  Deterministic in
    ``seed`` for any worker count.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if trials < 10_000:
        raise ValueError(f"at least 10000 trials required, got {trials}")
    n_values = sorted({int(n) for n in n_values})
    if not n_values or n_values[0] < 1:
        raise ValueError(f"n_values must be positive integers, got {n_values}")

    thresholds, probs, counts = [], [], []
    for n in n_values:
        layout = layout_family(n)
        if layout.total_sensors() != n:
            raise ValueError(
                f"layout family returned {layout.total_sensors()} sensors for n={n}"
            )
        h0 = _collect_llrs(params, layout, Hypothesis.H0, seed, trials, workers)
        threshold = float(np.quantile(h0, 1.0 - alpha, method="higher"))
        h1 = _collect_llrs(params, layout, Hypothesis.H1, seed, trials, workers)
        misses = int(np.sum(h1 < threshold))
        p_hat = misses / trials
        if misses > 0:
            half = _Z95 * math.sqrt(p_hat * (1.0 - p_hat) / trials)
        else:
            half = 3.0 / trials  # one-sided rule-of-three upper bound
        thresholds.append(threshold)
        probs.append((p_hat, half))
        counts.append(misses)

    est = DetectionEstimate(
        alpha=alpha, n_values=n_values, threshold_per_n=thresholds,
        miss_prob=probs, fitted_rate=math.nan, trials=trials,
        miss_counts=counts, seed=seed,
    )
    eligible = [i for i, c in enumerate(counts) if c >= _MIN_FIT_MISSES]
    if len(eligible) >= 3:
        take = eligible[-max(3, len(eligible) // 2):]
        xs = np.array([n_values[i] for i in take], float)
        ys = np.array([-math.log(probs[i][0]) for i in take])
        slope, intercept, stderr = _ols(xs, ys)
        est.fitted_rate = slope
        est.fitted_intercept = intercept
        est.fitted_rate_stderr = stderr
        est.fit_n_used = [int(x) for x in xs]
    return est


# --- validation harness --------------------------------------------------

DEFAULT_SEED = 20260810


@dataclass(frozen=True)
class ValidationBudget:
    """Knobs of a validation run; all defaults are echoed into the report."""

    trials: int = 100_000
    n_values: tuple[int, ...] | None = None
    check_alphas: tuple[float, ...] = (0.05, 0.2)
    rel_tol: float = 0.20
    poly_tol: float = 0.15
    seed: int = DEFAULT_SEED
    workers: int | None = None


@dataclass
class ValidationReport:
    regime: str
    closed_form_per_sensor: float
    tolerance: float
    passed: bool
    fitted_rate: float = math.nan
    fitted_rate_stderr: float = math.nan
    rel_deviation: float = math.nan
    rate_ok: bool | None = None
    alpha_rates: dict = field(default_factory=dict)
    alpha_independent: bool | None = None
    poly_slope: float = math.nan
    poly_slope_stderr: float = math.nan
    poly_ok: bool | None = None
    estimates: dict = field(default_factory=dict)
    budget: ValidationBudget | None = None


def _auto_n_values(k_per_sensor: float, block: int, trials: int, polynomial: bool):
    if polynomial:
        ns = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096]
        return sorted({max(block, block * round(n / block)) for n in ns})
    # Largest n still expected to leave ~50 misses out of `trials`, capped at 300.
    reach = int(math.log(trials / _MIN_FIT_MISSES) / k_per_sensor)
    n_max = max(4 * block, min(300, reach))
    step = block * max(1, math.ceil(n_max / (8 * block)))
    return [step * j for j in range(1, 9)]


def _family_block(layout_family) -> int:
    probe = layout_family(_probe_n(layout_family))
    if isinstance(probe, Uniform):
        return 1
    if isinstance(probe, Clustered):
        return probe.cluster_size
    if isinstance(probe, Periodic):
        return probe.sensors_per_period()
    raise TypeError(f"unknown layout type {type(probe).__name__}")


def _probe_n(layout_family) -> int:
    for n in range(1, 64):
        try:
            if layout_family(n).total_sensors() == n:
                return n
        except Exception:
            continue
    raise ValueError("layout family accepted no n in 1..63")


def validate_exponent(params: FieldParams, layout_family, alpha: float,
                      closed_form: ExponentResult,
                      budget: ValidationBudget | None = None) -> ValidationReport:
    """Compare the closed-form exponent against the Monte Carlo decay rate.

    A closed form that is (numerically) zero routes to the polynomial check:
    the miss probability then decays like a power of n and the log-log slope
    is compared to -1/2.  Otherwise the fitted exponential rate must match the
    closed form within the relative tolerance, and the fitted rates at the
    check sizes must have overlapping confidence intervals (the exponent does
    not depend on the test size).
    """
    budget = budget or ValidationBudget()
    k_closed = closed_form.exponent_per_sensor
    polynomial = k_closed < 1e-9
    block = _family_block(layout_family)
    n_values = list(budget.n_values) if budget.n_values else \
        _auto_n_values(k_closed, block, budget.trials, polynomial)

    report = ValidationReport(
        regime="polynomial" if polynomial else "exponential",
        closed_form_per_sensor=k_closed,
        tolerance=budget.poly_tol if polynomial else budget.rel_tol,
        passed=False,
        budget=budget,
    )
    main = estimate_miss_probability(
        params, layout_family, alpha, n_values, budget.trials, budget.seed,
        budget.workers,
    )
    report.estimates[alpha] = main

    if polynomial:
        pts = [(n, p) for n, (p, _), c in zip(main.n_values, main.miss_prob,
                                              main.miss_counts)
               if c >= _MIN_FIT_MISSES]
        if len(pts) < 3:
            return report
        slope, _, stderr = _ols(np.log([n for n, _ in pts]), np.log([p for _, p in pts]))
        report.poly_slope = slope
        report.poly_slope_stderr = stderr
        report.poly_ok = abs(slope + 0.5) <= budget.poly_tol
        report.passed = bool(report.poly_ok)
        return report

    report.fitted_rate = main.fitted_rate
    report.fitted_rate_stderr = main.fitted_rate_stderr
    if math.isnan(main.fitted_rate):
        return report
    report.rel_deviation = abs(main.fitted_rate - k_closed) / k_closed
    report.rate_ok = report.rel_deviation <= budget.rel_tol

    rates = {}
    if budget.check_alphas:
        rates[alpha] = (main.fitted_rate, main.fitted_rate_stderr)
        for j, a_chk in enumerate(budget.check_alphas):
            if a_chk == alpha:
                continue
            est = estimate_miss_probability(
                params, layout_family, a_chk, n_values, budget.trials,
                budget.seed + 1 + j, budget.workers,
            )
            report.estimates[a_chk] = est
            rates[a_chk] = (est.fitted_rate, est.fitted_rate_stderr)
    report.alpha_rates = rates

    if len(rates) >= 2:
        pairs_ok = True
        items = list(rates.values())
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                r1, s1 = items[i]
                r2, s2 = items[j]
                if any(math.isnan(v) for v in (r1, s1, r2, s2)):
                    pairs_ok = False
                elif abs(r1 - r2) > _Z95 * (s1 + s2):
                    pairs_ok = False
        report.alpha_independent = pairs_ok
    report.passed = bool(report.rate_ok and report.alpha_independent is not False)
    return report


# --- layout families ------------------------------------------------------

def uniform_family(spacing: float):
    """n -> uniform layout with the given spacing."""
    return lambda n: Uniform(spacing=spacing, count=n)


def clustered_family(cluster_size: int, period: float):
    """n -> clustered layout; n must be a multiple of the cluster size."""
    def build(n: int) -> Clustered:
        if n % cluster_size:
            raise ValueError(f"n={n} is not a multiple of cluster_size={cluster_size}")
        return Clustered(cluster_size=cluster_size, cluster_count=n // cluster_size,
                         period=period)
    return build


def periodic_family(offsets):
    """n -> periodic layout; n must be a multiple of the period's sensor count."""
    offsets = tuple(float(d) for d in offsets)

    def build(n: int) -> Periodic:
        if n % len(offsets):
            raise ValueError(f"n={n} is not a multiple of {len(offsets)} sensors/period")
        return Periodic(offsets=offsets, period_count=n // len(offsets))
    return build


def family_from_layout(layout: SensorLayout):
    """The natural n-indexed family extending a layout's within-period pattern."""
    if isinstance(layout, Uniform):
        return uniform_family(layout.spacing)
    if isinstance(layout, Clustered):
        return clustered_family(layout.cluster_size, layout.period)
    if isinstance(layout, Periodic):
        return periodic_family(layout.offsets)
    raise TypeError(f"not a sensor layout: {layout!r}")


# --- emission --------------------------------------------------------------

def estimate_to_json(est: DetectionEstimate) -> dict:
    return {
        "alpha": est.alpha,
        "trials": est.trials,
        "seed": est.seed,
        "n_values": est.n_values,
        "threshold_per_n": est.threshold_per_n,
        "miss_prob": [{"n": n, "estimate": p, "ci95_half": h, "misses": c}
                      for n, (p, h), c in zip(est.n_values, est.miss_prob,
                                              est.miss_counts)],
        "fitted_rate": est.fitted_rate,
        "fitted_rate_stderr": est.fitted_rate_stderr,
        "fitted_intercept": est.fitted_intercept,
        "fit_n_used": est.fit_n_used,
    }


def estimate_counts_csv(est: DetectionEstimate) -> str:
    """Raw per-n counts for external re-analysis."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "trials", "threshold", "misses", "miss_prob", "ci95_half"])
    for n, t, (p, h), c in zip(est.n_values, est.threshold_per_n, est.miss_prob,
                               est.miss_counts):
        writer.writerow([n, est.trials, repr(t), c, repr(p), repr(h)])
    return buf.getvalue()


def report_to_json(report: ValidationReport) -> dict:
    budget = report.budget
    return {
        "regime": report.regime,
        "closed_form_per_sensor": report.closed_form_per_sensor,
        "tolerance": report.tolerance,
        "passed": report.passed,
        "fitted_rate": report.fitted_rate,
        "fitted_rate_stderr": report.fitted_rate_stderr,
        "rel_deviation": report.rel_deviation,
        "rate_ok": report.rate_ok,
        "alpha_rates": {repr(a): {"rate": r, "stderr": s}
                        for a, (r, s) in report.alpha_rates.items()},
        "alpha_independent": report.alpha_independent,
        "poly_slope": report.poly_slope,
        "poly_slope_stderr": report.poly_slope_stderr,
        "poly_ok": report.poly_ok,
        "estimates": {repr(a): estimate_to_json(e) for a, e in report.estimates.items()},
        "budget": None if budget is None else {
            "trials": budget.trials,
            "n_values": list(budget.n_values) if budget.n_values else None,
            "check_alphas": list(budget.check_alphas),
            "rel_tol": budget.rel_tol,
            "poly_tol": budget.poly_tol,
            "seed": budget.seed,
        },
    }
