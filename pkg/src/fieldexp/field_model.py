"""Stationary diffusion field, sensor layouts, and exact Gaussian sampling.

The signal is the stationary solution of a first-order stochastic diffusion
along a line: its spatial autocorrelation over a distance ``d`` is
``stationary_variance * exp(-diffusion_rate * d)``.  Sampled at ordered sensor
positions the field is a Gauss-Markov chain,

    s[i+1] = a[i] * s[i] + u[i],      a[i] = exp(-diffusion_rate * gap[i]),

with ``u[i] ~ N(0, stationary_variance * (1 - a[i]^2))`` so that every sample
keeps the stationary variance.  Each activated sensor observes the field value
at its position plus white Gaussian measurement noise; under the noise-only
hypothesis the observation is the measurement noise alone.

Random number streams are derived from one master seed with
``numpy.random.SeedSequence(entropy=seed, spawn_key=path)`` (see
:func:`derive_rng`), so independent trial blocks are reproducible regardless
of execution order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources

import jsonschema
import numpy as np

__all__ = [
    "Hypothesis",
    "FieldParams",
    "Uniform",
    "Clustered",
    "Periodic",
    "SensorLayout",
    "correlation_from_spacing",
    "step_correlations",
    "signal_covariance",
    "derive_rng",
    "sample_observations",
    "sample_observation_matrix",
    "layout_to_dict",
    "layout_from_dict",
    "params_to_dict",
    "params_from_dict",
    "experiment_schema",
    "validate_model_document",
]


class Hypothesis(Enum):
    H0 = "H0"  # measurement noise only
    H1 = "H1"  # field plus measurement noise


@dataclass(frozen=True)
class FieldParams:
    """Physical model parameters.

    diffusion_rate : float, >= 0
        Spatial decay rate of the field correlation (1/length).  Zero means a
        perfectly correlated field; exponent code treats that regime specially.
    stationary_variance : float, > 0
        Stationary signal power at every point of the field.
    noise_variance : float, > 0
        Per-sensor measurement noise power.
    """

    diffusion_rate: float
    stationary_variance: float
    noise_variance: float

    def __post_init__(self):
        if not (self.diffusion_rate >= 0):
            raise ValueError(f"diffusion_rate must be >= 0, got {self.diffusion_rate}")
        if not (self.stationary_variance > 0):
            raise ValueError(f"stationary_variance must be > 0, got {self.stationary_variance}")
        if not (self.noise_variance > 0):
            raise ValueError(f"noise_variance must be > 0, got {self.noise_variance}")

    def snr(self) -> float:
        return self.stationary_variance / self.noise_variance


@dataclass(frozen=True)
class Uniform:
    """Equally spaced sensors: positions 0, spacing, ..., (count-1)*spacing."""

    spacing: float
    count: int

    def __post_init__(self):
        if not (self.spacing > 0):
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")

    def positions(self) -> np.ndarray:
        return self.spacing * np.arange(self.count, dtype=float)

    def total_sensors(self) -> int:
        return self.count


@dataclass(frozen=True)
class Clustered:
    """cluster_count groups of cluster_size co-located sensors, one group
    every ``period`` along the line."""

    cluster_size: int
    cluster_count: int
    period: float

    def __post_init__(self):
        if self.cluster_size < 1:
            raise ValueError(f"cluster_size must be >= 1, got {self.cluster_size}")
        if self.cluster_count < 1:
            raise ValueError(f"cluster_count must be >= 1, got {self.cluster_count}")
        if not (self.period > 0):
            raise ValueError(f"period must be > 0, got {self.period}")

    def positions(self) -> np.ndarray:
        centers = self.period * np.arange(self.cluster_count, dtype=float)
        return np.repeat(centers, self.cluster_size)

    def total_sensors(self) -> int:
        return self.cluster_size * self.cluster_count


@dataclass(frozen=True)
class Periodic:
    """Arbitrary offsets repeated periodically.

    ``offsets[i]`` is the gap from sensor i to sensor i+1 inside a period; the
    last offset is the wrap-around gap to the first sensor of the next period,
    so the spatial period equals ``sum(offsets)``.
    """

    offsets: tuple[float, ...]
    period_count: int

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(float(d) for d in self.offsets))
        if len(self.offsets) < 1:
            raise ValueError("offsets must contain at least one gap")
        if any(d < 0 for d in self.offsets):
            raise ValueError(f"offsets must be >= 0, got {self.offsets}")
        if not (sum(self.offsets) > 0):
            raise ValueError("at least one offset must be positive")
        if self.period_count < 1:
            raise ValueError(f"period_count must be >= 1, got {self.period_count}")

    @property
    def period(self) -> float:
        return float(sum(self.offsets))

    def sensors_per_period(self) -> int:
        return len(self.offsets)

    def positions(self) -> np.ndarray:
        within = np.concatenate([[0.0], np.cumsum(self.offsets[:-1])])
        starts = self.period * np.arange(self.period_count, dtype=float)
        return (starts[:, None] + within[None, :]).ravel()

    def total_sensors(self) -> int:
        return len(self.offsets) * self.period_count


SensorLayout = Uniform | Clustered | Periodic


def correlation_from_spacing(params: FieldParams, spacing: float) -> float:
    """Correlation coefficient exp(-diffusion_rate * spacing), in [0, 1]."""
    if spacing < 0:
        raise ValueError(f"spacing must be >= 0, got {spacing}")
    return float(np.exp(-params.diffusion_rate * spacing))


def step_correlations(params: FieldParams, layout: SensorLayout) -> np.ndarray:
    """Correlation between consecutive sensors, one value per gap (n-1 total)."""
    gaps = np.diff(layout.positions())
    return np.exp(-params.diffusion_rate * gaps)


def signal_covariance(params: FieldParams, layout: SensorLayout) -> np.ndarray:
    """Exact signal covariance: entry (i, j) is Pi0 * exp(-A * |x_i - x_j|).

    Co-located sensors give a rank-deficient (but still PSD) matrix; callers
    that need positive definiteness must add the noise variance themselves.
    """
    x = layout.positions()
    return params.stationary_variance * np.exp(
        -params.diffusion_rate * np.abs(x[:, None] - x[None, :])
    )


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by ``path`` under a master seed.

    The scheme is ``SeedSequence(entropy=seed, spawn_key=path)``: streams with
    distinct paths are independent and do not depend on creation order, which
    is what makes parallel and serial Monte Carlo runs aggregate identically.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)


def _as_hypothesis(hypothesis) -> Hypothesis:
    if isinstance(hypothesis, Hypothesis):
        return hypothesis
    return Hypothesis(str(hypothesis))


def _sample_columns(
    params: FieldParams,
    layout: SensorLayout,
    hypothesis: Hypothesis,
    rng: np.random.Generator,
    trials: int,
) -> np.ndarray:
    """Observations with shape (n_sensors, trials); column t is one trial.

    Draw order is fixed: under H1 the initial state draw, then per sensor the
    process-noise draw followed by the measurement-noise draw.  Changing this
    order would silently change every seeded result.
    """
    n = layout.total_sensors()
    sigma = np.sqrt(params.noise_variance)
    if hypothesis is Hypothesis.H0:
        return sigma * rng.standard_normal((n, trials))

    pi0 = params.stationary_variance
    a = step_correlations(params, layout)
    step_sd = np.sqrt(pi0 * np.maximum(0.0, 1.0 - a * a))
    out = np.empty((n, trials))
    state = np.sqrt(pi0) * rng.standard_normal(trials)
    out[0] = state + sigma * rng.standard_normal(trials)
    for i in range(1, n):
        state = a[i - 1] * state + step_sd[i - 1] * rng.standard_normal(trials)
        out[i] = state + sigma * rng.standard_normal(trials)
    return out


def sample_observations(params, layout, hypothesis, seed: int) -> np.ndarray:
    """One observation vector (length n), deterministic in ``seed``."""
    hyp = _as_hypothesis(hypothesis)
    rng = derive_rng(seed, 0 if hyp is Hypothesis.H0 else 1)
    return _sample_columns(params, layout, hyp, rng, 1)[:, 0]


def sample_observation_matrix(params, layout, hypothesis, seed: int, trials: int) -> np.ndarray:
    """``trials`` independent observation vectors, shape (trials, n)."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    hyp = _as_hypothesis(hypothesis)
    rng = derive_rng(seed, 0 if hyp is Hypothesis.H0 else 1)
    return _sample_columns(params, layout, hyp, rng, trials).T


# --- JSON representation -----------------------------------------------

_SCHEMA = None


def experiment_schema() -> dict:
    """The shipped JSON schema for model + experiment documents."""
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("fieldexp.schemas").joinpath("experiment.schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


def validate_model_document(doc: dict) -> None:
    """Validate field parameters plus optional layout; unknown keys rejected."""
    schema = dict(experiment_schema())
    schema = {"$defs": schema["$defs"], "$ref": "#/$defs/model"}
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as err:
        raise ValueError(f"invalid model document: {err.message}") from err


def params_to_dict(params: FieldParams) -> dict:
    return {
        "diffusion_rate": params.diffusion_rate,
        "stationary_variance": params.stationary_variance,
        "noise_variance": params.noise_variance,
    }


def params_from_dict(doc: dict) -> FieldParams:
    try:
        return FieldParams(
            diffusion_rate=float(doc["diffusion_rate"]),
            stationary_variance=float(doc["stationary_variance"]),
            noise_variance=float(doc["noise_variance"]),
        )
    except KeyError as err:
        raise ValueError(f"missing field parameter: {err}") from err


def layout_to_dict(layout: SensorLayout) -> dict:
    if isinstance(layout, Uniform):
        return {"kind": "uniform", "spacing": layout.spacing, "count": layout.count}
    if isinstance(layout, Clustered):
        return {
            "kind": "clustered",
            "cluster_size": layout.cluster_size,
            "cluster_count": layout.cluster_count,
            "period": layout.period,
        }
    if isinstance(layout, Periodic):
        return {
            "kind": "periodic",
            "offsets": list(layout.offsets),
            "period_count": layout.period_count,
        }
    raise TypeError(f"not a sensor layout: {layout!r}")


def layout_from_dict(doc: dict) -> SensorLayout:
    kind = doc.get("kind")
    if kind == "uniform":
        return Uniform(spacing=float(doc["spacing"]), count=int(doc["count"]))
    if kind == "clustered":
        return Clustered(
            cluster_size=int(doc["cluster_size"]),
            cluster_count=int(doc["cluster_count"]),
            period=float(doc["period"]),
        )
    if kind == "periodic":
        return Periodic(
            offsets=tuple(float(d) for d in doc["offsets"]),
            period_count=int(doc["period_count"]),
        )
    raise ValueError(f"unknown layout kind: {kind!r}")
