"""Command-line front end.

Subcommands: ``exponent`` (closed forms per layout), ``optimize`` (optimal
spacing below unit SNR), ``sweep`` (figure-data generation), ``simulate``
(Monte Carlo miss probabilities), ``validate`` (closed form vs. Monte Carlo).

Exit codes: 0 success, 1 validation-check failure, 2 configuration error,
3 numeric failure.  Errors are emitted as JSON on stderr.  Outputs are
byte-identical for identical configuration and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from .errors import NumericFailure
from .field_model import (
    Clustered,
    FieldParams,
    Periodic,
    Uniform,
    experiment_schema,
    layout_from_dict,
    layout_to_dict,
    params_to_dict,
)
from . import config_opt, kalman_exponent, mc_detector

_THREADS_ENV = "FIELDEXP_THREADS"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldexp",
        description="Error exponents for detection of a correlated field "
                    "under sensor activation configurations",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, layout=True):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--diffusion-rate", type=float, dest="diffusion_rate")
        p.add_argument("--stationary-variance", type=float, dest="stationary_variance")
        p.add_argument("--noise-variance", type=float, dest="noise_variance")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--snr", type=float, help="linear SNR (sets noise variance)")
        g.add_argument("--snr-db", type=float, dest="snr_db", help="SNR in dB")
        if layout:
            p.add_argument("--layout", choices=["uniform", "clustered", "periodic"])
            p.add_argument("--spacing", type=float)
            p.add_argument("--count", type=int)
            p.add_argument("--cluster-size", type=int, dest="cluster_size")
            p.add_argument("--cluster-count", type=int, dest="cluster_count")
            p.add_argument("--period", type=float)
            p.add_argument("--offsets", help="comma-separated intra-period gaps")
            p.add_argument("--period-count", type=int, dest="period_count")
        p.add_argument("--out", default="-", help="output path, '-' for stdout")
        p.add_argument("--format", choices=["json", "csv"], dest="fmt", default="json")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get(_THREADS_ENV, "1")))

    p = sub.add_parser("exponent", help="closed-form exponent of one layout")
    common(p)

    p = sub.add_parser("optimize", help="optimal spacing for SNR < 1")
    common(p, layout=False)
    p.add_argument("--snr-db-grid", help="start:stop:num dB grid for a spacing curve")

    p = sub.add_parser("sweep", help="exponent over a parameter grid")
    common(p, layout=False)
    p.add_argument("--axis", choices=["a", "snr", "cluster", "delta1", "m3"],
                   required=True)
    p.add_argument("--grid-points", type=int, dest="grid_points")
    p.add_argument("--period", type=float)
    p.add_argument("--field-length", type=float, dest="field_length")
    p.add_argument("--n-total", type=int, dest="n_total")
    p.add_argument("--sizes", help="comma-separated cluster sizes")
    p.add_argument("--n-ref", type=int, dest="n_ref", default=1)
    p.add_argument("--correlation", type=float, help="fixed correlation for --axis snr")

    # Defaults stay None so values from a config file are not shadowed;
    # explicit flags win over the file.
    for name, descr in (("simulate", "Monte Carlo miss probabilities"),
                        ("validate", "closed form vs. Monte Carlo decay rate")):
        p = sub.add_parser(name, help=descr)
        common(p)
        p.add_argument("--alpha", type=float)
        p.add_argument("--trials", type=int)
        p.add_argument("--n-values", dest="n_values",
                       help="comma-separated sensor counts")
        p.add_argument("--seed", type=int)
        if name == "validate":
            p.add_argument("--tolerance", type=float)
            p.add_argument("--check-alphas", dest="check_alphas",
                           help="comma-separated sizes for the rate-independence "
                                "check; empty string disables it")
    return parser


def _load_config(args) -> dict:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                raise ValueError(f"config is not valid JSON: {err}") from err
        try:
            jsonschema.validate(doc, experiment_schema())
        except jsonschema.ValidationError as err:
            raise ValueError(f"invalid configuration: {err.message}") from err
    return doc


def _pick(flag_value, doc: dict, key: str, default=None):
    if flag_value is not None:
        return flag_value
    return doc.get(key, default)


def _resolve_params(args, doc: dict) -> FieldParams:
    pi0 = args.stationary_variance
    if pi0 is None:
        pi0 = doc.get("stationary_variance", 1.0)
    noise = args.noise_variance if args.noise_variance is not None \
        else doc.get("noise_variance")
    snr = None
    if args.snr is not None:
        snr = args.snr
    elif args.snr_db is not None:
        snr = 10.0 ** (args.snr_db / 10.0)
    if snr is not None:
        if noise is not None:
            raise ValueError("give either an SNR or a noise variance, not both")
        noise = pi0 / snr
    if noise is None:
        raise ValueError("noise variance is required (directly or via --snr/--snr-db)")
    rate = args.diffusion_rate if args.diffusion_rate is not None \
        else doc.get("diffusion_rate")
    if rate is None:
        raise ValueError("diffusion_rate is required")
    return FieldParams(diffusion_rate=rate, stationary_variance=pi0,
                       noise_variance=noise)


def _resolve_layout(args, doc: dict):
    kind = getattr(args, "layout", None)
    if kind is None:
        if "layout" in doc:
            return layout_from_dict(doc["layout"])
        return None
    if kind == "uniform":
        return Uniform(spacing=_req(args.spacing, "--spacing"),
                       count=_req(args.count, "--count"))
    if kind == "clustered":
        return Clustered(cluster_size=_req(args.cluster_size, "--cluster-size"),
                         cluster_count=_req(args.cluster_count, "--cluster-count"),
                         period=_req(args.period, "--period"))
    return Periodic(offsets=_floats(_req(args.offsets, "--offsets")),
                    period_count=_req(args.period_count, "--period-count"))


def _req(value, flag):
    if value is None:
        raise ValueError(f"{flag} is required for this layout")
    return value


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(","))


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",")]


def _emit(args, text: str) -> None:
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)


def _json_dump(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _meta(args, params, extra=None) -> dict:
    meta = {
        "version": __version__,
        "field": params_to_dict(params),
        "format": args.fmt,
    }
    if extra:
        meta.update(extra)
    return meta


def _exponent_payload(params, layout) -> dict:
    if isinstance(layout, Uniform):
        res = kalman_exponent.scalar_exponent(params, layout.spacing)
        extra = {}
    elif isinstance(layout, Clustered):
        res = kalman_exponent.clustering_exponent(params, layout)
        # Surface the block-model route and the gap between the two formulas.
        equivalent = Periodic(
            offsets=(0.0,) * (layout.cluster_size - 1) + (layout.period,),
            period_count=max(1, layout.cluster_count),
        ) if params.diffusion_rate > 0 else None
        extra = {}
        if equivalent is not None:
            alt = kalman_exponent.vector_exponent(params, equivalent)
            extra = {
                "block_model_per_sensor": alt.exponent_per_sensor,
                "closed_form_difference":
                    res.exponent_per_sensor - alt.exponent_per_sensor,
            }
    elif isinstance(layout, Periodic):
        res = kalman_exponent.vector_exponent(params, layout)
        extra = {}
    else:
        raise ValueError("a layout is required for the exponent command")
    inn = res.innovations
    if isinstance(inn, kalman_exponent.ScalarInnovations):
        inn_doc = dataclasses.asdict(inn)
    else:
        inn_doc = {k: np.asarray(v).tolist() for k, v in dataclasses.asdict(inn).items()}
    return {
        "exponent_per_sensor": res.exponent_per_sensor,
        "exponent_per_block": res.exponent_per_block,
        "innovations": inn_doc,
        "layout": layout_to_dict(layout),
        "diagnostics": res.diagnostics,
        **extra,
    }


def _cmd_exponent(args, doc) -> int:
    params = _resolve_params(args, doc)
    layout = _resolve_layout(args, doc)
    if layout is None:
        raise ValueError("a layout is required for the exponent command")
    payload = _exponent_payload(params, layout)
    payload["metadata"] = _meta(args, params)
    if args.fmt == "csv":
        text = ("exponent_per_sensor,exponent_per_block\n"
                f"{payload['exponent_per_sensor']!r},{payload['exponent_per_block']!r}\n")
    else:
        text = _json_dump(payload)
    _emit(args, text)
    return 0


def _cmd_optimize(args, doc) -> int:
    params = _resolve_params(args, doc)
    if args.snr_db_grid:
        start, stop, num = args.snr_db_grid.split(":")
        grid_db = np.linspace(float(start), float(stop), int(num))
        curve = config_opt.optimal_spacing_curve(
            params.diffusion_rate, params.noise_variance,
            [10.0 ** (db / 10.0) for db in grid_db],
        )
        if args.fmt == "csv":
            lines = ["snr,snr_db,a_star,delta_star,k_at_optimum"]
            for (snr, res), db in zip(curve, grid_db):
                lines.append(f"{snr!r},{db!r},{res.a_star!r},{res.delta_star!r},"
                             f"{res.exponent_at_optimum!r}")
            text = "\n".join(lines) + "\n"
        else:
            text = _json_dump({
                "curve": [{"snr": snr, **dataclasses.asdict(res)} for snr, res in curve],
                "metadata": _meta(args, params),
            })
    else:
        res = config_opt.optimal_spacing(params)
        text = _json_dump({**dataclasses.asdict(res), "metadata": _meta(args, params)})
    _emit(args, text)
    return 0


def _cmd_sweep(args, doc) -> int:
    params = _resolve_params(args, doc)
    axis = args.axis
    gp = args.grid_points or doc.get("grid_points")
    if axis == "a":
        grid = np.linspace(0.0, 1.0, gp or 201)
        result = config_opt.correlation_sweep(params, grid, n_ref=args.n_ref)
    elif axis == "snr":
        corr = args.correlation if args.correlation is not None \
            else doc.get("correlation")
        if corr is None:
            raise ValueError("--correlation is required for --axis snr")
        result = config_opt.snr_sweep(params, corr, n_ref=args.n_ref)
    elif axis == "cluster":
        n_total = args.n_total or doc.get("n_total") or 100
        sizes = _ints(args.sizes) if args.sizes else doc.get("sizes") or [1, 2, 4, 5, 10]
        length = args.field_length or doc.get("field_length") or 1.0
        result = config_opt.cluster_size_sweep(params, length, n_total, sizes)
    elif axis == "delta1":
        period = args.period or doc.get("period")
        if period is None:
            raise ValueError("--period is required for --axis delta1")
        result = config_opt.offset_sweep_m2(params, period, gp or 201,
                                            n_ref=args.n_ref)
    else:  # m3
        period = args.period or doc.get("period")
        if period is None:
            raise ValueError("--period is required for --axis m3")
        result = config_opt.offset_sweep_m3(params, period, gp or 61,
                                            n_ref=args.n_ref, workers=args.threads)
    if args.fmt == "csv":
        text = config_opt.sweep_to_csv(result)
    else:
        text = _json_dump({**config_opt.sweep_to_json(result),
                           "metadata": _meta(args, params)})
    _emit(args, text)
    return 0


def _closed_form_for(params, layout):
    if isinstance(layout, Uniform):
        return kalman_exponent.scalar_exponent(params, layout.spacing)
    if isinstance(layout, Clustered):
        return kalman_exponent.clustering_exponent(params, layout)
    return kalman_exponent.vector_exponent(params, layout)


def _cmd_simulate(args, doc) -> int:
    params = _resolve_params(args, doc)
    layout = _resolve_layout(args, doc)
    if layout is None:
        raise ValueError("a layout is required for the simulate command")
    family = mc_detector.family_from_layout(layout)
    alpha = _pick(args.alpha, doc, "alpha", 0.1)
    trials = _pick(args.trials, doc, "trials", 100_000)
    seed = _pick(args.seed, doc, "seed", mc_detector.DEFAULT_SEED)
    n_values = _pick(_ints(args.n_values) if args.n_values else None, doc, "n_values")
    if not n_values:
        closed = _closed_form_for(params, layout)
        n_values = mc_detector._auto_n_values(
            closed.exponent_per_sensor, mc_detector._family_block(family), trials,
            closed.exponent_per_sensor < 1e-9)
    est = mc_detector.estimate_miss_probability(
        params, family, alpha, n_values, trials, seed, workers=args.threads)
    if args.fmt == "csv":
        text = mc_detector.estimate_counts_csv(est)
    else:
        text = _json_dump({**mc_detector.estimate_to_json(est),
                           "metadata": _meta(args, params,
                                             {"layout": layout_to_dict(layout)})})
    _emit(args, text)
    return 0


def _cmd_validate(args, doc) -> int:
    params = _resolve_params(args, doc)
    layout = _resolve_layout(args, doc)
    if layout is None:
        raise ValueError("a layout is required for the validate command")
    family = mc_detector.family_from_layout(layout)
    closed = _closed_form_for(params, layout)
    alpha = _pick(args.alpha, doc, "alpha", 0.1)
    if args.check_alphas is not None:
        check = tuple(float(a) for a in args.check_alphas.split(",") if a.strip())
    else:
        check = tuple(doc.get("check_alphas", (0.05, 0.2)))
    n_values = _pick(_ints(args.n_values) if args.n_values else None, doc, "n_values")
    budget = mc_detector.ValidationBudget(
        trials=_pick(args.trials, doc, "trials", 100_000),
        n_values=tuple(n_values) if n_values else None,
        check_alphas=check,
        rel_tol=_pick(args.tolerance, doc, "tolerance", 0.20),
        seed=_pick(args.seed, doc, "seed", mc_detector.DEFAULT_SEED),
        workers=args.threads,
    )
    report = mc_detector.validate_exponent(params, family, alpha, closed, budget)
    if args.fmt == "csv":
        text = mc_detector.estimate_counts_csv(report.estimates[alpha])
    else:
        text = _json_dump({**mc_detector.report_to_json(report),
                           "metadata": _meta(args, params,
                                             {"layout": layout_to_dict(layout)})})
    _emit(args, text)
    return 0 if report.passed else 1


_COMMANDS = {
    "exponent": _cmd_exponent,
    "optimize": _cmd_optimize,
    "sweep": _cmd_sweep,
    "simulate": _cmd_simulate,
    "validate": _cmd_validate,
}


def classify_exit(err: BaseException) -> int:
    """Exit code for an exception: 2 for configuration errors, 3 numeric."""
    if isinstance(err, NumericFailure):
        return 3
    if isinstance(err, (ValueError, KeyError, TypeError, OSError)):
        return 2
    raise err


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        doc = _load_config(args)
        return _COMMANDS[args.command](args, doc)
    except Exception as err:  # noqa: BLE001 - mapped to exit codes below
        code = classify_exit(err)
        payload = {"error": {"type": type(err).__name__, "message": str(err),
                             "exit_code": code}}
        if isinstance(err, NumericFailure) and err.residual is not None:
            payload["error"]["residual"] = err.residual
        sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
