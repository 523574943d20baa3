"""Experiment runner and command-line interface.

A JSON config file describes the plant, noise, controller constants (with
"auto" derivation), run size, and the list of checks to enforce.  The
runner fans trajectories across a worker pool with per-trajectory seeded
streams (seed XOR index), aggregates order-independently, and writes a
deterministic summary document; the report path renders a verdict table,
delimited curve files, and figures from that summary.

Exit codes: 0 all requested checks pass; 2 invalid config; 3 check
failure; 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import List, Optional, Tuple

import numpy as np

from . import analysis, batch, report
from .core import (
    ConfigError,
    ControllerConfig,
    InitialStateSpec,
    SystemModel,
    TransmissionSchedule,
    derive_constants,
    validate_config,
)
from .noise import NoiseSpec
from .scalar import simulate_trajectory, write_trace_csv
from .vector import design_vector_controller, simulate_vector

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4
KNOWN_CHECKS = ("plateau", "tau_max", "bounded", "pathwise",
                "instability_slope", "schedule_density")


class ConfigFileError(ValueError):
    """Raised for malformed experiment config documents."""


def _reject_unknown(section: dict, allowed: tuple, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigFileError(
            f"unknown key(s) in {where}: {', '.join(unknown)} "
            f"(allowed: {', '.join(allowed)})")


def _auto(section: dict, key: str, default=None):
    val = section.get(key, default)
    return default if val == "auto" else val


_NOISE_KEYS = ("family", "b0", "sigma", "nu", "scale", "alpha0",
               "cov_coeffs", "lam", "window", "alpha")
_INITIAL_KEYS = ("kind", "value", "lo", "hi", "sigma", "nu", "scale")
_MODEL_KEYS = ("gain", "control_matrix")


def _parse_noise(section: dict) -> NoiseSpec:
    _reject_unknown(section, _NOISE_KEYS, "noise")
    kwargs = dict(section)
    if "cov_coeffs" in kwargs:
        kwargs["cov_coeffs"] = tuple(float(c) for c in kwargs["cov_coeffs"])
    return NoiseSpec(**kwargs)


def _parse_initial(section: dict) -> InitialStateSpec:
    _reject_unknown(section, _INITIAL_KEYS, "initial")
    return InitialStateSpec(**section)


def _parse_schedule(section: dict) -> TransmissionSchedule:
    allowed = ("kind", "p", "N", "pattern")
    _reject_unknown(section, allowed, "controller.schedule")
    if section.get("kind", "p_dense") == "every_step":
        return TransmissionSchedule.every_step()
    return TransmissionSchedule.p_dense(
        p=float(section["p"]), N=int(section["N"]),
        pattern=section["pattern"])


def _parse_model(section: dict) -> SystemModel:
    _reject_unknown(section, _MODEL_KEYS, "model")
    gain = section["gain"]
    if isinstance(gain, list):
        gain = np.asarray(gain, dtype=float)
    cm = section.get("control_matrix")
    if cm is not None:
        cm = np.asarray(cm, dtype=float)
    return SystemModel(gain=gain, control_matrix=cm,
                       noise=NoiseSpec(), initial=InitialStateSpec())


def load_config(config: dict) -> dict:
    """Validate the config document shape (not the controller math)."""
    if not isinstance(config, dict):
        raise ConfigFileError("config document must be a JSON object")
    allowed = ("schema_version", "model", "noise", "initial", "controller",
               "run", "checks")
    _reject_unknown(config, allowed, "top level")
    version = config.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigFileError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if "model" not in config or "gain" not in config.get("model", {}):
        raise ConfigFileError("config needs model.gain")
    _reject_unknown(config["model"], _MODEL_KEYS, "model")
    _reject_unknown(config.get("noise", {}), _NOISE_KEYS, "noise")
    _reject_unknown(config.get("initial", {}), _INITIAL_KEYS, "initial")
    run = config.get("run", {})
    _reject_unknown(run, ("horizon", "trajectories", "seed", "max_tau",
                          "pathwise_rounds", "trace_count"), "run")
    checks = config.get("checks", ["plateau", "tau_max"])
    for c in checks:
        if c not in KNOWN_CHECKS:
            raise ConfigFileError(
                f"unknown check {c!r} (known: {', '.join(KNOWN_CHECKS)})")
    ctl = config.get("controller", {})
    _reject_unknown(ctl, ("M", "k", "delta", "Delta", "B", "P", "alpha",
                          "beta", "delay", "schedule", "magnitude_tests",
                          "c1", "theta", "period"), "controller")
    return config


def _build_scalar(config: dict) -> Tuple[SystemModel, ControllerConfig, dict]:
    model = _parse_model(config["model"])
    model = SystemModel(gain=model.gain,
                        noise=_parse_noise(config.get("noise", {})),
                        initial=_parse_initial(config.get("initial", {})),
                        control_matrix=model.control_matrix)
    ctl = dict(config.get("controller", {}))
    ctl.pop("theta", None)
    ctl.pop("period", None)
    schedule = None
    if "schedule" in ctl:
        schedule = _parse_schedule(ctl.pop("schedule"))
    b_auto = ctl.get("B", "auto") == "auto"
    derived = derive_constants(
        model,
        beta=float(ctl.get("beta", 1.0)),
        alpha=_auto(ctl, "alpha"),
        M=_auto(ctl, "M"),
        k=_auto(ctl, "k"),
        delta=float(_auto(ctl, "delta", 0.05) or 0.05),
        Delta=_auto(ctl, "Delta"),
        P=_auto(ctl, "P"),
        B=1.0 if b_auto else float(ctl.get("B", 1.0)),
        delay=int(ctl.get("delay", 0)),
        schedule=schedule,
        magnitude_tests=bool(ctl.get("magnitude_tests", True)),
        c1=_auto(ctl, "c1"),
    )
    return model, derived, {"b_auto": b_auto}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _check(checks: dict, name: str, passed: bool, detail: str) -> None:
    checks[name] = {"passed": bool(passed), "detail": detail}


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _run_scalar(config: dict, model: SystemModel, cc: ControllerConfig,
                b_auto: bool, seed: int, workers: int,
                traces_out: Optional[str]) -> dict:
    run = config.get("run", {})
    horizon = int(run.get("horizon", 10000))
    ntraj = int(run.get("trajectories", 100))
    max_tau = int(run.get("max_tau", 10000))
    requested = config.get("checks", ["plateau", "tau_max"])

    if b_auto:
        b = batch.auto_scale_B(model, cc, seed)
        cc = ControllerConfig(M=cc.M, k=cc.k, delta=cc.delta, Delta=cc.Delta,
                              B=b, P=cc.P, alpha=cc.alpha, beta=cc.beta,
                              delay=cc.delay, schedule=cc.schedule,
                              magnitude_tests=cc.magnitude_tests, c1=cc.c1)

    result = batch.run_sharded(model, cc, horizon, ntraj, seed,
                               workers=workers, beta=cc.beta)
    moment = analysis.estimate_beta_moment(result)
    tau = analysis.tau_tail(result, cc, model.intrinsic_growth())
    contraction = analysis.round_contraction_stats(result, cc)

    checks: dict = {}
    a = model.intrinsic_growth()
    for name in requested:
        if name == "plateau":
            _check(checks, name, moment.plateau and moment.diverged == 0,
                   f"diverged={moment.diverged}, "
                   f"last/mid quartile ratio within 1.5: {moment.plateau}")
        elif name == "tau_max":
            _check(checks, name, result.tau_max <= max_tau,
                   f"max probe count {result.tau_max} (limit {max_tau})")
        elif name == "instability_slope":
            expected = cc.beta * math.log(a)
            ok = (math.isfinite(moment.slope)
                  and abs(moment.slope - expected) <= 0.1 * abs(expected))
            _check(checks, name, ok,
                   f"log-moment slope {_fmt(moment.slope)} vs "
                   f"expected {_fmt(expected)} (±10%)")
        elif name == "bounded":
            tr = simulate_trajectory(model, cc, min(horizon, 10000), seed=seed)
            cert = analysis.bounded_noise_certificate(tr, model, cc)
            _check(checks, name, cert.ok,
                   f"max |X|/C = {_fmt(cert.max_ratio)}, "
                   f"final C = {_fmt(cert.final_c)} "
                   f"(limit {_fmt(cert.c_limit)}) {cert.note}".rstrip())
        elif name == "pathwise":
            target = int(run.get("pathwise_rounds", 1000))
            viol = checked = rounds = 0
            worst = math.inf
            idx = 0
            while rounds < target and idx < 512:
                tr = simulate_trajectory(model, cc, min(horizon, 20000),
                                         seed=seed, index=idx)
                for rep in (analysis.check_lemma_max(tr, cc, a),
                            analysis.check_normal_bound(tr, cc, a)):
                    viol += rep.violations
                    checked += rep.checked
                    worst = min(worst, rep.worst_margin)
                rounds += len(tr.rounds)
                idx += 1
            _check(checks, name, viol == 0 and rounds >= target,
                   f"{viol} violations over {rounds} rounds "
                   f"({checked} inequalities, worst margin {_fmt(worst)})")
        elif name == "schedule_density":
            dens = cc.schedule.density()
            _check(checks, name, dens < 1.0 or cc.schedule.is_every_step(),
                   f"schedule density {_fmt(dens)}")

    if traces_out:
        os.makedirs(traces_out, exist_ok=True)
        count = int(run.get("trace_count", min(ntraj, 4)))
        for i in range(min(count, ntraj)):
            # replay trajectory i from its seeded stream (seed XOR index)
            tr = simulate_trajectory(model, cc, horizon, seed=seed, index=i)
            write_trace_csv(tr, os.path.join(traces_out, f"trace_{i:04d}.csv"))

    sel = contraction.survival > 0
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "scalar",
        "config": _jsonable(config),
        "derived": {"M": cc.M, "k": cc.k, "delta": cc.delta,
                    "Delta": cc.Delta, "B": cc.B, "P": cc.P,
                    "alpha": cc.alpha, "beta": cc.beta, "delay": cc.delay,
                    "c1": cc.initial_bound(a)},
        "seeds": {"seed": seed, "trajectories": ntraj},
        "estimates": {
            "moment": {"grid": _jsonable(moment.grid),
                       "mean": _jsonable(moment.mean),
                       "se": _jsonable(moment.se),
                       "beta": moment.beta, "diverged": moment.diverged,
                       "plateau": moment.plateau,
                       "slope": _jsonable(moment.slope)},
            "tau": {"j": _jsonable(tau.j),
                    "survival": _jsonable(tau.survival),
                    "lo": _jsonable(tau.lo), "hi": _jsonable(tau.hi),
                    "rounds": tau.rounds, "tau_max": tau.tau_max,
                    "slope": _jsonable(tau.slope),
                    "slope_bound": _jsonable(tau.slope_bound)},
            "contraction": {"fraction_le": _jsonable(contraction.fraction_le),
                            "t": _jsonable(contraction.t[sel]),
                            "survival": _jsonable(contraction.survival[sel]),
                            "slope": _jsonable(contraction.slope),
                            "total": contraction.total},
        },
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()) if checks else True,
    }


def _run_vector(config: dict, seed: int, workers: int) -> dict:
    model = _parse_model(config["model"])
    model = SystemModel(gain=model.gain,
                        noise=_parse_noise(config.get("noise", {})),
                        initial=_parse_initial(config.get("initial", {})),
                        control_matrix=model.control_matrix)
    ctl = config.get("controller", {})
    run = config.get("run", {})
    horizon = int(run.get("horizon", 10000))
    ntraj = int(run.get("trajectories", 64))
    beta = float(ctl.get("beta", 1.0))
    controller = design_vector_controller(
        model,
        delta=float(_auto(ctl, "delta", 0.05) or 0.05),
        B=_auto(ctl, "B"),
        M=_auto(ctl, "M"),
        theta=_auto(ctl, "theta"),
        period=_auto(ctl, "period"),
        c1=_auto(ctl, "c1"),
    )
    traces = [simulate_vector(model, controller, horizon, seed=seed, index=i)
              for i in range(ntraj)]
    moment = analysis.estimate_beta_moment(traces, beta=beta)
    alloc = controller.allocation
    checks: dict = {}
    requested = config.get("checks", ["plateau", "schedule_density"])
    for name in requested:
        if name == "plateau":
            _check(checks, name, moment.plateau and moment.diverged == 0,
                   f"diverged={moment.diverged}, plateau={moment.plateau}")
        elif name == "schedule_density":
            total = alloc.total_density()
            strict = all(
                controller.M ** p > controller.decomp.blocks[bi].modulus
                ** controller.decomp.blocks[bi].dim
                for p, bi in zip(alloc.p, alloc.block_indices))
            _check(checks, name, total < 1.0 and strict,
                   f"total allocated density {_fmt(total)}, "
                   f"p = {[round(float(p), 4) for p in alloc.p]}")
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "vector",
        "config": _jsonable(config),
        "derived": {"M": controller.M, "delta": controller.delta,
                    "B": controller.B,
                    "k": list(b.k for b in controller.blocks),
                    "P": list(b.P for b in controller.blocks)},
        "seeds": {"seed": seed, "trajectories": ntraj},
        "estimates": {
            "moment": {"grid": _jsonable(moment.grid),
                       "mean": _jsonable(moment.mean),
                       "se": _jsonable(moment.se),
                       "beta": moment.beta, "diverged": moment.diverged,
                       "plateau": moment.plateau,
                       "slope": _jsonable(moment.slope)},
            "vector": {"densities": list(alloc.p), "q": list(alloc.q),
                       "theta": alloc.theta, "period": alloc.period,
                       "k": [b.k for b in controller.blocks]},
        },
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()) if checks else True,
    }


def run_experiment(config: dict, seed: Optional[int] = None,
                   workers: int = 1, traces_out: Optional[str] = None
                   ) -> Tuple[int, dict]:
    """Run one experiment; returns (exit_code, summary document)."""
    try:
        config = load_config(config)
    except ConfigFileError as exc:
        return EXIT_CONFIG, {"error": str(exc), "violations": [str(exc)]}
    run = config.get("run", {})
    if seed is None:
        seed = run.get("seed")
    if seed is None:
        seed = int(os.environ.get("BITSTAB_SEED", "0"))
    seed = int(seed)

    gain = config["model"]["gain"]
    started = time.time()
    try:
        if isinstance(gain, list):
            summary = _run_vector(config, seed, workers)
        else:
            model, cc, extra = _build_scalar(config)
            violations = validate_config(model, cc)
            fatal = [v for v in violations if v.fatal]
            if fatal:
                return EXIT_CONFIG, {
                    "error": "invalid configuration",
                    "violations": [f"{v.code}: {v.message}" for v in violations],
                }
            summary = _run_scalar(config, model, cc, extra["b_auto"], seed,
                                  workers, traces_out)
            if violations:
                summary["warnings"] = [f"{v.code}: {v.message}"
                                       for v in violations]
    except (ConfigFileError, ConfigError, ValueError, TypeError, KeyError) as exc:
        return EXIT_CONFIG, {"error": str(exc), "violations": [str(exc)]}
    summary = _jsonable(summary)
    summary["timing"] = {"wall_clock_s": round(time.time() - started, 3)}
    code = EXIT_OK if summary["passed"] else EXIT_CHECK
    return code, summary


def summary_json(summary: dict) -> str:
    """Deterministic serialization; the timing block is the only field that
    varies between identical runs."""
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def _cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, summary = run_experiment(config, seed=args.seed,
                                   workers=args.workers,
                                   traces_out=args.traces_out)
    if "error" in summary:
        print(f"invalid config: {summary['error']}", file=sys.stderr)
        for v in summary.get("violations", []):
            print(f"  - {v}", file=sys.stderr)
        return code
    try:
        if args.summary_out:
            os.makedirs(os.path.dirname(os.path.abspath(args.summary_out)),
                        exist_ok=True)
            with open(args.summary_out, "w") as fh:
                fh.write(summary_json(summary))
        if args.report_dir:
            report.emit_report(summary, args.report_dir)
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    print(report.format_report(summary), end="")
    return code


def _cmd_report(args) -> int:
    try:
        with open(args.summary) as fh:
            summary = json.load(fh)
        paths = report.emit_report(summary, args.report_dir)
    except OSError as exc:
        print(f"report I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"summary is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(config)
        gain = config["model"]["gain"]
        if isinstance(gain, list):
            design_vector_controller(_parse_model(config["model"]))
            print("ok (vector design feasible)")
            return EXIT_OK
        model, cc, _ = _build_scalar(config)
        violations = validate_config(model, cc)
    except (ConfigFileError, ConfigError, ValueError, TypeError, KeyError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for v in violations:
        kind = "error" if v.fatal else "warning"
        print(f"{kind}: {v.code}: {v.message}")
    if any(v.fatal for v in violations):
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bitstab",
        description="rate-limited quantizer-controller simulation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None,
                       help="overrides config seed and BITSTAB_SEED")
    p_run.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p_run.add_argument("--traces-out", default=None,
                       help="directory for per-trajectory CSV traces")
    p_run.add_argument("--summary-out", default=None,
                       help="path for the summary JSON document")
    p_run.add_argument("--report-dir", default=None,
                       help="directory for the rendered report and figures")
    p_run.set_defaults(func=_cmd_run)

    p_rep = sub.add_parser("report", help="render a report from a summary")
    p_rep.add_argument("--summary", required=True)
    p_rep.add_argument("--report-dir", required=True)
    p_rep.set_defaults(func=_cmd_report)

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=_cmd_validate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
