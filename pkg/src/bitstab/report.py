"""Rendering of experiment summaries: a plain-text verdict table, delimited
curve files, and matplotlib figures, all written next to each other in a
report directory.  Works off the serialized summary document so reports can
be regenerated without re-running the simulation.
"""
from __future__ import annotations

import csv
import math
import os
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _verdict_lines(summary: dict) -> List[str]:
    lines = []
    lines.append("experiment verdicts")
    lines.append("=" * 60)
    derived = summary.get("derived", {})
    if derived:
        parts = ", ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in sorted(derived.items()))
        lines.append(f"constants: {parts}")
    seeds = summary.get("seeds", {})
    if seeds:
        lines.append(f"seed: {seeds.get('seed')}  "
                     f"trajectories: {seeds.get('trajectories')}  "
                     "(per-trajectory stream = seed XOR index)")
    vec = summary.get("estimates", {}).get("vector")
    if vec:
        dens = ", ".join(f"{p:.4f}" for p in vec["densities"])
        lines.append(f"block schedule densities: [{dens}] "
                     f"(total {sum(vec['densities']):.4f}, "
                     f"period {vec['period']})")
    lines.append("-" * 60)
    checks = summary.get("checks", {})
    width = max((len(n) for n in checks), default=10)
    for name, res in checks.items():
        flag = "PASS" if res.get("passed") else "FAIL"
        detail = res.get("detail", "")
        lines.append(f"{name:<{width}}  {flag}  {detail}")
    lines.append("-" * 60)
    lines.append("overall: " + ("PASS" if summary.get("passed") else "FAIL"))
    return lines


def format_report(summary: dict) -> str:
    return "\n".join(_verdict_lines(summary)) + "\n"


def _write_csv(path: str, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _moment_outputs(moment: dict, out_dir: str) -> None:
    grid, mean, se = moment["grid"], moment["mean"], moment["se"]
    _write_csv(os.path.join(out_dir, "moment_curve.csv"),
               ["n", "mean", "se"], zip(grid, mean, se))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    m = [v if v and v > 0 else math.nan for v in mean]
    ax.semilogy(grid, m, lw=1.5, label=f"E|X_n|^{moment['beta']:g}")
    lo = [mv - 2 * sv if mv and sv else math.nan for mv, sv in zip(mean, se)]
    hi = [mv + 2 * sv if mv and sv else math.nan for mv, sv in zip(mean, se)]
    ax.fill_between(grid, lo, hi, alpha=0.25, lw=0, label="±2 SE")
    ax.set_xlabel("step n")
    ax.set_ylabel("running moment")
    ax.set_title("running moment curve"
                 + (" (plateau)" if moment.get("plateau") else ""))
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "moment_curve.png"), dpi=120)
    plt.close(fig)


def _tau_outputs(tau: dict, out_dir: str) -> None:
    _write_csv(os.path.join(out_dir, "tau_tail.csv"),
               ["j", "survival", "wilson_lo", "wilson_hi"],
               zip(tau["j"], tau["survival"], tau["lo"], tau["hi"]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    js = tau["j"]
    surv = [s if s > 0 else math.nan for s in tau["survival"]]
    ax.semilogy(js, surv, marker="o", ms=3, lw=1.0, label="P(tau >= j)")
    ax.fill_between(js, [v if v > 0 else math.nan for v in tau["lo"]],
                    [v if v > 0 else math.nan for v in tau["hi"]],
                    alpha=0.25, lw=0, label="Wilson 95%")
    ax.set_xlabel("probe count j")
    ax.set_ylabel("survival")
    ax.set_title(f"emergency probe tail ({tau['rounds']} rounds)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "tau_tail.png"), dpi=120)
    plt.close(fig)


def _contraction_outputs(con: dict, out_dir: str) -> None:
    _write_csv(os.path.join(out_dir, "contraction_tail.csv"),
               ["t", "survival"], zip(con["t"], con["survival"]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ts = [t for t, s in zip(con["t"], con["survival"]) if s > 0]
    ss = [s for s in con["survival"] if s > 0]
    if ts:
        ax.loglog(ts, ss, lw=1.5, label="P(Y >= t)")
    ax.set_xlabel("contraction ratio t")
    ax.set_ylabel("survival")
    frac = con.get("fraction_le")
    title = "per-round contraction ratio tail"
    if frac is not None and not (isinstance(frac, float) and math.isnan(frac)):
        title += f"  (fraction below target: {frac:.4f})"
    ax.set_title(title)
    ax.legend() if ts else None
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "contraction_tail.png"), dpi=120)
    plt.close(fig)


def emit_report(summary: dict, out_dir: str) -> List[str]:
    """Write the text report, CSV curves, and figures; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    text = format_report(summary)
    path = os.path.join(out_dir, "report.txt")
    with open(path, "w") as fh:
        fh.write(text)
    written.append(path)
    est = summary.get("estimates", {})
    if est.get("moment"):
        _moment_outputs(est["moment"], out_dir)
        written += [os.path.join(out_dir, "moment_curve.csv"),
                    os.path.join(out_dir, "moment_curve.png")]
    if est.get("tau"):
        _tau_outputs(est["tau"], out_dir)
        written += [os.path.join(out_dir, "tau_tail.csv"),
                    os.path.join(out_dir, "tau_tail.png")]
    if est.get("contraction"):
        _contraction_outputs(est["contraction"], out_dir)
        written += [os.path.join(out_dir, "contraction_tail.csv"),
                    os.path.join(out_dir, "contraction_tail.png")]
    return written
