"""Estimators, pathwise certificates, and converse calculators.

Empirical side: moment-curve estimation with a plateau verdict, the probe
count (tau) tail with Wilson intervals, and per-round contraction ratios.
Certificate side: deterministic inequalities that every trace produced by
the scalar machine must satisfy path by path; a single violation indicates
an implementation bug, not bad luck.  Converse side: the entropy-power
recursion and the quantized-density probability bound that show M <= a
bins cannot stabilize the plant.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .batch import BatchResult
from .core import ControllerConfig, SystemModel
from .scalar import TrajectoryTrace


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


# ---------------------------------------------------------------------------
# moment curve

@dataclass
class MomentEstimate:
    grid: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    beta: float
    ntraj: int
    diverged: int
    plateau: bool
    slope: float  # least-squares slope of log(mean) vs n, NaN if undefined


def _plateau_verdict(grid: np.ndarray, mean: np.ndarray) -> bool:
    """Stationarity heuristic: the maximum of the last quarter of the curve
    must not exceed 1.5x the maximum over the middle half."""
    m = len(grid)
    if m < 8:
        return False
    q = m // 4
    mid = mean[q: 3 * q]
    last = mean[3 * q:]
    if not (np.isfinite(mid).all() and np.isfinite(last).all()):
        return False
    ref = float(np.max(mid))
    if ref <= 0:
        return bool(np.max(last) <= 0)
    return bool(np.max(last) <= 1.5 * ref)


def _growth_slope(grid: np.ndarray, mean: np.ndarray) -> float:
    ok = np.isfinite(mean) & (mean > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(grid[ok].astype(float), np.log(mean[ok]), 1)[0])


def estimate_beta_moment(data: Union[BatchResult, Sequence[TrajectoryTrace]],
                         beta: Optional[float] = None,
                         grid: Optional[np.ndarray] = None) -> MomentEstimate:
    """Running beta-moment curve E|X_n|^beta over a step grid.

    Accepts a streamed batch result or a list of full traces.  Diverged
    trajectories are counted and excluded from the curve (their presence
    fails the stability criteria separately).
    """
    if isinstance(data, BatchResult):
        if beta is not None and beta != data.beta:
            raise ValueError(f"batch was accumulated with beta={data.beta}")
        beta = data.beta
        grid = data.grid
        samples = data.moment_samples
        diverged = data.diverged
        ntraj = data.ntraj
    else:
        traces = list(data)
        if beta is None:
            raise ValueError("beta is required for trace input")
        horizon = max(len(t) for t in traces)
        if grid is None:
            from .batch import default_grid
            grid = default_grid(horizon)
        grid = np.asarray(grid, dtype=np.int64)
        samples = np.full((len(traces), len(grid)), np.nan)
        for i, tr in enumerate(traces):
            xs = np.asarray(tr.x).reshape(len(tr), -1)
            mag = np.linalg.norm(xs, axis=1) if xs.shape[1] > 1 else np.abs(xs[:, 0])
            ok = grid <= len(tr)
            samples[i, ok] = mag[grid[ok] - 1] ** beta
        diverged = sum(t.diverged for t in traces)
        ntraj = len(traces)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        # columns where every trajectory has diverged are all-NaN slices
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(samples, axis=0)
        cnt = np.sum(np.isfinite(samples), axis=0)
        sd = np.nanstd(samples, axis=0, ddof=1)
    se = np.where(cnt > 1, sd / np.sqrt(np.maximum(cnt, 1)), np.nan)
    return MomentEstimate(grid=grid, mean=mean, se=se, beta=beta, ntraj=ntraj,
                          diverged=diverged,
                          plateau=_plateau_verdict(grid, mean) and diverged == 0,
                          slope=_growth_slope(grid, mean))


# ---------------------------------------------------------------------------
# tau tail

@dataclass
class TauTail:
    j: np.ndarray           # probe counts 0..jmax
    survival: np.ndarray    # P(tau >= j)
    lo: np.ndarray
    hi: np.ndarray
    counts_at_least: np.ndarray
    rounds: int
    tau_max: int
    slope: float            # log-survival slope over well-sampled j
    slope_bound: float      # theoretical requirement, NaN if not applicable
    geometric: bool         # slope <= slope_bound

    def survival_nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.survival) <= 1e-15))


def _tau_counts_from_traces(traces: Sequence[TrajectoryTrace]) -> np.ndarray:
    taus: List[int] = []
    for tr in traces:
        taus.extend(r.tau for r in tr.rounds)
    if not taus:
        return np.zeros(1, dtype=np.int64)
    return np.bincount(np.asarray(taus, dtype=np.int64))


def tau_tail(data: Union[BatchResult, Sequence[TrajectoryTrace]],
             config: Optional[ControllerConfig] = None,
             a: Optional[float] = None,
             min_count: int = 50) -> TauTail:
    """Empirical survival function of the emergency probe count tau.

    The zoom-out analysis predicts a geometric tail: the log-survival slope
    over well-sampled j must be at most -(alpha - Delta)/2 * log(P/a)
    (a factor-2 safety margin on the theoretical rate).
    """
    if isinstance(data, BatchResult):
        counts = data.tau_counts
        tau_max = data.tau_max
    else:
        counts = _tau_counts_from_traces(data)
        tau_max = len(counts) - 1
    rounds = int(counts.sum())
    at_least = counts[::-1].cumsum()[::-1]
    surv = at_least / max(rounds, 1)
    lo = np.empty_like(surv)
    hi = np.empty_like(surv)
    for idx, s in enumerate(at_least):
        lo[idx], hi[idx] = wilson_interval(int(s), rounds)
    slope = math.nan
    bound = math.nan
    geometric = False
    well = np.where(at_least >= min_count)[0]
    if config is not None and a is not None and math.isfinite(config.alpha):
        bound = -0.5 * (config.alpha - config.Delta) * math.log(config.P / a)
    if len(well) >= 2:
        js = well.astype(float)
        slope = float(np.polyfit(js, np.log(surv[well]), 1)[0])
        if not math.isnan(bound):
            geometric = slope <= bound
    elif len(well) >= 1 and rounds > 0 and at_least[-1] == at_least[0]:
        # tau never exceeded 0; a bounded-noise run — trivially geometric
        slope = -math.inf
        geometric = True
    return TauTail(j=np.arange(len(counts)), survival=surv, lo=lo, hi=hi,
                   counts_at_least=at_least, rounds=rounds, tau_max=tau_max,
                   slope=slope, slope_bound=bound, geometric=geometric)


# ---------------------------------------------------------------------------
# per-round contraction ratios

@dataclass
class ContractionStats:
    fraction_le: float      # fraction of rounds with Y <= 1 - 3*delta
    total: int
    t: np.ndarray           # thresholds
    survival: np.ndarray    # P(Y >= t)
    slope: float            # log-log tail slope over t > 1, NaN if sparse
    expected_exponent: float  # -(alpha - Delta)


def round_ratios(trace: TrajectoryTrace, config: ControllerConfig,
                 a: float) -> np.ndarray:
    """Per-round contraction ratios Y of one trace (rounds 2 onward).

    Y_r = (1/(1-delta))^tau_r * Mstar_r / (Mstar_{r-1} + B/((1-a/M)(1-3delta)))
    where Mstar_r is the max of the round's test-phase |X| values and its
    final bound.  A zoom-in round with tau = 0 satisfies Y <= 1 - 3*delta.
    """
    am = a / config.M
    three_delta = 1.0 - 3.0 * config.delta
    if am < 1.0 and three_delta > 0:
        denom_const = config.B / ((1.0 - am) * three_delta)
    else:
        denom_const = config.B
    zb = 1.0 / (1.0 - config.delta)
    out = []
    for prev, cur in zip(trace.rounds, trace.rounds[1:]):
        out.append(zb ** cur.tau * cur.mstar / (prev.mstar + denom_const))
    return np.asarray(out)


def round_contraction_stats(data: Union[BatchResult, Sequence[TrajectoryTrace]],
                            config: ControllerConfig,
                            a: Optional[float] = None) -> ContractionStats:
    three_delta = 1.0 - 3.0 * config.delta
    if isinstance(data, BatchResult):
        total = data.y_total
        frac = data.y_le_count / total if total else math.nan
        edges = data.y_edges
        above = data.y_counts[1:][::-1].cumsum()[::-1]  # counts with Y >= edge
        t = edges
        surv = above / max(total, 1)
    else:
        if a is None:
            raise ValueError("trace input needs the plant gain a")
        ys = np.concatenate([round_ratios(tr, config, a) for tr in data]) \
            if data else np.empty(0)
        total = len(ys)
        frac = float(np.mean(ys <= three_delta)) if total else math.nan
        t = np.logspace(-6, 10, 321)
        surv = np.array([(ys >= ti).mean() for ti in t]) if total else np.zeros_like(t)
    slope = math.nan
    sel = (t > 1.0) & (surv * max(total, 1) >= 50) & (surv > 0)
    if sel.sum() >= 3:
        slope = float(np.polyfit(np.log(t[sel]), np.log(surv[sel]), 1)[0])
    return ContractionStats(fraction_le=frac, total=total, t=t, survival=surv,
                            slope=slope,
                            expected_exponent=-(config.alpha - config.Delta)
                            if math.isfinite(config.alpha) else -math.inf)


# ---------------------------------------------------------------------------
# pathwise certificates

@dataclass
class CertificateReport:
    name: str
    checked: int            # inequality instances checked
    rounds: int
    violations: int
    worst_margin: float     # min of (rhs - lhs) / rhs over all checks
    details: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.checked > 0


def _certificate_applicable(trace: TrajectoryTrace, config: ControllerConfig,
                            a: float, name: str) -> None:
    if not config.magnitude_tests:
        raise ValueError(f"{name} applies to the round-based scheme only")
    if config.delay != 0 or not config.schedule.is_every_step():
        raise ValueError(f"{name} applies to undelayed every-step traces only")
    if not 1.0 < a < 2.0:
        raise ValueError(f"{name} requires a in (1, 2), got {a}")


def check_lemma_max(trace: TrajectoryTrace, config: ControllerConfig,
                    a: float, rtol: float = 1e-9) -> CertificateReport:
    """Deterministic excursion bound over each round's test phase.

    For a round starting at m with probe count tau, for every 0 <= j <= tau:

        max(|X_{m+1}|, ..., |X_{m+k+j}|, C_{m+k+j})
          <= P a^(k+j) (2 C_m + a B / ((2-a)(a-1))
                        + sum_{l=0}^{k+j-1} a^(-l-1) |Z_{m+l}|)

    This holds for every realization when 1 < a < 2; violations mean the
    machine deviates from its defining recursions.
    """
    _certificate_applicable(trace, config, a, "check_lemma_max")
    P, B, k = config.P, config.B, config.k
    const = a * B / ((2.0 - a) * (a - 1.0))
    absx = np.abs(trace.x)
    absz = np.abs(trace.z)
    checked = violations = 0
    worst = math.inf
    details: List[str] = []
    rounds_used = 0
    for rec in trace.rounds:
        m = rec.start
        end = m + k + rec.tau
        if end > len(trace):
            continue
        rounds_used += 1
        seg = absx[m: end]              # |X_{m+1}| .. |X_{m+k+tau}|
        prefmax = np.maximum.accumulate(seg)
        zs = absz[m - 1: end - 1]       # |Z_m| .. |Z_{m+k+tau-1}|
        zsum = np.cumsum(zs * a ** (-np.arange(1, len(zs) + 1, dtype=float)))
        for j in range(rec.tau + 1):
            lhs = max(prefmax[k + j - 1], trace.c[m + k + j - 1])
            rhs = P * a ** (k + j) * (2.0 * rec.c_start + const + zsum[k + j - 1])
            checked += 1
            margin = (rhs - lhs) / rhs if rhs > 0 else -math.inf
            worst = min(worst, margin)
            if lhs > rhs * (1.0 + rtol):
                violations += 1
                if len(details) < 10:
                    details.append(f"round at step {m}, j={j}: {lhs:g} > {rhs:g}")
    return CertificateReport("lemma_max", checked, rounds_used, violations,
                             worst, details)


def check_normal_bound(trace: TrajectoryTrace, config: ControllerConfig,
                       a: float, rtol: float = 1e-9) -> CertificateReport:
    """Deterministic in-round bound on the controlled steps.

    For each round starting at m, for 1 <= i <= k-1:

        |X_{m+i}| <= |X_{m+k}| + (a/M)^(-k) C_m + a B / ((2-a)(a-1))
                      + sum_{l=0}^{k-i-1} a^(-l-1) |Z_{m+i+l}|
    """
    _certificate_applicable(trace, config, a, "check_normal_bound")
    B, k, M = config.B, config.k, config.M
    const = (a / M) ** (-k) * 1.0, a * B / ((2.0 - a) * (a - 1.0))
    cmcoef, bconst = const
    absx = np.abs(trace.x)
    absz = np.abs(trace.z)
    checked = violations = 0
    worst = math.inf
    details: List[str] = []
    rounds_used = 0
    for rec in trace.rounds:
        m = rec.start
        if m + k > len(trace):
            continue
        rounds_used += 1
        xk = absx[m + k - 1]
        for i in range(1, k):
            zsum = 0.0
            for l in range(0, k - i):
                zsum += a ** (-l - 1) * absz[m + i + l - 1]
            lhs = absx[m + i - 1]
            rhs = xk + cmcoef * rec.c_start + bconst + zsum
            checked += 1
            margin = (rhs - lhs) / rhs if rhs > 0 else -math.inf
            worst = min(worst, margin)
            if lhs > rhs * (1.0 + rtol):
                violations += 1
                if len(details) < 10:
                    details.append(f"round at step {m}, i={i}: {lhs:g} > {rhs:g}")
    return CertificateReport("normal_bound", checked, rounds_used, violations,
                             worst, details)


@dataclass
class BoundedCertificate:
    ok: bool
    state_within_bound: bool
    bound_monotone: bool
    c_limit: float
    final_c: float
    max_ratio: float        # max |X_n| / C_n
    note: str = ""


def bounded_noise_certificate(trace: TrajectoryTrace, model: SystemModel,
                              config: ControllerConfig) -> BoundedCertificate:
    """Deterministic certificate for |Z| <= B: |X_n| <= C_n at every step,
    and the bound is nonincreasing between round boundaries with limit
    B / (1 - a/M) (attained exactly by the roundless variant)."""
    a = model.intrinsic_growth()
    am = a / config.M
    c_limit = config.B / (1.0 - am) if am < 1.0 else math.inf
    if np.max(np.abs(trace.z)) > config.B + 1e-12:
        return BoundedCertificate(False, False, False, c_limit,
                                  float(trace.c[-1]), math.inf,
                                  note="noise exceeded the design margin B")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(trace.x) / trace.c
    within = bool(np.all(np.abs(trace.x) <= trace.c * (1 + 1e-12)))
    dc = np.diff(trace.c)
    if config.magnitude_tests:
        # C may jump only at round starts (a passed test grows it by a*C+B)
        from .scalar import Mode
        jump_ok = trace.mode[:-1] != int(Mode.NORMAL)
        monotone = bool(np.all((dc <= 1e-9 * np.abs(trace.c[:-1])) | jump_ok))
    else:
        monotone = bool(np.all(dc <= 1e-9 * np.abs(trace.c[:-1]))) \
            if trace.c[0] >= c_limit else True
    return BoundedCertificate(ok=within and monotone,
                              state_within_bound=within,
                              bound_monotone=monotone,
                              c_limit=c_limit, final_c=float(trace.c[-1]),
                              max_ratio=float(np.nanmax(ratio)))


# ---------------------------------------------------------------------------
# converse calculators

@dataclass
class EpiResult:
    sequence: np.ndarray
    diverges: bool
    rate: float             # per-step factor a^2 e^(-2r)


def epi_lower_bound(a: float, M: int, noise_entropy_power: float,
                    initial_entropy_power: float, horizon: int) -> EpiResult:
    """Entropy-power lower bound on the state under rate r = ln M.

    N_t = a^2 e^(-2r) N_{t-1} + N_Z.  The sequence diverges exactly when
    M <= a (ties diverge when N_Z > 0), so no controller using fewer than
    floor(a) + 1 bins can keep the second moment bounded.
    """
    if M < 1:
        raise ValueError(f"bin count must be >= 1, got {M}")
    if noise_entropy_power < 0 or initial_entropy_power < 0:
        raise ValueError("entropy powers must be nonnegative")
    rho = (a / M) ** 2
    seq = np.empty(horizon)
    n = initial_entropy_power
    for t in range(horizon):
        n = rho * n + noise_entropy_power
        seq[t] = n
    if rho > 1.0:
        diverges = initial_entropy_power > 0 or noise_entropy_power > 0
    elif rho == 1.0:
        diverges = noise_entropy_power > 0
    else:
        diverges = False
    return EpiResult(sequence=seq, diverges=diverges, rate=rho)


@dataclass
class WeakConverseBound:
    value: float
    raw: float
    vacuous: bool


def weak_converse_bound(M: int, a: float, f_max: float,
                        interval_length: float, n: int) -> WeakConverseBound:
    """Upper bound on P(X_{n+1} lands in a fixed interval I) under M bins.

    With an initial density bounded by f_max, after n steps the state
    density on any interval is at most M^n a^(-n) f_max, so the probability
    of landing in I is at most M^n a^(-n) f_max |I|, clamped to [0, 1].
    When M < a this tends to 0: the state escapes every bounded set with
    probability one.  The bound is vacuous when M >= a.
    """
    if M < 1:
        raise ValueError(f"bin count must be >= 1, got {M}")
    if f_max <= 0 or interval_length <= 0 or n < 0:
        raise ValueError("need f_max > 0, |I| > 0, n >= 0")
    raw = (M / a) ** n * f_max * interval_length
    return WeakConverseBound(value=min(1.0, raw), raw=raw,
                             vacuous=M >= a or raw >= 1.0)
