"""Plant/controller parameter types and derivation of the scheme constants.

The controller stabilizes X_{n+1} = a X_n + Z_n - U_n in the beta-th moment
using a quantizer with M = floor(a) + 1 bins, provided the noise has a
finite moment of some order alpha > beta.  Operation proceeds in rounds:

* a round starts at a step m where a magnitude test has certified
  |X_m| <= C_m; that step is silent (U_m = 0) and C grows to a*C + B;
* the next k - 1 steps are normal mode: the quantizer sends the bin index
  of X over [-C, C] and the bound contracts, C <- (a/M) C + B;
* step m + k is the next magnitude test.  On failure the controller zooms
  out, C <- P * C, and keeps silently probing until the test passes; the
  passing step starts the next round.

The constants are derived here:

* k: smallest round length >= 2 with (a/M)^(k-1) * a <= 1 - 3*delta, so a
  fully successful round contracts the bound;
* Delta: working moment-gap margin, (alpha - beta) / 3 by default;
* P: zoom-out factor, a * max{(a/(1-delta))^(alpha-Delta), 2^k,
  a^(k+1)/(2(a-1))}, large enough that the zoom-out tail has a finite
  (alpha - Delta)-th moment (the last term is dropped when a = 1, which is
  bumped to 1 + 1e-6 for derivation purposes only);
* B: additive design margin, user supplied or auto-scaled by the harness
  until round failures are rare.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .noise import NoiseSpec

A_UNIT_BUMP = 1e-6  # a == 1 is bumped by this much when deriving constants
K_SEARCH_CAP = 2000


class ConfigError(ValueError):
    """Raised when a configuration fails validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(v.message for v in self.violations))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    fatal: bool = True


@dataclass(frozen=True)
class InitialStateSpec:
    """Distribution of the initial state X_1 (per coordinate for vectors)."""

    kind: str = "uniform"  # point | uniform | gaussian | student_t
    value: float = 0.0
    lo: float = -1.0
    hi: float = 1.0
    sigma: float = 1.0
    nu: float = 3.0
    scale: float = 1.0

    def validate(self) -> list:
        problems = []
        if self.kind not in ("point", "uniform", "gaussian", "student_t"):
            problems.append(f"unknown initial-state kind {self.kind!r}")
        if self.kind == "uniform" and not self.lo <= self.hi:
            problems.append(f"uniform initial state needs lo <= hi, got [{self.lo}, {self.hi}]")
        if self.kind == "gaussian" and self.sigma <= 0:
            problems.append("gaussian initial state needs sigma > 0")
        if self.kind == "student_t" and (self.nu <= 0 or self.scale <= 0):
            problems.append("student_t initial state needs nu > 0 and scale > 0")
        return problems

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "point":
            return np.full(size, self.value) if size is not None else self.value
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=size)
        if self.kind == "gaussian":
            return self.sigma * rng.standard_normal(size)
        return self.scale * rng.standard_t(self.nu, size=size)

    def bound(self) -> float:
        if self.kind == "point":
            return abs(self.value)
        if self.kind == "uniform":
            return max(abs(self.lo), abs(self.hi))
        return math.inf


EVERY_STEP_PATTERN = (True,)


@dataclass(frozen=True)
class TransmissionSchedule:
    """Steps at which the channel is available, as a periodic pattern.

    A schedule is strongly p-dense with witness window N when every window
    of N consecutive steps contains strictly more than p*N scheduled steps.
    ``every_step()`` is the degenerate schedule of the basic scheme.
    """

    kind: str = "every_step"  # every_step | p_dense
    p: float = 1.0
    N: int = 1
    pattern: tuple = EVERY_STEP_PATTERN

    @staticmethod
    def every_step() -> "TransmissionSchedule":
        return TransmissionSchedule()

    @staticmethod
    def p_dense(p: float, N: int, pattern: Sequence[int]) -> "TransmissionSchedule":
        return TransmissionSchedule(kind="p_dense", p=p, N=N,
                                    pattern=tuple(bool(b) for b in pattern))

    def validate(self) -> list:
        problems = []
        if self.kind not in ("every_step", "p_dense"):
            problems.append(f"unknown schedule kind {self.kind!r}")
            return problems
        if self.kind == "every_step":
            return problems
        if not self.pattern or not any(self.pattern):
            problems.append("p_dense schedule needs a non-empty pattern with members")
            return problems
        if not (0 < self.p < 1):
            problems.append(f"p must be in (0, 1), got {self.p}")
        if self.N < 1:
            problems.append(f"window N must be >= 1, got {self.N}")
        if not problems and not self.is_strongly_dense():
            problems.append(
                f"pattern is not strongly {self.p}-dense with window {self.N}: "
                f"some window holds only {self.window_min_count(self.N)} <= "
                f"{self.p * self.N:g} members"
            )
        return problems

    def is_every_step(self) -> bool:
        return self.kind == "every_step"

    def scheduled(self, n: int) -> bool:
        """Whether 1-based step n is a transmission step."""
        return self.pattern[(n - 1) % len(self.pattern)]

    def mask(self, start: int, count: int) -> np.ndarray:
        idx = (np.arange(start - 1, start - 1 + count)) % len(self.pattern)
        return np.asarray(self.pattern, dtype=bool)[idx]

    def density(self) -> float:
        return sum(self.pattern) / len(self.pattern)

    def window_min_count(self, N: int) -> int:
        L = len(self.pattern)
        ext = list(self.pattern) * (2 + N // L)
        return min(sum(ext[i:i + N]) for i in range(L))

    def is_strongly_dense(self) -> bool:
        return self.window_min_count(self.N) > self.p * self.N

    def member_phases(self) -> list:
        return [i for i, b in enumerate(self.pattern) if b]

    def max_gap(self) -> int:
        """Largest number of consecutive non-scheduled steps (periodic)."""
        if self.is_every_step():
            return 0
        phases = self.member_phases()
        L = len(self.pattern)
        gaps = []
        for i, ph in enumerate(phases):
            nxt = phases[(i + 1) % len(phases)]
            gaps.append((nxt - ph - 1) % L if len(phases) > 1 else L - 1)
        return max(gaps)

    def worst_span(self, count: int) -> int:
        """Worst-case number of real steps from a scheduled step (inclusive)
        to the ``count``-th following scheduled step (exclusive)."""
        if self.is_every_step():
            return count
        phases = self.member_phases()
        L = len(self.pattern)
        per = len(phases)
        worst = 0
        for i in range(per):
            full, rem = divmod(count, per)
            j = i + rem
            end_phase = phases[j % per] + L * (j // per) + L * full
            worst = max(worst, end_phase - phases[i])
        return worst


@dataclass(frozen=True)
class SystemModel:
    """Plant description: scalar gain a or a square matrix A (with optional
    control matrix), plus noise and initial-state distributions."""

    gain: Union[float, np.ndarray]
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    initial: InitialStateSpec = field(default_factory=InitialStateSpec)
    control_matrix: Optional[np.ndarray] = None

    def is_vector(self) -> bool:
        return isinstance(self.gain, np.ndarray) and np.ndim(self.gain) == 2

    def dimension(self) -> int:
        return self.gain.shape[0] if self.is_vector() else 1

    def intrinsic_growth(self) -> float:
        """a for scalars; the product of unstable eigenvalue moduli for matrices."""
        if not self.is_vector():
            return float(abs(self.gain))
        eig = np.linalg.eigvals(np.asarray(self.gain, dtype=float))
        return float(np.prod(np.maximum(1.0, np.abs(eig))))


def min_bins(model_or_gain) -> int:
    """Minimum quantizer bin count for moment stability: floor(a) + 1.

    For matrices, a is the product of the unstable eigenvalue moduli.
    """
    if isinstance(model_or_gain, SystemModel):
        a = model_or_gain.intrinsic_growth()
    elif isinstance(model_or_gain, np.ndarray) and np.ndim(model_or_gain) == 2:
        a = SystemModel(gain=model_or_gain).intrinsic_growth()
    else:
        a = float(abs(model_or_gain))
    return int(math.floor(a)) + 1


def derive_moment_gap(alpha: float, beta: float) -> float:
    """Working margin Delta = (alpha - beta) / 3."""
    if not beta < alpha:
        raise ValueError(f"need beta < alpha, got beta={beta}, alpha={alpha}")
    if math.isinf(alpha):
        return 1.0  # bounded-ish noise: any fixed margin works
    return (alpha - beta) / 3.0


def _bump_unit(a: float) -> float:
    return a if a > 1.0 + A_UNIT_BUMP / 2 else 1.0 + A_UNIT_BUMP


def derive_round_length(a: float, M: int, delta: float,
                        schedule: Optional[TransmissionSchedule] = None) -> int:
    """Smallest round length k >= 2 making a full round contract the bound.

    Every-step schedule: (a/M)^(k-1) * a <= 1 - 3*delta.  For a p-dense
    schedule the round is stretched over non-scheduled steps, each of which
    grows the bound by a factor a; the worst starting phase of the periodic
    pattern is accounted for exactly.
    """
    if not 0 < delta < 1.0 / 3.0:
        raise ValueError(f"delta must be in (0, 1/3), got {delta}")
    a = _bump_unit(float(a))
    if a / M >= 1.0:
        raise ValueError(f"need a/M < 1 for round contraction, got a={a}, M={M}")
    target = 1.0 - 3.0 * delta
    if schedule is None or schedule.is_every_step():
        for k in range(2, K_SEARCH_CAP):
            if (a / M) ** (k - 1) * a <= target:
                return k
        raise ValueError("no feasible round length found")
    if math.log(M) * schedule.density() <= math.log(a):
        raise ValueError(
            f"schedule density {schedule.density():.3f} too low: need "
            f"M^density > a (M={M}, a={a})"
        )
    for k in range(2, K_SEARCH_CAP):
        # span covers the silent start, k-1 controlled steps, and skipped steps
        span = schedule.worst_span(k)
        silent = span - (k - 1)
        log_factor = silent * math.log(a) + (k - 1) * math.log(a / M)
        if log_factor <= math.log(target):
            return k
    raise ValueError("no feasible round length found for this schedule")


def derive_probe_factor(a: float, k: int, delta: float, alpha: float,
                        Delta: float,
                        schedule: Optional[TransmissionSchedule] = None) -> float:
    """Zoom-out factor P = a * max of the three tail/coverage terms.

    The third term a^(k+1)/(2(a-1)) is dropped for a = 1 (bumped gain).
    For a p-dense schedule the factor is enlarged by a^max_gap to cover the
    growth between consecutive probe opportunities.
    """
    raw_a = float(a)
    a = _bump_unit(raw_a)
    if math.isinf(alpha):
        tail = (a / (1.0 - delta)) ** 2  # any positive exponent; bounded noise
    else:
        tail = (a / (1.0 - delta)) ** (alpha - Delta)
    terms = [tail, 2.0 ** k]
    if raw_a > 1.0 + A_UNIT_BUMP / 2:
        terms.append(a ** (k + 1) / (2.0 * (a - 1.0)))
    P = a * max(terms)
    if schedule is not None and not schedule.is_every_step():
        P *= a ** schedule.max_gap()
    return P


@dataclass(frozen=True)
class ControllerConfig:
    """Fully pinned controller constants for one experiment."""

    M: int
    k: int
    delta: float
    Delta: float
    B: float
    P: float
    alpha: float
    beta: float
    delay: int = 0
    schedule: TransmissionSchedule = field(default_factory=TransmissionSchedule.every_step)
    magnitude_tests: bool = True  # False: roundless sign-feedback variant (bounded noise)
    c1: Optional[float] = None    # initial bound C_1; None derives a default

    def initial_bound(self, a: float) -> float:
        if self.c1 is not None:
            return self.c1
        if a < self.M:
            return max(1.0, self.B / (1.0 - a / self.M))
        return max(1.0, self.B)


def derive_constants(model: SystemModel, *, beta: float,
                     alpha: Optional[float] = None,
                     M: Optional[int] = None,
                     k: Optional[int] = None,
                     delta: float = 0.05,
                     Delta: Optional[float] = None,
                     P: Optional[float] = None,
                     B: float = 1.0,
                     delay: int = 0,
                     schedule: Optional[TransmissionSchedule] = None,
                     magnitude_tests: bool = True,
                     c1: Optional[float] = None) -> ControllerConfig:
    """Fill in unset constants from the plant and moment targets (scalar)."""
    if model.is_vector():
        raise ValueError("derive_constants handles scalar plants; see the vector module")
    a = model.intrinsic_growth()
    if alpha is None:
        alpha = model.noise.declared_alpha()
    if M is None:
        M = min_bins(a)
    if schedule is None:
        schedule = TransmissionSchedule.every_step()
    if Delta is None:
        Delta = derive_moment_gap(alpha, beta)
    if k is None:
        if a / M < 1.0:
            k = derive_round_length(a, M, delta, schedule)
        else:
            k = 2  # converse-violating demo config; rounds cannot contract
    if P is None:
        P = derive_probe_factor(a, k, delta, alpha, Delta, schedule)
    return ControllerConfig(M=M, k=k, delta=delta, Delta=Delta, B=B, P=P,
                            alpha=alpha, beta=beta, delay=delay,
                            schedule=schedule, magnitude_tests=magnitude_tests,
                            c1=c1)


def validate_config(model: SystemModel, config: ControllerConfig) -> list:
    """Check every configuration invariant; returns the full violation list.

    Violations with ``fatal=False`` are converse-violating or demo settings
    that the simulator still accepts (e.g. M below floor(a)+1 used to
    demonstrate instability).
    """
    v: list = []

    def err(code, msg):
        v.append(Violation(code, msg, fatal=True))

    def warn(code, msg):
        v.append(Violation(code, msg, fatal=False))

    for msg in model.noise.validate():
        err("NOISE_INVALID", msg)
    for msg in model.initial.validate():
        err("INITIAL_INVALID", msg)
    for msg in config.schedule.validate():
        err("SCHEDULE_INVALID", msg)

    if config.M < 1:
        err("M_NOT_POSITIVE", f"bin count must be >= 1, got {config.M}")
        return v
    if not config.beta < config.alpha:
        err("MOMENT_ORDER", f"need beta < alpha, got beta={config.beta}, alpha={config.alpha}")
    if not 0 < config.delta < 1.0 / 3.0:
        err("DELTA_RANGE", f"delta must be in (0, 1/3), got {config.delta}")
    if math.isfinite(config.alpha):
        if not 0 < config.Delta <= max(config.alpha - config.beta, 0):
            err("DELTA_GAP", f"Delta must be in (0, alpha - beta], got {config.Delta}")
    elif config.Delta <= 0:
        err("DELTA_GAP", f"Delta must be positive, got {config.Delta}")
    if config.k < 2:
        err("ROUND_LENGTH", f"round length k must be >= 2, got {config.k}")
    if config.delay < 0:
        err("DELAY_NEGATIVE", f"delay must be >= 0, got {config.delay}")
    if config.delay > 0 and not config.schedule.is_every_step():
        err("DELAY_SCHEDULE_COMBINED",
            "combining observation delay with a partial schedule is not supported")
    if config.B <= 0:
        if model.noise.is_bounded() and model.noise.b0 == 0.0 and config.B == 0.0:
            warn("B_ZERO", "B = 0 accepted only because the noise is identically zero")
        else:
            err("B_NOT_POSITIVE", f"design margin B must be > 0, got {config.B}")
    elif config.B < 1.0:
        warn("B_BELOW_ONE", f"design margin B = {config.B} below 1; guarantees assume B >= 1")

    if model.is_vector():
        A = np.asarray(model.gain, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            err("GAIN_SHAPE", f"matrix gain must be square, got shape {A.shape}")
            return v
        if model.control_matrix is not None:
            Bc = np.asarray(model.control_matrix, dtype=float)
            if Bc.ndim != 2 or Bc.shape[0] != A.shape[0]:
                err("CONTROL_SHAPE",
                    f"control matrix must have {A.shape[0]} rows, got shape {Bc.shape}")
            else:
                from .vector import stabilizable_decompose
                try:
                    stabilizable_decompose(A, Bc)
                except ValueError as e:
                    err("NOT_STABILIZABLE", str(e))

    a = model.intrinsic_growth()
    needed = min_bins(a)
    if config.M < needed:
        warn("M_BELOW_MINIMUM",
             f"M = {config.M} below floor(a)+1 = {needed}: converse-violating, "
             "no stabilizing scheme exists; simulation allowed for instability demos")

    contraction_ok = True
    if config.magnitude_tests and 0 < config.delta < 1.0 / 3.0 and config.k >= 2:
        try:
            kmin = derive_round_length(a, config.M, config.delta, config.schedule)
            if config.k < kmin:
                contraction_ok = False
        except ValueError:
            contraction_ok = False
        if not contraction_ok:
            msg = (f"round length k = {config.k} does not contract: need "
                   f"(a/M)^(k-1) * a <= 1 - 3*delta (a={a:g}, M={config.M}, "
                   f"delta={config.delta})")
            if config.M < needed:
                warn("ROUND_NO_CONTRACTION", msg + " (expected for the converse demo)")
            else:
                err("ROUND_NO_CONTRACTION", msg)

    if not config.schedule.is_every_step():
        if config.M ** config.schedule.p <= a:
            warn("SCHEDULE_RATE_DEFICIT",
                 f"M^p = {config.M ** config.schedule.p:.4g} <= a = {a:g}: below the "
                 "minimum rate for this schedule density; instability expected")

    a_eff = _bump_unit(a)
    if config.P <= a_eff and config.M >= needed:
        err("PROBE_TOO_SMALL", f"probe factor P = {config.P} must exceed a = {a:g}")
    elif config.magnitude_tests and config.M >= needed and 0 < config.delta < 1.0 / 3.0 \
            and math.isfinite(config.alpha):
        ref = derive_probe_factor(a, config.k, config.delta, config.alpha,
                                  config.Delta, config.schedule)
        if config.P < ref * (1.0 - 1e-12):
            warn("PROBE_BELOW_DERIVED",
                 f"P = {config.P:g} below the derived zoom-out factor {ref:g}; "
                 "the zoom-out tail bound is not guaranteed")

    if not config.magnitude_tests:
        if not model.noise.is_bounded() or model.noise.b0 > config.B:
            warn("ROUNDLESS_UNBOUNDED",
                 "the roundless variant is certified only for |Z| <= B")

    return v


def checked_config(model: SystemModel, config: ControllerConfig,
                   allow_nonfatal: bool = True) -> ControllerConfig:
    """Validate and return the config, raising ConfigError on fatal problems."""
    violations = validate_config(model, config)
    fatal = [x for x in violations if x.fatal or not allow_nonfatal]
    if fatal:
        raise ConfigError(fatal)
    return config
