"""Noise families with declared moment orders.

Each family produces an i.i.d. (or windowed stationary) real-valued noise
process together with a declared moment order ``alpha``: the largest order
the user certifies to be finite, E|Z|^alpha < inf.  The controller's
derived constants depend on ``alpha`` and on the target moment ``beta``,
so a wrong declaration silently voids the stability guarantee; the
``verify_alpha_moment`` checker estimates the moment empirically and flags
declarations that look infinite.

The correlated Gaussian family is reduced to the i.i.d. case by adding an
independent complement process: if the covariance of any finite window is
dominated (in the PSD order) by lam * I, then Z' ~ N(0, lam * I - cov)
independent of Z makes Z + Z' i.i.d. N(0, lam).  A valid ``lam`` is the
maximum row l1-norm of the covariance, see ``ell1_spectral_bound``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import toeplitz

FAMILIES = (
    "bounded_uniform",
    "gaussian",
    "student_t",
    "symmetric_pareto",
    "correlated_gaussian",
)


@dataclass(frozen=True)
class NoiseSpec:
    """Declaration of the noise process driving the plant.

    ``alpha`` is the declared finite moment order.  When omitted, a
    conservative family default is used (inf for bounded, 4 for Gaussian,
    nu - 1 for Student-t, alpha0 - 0.5 for symmetric Pareto).
    """

    family: str = "bounded_uniform"
    b0: float = 1.0            # bounded_uniform half-width, Z ~ Unif[-b0, b0]
    sigma: float = 1.0         # gaussian standard deviation
    nu: float = 3.0            # student_t degrees of freedom
    scale: float = 1.0         # student_t / pareto scale
    alpha0: float = 2.5        # pareto tail index, P(|Z| > t) = (scale/t)^alpha0
    cov_coeffs: tuple = (1.0,)  # stationary covariances (c_0, c_1, ...) for correlated_gaussian
    lam: Optional[float] = None  # spectral dominance bound; default: l1 row bound
    window: int = 64           # window length for correlated_gaussian factorization
    alpha: Optional[float] = None  # declared moment order

    def validate(self) -> list:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"unknown noise family {self.family!r}")
            return problems
        if self.family == "bounded_uniform" and self.b0 < 0:
            problems.append(f"bounded_uniform half-width must be >= 0, got {self.b0}")
        if self.family == "gaussian" and self.sigma <= 0:
            problems.append(f"gaussian sigma must be > 0, got {self.sigma}")
        if self.family == "student_t" and self.nu <= 0:
            problems.append(f"student_t nu must be > 0, got {self.nu}")
        if self.family in ("student_t", "symmetric_pareto") and self.scale <= 0:
            problems.append(f"scale must be > 0, got {self.scale}")
        if self.family == "symmetric_pareto" and self.alpha0 <= 0:
            problems.append(f"pareto tail index must be > 0, got {self.alpha0}")
        if self.family == "correlated_gaussian":
            if len(self.cov_coeffs) == 0 or self.cov_coeffs[0] < 0:
                problems.append("correlated_gaussian needs covariances with c_0 >= 0")
            if self.window < max(2, len(self.cov_coeffs)):
                problems.append(
                    f"window {self.window} shorter than covariance memory {len(self.cov_coeffs)}"
                )
            lam = self.spectral_bound()
            cov = self.cov_section(self.window)
            try:
                whitening_complement(cov, lam)
            except ValueError as err:
                problems.append(f"whitening infeasible: {err}")
        a = self.declared_alpha()
        if not (a > 0):
            problems.append(f"declared alpha must be > 0, got {a}")
        if self.family == "student_t" and self.alpha is not None and self.alpha >= self.nu:
            problems.append(
                f"student_t with nu={self.nu} has no finite moment of order {self.alpha}"
            )
        if self.family == "symmetric_pareto" and self.alpha is not None and self.alpha >= self.alpha0:
            problems.append(
                f"symmetric_pareto with tail index {self.alpha0} has no finite moment "
                f"of order {self.alpha}"
            )
        return problems

    def declared_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        if self.family == "bounded_uniform":
            return math.inf
        if self.family == "gaussian":
            return 4.0
        if self.family == "student_t":
            return max(self.nu - 1.0, 0.5)
        if self.family == "symmetric_pareto":
            return max(self.alpha0 - 0.5, 0.25)
        return 4.0  # correlated_gaussian reduces to i.i.d. gaussian

    def is_bounded(self) -> bool:
        return self.family == "bounded_uniform"

    def bound(self) -> float:
        return self.b0 if self.is_bounded() else math.inf

    def cov_section(self, n: int) -> np.ndarray:
        """Covariance matrix of a length-n window of the stationary process."""
        c = np.zeros(n)
        m = min(n, len(self.cov_coeffs))
        c[:m] = self.cov_coeffs[:m]
        return toeplitz(c)

    def spectral_bound(self) -> float:
        if self.lam is not None:
            return self.lam
        # l1 row bound on the doubly-infinite covariance operator
        c = np.asarray(self.cov_coeffs, dtype=float)
        return float(c[0] + 2.0 * np.abs(c[1:]).sum())

    def effective_variance(self) -> float:
        """Variance of a single sample of the effective (whitened) process."""
        if self.family == "bounded_uniform":
            return self.b0 ** 2 / 3.0
        if self.family == "gaussian":
            return self.sigma ** 2
        if self.family == "student_t":
            if self.nu > 2:
                return self.scale ** 2 * self.nu / (self.nu - 2.0)
            return math.inf
        if self.family == "symmetric_pareto":
            if self.alpha0 > 2:
                return self.scale ** 2 * self.alpha0 / (self.alpha0 - 2.0)
            return math.inf
        return self.spectral_bound()

    def typical_magnitude(self) -> float:
        """Rough per-sample magnitude, used to seed the design-margin search."""
        v = self.effective_variance()
        if math.isfinite(v):
            return max(math.sqrt(v), 1e-12)
        return max(self.scale, 1.0)


def ell1_spectral_bound(cov: np.ndarray) -> float:
    """Maximum row l1-norm of a covariance matrix.

    For a symmetric matrix this dominates the largest eigenvalue, so it is
    a valid spectral bound for the whitening reduction.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    return float(np.abs(cov).sum(axis=1).max())


def whitening_complement(cov: np.ndarray, lam: float) -> np.ndarray:
    """Covariance of the independent complement making Z + Z' ~ N(0, lam I).

    Raises ValueError if lam * I - cov is not positive semidefinite.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError("covariance must be symmetric")
    comp = lam * np.eye(cov.shape[0]) - cov
    w = np.linalg.eigvalsh(comp)
    if w.min() < -1e-9 * max(1.0, abs(lam)):
        raise ValueError(
            f"lam={lam} does not dominate the covariance "
            f"(complement eigenvalue {w.min():.6g} < 0)"
        )
    return comp


def _psd_factor(mat: np.ndarray) -> np.ndarray:
    """Cholesky-like factor L with L L^T = mat, tolerant of PSD rank deficiency."""
    mat = np.asarray(mat, dtype=float)
    try:
        return np.linalg.cholesky(mat + 1e-12 * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(mat)
        w = np.clip(w, 0.0, None)
        return v * np.sqrt(w)


class NoiseStream:
    """Deterministic per-trajectory noise stream.

    ``take(n)`` returns the next n effective noise samples.  For the
    correlated Gaussian family with ``whiten=True`` (the default used by the
    controller loop) the returned samples are Z + Z' where Z follows the
    declared covariance and Z' is the independent complement; the stream
    generates whole windows so that chunk boundaries never change the draws.
    """

    def __init__(self, spec: NoiseSpec, rng: np.random.Generator, whiten: bool = True):
        self.spec = spec
        self.rng = rng
        self.whiten = whiten
        self._buf = np.empty(0)
        if spec.family == "correlated_gaussian":
            cov = spec.cov_section(spec.window)
            self._factor = _psd_factor(cov)
            if whiten:
                self._comp_factor = _psd_factor(
                    whitening_complement(cov, spec.spectral_bound())
                )
            else:
                self._comp_factor = None

    def _draw(self, n: int) -> np.ndarray:
        spec, rng = self.spec, self.rng
        if spec.family == "bounded_uniform":
            if spec.b0 == 0.0:
                return np.zeros(n)
            return rng.uniform(-spec.b0, spec.b0, size=n)
        if spec.family == "gaussian":
            return spec.sigma * rng.standard_normal(n)
        if spec.family == "student_t":
            return spec.scale * rng.standard_t(spec.nu, size=n)
        if spec.family == "symmetric_pareto":
            u = rng.uniform(size=n)
            mag = spec.scale * u ** (-1.0 / spec.alpha0)
            sign = rng.integers(0, 2, size=n) * 2 - 1
            return sign * mag
        # correlated_gaussian: one whole window, base draw then complement,
        # so the RNG call sequence is independent of the caller's chunk size
        w = spec.window
        z = self._factor @ rng.standard_normal(w)
        if self._comp_factor is not None:
            z = z + self._comp_factor @ rng.standard_normal(w)
        return z

    def take(self, n: int) -> np.ndarray:
        if self.spec.family != "correlated_gaussian":
            return self._draw(n)
        while self._buf.size < n:
            self._buf = np.concatenate([self._buf, self._draw(self.spec.window)])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out


def sample_noise(spec: NoiseSpec, rng: np.random.Generator, n: int,
                 whiten: bool = True) -> np.ndarray:
    """Sample n effective noise values (a fresh stream from ``rng``)."""
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))
    return NoiseStream(spec, rng, whiten=whiten).take(n)


@dataclass(frozen=True)
class MomentCheck:
    alpha: float
    estimate: float
    suspect: bool
    tail_levels: tuple
    tail_stats: tuple
    note: str = ""


def verify_alpha_moment(spec: NoiseSpec, alpha: Optional[float] = None,
                        sample_budget: int = 1_000_000,
                        rng: Optional[np.random.Generator] = None) -> MomentCheck:
    """Monte Carlo check that E|Z|^alpha looks finite.

    Estimates the moment and inspects the scaled tail t^alpha * P(|Z| > t)
    at increasing quantile levels: for a finite alpha-moment this statistic
    must eventually decay, while for an infinite one it grows like a power
    of t.  A positive log-log growth trend marks the declaration suspect.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if alpha is None:
        alpha = spec.declared_alpha()
    if spec.is_bounded():
        z = np.abs(sample_noise(spec, rng, min(sample_budget, 100_000)))
        est = float(np.mean(z ** min(alpha, 64.0))) if spec.b0 > 0 else 0.0
        return MomentCheck(alpha, est, False, (), (), note="bounded support")
    z = np.abs(sample_noise(spec, rng, sample_budget))
    est = float(np.mean(z ** alpha))
    levels = [0.5, 0.9, 0.99, 0.999, 0.9999]
    ts, stats = [], []
    for q in levels:
        t = float(np.quantile(z, q))
        if t <= 0:
            continue
        surv = float(np.mean(z > t))
        if surv * sample_budget < 30:  # too few tail samples to trust
            continue
        ts.append(t)
        stats.append(t ** alpha * surv)
    suspect = False
    if len(ts) >= 3:
        slope = np.polyfit(np.log(ts), np.log(stats), 1)[0]
        suspect = slope > 0.05
    return MomentCheck(alpha, est, bool(suspect), tuple(ts), tuple(stats))
