"""Vectorized Monte Carlo harness.

Runs many trajectories of the scalar closed loop in lockstep as numpy
arrays, streaming the statistics the analysis module needs (moment curve
samples, the probe-count histogram, the per-round contraction ratios) so
that half-million-round experiments fit in memory.

Per-trajectory noise comes from independent streams seeded with
seed XOR index; the draws are chunked exactly as the single-trajectory
simulator consumes them, so a batch lane and ``simulate_trajectory`` with
the same stream produce bit-identical states (tested).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from .core import ControllerConfig, SystemModel
from .noise import NoiseStream
from .scalar import DIVERGENCE_GUARD, trajectory_rng

CHUNK = 4096
Y_EDGES = np.logspace(-6.0, 10.0, 321)
PILOT_INDEX_BASE = 1 << 32  # pilot runs use trajectory indices far from real ones


@dataclass
class BatchResult:
    """Streaming statistics from a batch of trajectories."""

    grid: np.ndarray              # 1-based step indices sampled
    moment_samples: np.ndarray    # (ntraj, len(grid)) |X_n|^beta; NaN once diverged
    beta: float
    tau_counts: np.ndarray        # tau_counts[j] = closed rounds with tau == j
    tau_max: int
    y_edges: np.ndarray
    y_counts: np.ndarray          # histogram of round ratios Y (rounds 2+)
    y_le_count: int               # rounds with Y <= 1 - 3*delta
    y_total: int
    diverged: int
    ntraj: int
    horizon: int
    seed: int
    first_index: int

    @property
    def rounds(self) -> int:
        return int(self.tau_counts.sum())

    @property
    def round_failure_rate(self) -> float:
        r = self.rounds
        if r == 0:
            return math.nan
        return 1.0 - float(self.tau_counts[0]) / r


def merge_results(parts: List[BatchResult]) -> BatchResult:
    parts = sorted(parts, key=lambda r: r.first_index)
    first = parts[0]
    nt = max(len(p.tau_counts) for p in parts)
    tau = np.zeros(nt, dtype=np.int64)
    for p in parts:
        tau[: len(p.tau_counts)] += p.tau_counts
    return BatchResult(
        grid=first.grid,
        moment_samples=np.vstack([p.moment_samples for p in parts]),
        beta=first.beta,
        tau_counts=tau,
        tau_max=max(p.tau_max for p in parts),
        y_edges=first.y_edges,
        y_counts=sum(p.y_counts for p in parts),
        y_le_count=sum(p.y_le_count for p in parts),
        y_total=sum(p.y_total for p in parts),
        diverged=sum(p.diverged for p in parts),
        ntraj=sum(p.ntraj for p in parts),
        horizon=first.horizon,
        seed=first.seed,
        first_index=first.first_index,
    )


def default_grid(horizon: int, points: int = 256) -> np.ndarray:
    return np.unique(np.linspace(1, horizon, min(points, horizon)).astype(np.int64))


def _grow_tau(counts: np.ndarray, needed: int) -> np.ndarray:
    if needed < len(counts):
        return counts
    out = np.zeros(needed + 8, dtype=np.int64)
    out[: len(counts)] = counts
    return out


def simulate_batch(model: SystemModel, config: ControllerConfig, horizon: int,
                   ntraj: int, seed: int, first_index: int = 0,
                   beta: Optional[float] = None,
                   grid: Optional[np.ndarray] = None) -> BatchResult:
    """Simulate ``ntraj`` trajectories in lockstep and stream statistics."""
    a = model.intrinsic_growth()
    M, k, B, P = config.M, config.k, config.B, config.P
    aM = a / M
    if beta is None:
        beta = config.beta
    if grid is None:
        grid = default_grid(horizon)
    grid = np.asarray(grid, dtype=np.int64)
    grid_col = {int(n): i for i, n in enumerate(grid)}

    rngs = [trajectory_rng(seed, first_index + i) for i in range(ntraj)]
    x = np.array([float(model.initial.sample(r)) for r in rngs])
    streams = [NoiseStream(model.noise, r) for r in rngs]

    C = np.full(ntraj, config.initial_bound(a))
    mode = np.full(ntraj, 1, dtype=np.int8)  # 0 normal, 1 test, 2 emergency
    if not config.magnitude_tests:
        mode[:] = 0
    phase = np.ones(ntraj, dtype=np.int32)
    probej = np.zeros(ntraj, dtype=np.int32)
    runmax = np.zeros(ntraj)
    mstar_prev = np.full(ntraj, np.nan)
    active = np.ones(ntraj, dtype=bool)

    ell = config.delay
    if ell > 0:
        ring = np.zeros((ell, ntraj))
        dly_coeff = [a ** (i - 1) for i in range(1, ell + 1)]
        a_ell = a ** ell

    three_delta = 1.0 - 3.0 * config.delta
    if aM < 1.0 and three_delta > 0:
        y_denominator_const = B / ((1.0 - aM) * three_delta)
    else:
        y_denominator_const = B
    zoom_base = 1.0 / (1.0 - config.delta)

    moment = np.full((ntraj, len(grid)), np.nan)
    tau_counts = np.zeros(64, dtype=np.int64)
    y_counts = np.zeros(len(Y_EDGES) + 1, dtype=np.int64)
    y_le = 0
    y_total = 0
    tau_running_max = 0

    sched_every = config.schedule.is_every_step()

    n = 0
    while n < horizon:
        span = min(CHUNK, horizon - n)
        z_chunk = np.empty((ntraj, span))
        for i, s in enumerate(streams):
            z_chunk[i, :] = s.take(span)
        if not sched_every:
            sched_mask = config.schedule.mask(n + 1, span)
        for t in range(span):
            step = n + t + 1
            col = grid_col.get(step)
            if col is not None:
                with np.errstate(invalid="ignore", over="ignore"):
                    vals = np.abs(x) ** beta
                moment[active, col] = vals[active]

            scheduled = sched_every or bool(sched_mask[t])
            z = z_chunk[:, t]

            if ell > 0:
                # ring slot (step-1) % ell currently holds uv from step - ell
                x_obs = x.copy()
                for i in range(1, ell + 1):
                    x_obs -= dly_coeff[i - 1] * ring[(step - 1 - i) % ell]
                u_real = a_ell * ring[(step - 1) % ell]
            else:
                x_obs = x

            uv = np.zeros(ntraj)
            if not scheduled:
                C = a * C + B
            else:
                normal = active & (mode == 0)
                test = active & (mode != 0)
                if normal.any():
                    Cl = C[normal]
                    with np.errstate(invalid="ignore", divide="ignore"):
                        b = np.floor((x_obs[normal] + Cl) * (M / 2.0) / Cl)
                    b = np.clip(np.nan_to_num(b, nan=0.0, posinf=M - 1,
                                              neginf=0.0), 0, M - 1)
                    uv[normal] = a * (-Cl + Cl * (2.0 * b + 1.0) / M)
                if config.magnitude_tests and test.any():
                    absx = np.abs(x_obs)
                    if M == 1:
                        passed = test.copy()  # the failure symbol clamps to pass
                    else:
                        passed = test & (absx <= C)
                    failed = test & ~passed
                    np.maximum(runmax, np.where(test, absx, 0.0), out=runmax,
                               where=test)
                    if passed.any():
                        mstar = np.maximum(runmax[passed], C[passed])
                        prev = mstar_prev[passed]
                        # a lane's first pass only acquires the state; the
                        # probes before it belong to no closed round
                        ok = np.isfinite(prev)
                        if ok.any():
                            taus = probej[passed][ok]
                            tmax = int(taus.max())
                            tau_counts = _grow_tau(tau_counts, tmax)
                            np.add.at(tau_counts, taus, 1)
                            tau_running_max = max(tau_running_max, tmax)
                            yv = (zoom_base ** taus) * mstar[ok] / (
                                prev[ok] + y_denominator_const)
                            y_counts += np.bincount(
                                np.searchsorted(Y_EDGES, yv),
                                minlength=len(y_counts))
                            y_le += int((yv <= three_delta).sum())
                            y_total += int(ok.sum())
                        mstar_prev[passed] = mstar
                        runmax[passed] = 0.0
                    C = np.where(normal, aM * C + B,
                                 np.where(passed, a * C + B,
                                          np.where(failed, P * C, C)))
                    phase = np.where(normal, phase + 1, phase)
                    to_test = normal & (phase >= k)
                    mode = np.where(to_test, 1, mode).astype(np.int8)
                    mode = np.where(passed, 0, mode).astype(np.int8)
                    mode = np.where(failed, 2, mode).astype(np.int8)
                    phase = np.where(passed, 1, phase)
                    probej = np.where(passed, 0, probej)
                    probej = np.where(failed, probej + 1, probej)
                else:
                    C = np.where(active, aM * C + B, C)
                    if config.magnitude_tests:
                        phase = np.where(normal, phase + 1, phase)
                        to_test = normal & (phase >= k)
                        mode = np.where(to_test, 1, mode).astype(np.int8)

            if ell > 0:
                ring[(step - 1) % ell] = uv
                u_apply = u_real
            else:
                u_apply = uv

            with np.errstate(invalid="ignore", over="ignore"):
                x = a * x + z - u_apply
            bad = active & (~np.isfinite(x) | (np.abs(x) > DIVERGENCE_GUARD))
            if bad.any():
                active &= ~bad
                x[bad] = np.nan
        n += span

    tau_running_max = max(tau_running_max, int(probej[active].max()) if active.any() else 0)
    last = np.trim_zeros(tau_counts, "b")
    if len(last) == 0:
        last = tau_counts[:1]
    return BatchResult(
        grid=grid, moment_samples=moment, beta=beta,
        tau_counts=last, tau_max=tau_running_max,
        y_edges=Y_EDGES, y_counts=y_counts, y_le_count=y_le, y_total=y_total,
        diverged=int(ntraj - active.sum()), ntraj=ntraj, horizon=horizon,
        seed=int(seed), first_index=first_index,
    )


def run_sharded(model: SystemModel, config: ControllerConfig, horizon: int,
                ntraj: int, seed: int, workers: int = 1,
                beta: Optional[float] = None,
                grid: Optional[np.ndarray] = None,
                shard_size: int = 64) -> BatchResult:
    """Split trajectories into fixed-size shards (worker-count independent,
    so results are byte-identical for any worker count) and merge."""
    shards = [(i, min(shard_size, ntraj - i)) for i in range(0, ntraj, shard_size)]
    if workers <= 1 or len(shards) == 1:
        parts = [simulate_batch(model, config, horizon, ns, seed, first_index=i,
                                beta=beta, grid=grid) for i, ns in shards]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(simulate_batch, model, config, horizon, ns, seed,
                                i, beta, grid) for i, ns in shards]
            parts = [f.result() for f in futs]
    return merge_results(parts)


def auto_scale_B(model: SystemModel, config: ControllerConfig, seed: int,
                 threshold: float = 1e-3, pilot_traj: int = 64,
                 pilot_steps: int = 4096, b_start: Optional[float] = None,
                 max_doublings: int = 40) -> float:
    """Double the design margin B until round failures are rare.

    Pilot batches (on trajectory indices disjoint from real runs) estimate
    the per-round failure rate P(tau >= 1); B doubles until it drops below
    ``threshold``.
    """
    b = b_start if b_start is not None else max(1.0, model.noise.typical_magnitude())
    for _ in range(max_doublings):
        cfg = replace(config, B=b, c1=None)
        res = simulate_batch(model, cfg, pilot_steps, pilot_traj, seed,
                             first_index=PILOT_INDEX_BASE)
        rate = res.round_failure_rate
        if res.rounds > 0 and not math.isnan(rate) and rate < threshold \
                and res.diverged == 0:
            return b
        b *= 2.0
    raise RuntimeError(
        f"auto B search failed to reach failure rate < {threshold} "
        f"(last B = {b / 2.0:g})")
