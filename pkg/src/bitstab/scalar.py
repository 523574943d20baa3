"""Scalar encoder/controller state machines and the trajectory simulator.

Both ends of the rate-limited channel run the same deterministic state
machine (:class:`CoderState`), advanced only by the transmitted symbols, so
they stay bit-identical without any side channel.  Step semantics:

* NORMAL (phase i in 1..k-1): the encoder sends the bin index of X over
  [-C, C]; the controller applies ``control_law``; C <- (a/M) C + B.
* MAG_TEST / EMERGENCY: the encoder sends pass (0) iff |X| <= C; the
  controller is silent.  A pass starts the next round at this very step
  (C <- a C + B, next phase NORMAL 1); a failure zooms out, C <- P * C.

The simulation starts in MAG_TEST so every recorded round begins from a
certified |X_m| <= C_m, which makes the pathwise certificates in the
analysis module hold deterministically.

Quantizer conventions: bins are half-open on the left (a boundary point
belongs to the bin on its right, so the sign of exactly 0 is positive),
and x = +-C is clamped to the extreme bins.  A state outside [-C, C] at a
normal step is clamped as well; the next magnitude test catches it.

The observation-delay generalization feeds the encoder an artificially
delayed view: with delay l, the machine runs on the virtual state
Xv_n = X_n - sum_{i=1..l} a^(i-1) uv_{n-i} (uv are the machine's own past
outputs, reconstructible by both parties from the symbol stream) and the
real control is U_n = a^l * uv_{n-l}.  The virtual system then satisfies
Xv_{n+1} = a Xv_n + Z_n - uv_n, exactly the undelayed closed loop, and
X_n differs from Xv_n by a bounded combination of recent controls.

The packet-schedule generalization freezes the machine at non-scheduled
steps: U_n = 0 and C <- a C + B, with round phases advancing only when the
channel is available.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import List, Optional, Union

import numpy as np

from .core import ControllerConfig, SystemModel, TransmissionSchedule

DIVERGENCE_GUARD = 1e300
NO_SYMBOL = -1

MODE_NAMES = {0: "normal", 1: "test", 2: "emergency"}


class Mode(IntEnum):
    NORMAL = 0
    MAG_TEST = 1
    EMERGENCY = 2


@dataclass(frozen=True)
class CoderState:
    """Shared state of encoder and controller.

    ``i`` is the normal-mode phase (1..k-1); ``j`` counts failed probes in
    the current test phase; ``C`` is the current bound; ``round_id`` counts
    completed round starts.
    """

    mode: Mode
    C: float
    i: int = 1
    j: int = 0
    round_id: int = 0


def initial_state(config: ControllerConfig, a: float) -> CoderState:
    c1 = config.initial_bound(a)
    if config.magnitude_tests:
        return CoderState(mode=Mode.MAG_TEST, C=c1)
    return CoderState(mode=Mode.NORMAL, C=c1)


def bin_index(x: float, C: float, M: int) -> int:
    """Uniform bin index of x over [-C, C]; boundaries go right, ends clamp."""
    if C <= 0:
        return M // 2
    raw = math.floor((x + C) * M / (2.0 * C))
    return min(max(int(raw), 0), M - 1)


def bin_midpoint(C: float, b: int, M: int) -> float:
    return -C + C * (2 * b + 1) / M


def control_law(C: float, b: int, M: int, a: float) -> float:
    """Control for bin b: the plant gain times the bin midpoint, so the
    quantization error (at most C/M) is what remains after one step."""
    return a * bin_midpoint(C, b, M)


def step_system(x: float, u: float, z: float, a: float) -> float:
    return a * x + z - u


def advance_bound(state: CoderState, config: ControllerConfig, a: float,
                  passed: Optional[bool] = None) -> float:
    """Bound recursion for the current step.

    Normal step: C <- (a/M) C + B.  Test step: pass starts a round,
    C <- a C + B; failure zooms out, C <- P * C.
    """
    if not config.magnitude_tests or state.mode == Mode.NORMAL:
        return (a / config.M) * state.C + config.B
    if passed is None:
        raise ValueError("test step needs the pass/fail outcome")
    if passed:
        return a * state.C + config.B
    return config.P * state.C


def silent_growth(state: CoderState, config: ControllerConfig, a: float) -> CoderState:
    """Non-scheduled step: no symbol, no control, C <- a C + B."""
    return replace(state, C=a * state.C + config.B)


def transition(state: CoderState, symbol: int, config: ControllerConfig,
               a: float) -> CoderState:
    """Advance the shared machine by one scheduled step given the symbol."""
    if not config.magnitude_tests:
        return replace(state, C=advance_bound(state, config, a))
    if state.mode == Mode.NORMAL:
        C = advance_bound(state, config, a)
        if state.i + 1 >= config.k:
            return CoderState(mode=Mode.MAG_TEST, C=C, j=0, round_id=state.round_id)
        return CoderState(mode=Mode.NORMAL, C=C, i=state.i + 1, round_id=state.round_id)
    passed = symbol == 0
    if passed:
        return CoderState(mode=Mode.NORMAL, C=advance_bound(state, config, a, True),
                          i=1, round_id=state.round_id + 1)
    return CoderState(mode=Mode.EMERGENCY, C=advance_bound(state, config, a, False),
                      j=state.j + 1, round_id=state.round_id)


def encode_step(state: CoderState, x: float, config: ControllerConfig,
                a: float) -> tuple:
    """Encoder: quantize the observed state, return (symbol, next state)."""
    if not math.isfinite(x):
        raise ValueError(f"encoder observed a non-finite state: {x}")
    if not config.magnitude_tests or state.mode == Mode.NORMAL:
        symbol = bin_index(x, state.C, config.M)
    else:
        # pass on equality; with M = 1 the failure symbol is indistinguishable
        # from a pass and the controller (correctly) learns nothing
        symbol = 0 if abs(x) <= state.C else min(1, config.M - 1)
    return symbol, transition(state, symbol, config, a)


def control_step(state: CoderState, symbol: int, config: ControllerConfig,
                 a: float) -> tuple:
    """Controller: map the received symbol to a control, return (u, next state)."""
    if not isinstance(symbol, (int, np.integer)) or not 0 <= symbol < config.M:
        raise ValueError(f"symbol {symbol!r} outside the alphabet [0, {config.M})")
    if not config.magnitude_tests or state.mode == Mode.NORMAL:
        u = control_law(state.C, int(symbol), config.M, a)
    else:
        u = 0.0
    return u, transition(state, int(symbol), config, a)


def wrap_delay(config: ControllerConfig, delay: int) -> ControllerConfig:
    """Return a configuration whose encoder observes the state ``delay``
    steps late; ``delay`` = 0 is the identity."""
    if delay < 0:
        raise ValueError(f"delay must be >= 0, got {delay}")
    return replace(config, delay=delay)


def wrap_schedule(config: ControllerConfig,
                  schedule: TransmissionSchedule) -> ControllerConfig:
    """Return a configuration transmitting only on the given schedule."""
    problems = schedule.validate()
    if problems:
        raise ValueError("; ".join(problems))
    return replace(config, schedule=schedule)


@dataclass
class RoundRecord:
    start: int        # step index of the round start (a passed test)
    c_start: float    # bound at the round start
    tau: int          # failed probes before the closing test passed
    mstar: float      # max of test-phase |X| values and the final bound


@dataclass
class TrajectoryTrace:
    n: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    c: np.ndarray
    scheduled: np.ndarray
    symbol: np.ndarray
    mode: np.ndarray
    round_id: np.ndarray
    rounds: List[RoundRecord]
    diverged: bool
    seed: Optional[int] = None
    virtual_x: Optional[np.ndarray] = None  # encoder's view when delay > 0

    def __len__(self) -> int:
        return len(self.n)


def write_trace_csv(trace: TrajectoryTrace, path) -> None:
    """Emit the step log with the fixed column set and a mandatory header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "x", "scheduled", "symbol", "u", "c", "mode", "round_id"])
        for idx in range(len(trace)):
            x = trace.x[idx]
            xs = ";".join(repr(float(v)) for v in np.atleast_1d(x))
            sym = "" if trace.symbol[idx] == NO_SYMBOL else int(trace.symbol[idx])
            w.writerow([
                int(trace.n[idx]), xs, int(trace.scheduled[idx]), sym,
                repr(float(trace.u[idx])) if np.ndim(trace.u[idx]) == 0
                else ";".join(repr(float(v)) for v in trace.u[idx]),
                repr(float(trace.c[idx])), MODE_NAMES.get(int(trace.mode[idx]), "normal"),
                int(trace.round_id[idx]),
            ])


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Per-trajectory stream: generator seeded with seed XOR index."""
    return np.random.default_rng((int(seed) ^ int(index)) & (2 ** 64 - 1))


def simulate_trajectory(model: SystemModel, config: ControllerConfig,
                        horizon: int,
                        seed: Union[int, np.random.Generator] = 0,
                        index: int = 0,
                        x1: Optional[float] = None) -> TrajectoryTrace:
    """Run one closed-loop trajectory for ``horizon`` steps.

    Numeric overflow of the state is recorded as a diverged outcome (the
    trace is truncated at the offending step), never raised.
    """
    a = model.intrinsic_growth()
    if isinstance(seed, np.random.Generator):
        rng, seed_val = seed, None
    else:
        rng, seed_val = trajectory_rng(seed, index), int(seed)

    from .noise import NoiseStream
    stream = NoiseStream(model.noise, rng)
    if x1 is None:
        x = float(model.initial.sample(rng))
    else:
        x = float(x1)
    z_all = stream.take(horizon)

    ell = config.delay
    ubuf: List[float] = []  # machine outputs uv_m, index m-1
    dly_coeff = [a ** (i - 1) for i in range(1, ell + 1)]

    st = initial_state(config, a)
    sched = config.schedule

    T = horizon
    xs = np.empty(T); zs = np.empty(T); us = np.empty(T); cs = np.empty(T)
    schf = np.empty(T, dtype=bool); syms = np.full(T, NO_SYMBOL, dtype=np.int64)
    modes = np.empty(T, dtype=np.int8); rids = np.empty(T, dtype=np.int64)
    xv = np.empty(T) if ell > 0 else None
    rounds: List[RoundRecord] = []
    diverged = False

    cur_start = None
    cur_cstart = None
    runmax = 0.0
    steps_done = 0

    for idx in range(T):
        n = idx + 1
        z = float(z_all[idx])
        scheduled = sched.scheduled(n)
        xs[idx] = x; zs[idx] = z; schf[idx] = scheduled
        cs[idx] = st.C; modes[idx] = int(st.mode)

        if ell > 0:
            x_obs = x - sum(dly_coeff[i - 1] * ubuf[n - 1 - i]
                            for i in range(1, ell + 1) if n - i >= 1)
            xv[idx] = x_obs
        else:
            x_obs = x

        if not scheduled:
            u_real = 0.0
            st = silent_growth(st, config, a)
            rids[idx] = st.round_id
        else:
            pre = st
            try:
                symbol, _ = encode_step(st, x_obs, config, a)
            except ValueError:
                diverged = True
                steps_done = idx
                break
            uv, st = control_step(pre, symbol, config, a)
            syms[idx] = symbol
            if ell > 0:
                ubuf.append(uv)
                m = n - ell
                u_real = (a ** ell) * ubuf[m - 1] if m >= 1 else 0.0
            else:
                u_real = uv
            rids[idx] = st.round_id
            if config.magnitude_tests and pre.mode != Mode.NORMAL:
                runmax = max(runmax, abs(x_obs))
                if symbol == 0:
                    if cur_start is not None:
                        rounds.append(RoundRecord(start=cur_start, c_start=cur_cstart,
                                                  tau=pre.j, mstar=max(runmax, pre.C)))
                    cur_start, cur_cstart = n, pre.C
                    runmax = 0.0
        if ell > 0 and not scheduled:
            ubuf.append(0.0)

        us[idx] = u_real
        x = step_system(x, u_real, z, a)
        steps_done = idx + 1
        if not math.isfinite(x) or abs(x) > DIVERGENCE_GUARD:
            diverged = True
            break

    s = steps_done
    return TrajectoryTrace(
        n=np.arange(1, s + 1), x=xs[:s], z=zs[:s], u=us[:s], c=cs[:s],
        scheduled=schf[:s], symbol=syms[:s], mode=modes[:s], round_id=rids[:s],
        rounds=rounds, diverged=diverged, seed=seed_val,
        virtual_x=None if xv is None else xv[:s],
    )
