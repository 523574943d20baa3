"""Vector plants: spectral block decomposition, time-shared per-block
control on disjoint dense schedules, grid ball-cover block coding, and the
reduction of low-dimensional actuation to a delayed full-actuation problem.

The multi-dimensional scheme runs one scalar-style round machine per
unstable spectral block.  Blocks take turns on the channel according to
disjoint periodic schedules whose densities p_j satisfy
M^(p_j) > |lambda_j|^(d_j) with a common slack, so the total channel
density stays below one.  Within a round a block observes its state at a
passed magnitude test, transmits the base-M digits of its grid-cell index
over its next scheduled steps, and cancels the propagated cell center with
a single control once all digits have arrived.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import schur, solve_sylvester

from .core import (
    A_UNIT_BUMP,
    K_SEARCH_CAP,
    SystemModel,
    TransmissionSchedule,
    min_bins,
)
from .scalar import (
    DIVERGENCE_GUARD,
    Mode,
    RoundRecord,
    trajectory_rng,
)
from .noise import NoiseStream

_MAG_CLUSTER_RTOL = 1e-6
_RESIDUAL_TOL = 1e-8


# ---------------------------------------------------------------------------
# spectral decomposition

@dataclass(frozen=True)
class SpectralBlock:
    basis: np.ndarray        # (d, d_j) columns spanning the invariant subspace
    matrix: np.ndarray       # (d_j, d_j) action of A on the subspace
    modulus: float           # shared eigenvalue magnitude
    dim: int
    effective_modulus: float  # modulus inflated for nilpotent parts

    @property
    def unstable(self) -> bool:
        return self.modulus >= 1.0 - 1e-12


@dataclass(frozen=True)
class SpectralDecomposition:
    blocks: Tuple[SpectralBlock, ...]
    transform: np.ndarray    # T with A = T blockdiag(A_j) T^(-1)
    inverse: np.ndarray
    residual: float          # relative Frobenius reconstruction error

    def block_slices(self) -> List[slice]:
        out, pos = [], 0
        for b in self.blocks:
            out.append(slice(pos, pos + b.dim))
            pos += b.dim
        return out

    def block_diagonal(self) -> np.ndarray:
        d = self.transform.shape[0]
        out = np.zeros((d, d))
        for b, sl in zip(self.blocks, self.block_slices()):
            out[sl, sl] = b.matrix
        return out


def _magnitude_clusters(eigvals: np.ndarray) -> List[float]:
    """Distinct eigenvalue magnitudes, descending, merged within rtol."""
    mags = sorted(np.abs(eigvals), reverse=True)
    reps: List[float] = []
    for m in mags:
        if not reps or abs(reps[-1] - m) > _MAG_CLUSTER_RTOL * max(reps[-1], 1.0):
            reps.append(m)
    return reps


def _orient_columns(T: np.ndarray) -> np.ndarray:
    """Unit-norm columns with the first nonzero component positive."""
    T = T / np.linalg.norm(T, axis=0, keepdims=True)
    for j in range(T.shape[1]):
        col = T[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            T[:, j] = -col
    return T


def _is_diagonalizable(block: np.ndarray) -> bool:
    w, v = np.linalg.eig(block)
    s = np.linalg.svd(v, compute_uv=False)
    return s[-1] > 1e-8 * s[0]


def real_jordan(A: np.ndarray, eps_block: float = 0.05) -> SpectralDecomposition:
    """Block-diagonalize a real square matrix by eigenvalue magnitude.

    Each block collects the eigenvalues sharing one magnitude, sorted
    descending.  The basis is built from an ordered real Schur form whose
    inter-block coupling is removed by Sylvester solves, then column-wise
    normalized with a deterministic sign convention.  Blocks with a
    nontrivial nilpotent part get their effective modulus inflated by
    ``eps_block`` so that downstream rate allocations keep a margin over
    the polynomial growth of powers of a Jordan block.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got shape {A.shape}")
    d = A.shape[0]
    reps = _magnitude_clusters(np.linalg.eigvals(A))

    # ordered Schur form: cluster the magnitudes into descending runs
    S = A.copy()
    T = np.eye(d)
    sizes: List[int] = []
    pos = 0
    for rep in reps:
        if pos >= d:
            break
        sub = S[pos:, pos:]
        tol = _MAG_CLUSTER_RTOL * max(rep, 1.0)
        s2, z2, k = schur(sub, output="real",
                          sort=lambda re, im, _r=rep, _t=tol:
                          abs(math.hypot(re, im) - _r) <= _t)
        S[pos:, pos:] = s2
        S[:pos, pos:] = S[:pos, pos:] @ z2
        T[:, pos:] = T[:, pos:] @ z2
        sizes.append(k)
        pos += k
    if pos != d or sum(sizes) != d:
        raise ValueError("eigenvalue clustering failed to exhaust the spectrum")

    # remove the upper-triangular coupling between blocks, leading first
    bounds = np.cumsum([0] + sizes)
    for bi in range(len(sizes) - 1):
        i0, i1 = bounds[bi], bounds[bi + 1]
        S11 = S[i0:i1, i0:i1]
        S22 = S[i1:, i1:]
        S12 = S[i0:i1, i1:]
        X = solve_sylvester(S11, -S22, -S12)
        S[i0:i1, i1:] = 0.0
        # T <- T @ W with W = [[I, X], [0, I]] acting on columns i0..end
        T[:, i1:] += T[:, i0:i1] @ X

    T = _orient_columns(T)
    Tinv = np.linalg.inv(T)
    full = Tinv @ A @ T
    blocks: List[SpectralBlock] = []
    for bi, rep in enumerate(reps[: len(sizes)]):
        sl = slice(bounds[bi], bounds[bi + 1])
        blk = full[sl, sl].copy()
        mod = float(np.max(np.abs(np.linalg.eigvals(blk))))
        eff = mod if _is_diagonalizable(blk) else mod * (1.0 + eps_block)
        blocks.append(SpectralBlock(basis=T[:, sl].copy(), matrix=blk,
                                    modulus=mod, dim=sl.stop - sl.start,
                                    effective_modulus=eff))
    recon = T @ np.asarray(
        [[full[i, j] if _same_block(i, j, bounds) else 0.0 for j in range(d)]
         for i in range(d)]) @ Tinv
    residual = float(np.linalg.norm(recon - A) / max(np.linalg.norm(A), 1e-300))
    if residual > _RESIDUAL_TOL:
        raise ValueError(f"decomposition residual {residual:g} exceeds "
                         f"{_RESIDUAL_TOL:g}")
    return SpectralDecomposition(blocks=tuple(blocks), transform=T,
                                 inverse=Tinv, residual=residual)


def _same_block(i: int, j: int, bounds: np.ndarray) -> bool:
    bi = int(np.searchsorted(bounds, i, side="right")) - 1
    bj = int(np.searchsorted(bounds, j, side="right")) - 1
    return bi == bj


# ---------------------------------------------------------------------------
# schedule allocation

@dataclass(frozen=True)
class SubspaceSchedule:
    block_indices: Tuple[int, ...]   # indices of unstable blocks in the decomp
    q: Tuple[float, ...]             # minimum densities d_j log|lambda_j|/log M
    p: Tuple[float, ...]             # allocated densities (1 + theta) q_j
    theta: float
    period: int
    schedules: Tuple[TransmissionSchedule, ...]

    def total_density(self) -> float:
        return sum(s.density() for s in self.schedules)


def _spread_assignment(counts: Sequence[int], period: int) -> List[List[int]]:
    """Assign each of ``period`` phases to at most one owner so that owner j
    receives exactly counts[j] phases, spread as evenly as possible
    (highest-averages sequencing with an idle pseudo-owner)."""
    idle = period - sum(counts)
    quota = list(counts) + [idle]
    given = [0] * len(quota)
    owners: List[List[int]] = [[] for _ in counts]
    for phase in range(period):
        scores = [(q / (2 * g + 1), q) for q, g in zip(quota, given)]
        best = max(range(len(quota)),
                   key=lambda i: (given[i] < quota[i], scores[i]))
        given[best] += 1
        if best < len(counts):
            owners[best].append(phase)
    return owners


def allocate_schedules(decomp: SpectralDecomposition, M: int,
                       theta: Optional[float] = None,
                       period: Optional[int] = None) -> SubspaceSchedule:
    """Disjoint periodic schedules for the unstable blocks.

    Block j needs density above q_j = d_j log|lambda_j| / log M; the
    intrinsic growth product must satisfy sum q_j < 1 (equivalently the
    plant's growth modulus is below M), otherwise no time-sharing works.
    The allocation takes p_j = (1 + theta) q_j with the common slack
    theta defaulting to half the available headroom, then emits explicit
    periodic patterns verified to be strongly p_j-dense by a window scan.
    """
    if M < 2:
        raise ValueError(f"time sharing needs M >= 2 symbols, got {M}")
    unstable = [(i, b) for i, b in enumerate(decomp.blocks) if b.unstable]
    if not unstable:
        return SubspaceSchedule(block_indices=(), q=(), p=(), theta=0.0,
                                period=1, schedules=())
    lnM = math.log(M)
    q = tuple(b.dim * math.log(max(b.effective_modulus, 1.0 + A_UNIT_BUMP)) / lnM
              for _, b in unstable)
    qsum = sum(q)
    if qsum >= 1.0:
        growth = math.prod(b.modulus ** b.dim for _, b in unstable)
        raise ValueError(
            f"infeasible: intrinsic growth {growth:g} needs more than "
            f"{M} symbols (minimum bin count {min_bins(growth)})")
    if theta is None:
        theta = (1.0 - qsum) / (2.0 * qsum)
    elif theta <= 0 or (1.0 + theta) * qsum >= 1.0:
        raise ValueError(f"slack theta={theta} leaves no idle capacity")
    p = tuple((1.0 + theta) * qj for qj in q)

    J = len(p)
    N = period if period is not None else max(20, math.ceil(2 * J / (1.0 - sum(p))))
    for _ in range(8):
        counts = [math.floor(pj * N) + 1 for pj in p]
        if sum(counts) <= N:
            owners = _spread_assignment(counts, N)
            schedules = []
            ok = True
            for pj, phases in zip(p, owners):
                pattern = [ph in set(phases) for ph in range(N)]
                sched = TransmissionSchedule.p_dense(pj, N, pattern)
                if not sched.is_strongly_dense():
                    ok = False
                    break
                schedules.append(sched)
            if ok:
                return SubspaceSchedule(
                    block_indices=tuple(i for i, _ in unstable),
                    q=q, p=p, theta=theta, period=N,
                    schedules=tuple(schedules))
        N *= 2
    raise ValueError("could not realize strongly dense disjoint schedules; "
                     "try a larger period")


# ---------------------------------------------------------------------------
# ball-cover block code

@dataclass(frozen=True)
class BallCode:
    """Uniform axis-aligned grid over the bounding box of a ball.

    The box [-radius, radius]^dim is split into cells_per_axis equal cells
    per axis; cells_per_axis is the largest integer whose grid fits the
    codebook budget.  The child radius (worst in-ball round-trip error) is
    the cell half-diagonal sqrt(dim) * radius / cells_per_axis.
    """

    dim: int
    radius: float
    budget: int
    center: Optional[np.ndarray] = None
    cells_per_axis: int = field(init=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")
        if self.budget < 1:
            raise ValueError(f"codebook budget must be >= 1, got {self.budget}")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        g = max(1, int(round(self.budget ** (1.0 / self.dim))))
        while g ** self.dim > self.budget:
            g -= 1
        while (g + 1) ** self.dim <= self.budget:
            g += 1
        object.__setattr__(self, "cells_per_axis", g)
        if self.center is not None:
            c = np.asarray(self.center, dtype=float)
            if c.shape != (self.dim,):
                raise ValueError(f"center shape {c.shape} != ({self.dim},)")
            object.__setattr__(self, "center", c)

    @property
    def codebook_size(self) -> int:
        return self.cells_per_axis ** self.dim

    @property
    def child_radius(self) -> float:
        return math.sqrt(self.dim) * self.radius / self.cells_per_axis


def ball_cover_encode(x: np.ndarray, ball: BallCode) -> int:
    """Grid-cell index of x; points outside the box clamp to boundary cells.

    Cell boundaries are right-closed on the left edge (a point exactly on a
    boundary belongs to the cell on its right), which keeps the rule
    deterministic and shared between encoder and controller.
    """
    x = np.asarray(x, dtype=float).reshape(ball.dim)
    if ball.center is not None:
        x = x - ball.center
    g, r = ball.cells_per_axis, ball.radius
    axes = np.floor((x + r) * g / (2.0 * r)).astype(np.int64)
    axes = np.clip(axes, 0, g - 1)
    index = 0
    for ax in axes[::-1]:
        index = index * g + int(ax)
    return index


def ball_cover_decode(index: int, ball: BallCode) -> np.ndarray:
    """Center of the grid cell with the given index."""
    if not 0 <= index < ball.codebook_size:
        raise ValueError(f"index {index} outside codebook of size "
                         f"{ball.codebook_size}")
    g, r = ball.cells_per_axis, ball.radius
    axes = np.empty(ball.dim, dtype=np.int64)
    for i in range(ball.dim):
        index, axes[i] = divmod(index, g)
    out = -r + (2.0 * r) * (axes + 0.5) / g
    if ball.center is not None:
        out = out + ball.center
    return out


# ---------------------------------------------------------------------------
# stabilizable pairs and the delayed-control reduction

@dataclass(frozen=True)
class StabilizableForm:
    transform: np.ndarray    # columns: unstable basis then stable basis
    a_unstable: np.ndarray
    a_stable: np.ndarray
    b_unstable: np.ndarray
    unstable_dim: int
    ell: int                 # controllability delay of the unstable part


def stabilizable_decompose(A: np.ndarray, Bc: np.ndarray) -> StabilizableForm:
    """Split the plant into unstable/stable invariant parts and verify the
    unstable part is controllable; returns the smallest ell <= d-1 with
    [B, AB, ..., A^ell B] full-rank on the unstable part."""
    A = np.asarray(A, dtype=float)
    Bc = np.asarray(Bc, dtype=float)
    if Bc.ndim == 1:
        Bc = Bc[:, None]
    d = A.shape[0]
    if A.shape != (d, d) or Bc.shape[0] != d:
        raise ValueError(f"incompatible shapes A{A.shape}, Bc{Bc.shape}")
    s, z, du = schur(A, output="real",
                     sort=lambda re, im: math.hypot(re, im) >= 1.0 - 1e-12)
    if 0 < du < d:
        X = solve_sylvester(s[:du, :du], -s[du:, du:], -s[:du, du:])
        z = z.copy()
        z[:, du:] += z[:, :du] @ X
        s = np.linalg.solve(z, A @ z)
    T = z
    a_u = s[:du, :du].copy()
    a_s = s[du:, du:].copy()
    b_full = np.linalg.solve(T, Bc)
    b_u = b_full[:du]
    if du == 0:
        return StabilizableForm(T, a_u, a_s, b_u, 0, 0)
    ctrb = b_u.copy()
    ell = 0
    while np.linalg.matrix_rank(ctrb, tol=1e-9 * max(1.0, np.linalg.norm(ctrb))) < du:
        if ell >= d - 1:
            evals = np.linalg.eigvals(a_u)
            for lam in evals:
                pbh = np.hstack([A - lam * np.eye(d), Bc])
                if np.linalg.matrix_rank(pbh, tol=1e-9) < d:
                    raise ValueError(
                        f"not stabilizable: unstable eigenvalue {lam:g} "
                        f"is unreachable from the control matrix")
            raise ValueError("not stabilizable: unstable part uncontrollable")
        ell += 1
        ctrb = np.hstack([ctrb, np.linalg.matrix_power(a_u, ell) @ b_u])
    return StabilizableForm(T, a_u, a_s, b_u, du, ell)


class ReducedController:
    """Realizes delayed full-space controls through a thin control matrix.

    A target full-space control v (to act on the state at step n) is
    decomposed as v = Bc w_0 + A Bc w_1 + ... + A^ell Bc w_ell with the
    minimum-norm solution, and the piece w_i is injected at step n - i.
    Targets must therefore be submitted ell steps ahead, which is exactly
    the delayed-control problem the scalar scheme already solves.
    """

    def __init__(self, A: np.ndarray, Bc: np.ndarray, ell: Optional[int] = None):
        self.A = np.asarray(A, dtype=float)
        self.Bc = np.asarray(Bc, dtype=float)
        if self.Bc.ndim == 1:
            self.Bc = self.Bc[:, None]
        if ell is None:
            ell = stabilizable_decompose(self.A, self.Bc).ell
        self.ell = ell
        cols = [np.linalg.matrix_power(self.A, i) @ self.Bc
                for i in range(ell + 1)]
        self._stack = np.hstack(cols)    # d x (m * (ell + 1))
        self._m = self.Bc.shape[1]
        self._pending: dict = {}

    def decompose(self, v: np.ndarray) -> List[np.ndarray]:
        """Minimum-norm pieces (w_0, ..., w_ell) with sum A^i Bc w_i = v."""
        v = np.asarray(v, dtype=float).reshape(-1)
        w, res, rank, _ = np.linalg.lstsq(self._stack, v, rcond=None)
        recon = self._stack @ w
        if not np.allclose(recon, v, rtol=1e-8, atol=1e-10 * max(1, np.linalg.norm(v))):
            raise ValueError("target control is outside the reachable subspace")
        return [w[i * self._m: (i + 1) * self._m] for i in range(self.ell + 1)]

    def submit(self, v: np.ndarray, step: int) -> None:
        """Request the full-space control v to act at ``step`` (so that it
        affects the state at step + 1); must be called at or before
        step - ell."""
        for i, w in enumerate(self.decompose(v)):
            t = step - i
            self._pending[t] = self._pending.get(t, 0.0) + w
        # pieces at earlier steps than already-emitted ones would be lost
        if any(t < getattr(self, "_emitted", -10 ** 18) for t in self._pending):
            raise ValueError(f"control for step {step} submitted too late "
                             f"(needs {self.ell} steps of lead time)")

    def control_at(self, step: int) -> np.ndarray:
        """Aggregate thin control u_step; the plant applies Bc @ u_step."""
        self._emitted = step
        w = self._pending.pop(step, None)
        if w is None:
            return np.zeros(self._m)
        return np.asarray(w)


def reduce_to_delayed(A: np.ndarray, Bc: np.ndarray,
                      ell: Optional[int] = None) -> ReducedController:
    """Adapter turning a delayed full-actuation control law into per-step
    thin controls for the pair (A, Bc)."""
    return ReducedController(A, Bc, ell=ell)


# ---------------------------------------------------------------------------
# vector controller design and simulation

@dataclass(frozen=True)
class BlockController:
    block_index: int
    dim: int
    sigma: float             # per-step growth bound, 2-norm of the block
    schedule: TransmissionSchedule
    k: int                   # scheduled steps per round (digits = k - 1)
    cells_per_axis: int
    P: float                 # emergency probe factor
    c1: float                # initial uncertainty radius


@dataclass(frozen=True)
class VectorController:
    decomp: SpectralDecomposition
    allocation: SubspaceSchedule
    M: int
    delta: float
    B: float                 # per-step bound/typical size of block noise
    blocks: Tuple[BlockController, ...]


def _block_round_length(sigma: float, dim: int, M: int, delta: float,
                        schedule: TransmissionSchedule) -> Tuple[int, int]:
    """Smallest k >= 2 such that the grid from k-1 base-M digits contracts
    the uncertainty over the round's worst real-step span."""
    target = 1.0 - 3.0 * delta
    for k in range(2, K_SEARCH_CAP + 1):
        budget = M ** (k - 1)
        g = max(1, int(round(budget ** (1.0 / dim))))
        while g ** dim > budget:
            g -= 1
        while (g + 1) ** dim <= budget:
            g += 1
        span = schedule.worst_span(k)
        if math.sqrt(dim) / g * sigma ** span <= target:
            return k, g
    raise ValueError(
        f"no contracting round length: per-step growth {sigma:g} beats the "
        f"digit rate of the allocated schedule")


def design_vector_controller(model: SystemModel,
                             delta: float = 0.05,
                             B: Optional[float] = None,
                             M: Optional[int] = None,
                             theta: Optional[float] = None,
                             period: Optional[int] = None,
                             probe_factors: Optional[Sequence[float]] = None,
                             c1: Optional[float] = None) -> VectorController:
    """Full design pass: decomposition, schedule allocation, per-block round
    lengths, probe factors, and initial radii."""
    if not model.is_vector():
        raise ValueError("model gain must be a square matrix")
    A = np.asarray(model.gain, dtype=float)
    if model.control_matrix is not None:
        Bc = np.asarray(model.control_matrix, dtype=float)
        if Bc.shape != A.shape:
            raise ValueError(
                "direct vector simulation needs a square invertible control "
                "matrix; reduce a thin pair with reduce_to_delayed first")
        np.linalg.inv(Bc)  # raises LinAlgError when singular
    if not (0 < delta < 1 / 3):
        raise ValueError(f"delta must be in (0, 1/3), got {delta}")
    decomp = real_jordan(A)
    if M is None:
        M = min_bins(float(math.prod(b.modulus ** b.dim for b in decomp.blocks
                                     if b.unstable)))
    alloc = allocate_schedules(decomp, M, theta=theta, period=period)
    if B is None:
        scale = model.noise.typical_magnitude()
        amp = float(np.linalg.norm(decomp.inverse, 2))
        B = 4.0 * scale * amp * math.sqrt(A.shape[0])
    blocks: List[BlockController] = []
    for pos, bi in enumerate(alloc.block_indices):
        blk = decomp.blocks[bi]
        sched = alloc.schedules[pos]
        sigma = float(np.linalg.norm(blk.matrix, 2))
        sigma = max(sigma, 1.0 + A_UNIT_BUMP)
        k, g = _block_round_length(sigma, blk.dim, M, delta, sched)
        if probe_factors is not None:
            P = float(probe_factors[pos])
            if P <= 1.0:
                raise ValueError(f"probe factor must exceed 1, got {P}")
        else:
            P = 2.0 * sigma ** (sched.max_gap() + 1)
        radius = c1 if c1 is not None else max(1.0, B)
        blocks.append(BlockController(block_index=bi, dim=blk.dim,
                                      sigma=sigma, schedule=sched, k=k,
                                      cells_per_axis=g, P=P, c1=radius))
    return VectorController(decomp=decomp, allocation=alloc, M=M, delta=delta,
                            B=B, blocks=tuple(blocks))


@dataclass
class VectorTrace:
    n: np.ndarray
    x: np.ndarray            # (horizon, d) plant states
    u: np.ndarray            # (horizon, d) applied full-space controls
    c: np.ndarray            # (horizon, n_blocks) per-block uncertainty radii
    mode: np.ndarray         # (horizon, n_blocks)
    rounds: List[List[RoundRecord]]
    diverged: bool
    seed: int

    def __len__(self) -> int:
        return len(self.n)


class _BlockMachine:
    """Round machine of one unstable block, shared verbatim between the
    encoder and the controller via the transmitted digit sequence."""

    def __init__(self, ctrl: BlockController, block_matrix: np.ndarray,
                 B: float, delta: float, M: int):
        self.ctrl = ctrl
        self.Aj = block_matrix
        self.B = B
        self.delta = delta
        self.M = M
        self.C = ctrl.c1
        self.mode = Mode.MAG_TEST
        self.round_id = 0
        self.rounds: List[RoundRecord] = []
        self._digits: List[int] = []
        self._ball: Optional[BallCode] = None
        self._pass_step = 0
        self._probe_j = 0
        self._runmax = 0.0
        self._pass_radius = 0.0

    def scheduled_step(self, step: int, y: np.ndarray) -> Tuple[int, np.ndarray]:
        """Process one in-schedule step: returns (symbol, block control)."""
        k, g, P = self.ctrl.k, self.ctrl.cells_per_axis, self.ctrl.P
        u = np.zeros(self.ctrl.dim)
        mag = float(np.linalg.norm(y))
        if self.mode != Mode.NORMAL:
            # magnitude test (initial, end-of-round, or emergency probe)
            passed = mag <= self.C
            symbol = 0 if passed else min(1, self.M - 1)
            self._runmax = max(self._runmax, mag)
            if passed:
                self.rounds.append(RoundRecord(
                    start=step, c_start=self.C,
                    tau=self._probe_j if self.mode == Mode.EMERGENCY else 0,
                    mstar=max(self._runmax, self.C)))
                self._runmax = 0.0
                self._probe_j = 0
                self.round_id += 1
                self._pass_step = step
                self._pass_radius = self.C
                self._ball = BallCode(dim=self.ctrl.dim, radius=self.C,
                                      budget=self.M ** (k - 1))
                self._digits = self._encode_digits(y)
                self.mode = Mode.NORMAL
                self.C = self.ctrl.sigma * self.C + self.B
            else:
                if self.mode == Mode.EMERGENCY:
                    self._probe_j += 1
                else:
                    self.mode = Mode.EMERGENCY
                    self._probe_j = 1
                self.C = P * self.C
            return symbol, u
        # normal mode: transmit the next digit of the round's cell index
        symbol = self._digits.pop(0)
        self._received.append(symbol)
        if not self._digits:
            # all digits delivered: cancel the propagated cell center
            index = 0
            for dgt in self._received:
                index = index * self.M + dgt
            center = ball_cover_decode(index, self._ball)
            elapsed = step - self._pass_step + 1
            u = np.linalg.matrix_power(self.Aj, elapsed) @ center
            sig = self.ctrl.sigma
            noise_acc = self.B * (sig ** elapsed - 1.0) / (sig - 1.0)
            self.C = (math.sqrt(self.ctrl.dim) / g) * sig ** elapsed \
                * self._pass_radius + noise_acc
            self.mode = Mode.MAG_TEST
        else:
            self.C = self.ctrl.sigma * self.C + self.B
        return symbol, u

    def silent_step(self) -> None:
        self.C = self.ctrl.sigma * self.C + self.B

    # the digit codec: base-M expansion of the grid-cell index, most
    # significant digit first, fixed width k - 1
    def _encode_digits(self, y: np.ndarray) -> List[int]:
        index = ball_cover_encode(y, self._ball)
        width = self.ctrl.k - 1
        digits = []
        for _ in range(width):
            index, r = divmod(index, self.M)
            digits.append(int(r))
        digits.reverse()
        self._received: List[int] = []
        return digits


def simulate_vector(model: SystemModel, controller: VectorController,
                    horizon: int, seed: int = 0, index: int = 0,
                    x1: Optional[np.ndarray] = None) -> VectorTrace:
    """Closed-loop simulation of the time-shared vector scheme.

    The plant runs in the original coordinates; each unstable block's round
    machine sees its own coordinates of T^(-1) X on its schedule and emits
    block controls that the plant receives through the (invertible) control
    matrix.  Stable blocks are left uncontrolled.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    A = np.asarray(model.gain, dtype=float)
    d = A.shape[0]
    if model.control_matrix is not None:
        # an invertible control matrix can realize any full-space control;
        # the plant is driven with the full-space value directly
        np.linalg.inv(np.asarray(model.control_matrix, dtype=float))
    rng = trajectory_rng(seed, index)
    if x1 is None:
        x = np.asarray(model.initial.sample(rng, size=d), dtype=float)
    else:
        x = np.asarray(x1, dtype=float).copy()
    stream = NoiseStream(model.noise, rng)
    decomp = controller.decomp
    slices = decomp.block_slices()
    machines = [
        _BlockMachine(bc, decomp.blocks[bc.block_index].matrix,
                      controller.B, controller.delta, controller.M)
        for bc in controller.blocks
    ]
    nb = len(machines)
    xs = np.empty((horizon, d))
    us = np.zeros((horizon, d))
    cs = np.empty((horizon, nb))
    modes = np.empty((horizon, nb), dtype=np.int8)
    diverged = False
    steps_done = horizon
    for step in range(1, horizon + 1):
        xs[step - 1] = x
        y = decomp.inverse @ x
        v = np.zeros(d)
        for mi, (m, bc) in enumerate(zip(machines, controller.blocks)):
            cs[step - 1, mi] = m.C
            modes[step - 1, mi] = int(m.mode)
            if bc.schedule.scheduled(step):
                _, ub = m.scheduled_step(step, y[slices[bc.block_index]])
                v[slices[bc.block_index]] = ub
            else:
                m.silent_step()
        u_full = decomp.transform @ v
        us[step - 1] = u_full
        z = stream.take(d)
        x = A @ x + z - u_full
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_GUARD:
            diverged = True
            steps_done = step
            break
    if steps_done < horizon:
        xs, us = xs[:steps_done], us[:steps_done]
        cs, modes = cs[:steps_done], modes[:steps_done]
    return VectorTrace(n=np.arange(1, steps_done + 1), x=xs, u=us, c=cs,
                       mode=modes, rounds=[m.rounds for m in machines],
                       diverged=diverged, seed=seed)
