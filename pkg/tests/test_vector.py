"""Vector scheme: decomposition, schedule allocation, ball coding, the
stabilizable reduction, and the time-shared closed loop."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitstab.core import InitialStateSpec, SystemModel
from bitstab.noise import NoiseSpec
from bitstab.vector import (
    BallCode,
    allocate_schedules,
    ball_cover_decode,
    ball_cover_encode,
    design_vector_controller,
    real_jordan,
    reduce_to_delayed,
    simulate_vector,
    stabilizable_decompose,
)


def _rotation_scaling(r, th):
    return r * np.array([[math.cos(th), -math.sin(th)],
                         [math.sin(th), math.cos(th)]])


class TestRealJordan:
    def test_diagonal_splits_into_scalar_blocks(self):
        d = real_jordan(np.diag([1.2, 1.3]))
        assert [b.modulus for b in d.blocks] == pytest.approx([1.3, 1.2])
        assert all(b.dim == 1 for b in d.blocks)
        assert d.residual < 1e-8

    def test_complex_pair_is_one_block(self):
        d = real_jordan(_rotation_scaling(1.5, 0.7))
        assert len(d.blocks) == 1
        assert d.blocks[0].dim == 2
        assert d.blocks[0].modulus == pytest.approx(1.5)

    def test_unstable_stable_split(self):
        d = real_jordan(np.diag([2.0, 0.5]))
        assert [b.unstable for b in d.blocks] == [True, False]

    def test_reconstruction_for_coupled_matrix(self):
        A = np.array([[1.4, 0.7, -0.2],
                      [0.0, 0.9, 0.3],
                      [0.0, 0.0, 2.2]])
        d = real_jordan(A)
        recon = d.transform @ d.block_diagonal() @ d.inverse
        assert np.linalg.norm(recon - A) / np.linalg.norm(A) < 1e-8
        assert [round(b.modulus, 6) for b in d.blocks] == [2.2, 1.4, 0.9]

    def test_nilpotent_block_gets_inflated_modulus(self):
        d = real_jordan(np.array([[2.0, 1.0], [0.0, 2.0]]))
        assert d.blocks[0].modulus == pytest.approx(2.0)
        assert d.blocks[0].effective_modulus == pytest.approx(2.1)

    def test_deterministic_orientation(self):
        A = np.array([[1.4, 0.7], [0.1, 0.9]])
        d1, d2 = real_jordan(A), real_jordan(A)
        assert np.array_equal(d1.transform, d2.transform)
        norms = np.linalg.norm(d1.transform, axis=0)
        assert np.allclose(norms, 1.0)

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            real_jordan(np.ones((2, 3)))


class TestAllocateSchedules:
    def test_reference_densities(self):
        d = real_jordan(np.diag([1.2, 1.3]))
        alloc = allocate_schedules(d, 2)
        # blocks sorted by modulus descending: p[0] is the 1.3-block
        by_block = dict(zip(alloc.block_indices, alloc.p))
        q_13 = math.log(1.3) / math.log(2)
        q_12 = math.log(1.2) / math.log(2)
        assert alloc.q == pytest.approx((q_13, q_12))
        assert by_block[0] > q_13 and by_block[1] > q_12
        assert sum(alloc.p) < 1.0

    def test_single_unstable_block(self):
        d = real_jordan(np.diag([2.0, 0.5]))
        alloc = allocate_schedules(d, 3)
        assert len(alloc.p) == 1
        assert alloc.p[0] > math.log(2) / math.log(3)

    def test_infeasible_growth_rejected(self):
        d = real_jordan(np.diag([1.6, 1.6]))
        with pytest.raises(ValueError):
            allocate_schedules(d, 2)  # 1.6 * 1.6 = 2.56 > 2

    def test_schedules_disjoint_and_strongly_dense(self):
        d = real_jordan(np.diag([1.2, 1.3, 1.1]))
        alloc = allocate_schedules(d, 2)
        masks = [np.array(s.pattern) for s in alloc.schedules]
        assert all(len(m) == alloc.period for m in masks)
        assert not np.any(np.sum(masks, axis=0) > 1)
        for s in alloc.schedules:
            assert s.is_strongly_dense()

    def test_rate_condition_strict(self):
        d = real_jordan(np.diag([1.2, 1.3]))
        alloc = allocate_schedules(d, 2)
        for p, bi in zip(alloc.p, alloc.block_indices):
            blk = d.blocks[bi]
            assert 2.0 ** p > blk.modulus ** blk.dim


class TestBallCode:
    def test_scalar_budget_two_is_sign_test(self):
        ball = BallCode(dim=1, radius=4.0, budget=2)
        assert ball.cells_per_axis == 2
        assert ball_cover_decode(0, ball) == pytest.approx([-2.0])
        assert ball_cover_decode(1, ball) == pytest.approx([2.0])

    def test_reference_round_trip(self):
        ball = BallCode(dim=2, radius=4.0, budget=16)
        x = np.array([0.1, 0.1])
        err = np.linalg.norm(x - ball_cover_decode(ball_cover_encode(x, ball),
                                                   ball))
        assert err <= math.sqrt(2) * 4.0 / 4

    def test_boundary_goes_right(self):
        ball = BallCode(dim=1, radius=4.0, budget=4)
        # 0.0 sits exactly on the cell boundary between cells 1 and 2
        assert ball_cover_encode(np.array([0.0]), ball) == 2

    def test_outside_points_clamp(self):
        ball = BallCode(dim=2, radius=1.0, budget=9)
        idx = ball_cover_encode(np.array([5.0, -5.0]), ball)
        assert 0 <= idx < ball.codebook_size

    @given(st.lists(st.floats(-0.999, 0.999), min_size=2, max_size=2),
           st.integers(2, 6))
    @settings(max_examples=200)
    def test_round_trip_error_within_child_radius(self, pt, g):
        ball = BallCode(dim=2, radius=3.0, budget=g * g)
        x = 3.0 * np.array(pt)
        c = ball_cover_decode(ball_cover_encode(x, ball), ball)
        assert np.linalg.norm(x - c) <= ball.child_radius * (1 + 1e-12)


class TestStabilizable:
    def test_direct_actuation(self):
        f = stabilizable_decompose(np.diag([2.0, 0.5]), np.array([1.0, 0.0]))
        assert f.unstable_dim == 1
        assert f.ell == 0

    def test_chained_actuation_needs_delay(self):
        f = stabilizable_decompose(np.array([[2.0, 1.0], [0.0, 2.0]]),
                                   np.array([0.0, 1.0]))
        assert f.ell == 1

    def test_unreachable_mode_rejected(self):
        with pytest.raises(ValueError, match="3"):
            stabilizable_decompose(np.diag([2.0, 3.0]), np.array([1.0, 0.0]))


class TestReduceToDelayed:
    def test_square_invertible_is_direct(self):
        A = np.diag([1.2, 1.3])
        Bc = np.array([[2.0, 0.0], [0.0, 0.5]])
        rc = reduce_to_delayed(A, Bc)
        assert rc.ell == 0
        w = rc.decompose(np.array([1.0, 1.0]))
        assert np.allclose(Bc @ w[0], [1.0, 1.0])

    def test_reference_decomposition(self):
        rc = reduce_to_delayed(np.array([[2.0, 1.0], [0.0, 2.0]]),
                               np.array([0.0, 1.0]))
        w = rc.decompose(np.array([1.0, 0.0]))
        assert w[0] == pytest.approx([-2.0])
        assert w[1] == pytest.approx([1.0])

    def test_zero_target_gives_zero_pieces(self):
        rc = reduce_to_delayed(np.array([[2.0, 1.0], [0.0, 2.0]]),
                               np.array([0.0, 1.0]))
        for w in rc.decompose(np.zeros(2)):
            assert np.allclose(w, 0.0)

    def test_noiseless_tracking_reproduces_delayed_reference(self):
        # with Z = 0, applying the scheduled pieces realizes each submitted
        # full-space control exactly: the plant matches a reference plant
        # that receives the full-space control directly
        A = np.array([[2.0, 1.0], [0.0, 2.0]])
        Bc = np.array([0.0, 1.0])
        rc = reduce_to_delayed(A, Bc)
        x = np.array([1.0, -0.5])
        xref = x.copy()
        rng = np.random.default_rng(0)
        targets = {}
        for n in range(2, 12):
            targets[n] = rng.uniform(-1, 1, size=2)
        for n, v in targets.items():
            rc.submit(v, n)
        for n in range(1, 13):
            u = rc.control_at(n)
            x = A @ x - Bc[:, ] * u[0] if np.ndim(Bc) == 1 else A @ x - Bc @ u
            xref = A @ xref - targets.get(n, np.zeros(2))
        assert np.allclose(x, xref, atol=1e-9)


class TestSimulateVector:
    def _model(self, b0=0.5):
        return SystemModel(gain=np.diag([1.2, 1.3]),
                           noise=NoiseSpec(family="bounded_uniform", b0=b0),
                           initial=InitialStateSpec(kind="uniform",
                                                    lo=-1, hi=1))

    def test_zero_noise_decays_geometrically(self):
        model = self._model(b0=0.0)
        ctl = design_vector_controller(model, B=0.0, c1=2.0)
        tr = simulate_vector(model, ctl, 2000, seed=2)
        norms = np.linalg.norm(tr.x, axis=1)
        assert norms[-1] < 1e-12
        assert norms[-1] < norms[1000] < norms[200]

    def test_noisy_run_stays_bounded(self):
        model = self._model()
        ctl = design_vector_controller(model)
        tr = simulate_vector(model, ctl, 8000, seed=4)
        assert not tr.diverged
        norms = np.linalg.norm(tr.x, axis=1)
        # stationary after the transient: the last quarter is no bigger
        # than the middle half by more than 50%
        q = len(norms) // 4
        assert norms[3 * q:].max() <= 1.5 * norms[q:3 * q].max()

    def test_distinct_indices_differ(self):
        model = self._model()
        ctl = design_vector_controller(model)
        a = simulate_vector(model, ctl, 500, seed=4, index=0)
        b = simulate_vector(model, ctl, 500, seed=4, index=1)
        assert not np.array_equal(a.x, b.x)

    def test_rounds_recorded_per_block(self):
        model = self._model()
        ctl = design_vector_controller(model)
        tr = simulate_vector(model, ctl, 4000, seed=4)
        assert len(tr.rounds) == len(ctl.blocks)
        for rounds, bc in zip(tr.rounds, ctl.blocks):
            assert len(rounds) > 4000 / ctl.allocation.period / bc.k

    def test_thin_control_matrix_rejected(self):
        model = SystemModel(gain=np.diag([1.2, 1.3]),
                            noise=NoiseSpec(family="bounded_uniform", b0=0.5),
                            initial=InitialStateSpec(kind="uniform"),
                            control_matrix=np.array([[1.0], [0.0]]))
        with pytest.raises(ValueError, match="reduce_to_delayed"):
            design_vector_controller(model)
