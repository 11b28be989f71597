"""Window trajectory state and refiner token assembly."""

import numpy as np
import pytest

from cloudtrack import nn, trajectory
from cloudtrack.errors import ShapeError, TokenAssemblyError


class TestTrajectoryState:
    def test_coerces_to_float64(self):
        st = trajectory.TrajectoryState(
            np.zeros((2, 3, 3), dtype=np.float32), np.zeros((2, 3), dtype=np.float32)
        )
        assert st.positions.dtype == np.float64
        assert st.vis_logits.dtype == np.float64
        assert st.num_queries == 2
        assert st.num_frames == 3

    @pytest.mark.parametrize(
        "pos_shape,logit_shape",
        [((2, 3, 2), (2, 3)), ((2, 3), (2, 3)), ((2, 3, 3), (2, 4)), ((2, 3, 3), (3, 3))],
    )
    def test_rejects_bad_shapes(self, pos_shape, logit_shape):
        with pytest.raises(ShapeError):
            trajectory.TrajectoryState(np.zeros(pos_shape), np.zeros(logit_shape))

    def test_copy_is_independent(self):
        st = trajectory.TrajectoryState(np.ones((1, 2, 3)), np.ones((1, 2)))
        cp = st.copy()
        cp.positions += 5.0
        cp.vis_logits -= 1.0
        np.testing.assert_array_equal(st.positions, np.ones((1, 2, 3)))
        np.testing.assert_array_equal(st.vis_logits, np.ones((1, 2)))

    def test_visibility_threshold_is_strict_zero(self):
        st = trajectory.TrajectoryState(
            np.zeros((1, 3, 3)), np.array([[-0.1, 0.0, 0.1]])
        )
        np.testing.assert_array_equal(st.visibility(), [[False, False, True]])


class TestInitializeWindow:
    def test_constant_in_time(self):
        pts = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]])
        st = trajectory.initialize_window(pts, num_frames=5)
        assert st.positions.shape == (2, 5, 3)
        for t in range(5):
            np.testing.assert_array_equal(st.positions[:, t], pts)
        np.testing.assert_array_equal(st.vis_logits, np.zeros((2, 5)))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ShapeError):
            trajectory.initialize_window(np.zeros((2, 2)), 4)
        with pytest.raises(ShapeError):
            trajectory.initialize_window(np.zeros((2, 3)), 0)


class TestMotionDeltas:
    def test_formula_and_clamps(self):
        rng = np.random.default_rng(0)
        pos = rng.standard_normal((3, 6, 3))
        prev, nxt = trajectory.motion_deltas(pos)
        np.testing.assert_array_equal(prev[:, 0], np.zeros((3, 3)))
        np.testing.assert_array_equal(nxt[:, -1], np.zeros((3, 3)))
        np.testing.assert_allclose(prev[:, 1:], pos[:, 1:] - pos[:, :-1])
        np.testing.assert_allclose(nxt[:, :-1], pos[:, 1:] - pos[:, :-1])

    def test_static_track_is_all_zero(self):
        pos = np.tile(np.array([[1.0, 2.0, 3.0]]), (2, 4, 1)).reshape(2, 4, 3)
        prev, nxt = trajectory.motion_deltas(pos)
        assert not prev.any() and not nxt.any()

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            trajectory.motion_deltas(np.zeros((3, 6, 2)))


class TestTokenWidth:
    def test_counts_every_slice(self):
        # summary + enc3(prev) + enc3(next) + enc2(pixel) + logit + enc1(time)
        for bands in (2, 8):
            enc = 2 * bands
            assert trajectory.token_width(10, num_bands=bands) == 10 + 9 * enc + 1

    def test_matches_fourier_encode_layout(self):
        bands = 4
        one = nn.fourier_encode(np.zeros((1, 3)), num_bands=bands).shape[-1]
        assert trajectory.token_width(0, num_bands=bands) == 3 * one + 1


class TestAssembleTokens:
    def _state(self, rng, q=2, t=5):
        return trajectory.TrajectoryState(
            rng.standard_normal((q, t, 3)), rng.standard_normal((q, t))
        )

    def test_width_and_shape(self):
        rng = np.random.default_rng(0)
        st = self._state(rng)
        summaries = nn.Tensor(rng.standard_normal((2, 5, 7)).astype(np.float32))
        pixels = rng.random((2, 5, 2))
        tok = trajectory.assemble_tokens(summaries, st, pixels, num_bands=3)
        assert tok.shape == (2, 5, trajectory.token_width(7, num_bands=3))
        assert tok.data.dtype == np.float32

    def test_summary_slice_carries_gradient(self):
        rng = np.random.default_rng(1)
        st = self._state(rng)
        summaries = nn.Tensor(
            rng.standard_normal((2, 5, 7)).astype(np.float32), requires_grad=True
        )
        tok = trajectory.assemble_tokens(summaries, st, rng.random((2, 5, 2)))
        nn.reduce_sum(tok).backward()
        np.testing.assert_array_equal(summaries.grad, np.ones((2, 5, 7)))

    def test_constant_slices_match_reference(self):
        rng = np.random.default_rng(2)
        q, t, bands = 2, 4, 3
        st = self._state(rng, q, t)
        summaries = nn.Tensor(rng.standard_normal((q, t, 6)).astype(np.float32))
        pixels = rng.random((q, t, 2))
        tok = trajectory.assemble_tokens(summaries, st, pixels, num_bands=bands).data

        prev, nxt = trajectory.motion_deltas(st.positions)
        enc = lambda a: nn.fourier_encode(a.astype(np.float32), num_bands=bands)
        time_frac = np.broadcast_to(
            (np.arange(t) / t)[None, :, None], (q, t, 1)
        ).astype(np.float32)
        expect = np.concatenate(
            [
                summaries.data,
                enc(prev),
                enc(nxt),
                enc(pixels),
                st.vis_logits[:, :, None].astype(np.float32),
                enc(time_frac),
            ],
            axis=-1,
        )
        np.testing.assert_allclose(tok, expect, rtol=0, atol=1e-6)

    def test_static_window_start_encodes_zero_motion(self):
        # fresh window: constant positions => both delta slices encode exactly
        # sin(0)=0 everywhere (cos channel = 1)
        q, t, bands, s = 1, 3, 2, 4
        st = trajectory.initialize_window(np.array([[0.5, -1.0, 2.0]]), t)
        summaries = nn.Tensor(np.zeros((q, t, s), dtype=np.float32))
        tok = trajectory.assemble_tokens(
            summaries, st, np.zeros((q, t, 2)), num_bands=bands
        ).data
        enc = 2 * bands
        motion = tok[..., s : s + 6 * enc].reshape(q, t, 6, bands, 2)
        np.testing.assert_array_equal(motion[..., 0], np.zeros((q, t, 6, bands)))
        np.testing.assert_array_equal(motion[..., 1], np.ones((q, t, 6, bands)))

    def test_rejects_mismatched_inputs(self):
        rng = np.random.default_rng(3)
        st = self._state(rng)
        good = nn.Tensor(rng.standard_normal((2, 5, 7)).astype(np.float32))
        with pytest.raises(TokenAssemblyError):
            trajectory.assemble_tokens(good, st, rng.random((2, 4, 2)))
        with pytest.raises(TokenAssemblyError):
            trajectory.assemble_tokens(
                nn.Tensor(np.zeros((2, 4, 7), dtype=np.float32)), st, rng.random((2, 5, 2))
            )
