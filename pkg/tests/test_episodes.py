import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempcd.autodiff import Tensor, check_gradients
from tempcd.episodes import (
    COLORS,
    EXPRESSION_DIM,
    MOTIONS,
    SHAPES,
    SPRITES,
    EpisodeError,
    ExpressionSpec,
    episode_difficulty,
    from_bytes,
    generate_dataset,
    generate_episode,
    load_episode,
    mask_to_box,
    matching_objects,
    save_episode,
    to_bytes,
)
from tempcd.fusion import ExpressionEncoder, FrameEncoder, encode_expression, fuse_features

seeds = st.integers(0, 2**31)
difficulties = st.sampled_from(["appearance", "motion-discriminative"])


def centroids(masks):
    out = []
    for m in masks:
        ys, xs = np.nonzero(m)
        out.append((xs.mean(), ys.mean()))
    return np.array(out)


class TestGeneration:
    @settings(max_examples=30, deadline=None)
    @given(seeds, difficulties)
    def test_deterministic(self, seed, diff):
        a, b = generate_episode(seed, diff), generate_episode(seed, diff)
        assert to_bytes(a) == to_bytes(b)

    def test_different_seeds_differ(self):
        assert to_bytes(generate_episode(1)) != to_bytes(generate_episode(2))

    @settings(max_examples=60, deadline=None)
    @given(seeds, difficulties)
    def test_exactly_one_match(self, seed, diff):
        ep = generate_episode(seed, diff)
        brute = [i for i, o in enumerate(ep.objects) if (o.shape, o.color, o.motion) == (ep.expression.shape, ep.expression.color, ep.expression.motion)]
        assert brute == [ep.referent] == matching_objects(ep)

    @settings(max_examples=60, deadline=None)
    @given(seeds)
    def test_motion_mode_needs_motion(self, seed):
        ep = generate_episode(seed, "motion-discriminative")
        look_alike = [o for o in ep.objects if (o.shape, o.color) == (ep.expression.shape, ep.expression.color)]
        assert len(look_alike) >= 2
        # only motion separates the referent from its look-alikes
        assert sum(o.motion == ep.expression.motion for o in look_alike) == 1

    @settings(max_examples=60, deadline=None)
    @given(seeds)
    def test_appearance_mode_unique_by_look(self, seed):
        ep = generate_episode(seed, "appearance")
        look_alike = [o for o in ep.objects if (o.shape, o.color) == (ep.expression.shape, ep.expression.color)]
        assert len(look_alike) == 1

    @settings(max_examples=60, deadline=None)
    @given(seeds, difficulties)
    def test_masks_nonempty_and_boxes_tight(self, seed, diff):
        ep = generate_episode(seed, diff)
        assert ep.gt_masks.dtype == np.uint8
        for m, box in zip(ep.gt_masks, ep.gt_boxes):
            assert m.sum() == SPRITES[ep.expression.shape].sum()
            np.testing.assert_array_equal(mask_to_box(m), box)

    @settings(max_examples=60, deadline=None)
    @given(seeds, difficulties)
    def test_mask_matches_referent_track(self, seed, diff):
        ep = generate_episode(seed, diff)
        ref = ep.objects[ep.referent]
        for t in range(ep.T):
            np.testing.assert_array_equal(ep.gt_masks[t], ref.mask(t, 16, 16).astype(np.uint8))
            # the referent's pixels carry its colour
            ch = COLORS.index(ref.color)
            assert np.all(ep.frames[t][ep.gt_masks[t] > 0, ch] == 1.0)

    @pytest.mark.parametrize("motion,axis,sign", [("right", 0, 1), ("left", 0, -1), ("down", 1, 1), ("up", 1, -1)])
    def test_motion_direction(self, motion, axis, sign):
        found = 0
        for seed in range(400):
            ep = generate_episode(seed, "appearance")
            if ep.expression.motion != motion:
                continue
            found += 1
            steps = sign * np.diff(centroids(ep.gt_masks)[:, axis])
            assert np.all(steps >= 0)
            assert np.sum(steps > 0) >= ep.T - 1
            other = np.diff(centroids(ep.gt_masks)[:, 1 - axis])
            assert np.all(other == 0)
        assert found > 5

    def test_static_does_not_move(self):
        for seed in range(200):
            ep = generate_episode(seed)
            if ep.expression.motion == "static":
                np.testing.assert_array_equal(np.diff(centroids(ep.gt_masks), axis=0), 0)

    def test_objects_do_not_overlap(self):
        for seed in range(100):
            ep = generate_episode(seed, episode_difficulty(seed, 0.5))
            for t in range(ep.T):
                cover = sum(o.mask(t, 16, 16).astype(int) for o in ep.objects)
                assert cover.max() == 1

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            generate_episode(0, "hard")
        with pytest.raises(ValueError):
            generate_episode(0, n_objects=1)

    def test_infeasible_placement(self):
        with pytest.raises(EpisodeError):
            generate_episode(0, T=6, H=6, W=6, n_objects=3)

    def test_more_objects_still_generate(self):
        ep = generate_episode(3, "motion-discriminative", n_objects=5)
        assert len(ep.objects) == 5 and matching_objects(ep) == [ep.referent]


class TestDataset:
    def test_mix_and_seeds(self):
        eps = generate_dataset(100, 40, motion_fraction=0.5)
        assert [e.seed for e in eps] == list(range(100, 140))
        n_motion = sum(e.difficulty == "motion-discriminative" for e in eps)
        assert abs(n_motion - 20) <= 1

    @pytest.mark.parametrize("frac", [0.0, 1.0])
    def test_extreme_fractions(self, frac):
        diffs = {episode_difficulty(i, frac) for i in range(50)}
        assert diffs == {"motion-discriminative" if frac else "appearance"}


class TestSerialization:
    @settings(max_examples=30, deadline=None)
    @given(seeds, difficulties)
    def test_round_trip(self, seed, diff):
        ep = generate_episode(seed, diff)
        back = from_bytes(to_bytes(ep))
        assert back == ep
        np.testing.assert_array_equal(back.frames, ep.frames)
        assert back.expression == ep.expression and back.referent == ep.referent

    def test_file_round_trip(self, tmp_path):
        ep = generate_episode(5, "motion-discriminative")
        save_episode(ep, tmp_path / "e.tcde")
        assert load_episode(tmp_path / "e.tcde") == ep

    def test_header(self):
        buf = to_bytes(generate_episode(0))
        assert buf[:4] == b"TCDE"
        assert np.frombuffer(buf[4:24], dtype="<u4").tolist() == [1, 6, 16, 16, 3]

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            from_bytes(b"XXXX" + to_bytes(generate_episode(0))[4:])


class TestExpression:
    def test_injective(self):
        codes = {tuple(ExpressionSpec(s, c, m).one_hot()) for s, c, m in itertools.product(SHAPES, COLORS, MOTIONS)}
        assert len(codes) == len(SHAPES) * len(COLORS) * len(MOTIONS)

    def test_layout(self):
        v = ExpressionSpec("disc", "b", "up").one_hot()
        assert v.shape == (EXPRESSION_DIM,) and EXPRESSION_DIM == 11
        assert np.nonzero(v)[0].tolist() == [1, 3 + 2, 6 + 2]

    def test_invalid(self):
        with pytest.raises(ValueError):
            ExpressionSpec("triangle", "r", "up")

    def test_zero_projection(self):
        enc = ExpressionEncoder(8, np.random.default_rng(0))
        enc.proj.weight.data[:] = 0.0
        np.testing.assert_array_equal(encode_expression(ExpressionSpec("bar", "g", "left"), enc).data, np.zeros(8))

    def test_projection_is_linear_in_code(self):
        enc = ExpressionEncoder(8, np.random.default_rng(1))
        spec = ExpressionSpec("square", "r", "static")
        np.testing.assert_allclose(encode_expression(spec, enc).data, spec.one_hot() @ enc.proj.weight.data, atol=1e-15)


class TestFusion:
    def setup_method(self):
        self.rng = np.random.default_rng(2)
        self.enc = FrameEncoder(8, 4, 4, self.rng)

    def test_saturated_gate_is_identity(self):
        self.enc.gate.bias.data[:] = 20.0
        self.enc.gate.weight.data[:] = 0.0
        frames = self.rng.random((2, 4, 4, 3))
        fused = fuse_features(frames, Tensor(self.rng.normal(size=8)), self.enc, with_position=False).data
        visual = self.enc.visual(frames).data
        np.testing.assert_allclose(fused, visual, rtol=1e-8)

    def test_black_frames_zero_features(self):
        for lin in (self.enc.conv, self.enc.merge):
            lin.bias.data[:] = 0.0
        fused = fuse_features(np.zeros((3, 4, 4, 3)), Tensor(self.rng.normal(size=8)), self.enc, with_position=False).data
        np.testing.assert_array_equal(fused, np.zeros((3, 4, 8)))

    def test_position_encoding_added(self):
        frames = self.rng.random((1, 4, 4, 3))
        fs = Tensor(self.rng.normal(size=8))
        diff = fuse_features(frames, fs, self.enc).data - fuse_features(frames, fs, self.enc, with_position=False).data
        np.testing.assert_allclose(diff[0], self.enc.pos, atol=1e-12)

    def test_pixel_features_shape(self):
        fused, pixels = self.enc.encode(self.rng.random((2, 3, 4, 4, 3)), Tensor(self.rng.normal(size=(2, 8))))
        assert fused.shape == (2, 3, 4, 8) and pixels.shape == (2, 3, 16, 8)

    def test_gradient(self):
        fs = Tensor(self.rng.normal(size=8), requires_grad=True)
        frames = self.rng.random((2, 4, 4, 3))
        w = self.rng.normal(size=(2, 4, 8))
        res = check_gradients(lambda: (fuse_features(frames, fs, self.enc) * w).sum(), [fs] + self.enc.parameters())
        assert res.passed, res

    def test_wrong_frame_size(self):
        with pytest.raises(ValueError):
            self.enc.visual(np.zeros((1, 6, 6, 3)))
