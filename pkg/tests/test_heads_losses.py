import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempcd.autodiff import Tensor, check_gradients
from tempcd.config import load_config
from tempcd.decoder import TempCDLayer, init_state, run_layer
from tempcd.episodes import generate_dataset
from tempcd.heads import (
    BoxHead,
    PredictionSet,
    ReferentHead,
    SegmentationHead,
    bilinear_matrix,
    box_head,
    final_referent,
    nearest_matrix,
    segmentation_head,
    upsample_bilinear,
)
from tempcd.losses import (
    LossWeights,
    box_cxcywh_to_xyxy,
    dice_loss,
    focal_loss,
    generalized_iou,
    giou_loss,
    l1_loss,
    match_slots,
    referent_score_loss,
    referent_targets,
    slot_box_loss,
    total_loss,
)
from tempcd.model import TempCDModel
from tempcd.train import AdamW, compute_loss


def weighted_sum(out, seed=0):
    return (out * np.random.default_rng(seed).normal(size=out.shape)).sum()


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=float)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def distribution(T=3, N=2, C=8, seed=0):
    rng = np.random.default_rng(seed)
    layer = TempCDLayer(C, 2, 16, 16, T, rng)
    fs = Tensor(rng.normal(size=C))
    state = init_state(fs, T, N, Tensor(rng.normal(size=(N, C))))
    state, _, dist = run_layer(state, Tensor(rng.normal(size=(T, 4, C))), fs, layer)
    return state, dist, fs, ReferentHead(C, 16, rng)


class TestFinalReferent:
    def test_shape_and_indices(self):
        state, dist, fs, head = distribution()
        ref, idx = final_referent(dist, fs, head, state.queries)
        assert ref.shape == (3, 8)
        assert idx.shape == (3,) and np.all((idx >= 0) & (idx < 2))

    def test_single_query(self):
        state, dist, fs, head = distribution(N=1)
        _, idx = final_referent(dist, fs, head, state.queries)
        np.testing.assert_array_equal(idx, [0, 0, 0])

    @pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e3])
    def test_sentence_scale_invariance(self, c):
        state, dist, fs, head = distribution(N=4, seed=3)
        _, a = final_referent(dist, fs, head, state.queries)
        _, b = final_referent(dist, Tensor(fs.data * c), head, state.queries)
        np.testing.assert_array_equal(a, b)

    def test_formula(self):
        state, dist, fs, head = distribution(N=3, seed=4)
        ref, idx = final_referent(dist, fs, head, state.queries)
        for i in range(3):
            q = dist.updated_queries.data[i, idx[i]]
            row = head.mlp(head.norm(Tensor(dist.referent_sequence.data[i] + q))).data
            np.testing.assert_allclose(ref.data[i], row, atol=1e-12)

    def test_local_mode_uses_sentence(self):
        rng = np.random.default_rng(5)
        head = ReferentHead(4, 8, rng)
        fs = Tensor(rng.normal(size=4))
        queries = Tensor(rng.normal(size=(2, 3, 4)))
        ref, idx = final_referent(None, fs, head, queries)
        for i in range(2):
            row = head.mlp(head.norm(Tensor(fs.data + queries.data[i, idx[i]]))).data
            np.testing.assert_allclose(ref.data[i], row, atol=1e-12)
        with pytest.raises(ValueError):
            final_referent(None, fs, head)


class TestSegmentationHead:
    def test_constant_values_constant_logits(self):
        rng = np.random.default_rng(0)
        head = SegmentationHead(4, rng)
        v = np.tile(rng.normal(size=4), (2, 4, 1))
        logits = segmentation_head(Tensor(rng.normal(size=(2, 4))), Tensor(v), head, (2, 2)).data
        assert logits.shape == (2, 2, 2)
        for t in range(2):
            np.testing.assert_allclose(logits[t], logits[t, 0, 0], atol=1e-14)

    def test_zero_referent_zero_logits(self):
        rng = np.random.default_rng(1)
        head = SegmentationHead(4, rng)
        logits = head(Tensor(np.zeros((1, 4))), Tensor(rng.normal(size=(1, 4, 4))), (2, 2)).data
        np.testing.assert_array_equal(logits, np.zeros((1, 2, 2)))

    def test_resolution_mismatch(self):
        head = SegmentationHead(4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            head(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 6, 4))), (2, 2))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        head = SegmentationHead(4, rng)
        r = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        res = check_gradients(lambda: weighted_sum(head(r, v, (2, 2))), [r, v] + head.parameters())
        assert res.passed, res

    def test_pixel_features_full_resolution(self):
        rng = np.random.default_rng(3)
        head = SegmentationHead(4, rng)
        r = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        pix = Tensor(rng.normal(size=(2, 16, 4)), requires_grad=True)
        logits = head(r, v, (2, 2), pix, (4, 4))
        assert logits.shape == (2, 4, 4)
        res = check_gradients(lambda: weighted_sum(head(r, v, (2, 2), pix, (4, 4))), [r, v, pix])
        assert res.passed, res

    def test_nearest_matrix_copies_cells(self):
        m = nearest_matrix((4, 4), (2, 2))
        np.testing.assert_array_equal(m.sum(axis=1), np.ones(16))
        grid = np.arange(4.0)
        np.testing.assert_array_equal((m @ grid).reshape(4, 4), np.kron(grid.reshape(2, 2), np.ones((2, 2))))


class TestUpsample:
    def test_constant_preserved(self):
        out = upsample_bilinear(Tensor(np.full((2, 3, 3), 1.5)), (7, 5)).data
        np.testing.assert_allclose(out, 1.5, atol=1e-15)

    def test_rows_are_convex_weights(self):
        m = bilinear_matrix(16, 8)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert np.all(m >= 0)

    def test_identity_at_same_size(self):
        np.testing.assert_allclose(bilinear_matrix(5, 5), np.eye(5), atol=1e-15)


class TestBoxHead:
    def test_zero_weights(self):
        head = BoxHead(4, 8, np.random.default_rng(0))
        for p in head.parameters():
            p.data = np.zeros_like(p.data)
        np.testing.assert_array_equal(box_head(Tensor(np.ones((3, 4))), head).data, np.full((3, 4), 0.5))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 100.0))
    def test_range(self, seed, scale):
        rng = np.random.default_rng(seed)
        out = BoxHead(4, 8, rng)(Tensor(rng.normal(size=(5, 4)) * scale)).data
        assert np.all((out >= 0) & (out <= 1))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        head = BoxHead(4, 8, rng)
        r = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        res = check_gradients(lambda: weighted_sum(head(r)), [r] + head.parameters())
        assert res.passed, res


class TestDice:
    def test_perfect(self):
        assert dice_loss(Tensor(np.ones((1, 2, 2))), np.ones((1, 2, 2))).item() == pytest.approx(0.0, abs=1e-15)

    def test_analytic(self):
        assert dice_loss(Tensor(np.zeros((1, 2, 2))), np.ones((1, 2, 2))).item() == pytest.approx(0.8, abs=1e-12)

    def test_empty(self):
        assert dice_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 2))).item() == 0.0

    def test_frames_pooled_jointly(self):
        pred = np.zeros((2, 2, 2))
        pred[0] = 1
        gt = np.ones((2, 2, 2))
        # joint: 1 - (2*4 + 1) / (4 + 8 + 1)
        assert dice_loss(Tensor(pred), gt).item() == pytest.approx(1 - 9 / 13, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        v = dice_loss(Tensor(rng.random((2, 3, 3))), (rng.random((2, 3, 3)) > 0.5).astype(float)).item()
        assert 0.0 <= v < 1.0


class TestFocal:
    def test_analytic(self):
        want = 0.25 * 0.5**2 * -math.log(0.5)
        assert focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1))).item() == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(0.043322, abs=1e-6)

    def test_confident_limit(self):
        assert focal_loss(Tensor(np.full((1, 1), 20.0)), np.ones((1, 1))).item() < 1e-6

    def test_negative_pixel_weight(self):
        # y = 0 uses 1 - alpha and p^gamma
        want = 0.75 * 0.5**2 * -math.log(0.5)
        assert focal_loss(Tensor(np.zeros((1, 1))), np.zeros((1, 1))).item() == pytest.approx(want, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 3)) * 2, requires_grad=True)
        y = (rng.random((2, 3, 3)) > 0.5).astype(float)
        assert check_gradients(lambda: focal_loss(x, y), [x]).passed

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        assert focal_loss(Tensor(rng.normal(size=(4, 4)) * 10), (rng.random((4, 4)) > 0.5).astype(float)).item() >= 0


def giou_direct(a, b):
    """Reference GIoU for corner boxes, in plain floats."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (hull - union) / hull


class TestBoxLosses:
    def test_identical(self):
        box = np.array([[0.4, 0.5, 0.2, 0.3]])
        assert giou_loss(Tensor(box), box).item() == pytest.approx(0.0, abs=1e-15)
        assert l1_loss(Tensor(box), box).item() == 0.0

    def test_disjoint_analytic(self):
        pred = xyxy_to_cxcywh([[0, 0, 1, 1]])
        gt = xyxy_to_cxcywh([[2, 2, 3, 3]])
        assert generalized_iou(Tensor(np.array([[0.0, 0, 1, 1]])), Tensor(np.array([[2.0, 2, 3, 3]]))).item() == pytest.approx(-7 / 9, abs=1e-12)
        assert giou_loss(Tensor(pred), gt).item() == pytest.approx(16 / 9, abs=1e-12)

    def test_corner_conversion(self):
        np.testing.assert_allclose(box_cxcywh_to_xyxy(Tensor(np.array([0.5, 0.5, 0.2, 0.4]))).data, [0.4, 0.3, 0.6, 0.7])

    def test_rejects_degenerate_gt(self):
        with pytest.raises(ValueError):
            giou_loss(Tensor(np.array([[0.5, 0.5, 0.1, 0.1]])), np.array([[0.5, 0.5, 0.0, 0.1]]))

    def test_l1_value(self):
        pred = np.array([[0.1, 0.2, 0.3, 0.4]])
        gt = np.array([[0.2, 0.2, 0.1, 0.5]])
        assert l1_loss(Tensor(pred), gt).item() == pytest.approx((0.1 + 0 + 0.2 + 0.1) / 4, abs=1e-15)

    def test_giou_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        lo = rng.uniform(0, 1, size=(1000, 2, 2))
        wh = rng.uniform(0.01, 1, size=(1000, 2, 2))
        a = np.concatenate([lo[:, 0], lo[:, 0] + wh[:, 0]], axis=-1)
        b = np.concatenate([lo[:, 1], lo[:, 1] + wh[:, 1]], axis=-1)
        g = generalized_iou(Tensor(a), Tensor(b)).data
        want = np.array([giou_direct(x, y) for x, y in zip(a, b)])
        np.testing.assert_allclose(g, want, atol=1e-12)
        assert np.all((g >= -1) & (g <= 1))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        raw = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        gt = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1)
        assert check_gradients(lambda: giou_loss(raw.sigmoid(), gt) + l1_loss(raw.sigmoid(), gt), [raw]).passed


class Pred:
    def __init__(self, logits, boxes):
        self.mask_logits, self.boxes = Tensor(logits), Tensor(boxes)


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.gt_masks = (rng.random((2, 3, 4, 4)) > 0.5).astype(float)
        self.gt_boxes = np.concatenate([rng.uniform(0.3, 0.7, (2, 3, 2)), rng.uniform(0.1, 0.4, (2, 3, 2))], axis=-1)
        self.rng = rng

    def random_pred(self):
        return Pred(self.rng.normal(size=(2, 3, 4, 4)), self.rng.uniform(0.1, 0.9, size=(2, 3, 4)))

    def test_perfect_predictions(self):
        perfect = Pred(np.where(self.gt_masks > 0, 20.0, -20.0), self.gt_boxes)
        out = total_loss([perfect, perfect, perfect], self.gt_masks, self.gt_boxes)
        assert out.total.item() < 1e-3

    def test_bookkeeping_unit_weights(self):
        out = total_loss([self.random_pred()], self.gt_masks, self.gt_boxes, LossWeights(1, 1, 1, 1))
        assert out.total.item() == out.dice + out.focal + out.giou + out.l1

    def test_default_weights(self):
        out = total_loss([self.random_pred()], self.gt_masks, self.gt_boxes)
        want = 5 * out.dice + 2 * out.focal + 2 * out.giou + 5 * out.l1
        assert out.total.item() == pytest.approx(want, rel=1e-14)

    def test_dice_weight_linear(self):
        preds = [self.random_pred(), self.random_pred()]
        one = total_loss(preds, self.gt_masks, self.gt_boxes, LossWeights(1, 1, 1, 1))
        two = total_loss(preds, self.gt_masks, self.gt_boxes, LossWeights(2, 1, 1, 1))
        assert two.total.item() - one.total.item() == pytest.approx(one.dice, rel=1e-12)

    def test_layers_equally_weighted(self):
        a, b = self.random_pred(), self.random_pred()
        both = total_loss([a, b], self.gt_masks, self.gt_boxes).total.item()
        sep = total_loss([a], self.gt_masks, self.gt_boxes).total.item() + total_loss([b], self.gt_masks, self.gt_boxes).total.item()
        assert both == pytest.approx(sep, rel=1e-14)
        assert len(total_loss([a, b], self.gt_masks, self.gt_boxes).per_layer) == 2

    def test_needs_a_layer(self):
        with pytest.raises(ValueError):
            total_loss([], self.gt_masks, self.gt_boxes)

    def test_terms_in_range(self):
        out = total_loss([self.random_pred()], self.gt_masks, self.gt_boxes)
        assert 0 <= out.dice < 1 and out.focal >= 0 and 0 <= out.giou <= 2 and out.l1 >= 0


def random_tracks(rng, K, T):
    return np.concatenate([rng.uniform(0.3, 0.7, (K, T, 2)), rng.uniform(0.1, 0.4, (K, T, 2))], axis=-1)


class TestSlotMatching:
    def test_recovers_planted_assignment(self):
        rng = np.random.default_rng(3)
        tracks = random_tracks(rng, 3, 4)
        slots = random_tracks(rng, 5, 4).transpose(1, 0, 2).copy()  # [T, N, 4]
        planted = np.array([4, 0, 2])
        slots[:, planted] = tracks.transpose(1, 0, 2)
        objs, chosen = match_slots(slots, tracks)
        np.testing.assert_array_equal(objs, [0, 1, 2])
        np.testing.assert_array_equal(chosen, planted)
        loss = slot_box_loss(Tensor(slots[None]), tracks[None])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_assignment_spans_the_clip(self):
        # slot 0 fits object 0 in one frame only; summed over frames slot 1 wins
        tracks = np.array([[[0.5, 0.5, 0.2, 0.2]] * 3])
        slots = np.array([[[0.5, 0.5, 0.2, 0.2], [0.52, 0.5, 0.2, 0.2]],
                          [[0.9, 0.9, 0.1, 0.1], [0.52, 0.5, 0.2, 0.2]],
                          [[0.9, 0.9, 0.1, 0.1], [0.52, 0.5, 0.2, 0.2]]])
        assert match_slots(slots, tracks)[1].tolist() == [1]

    def test_more_objects_than_slots(self):
        rng = np.random.default_rng(4)
        tracks = random_tracks(rng, 4, 2)
        slots = tracks[[3, 1]].transpose(1, 0, 2).copy()
        objs, chosen = match_slots(slots, tracks)
        assert objs.tolist() == [3, 1] and chosen.tolist() == [0, 1]

    def test_matches_unique_brute_force_minimum(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            tracks, slots = random_tracks(rng, 2, 3), random_tracks(rng, 3, 3).transpose(1, 0, 2).copy()
            _, chosen = match_slots(slots, tracks, 1.0, 1.0)
            costs = {}
            for a in range(3):
                for b in range(3):
                    if a != b:
                        pair = slots[:, [a, b]].transpose(1, 0, 2)
                        costs[(a, b)] = sum(
                            (1 - giou_direct(xyxy(pair[k, t]), xyxy(tracks[k, t]))) + np.abs(pair[k, t] - tracks[k, t]).mean()
                            for k in range(2) for t in range(3))
            assert tuple(chosen) == min(costs, key=costs.get)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        slots = Tensor(random_tracks(rng, 3, 2).transpose(1, 0, 2)[None].copy(), requires_grad=True)
        tracks = random_tracks(rng, 2, 2)[None]
        res = check_gradients(lambda: slot_box_loss(slots, tracks), [slots])
        assert res.passed, res

    def test_weight_gates_the_term(self):
        rng = np.random.default_rng(7)
        pred = Pred(rng.normal(size=(1, 2, 4, 4)), rng.uniform(0.2, 0.8, (1, 2, 4)))
        pred.slot_boxes = Tensor(random_tracks(rng, 3, 2).transpose(1, 0, 2)[None].copy())
        masks, boxes = (rng.random((1, 2, 4, 4)) > 0.5).astype(float), random_tracks(rng, 1, 2)
        tracks = random_tracks(rng, 2, 2)[None]
        off = total_loss([pred], masks, boxes, LossWeights(), tracks)
        on = total_loss([pred], masks, boxes, LossWeights(slots=0.5), tracks)
        assert off.slots == 0.0
        assert on.total.item() - off.total.item() == pytest.approx(0.5 * on.slots, rel=1e-12)
        assert on.slots == pytest.approx(slot_box_loss(pred.slot_boxes, tracks).item(), rel=1e-14)


class TestReferentScores:
    def test_uniform_scores_give_log_n(self):
        loss = referent_score_loss(Tensor(np.zeros((2, 3, 4))), np.array([1, 3]))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_analytic_two_slots(self):
        # softmax([1, -1] / 0.5) puts e^2 / (e^2 + e^-2) on slot 0
        loss = referent_score_loss(Tensor(np.array([[1.0, -1.0]])), np.array([0]), tau=0.5)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-4)), abs=1e-12)

    def test_unmatched_clips_are_skipped(self):
        scores = Tensor(np.array([[2.0, 0.0], [0.0, 0.0]]))
        only = referent_score_loss(Tensor(np.array([[0.0, 0.0]])), np.array([1]))
        assert referent_score_loss(scores, np.array([-1, 1])).item() == pytest.approx(only.item(), abs=1e-15)
        assert referent_score_loss(scores, np.array([-1, -1])).item() == 0.0

    def test_targets_follow_matching(self):
        matches = [(np.array([0, 1, 2]), np.array([3, 0, 1])), (np.array([2, 0]), np.array([0, 1]))]
        assert referent_targets(matches, [2, 1]).tolist() == [1, -1]

    def test_gradient(self):
        rng = np.random.default_rng(8)
        s = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        res = check_gradients(lambda: referent_score_loss(s, np.array([2, 0]), tau=0.7), [s])
        assert res.passed, res


def xyxy(b):
    return (b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)


def test_descent_on_frozen_batch():
    cfg = load_config(overrides={"model.C": 8, "model.heads": 2, "model.L": 2, "model.N": 2,
                                 "model.H_mlp": 16, "model.ffn_hidden": 16})
    model = TempCDModel(cfg)
    batch = generate_dataset(7, 2)
    opt = AdamW(model.parameters(), lr=3e-3)
    first = None
    for _ in range(50):
        opt.zero_grad()
        breakdown, _ = compute_loss(model, batch, rng=None)
        first = first or breakdown.as_dict()
        breakdown.total.backward()
        opt.step()
    last = compute_loss(model, batch, rng=None)[0].as_dict()
    for key in ("dice", "focal", "giou", "l1", "total"):
        assert last[key] < first[key], key
