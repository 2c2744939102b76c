import math

import numpy as np
import pytest

from gastkit import engine, geometry, losses, model
from gastkit.engine import Tensor
from gastkit.losses import LossConfig

from conftest import assert_grads_close, numeric_grad, numeric_grad_at
from oracles import focal_oracle, pull_push_oracle, radius_oracle


class TestTargets:
    def test_single_box_corner_pixels_are_one(self):
        tgt = losses.make_targets([(0, 3.0, 4.0, 9.0, 11.0)], 2, (16, 16))
        assert tgt.heatmaps["tl"][0, 4, 3] == 1.0
        assert tgt.heatmaps["br"][0, 11, 9] == 1.0
        assert tgt.heatmaps["tl"][1].max() == 0.0
        assert tgt.objects == [(0, (3, 4), (9, 11))]

    def test_distant_boxes_union(self):
        one = losses.make_targets([(0, 1, 1, 4, 4)], 1, (32, 32))
        two = losses.make_targets([(0, 20, 20, 26, 27)], 1, (32, 32))
        both = losses.make_targets([(0, 1, 1, 4, 4), (0, 20, 20, 26, 27)],
                                   1, (32, 32))
        np.testing.assert_array_equal(
            both.heatmaps["tl"][0],
            np.maximum(one.heatmaps["tl"][0], two.heatmaps["tl"][0]),
        )

    def test_overlapping_gaussians_take_max(self):
        both = losses.make_targets(
            [(0, 2, 2, 12, 12), (0, 4, 4, 14, 14)], 1, (24, 24)
        )
        singles = [
            losses.make_targets([b], 1, (24, 24)).heatmaps["tl"][0]
            for b in [(0, 2, 2, 12, 12), (0, 4, 4, 14, 14)]
        ]
        np.testing.assert_allclose(
            both.heatmaps["tl"][0], np.maximum(*singles)
        )

    @pytest.mark.parametrize("wh", [(40, 40), (10, 25), (3, 3), (7, 60)])
    def test_radius_matches_exhaustive_oracle(self, wh):
        w, h = wh
        assert losses.gaussian_radius(w, h, 0.3) == radius_oracle(w, h, 0.3)

    def test_degenerate_box_skipped(self, caplog):
        with caplog.at_level("WARNING"):
            tgt = losses.make_targets([(0, 5, 5, 5, 9)], 1, (16, 16))
        assert tgt.objects == []
        assert tgt.heatmaps["tl"].max() == 0.0
        assert any("degenerate" in r.message for r in caplog.records)


class TestFocal:
    def test_perfect_prediction_limit(self):
        target = np.zeros((1, 4, 4))
        target[0, 1, 1] = 1.0
        pred = np.full((1, 4, 4), 1e-9)
        pred[0, 1, 1] = 1.0 - 1e-9
        loss = losses.focal_loss(Tensor(pred), target)
        assert loss.item() < 1e-6

    def test_direct_substitution(self):
        target = np.ones((1, 1, 1))
        pred = np.full((1, 1, 1), 0.5)
        loss = losses.focal_loss(Tensor(pred), target, alpha=2.0)
        assert loss.item() == pytest.approx(-0.25 * math.log(0.5))

    def test_no_positives_uses_unit_normalizer(self):
        target = np.zeros((1, 2, 2))
        pred = np.full((1, 2, 2), 0.3)
        expected = -4 * (0.3**2) * math.log(0.7)
        assert losses.focal_loss(Tensor(pred), target).item() == pytest.approx(expected)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(20):
            pred = 1 / (1 + np.exp(-rng.standard_normal((2, 5, 5))))
            target = np.clip(rng.random((2, 5, 5)), 0, 0.999)
            # plant a few exact positives
            for _ in range(3):
                target[rng.integers(2), rng.integers(5), rng.integers(5)] = 1.0
            got = losses.focal_loss(Tensor(pred), target).item()
            want = focal_oracle(pred, target, 2.0, 4.0)
            assert got == pytest.approx(want, abs=1e-9)

    def test_gradient(self, rng):
        logits = rng.standard_normal((1, 4, 4))
        target = np.zeros((1, 4, 4))
        target[0, 2, 2] = 1.0

        def forward(z):
            zt = Tensor(z, requires_grad=True)
            loss = losses.focal_loss(engine.sigmoid(zt), target)
            loss.backward()
            return loss.item(), zt

        _, zt = forward(logits)
        assert_grads_close(zt.grad, numeric_grad(lambda v: forward(v)[0], logits))


class TestPullPush:
    def _maps(self, rng, h=8, w=8):
        return (Tensor(rng.standard_normal((1, h, w)), requires_grad=True),
                Tensor(rng.standard_normal((1, h, w)), requires_grad=True))

    def _objects(self, coords):
        return [(0, tl, br) for tl, br in coords]

    def test_equal_embeddings_zero_pull(self):
        m = Tensor(np.full((1, 4, 4), 2.5))
        objs = self._objects([((0, 0), (3, 3)), ((1, 1), (2, 2))])
        pull, _ = losses.pull_push_loss(m, m, objs)
        assert pull.item() == 0.0

    def test_identical_means_push_is_margin(self):
        m = Tensor(np.zeros((1, 4, 4)))
        objs = self._objects([((0, 0), (3, 3)), ((1, 1), (2, 2))])
        _, push = losses.pull_push_loss(m, m, objs, margin=1.0)
        assert push.item() == pytest.approx(1.0)

    def test_zero_objects(self, rng):
        tl, br = self._maps(rng)
        pull, push = losses.pull_push_loss(tl, br, [])
        assert pull.item() == 0.0 and push.item() == 0.0

    def test_single_object_no_push(self, rng):
        tl, br = self._maps(rng)
        _, push = losses.pull_push_loss(tl, br, self._objects([((0, 0), (3, 3))]))
        assert push.item() == 0.0

    def test_matches_pairwise_oracle(self, rng):
        for _ in range(20):
            tl, br = self._maps(rng)
            coords = [((int(a), int(b)), (int(c), int(d)))
                      for a, b, c, d in rng.integers(0, 8, (4, 4))]
            objs = self._objects(coords)
            pull, push = losses.pull_push_loss(tl, br, objs, margin=1.0)
            e_tl = [tl.data[0, y, x] for (x, y), _ in coords]
            e_br = [br.data[0, y, x] for _, (x, y) in coords]
            want_pull, want_push = pull_push_oracle(e_tl, e_br, 1.0)
            assert pull.item() == pytest.approx(want_pull, abs=1e-9)
            assert push.item() == pytest.approx(want_push, abs=1e-9)

    def test_permutation_invariance(self, rng):
        tl, br = self._maps(rng)
        coords = [((0, 1), (5, 6)), ((2, 3), (6, 7)), ((4, 0), (7, 5))]
        objs = self._objects(coords)
        ref = [t.item() for t in losses.pull_push_loss(tl, br, objs)]
        perm = [objs[2], objs[0], objs[1]]
        got = [t.item() for t in losses.pull_push_loss(tl, br, perm)]
        assert got == pytest.approx(ref, abs=1e-12)

    def test_gradient(self, rng):
        tl0 = rng.standard_normal((1, 6, 6))
        br0 = rng.standard_normal((1, 6, 6))
        objs = self._objects([((0, 1), (4, 5)), ((2, 2), (5, 3))])

        def forward(a, b):
            at = Tensor(a, requires_grad=True)
            bt = Tensor(b, requires_grad=True)
            pull, push = losses.pull_push_loss(at, bt, objs)
            loss = pull + 3.0 * push
            loss.backward()
            return loss.item(), at, bt

        _, at, bt = forward(tl0, br0)
        assert_grads_close(at.grad, numeric_grad(lambda v: forward(v, br0)[0], tl0))
        assert_grads_close(bt.grad, numeric_grad(lambda v: forward(tl0, v)[0], br0))


class TestTotalLoss:
    def _fields_and_targets(self, rng, boxes):
        fields = model.CornerFieldSet()
        targets = {}
        for slot in model.FRAME_SLOTS:
            for kind in model.CORNER_KINDS:
                logits = rng.standard_normal((1, 8, 8))
                fields.heatmaps[(slot, kind)] = Tensor(1 / (1 + np.exp(-logits)))
                fields.embeddings[(slot, kind)] = Tensor(
                    rng.standard_normal((1, 8, 8))
                )
            targets[slot] = losses.make_targets(boxes, 1, (8, 8))
        return fields, targets

    def test_focal_only_weights(self, rng):
        fields, targets = self._fields_and_targets(rng, [(0, 1, 1, 5, 6)])
        cfg = LossConfig(w_focal=1.0, w_pull=0.0, w_push=0.0)
        total, parts = losses.total_loss(fields, targets, cfg)
        assert total.item() == pytest.approx(parts["focal"])

    def test_zero_object_clip_is_pure_focal(self, rng):
        fields, targets = self._fields_and_targets(rng, [])
        total, parts = losses.total_loss(fields, targets)
        assert parts["pull"] == 0.0 and parts["push"] == 0.0
        assert total.item() == pytest.approx(parts["focal"])
        assert total.item() > 0.0

    def test_sums_both_slots(self, rng):
        fields, targets = self._fields_and_targets(rng, [(0, 1, 1, 5, 6)])
        total, parts = losses.total_loss(fields, targets)
        per_slot = []
        for slot in model.FRAME_SLOTS:
            t, _ = losses.total_loss(fields, {slot: targets[slot]})
            per_slot.append(t.item())
        assert total.item() == pytest.approx(sum(per_slot))

    def test_gradient_through_head_weight(self):
        cfg = model.ModelConfig(categories=2, clip_len=2, working_hw=(4, 4),
                                base_channels=4, fused_channels=8)
        net = model.CornerNetwork(cfg, seed=2, dtype=np.float64)
        prior = geometry.build_prior(
            [("v", c, (0.5, 1.0, 2.5, 3.0)) for c in range(2)], "v", 2, 4, 4
        )
        clip = np.random.default_rng(7).random((3, 2, 16, 16))
        boxes = [(0, 0.5, 1.0, 2.5, 3.0), (1, 1.0, 0.5, 3.5, 3.5)]
        targets = {s: losses.make_targets(boxes, 2, (4, 4))
                   for s in model.FRAME_SLOTS}

        def forward():
            net.zero_grad()
            fields = net(Tensor(clip), geometry.prior_input_stack(prior, np.float64))
            total, _ = losses.total_loss(fields, targets)
            total.backward()
            return total.item()

        forward()
        w = net.heads[0].weight
        analytic = w.grad.copy()
        w0 = w.data.copy()
        idx = list(range(0, w0.size, max(1, w0.size // 15)))

        def f(v):
            w.data = v.reshape(w0.shape)
            out = forward()
            w.data = w0
            return out

        num = numeric_grad_at(f, w0, idx, eps=1e-6)
        assert_grads_close(analytic.reshape(-1)[idx], num)
