import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from weightmask import metrics
from weightmask.masks import BinaryMask
from weightmask.models import FeedForwardNet
from weightmask.tasks import ADD, MUL, DatasetBatch


def bm(*bits):
    return BinaryMask({"w": np.array(bits, bool)})


class TestIoU:
    def test_disjoint(self):
        assert metrics.iou(bm(1, 1, 0, 0), bm(0, 0, 1, 1)) == 0
        assert metrics.iomin(bm(1, 1, 0, 0), bm(0, 0, 1, 1)) == 0

    def test_subset(self):
        a, b = bm(1, 1, 0, 0), bm(1, 1, 1, 1)
        assert metrics.iou(a, b) == 0.5 and metrics.iomin(a, b) == 1.0

    def test_identical(self):
        a = bm(1, 0, 1)
        assert metrics.iou(a, a) == 1 and metrics.iomin(a, a) == 1

    def test_empty_convention(self):
        assert metrics.iou(bm(0, 0), bm(1, 1)) == 0
        assert metrics.iomin(bm(0, 0), bm(1, 1)) == 0
        assert metrics.iou(bm(0, 0), bm(0, 0)) == 0

    def test_misaligned(self):
        with pytest.raises(ValueError):
            metrics.iou(bm(1, 0), bm(1, 0, 1))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 60).flatmap(lambda n: st.tuples(arrays(bool, n), arrays(bool, n))))
    def test_bounds_and_symmetry(self, pair):
        a, b = BinaryMask({"w": pair[0]}), BinaryMask({"w": pair[1]})
        u, m = metrics.iou(a, b), metrics.iomin(a, b)
        assert 0 <= u <= m <= 1
        assert u == metrics.iou(b, a) and m == metrics.iomin(b, a)
        if a.kept() == b.kept() and a.kept():
            # equal sizes k: IoU = I / (2k - I) and IoMin = I / k
            assert u == pytest.approx(m / (2 - m))
        s = metrics.sharing_stats(a, b)
        assert s.intersection <= min(s.kept_a, s.kept_b)
        assert a.kept() + a.invert().kept() == a.total()


class TestPerLayer:
    def test_identical_masks_all_one(self):
        rng = np.random.default_rng(0)
        m = BinaryMask({"l0": rng.random((4, 3)) > 0.3, "l1": rng.random((3, 2)) > 0.3})
        rep = metrics.per_layer_sharing(m, m)
        assert all(v == 1.0 for v in rep.shared_fraction().values())

    def test_groups_and_rows(self):
        a = BinaryMask({"w0": np.array([1, 1, 0]), "b0": np.array([1]), "w1": np.array([1, 0])})
        b = BinaryMask({"w0": np.array([0, 1, 1]), "b0": np.array([1]), "w1": np.array([0, 1])})
        rep = metrics.per_layer_sharing(a, b, [("layer0", ["w0"]), ("layer1", ["w1"])])
        assert rep.per_layer["layer0"].iou == pytest.approx(1 / 3)
        assert rep.per_layer["layer1"].iou == 0
        assert rep.per_tensor["b0"].iou == 1
        rows = rep.rows()
        assert {r["metric"] for r in rows} >= {"iou", "iomin", "shared_fraction", "intersection"}
        assert rep.to_dict()["totals"]["kept_a"] == 4


class TestAccuracy:
    def test_all_groups_rule(self):
        preds = np.array([[3, 2], [4, 2], [3, 2]])
        targets = np.array([[3, 2], [3, 2], [3, -1]])
        assert metrics.group_accuracy(preds, targets) == pytest.approx(2 / 3)

    def test_masked_model_accuracy(self):
        net = FeedForwardNet([3, 4], np.random.default_rng(0))
        x = np.eye(3, dtype=np.float32)
        net.params["layer0.weight"].data[:] = 0
        net.params["layer0.weight"].data[[0, 1, 2], [1, 2, 3]] = 1
        batch = DatasetBatch(x, np.array([[1], [2], [3]]), group_size=4)
        assert metrics.accuracy(net, None, batch) == 1.0
        zero = BinaryMask({n: np.zeros(t.shape) for n, t in net.params.items()})
        assert metrics.accuracy(net, zero, batch) == 0.0


class TestBehavior:
    @pytest.mark.parametrize("pred, label", [(12, "mul"), (7, "add"), (9, "none")])
    def test_examples(self, pred, label):
        labels, tie = metrics.classify_behavior(3, 4, pred)
        assert labels[0] == label and not tie[0]

    def test_tie_goes_to_commanded(self):
        # 2 + 2 == 2 * 2
        labels, tie = metrics.classify_behavior([2, 2], [2, 2], [4, 4], [ADD, MUL])
        assert tie.all() and labels.tolist() == ["add", "mul"]

    def test_exactly_one_label(self):
        rng = np.random.default_rng(0)
        a, b, p = rng.integers(0, 100, (3, 1000))
        labels, _ = metrics.classify_behavior(a, b, p, rng.integers(0, 2, 1000))
        assert set(labels) <= set(metrics.BEHAVIORS) and len(labels) == 1000

    def test_matrix_rows_normalized(self):
        labels = np.array(["add", "add", "none", "mul"], dtype=object)
        grid = metrics.behavior_matrix(labels, np.array([ADD, ADD, MUL, MUL]))
        assert grid["add"]["add"] == 1 and grid["mul"]["none"] == 0.5


class TestConfusion:
    def test_row_stochastic(self):
        rng = np.random.default_rng(0)
        cm = metrics.confusion_matrix(rng.integers(0, 10, 500), rng.integers(0, 10, 500), 10)
        np.testing.assert_allclose(cm.sum(axis=1), 1, atol=1e-6)

    def test_identical_masks_zero_delta(self):
        net = FeedForwardNet([5, 10], np.random.default_rng(0))
        m = BinaryMask({n: np.ones(t.shape) for n, t in net.params.items()})
        x = np.random.default_rng(1).normal(size=(200, 5)).astype(np.float32)
        batch = DatasetBatch(x, np.random.default_rng(2).integers(0, 10, (200, 1)))
        d = metrics.confusion_delta(net, m, m, batch, 3)
        assert np.all(d.delta == 0)
        np.testing.assert_allclose(d.delta.sum(axis=1), 0, atol=1e-6)

    def test_largest_drop(self):
        base = np.eye(3)
        treated = np.array([[1, 0, 0], [0.3, 0.4, 0.3], [0, 0.1, 0.9]])
        d = metrics.ConfusionDelta(base, treated, 1)
        assert d.removed_is_largest_drop()
        assert not metrics.ConfusionDelta(base, treated, 2).removed_is_largest_drop()


class TestHalfMask:
    def test_split_near_half(self):
        net = FeedForwardNet([42, 400, 400, 200, 20], np.random.default_rng(0))
        sp = metrics.half_split(net)
        assert abs(sp.early_fraction - 0.5) < 0.01
        early = metrics.early_side(net, sp)
        n_early = sum(int(e.sum()) for e in early.values())
        assert n_early / net.params.numel() == pytest.approx(sp.early_fraction)

    def test_all_ones_no_drop(self):
        net = FeedForwardNet([4, 6, 3], np.random.default_rng(0))
        ones = BinaryMask({n: np.ones(t.shape) for n, t in net.params.items()})
        x = np.random.default_rng(1).normal(size=(50, 4)).astype(np.float32)
        batch = DatasetBatch(x, np.random.default_rng(2).integers(0, 3, (50, 1)), group_size=3)
        for side in ("mask-early", "mask-late"):
            assert metrics.half_mask_eval(net, ones, side, batch)["drop"] == 0

    def test_sides_partition_the_mask(self):
        net = FeedForwardNet([4, 6, 5, 3], np.random.default_rng(0))
        rng = np.random.default_rng(3)
        full = BinaryMask({n: rng.random(t.shape) > 0.5 for n, t in net.params.items()})
        early = metrics.early_side(net, metrics.half_split(net))
        e = metrics.half_mask_bits(full, early, "mask-early")
        late = metrics.half_mask_bits(full, early, "mask-late")
        for n in full.names():
            # removed weights split between the two halves with nothing lost or doubled
            assert np.array_equal(~full.bits[n], ~e.bits[n] ^ ~late.bits[n])
