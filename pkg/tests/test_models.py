import numpy as np
import pytest

from weightmask import masks as M
from weightmask import tensor as T
from weightmask.models import FeedForwardNet, LSTMNet, PresentationSchedule
from weightmask.tensor import ShapeError


@pytest.fixture
def ffn():
    return FeedForwardNet([6, 8, 5, 4], np.random.default_rng(0))


def test_zero_input_zero_bias_gives_zero_logits(ffn):
    assert np.all(ffn.logits(np.zeros((3, 6))).data == 0)


def test_output_shape(ffn):
    assert ffn.logits(np.ones((7, 6))).shape == (7, 4)


def test_input_width_checked(ffn):
    with pytest.raises(ShapeError):
        ffn.logits(np.ones((2, 5)))


def test_all_ones_mask_is_identity(ffn):
    x = np.random.default_rng(1).normal(size=(4, 6))
    ones = M.threshold(M.init_mask(ffn.params)).ones_like()
    masked = ffn.logits(x, M.apply_mask(ffn.params, ones)).data
    assert masked.tobytes() == ffn.logits(x).data.tobytes()


def test_zero_mask_on_last_layer_leaves_bias(ffn):
    ffn.params["layer2.bias"].data[:] = [1, 2, 3, 4]
    bits = {n: np.ones(t.shape) for n, t in ffn.params.items()}
    bits["layer2.weight"] = np.zeros(ffn.params["layer2.weight"].shape)
    out = ffn.logits(np.ones((2, 6)), M.apply_mask(ffn.params, bits)).data
    np.testing.assert_array_equal(out, [[1, 2, 3, 4]] * 2)


def test_census(ffn):
    census = ffn.layer_census()
    assert census == {"layer0": 6 * 8 + 8, "layer1": 8 * 5 + 5, "layer2": 5 * 4 + 4}
    assert sum(census.values()) == ffn.params.numel()


def test_preset_census():
    net = FeedForwardNet([42, 400, 400, 200, 20], np.random.default_rng(0))
    assert net.params.numel() == 42 * 400 + 400 + 400 * 400 + 400 + 400 * 200 + 200 + 200 * 20 + 20


def test_kaiming_bound(ffn):
    w = ffn.params["layer0.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / 6)


def test_same_seed_same_init():
    a = FeedForwardNet([3, 4, 2], np.random.default_rng(5)).params.snapshot()
    b = FeedForwardNet([3, 4, 2], np.random.default_rng(5)).params.snapshot()
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)


class TestLSTM:
    def test_hidden_zero_rejected(self):
        with pytest.raises(ValueError):
            LSTMNet(4, 0, 2, np.random.default_rng(0))

    def test_forget_bias_one(self):
        net = LSTMNet(4, 3, 2, np.random.default_rng(0))
        assert net.params["lstm.bias"].data.tolist() == [0] * 3 + [1] * 3 + [0] * 6

    def test_state_continuity(self):
        net = LSTMNet(5, 7, 3, np.random.default_rng(2))
        xs = [np.random.default_rng(i).normal(size=(4, 5)) for i in range(6)]
        full, _ = net.run(xs, readout=[3, 6])
        first, state = net.run(xs[:3], readout=[3])
        second, _ = net.run(xs[3:], state=state, readout=[3])
        np.testing.assert_array_equal(full[0].data, first[0].data)
        np.testing.assert_array_equal(full[1].data, second[0].data)

    def test_repeat_all_single_readout(self):
        sched = PresentationSchedule("repeat-all", 3)
        assert sched.readout_steps == [3] and sched.horizon == 3
        net = LSTMNet(4, 6, 20, np.random.default_rng(0), sched)
        assert net.logits(np.ones((2, 4))).shape == (2, 20)

    def test_sequential_pairs(self):
        segs = (((0, 2), (0, 3)), ((2, 4), (3, 6)))
        sched = PresentationSchedule("sequential-pairs", 3, segs)
        assert sched.readout_steps == [3, 6]
        x = np.arange(8.0).reshape(2, 4)
        steps = sched.step_inputs(x)
        assert len(steps) == 6
        assert np.all(steps[0][:, 2:] == 0) and np.all(steps[5][:, :2] == 0)
        net = LSTMNet(4, 5, 6, np.random.default_rng(1), sched)
        out = net.logits(x).data
        outs, _ = net.run(steps, readout=[3, 6])
        np.testing.assert_array_equal(out[:, :3], outs[0].data[:, :3])
        np.testing.assert_array_equal(out[:, 3:], outs[1].data[:, 3:])

    def test_readout_outside_horizon(self):
        with pytest.raises(ValueError):
            PresentationSchedule("sequential-pairs", 3)

    def test_identity_mask(self):
        net = LSTMNet(4, 5, 3, np.random.default_rng(3))
        x = np.random.default_rng(0).normal(size=(2, 4))
        ones = {n: np.ones(t.shape) for n, t in net.params.items()}
        assert net.logits(x, M.apply_mask(net.params, ones)).data.tobytes() == net.logits(x).data.tobytes()

    def test_gradient_through_time(self):
        with T.precision(64):
            net = LSTMNet(3, 4, 2, np.random.default_rng(4), PresentationSchedule("repeat-all", 3))
            x = np.random.default_rng(5).normal(size=(2, 3))
            w = net.params["lstm.w_hh"]
            (g,) = T.grad(net.logits(x).sum(), [w])
            h = 1e-6
            i = (1, 2)
            old = w.data[i]
            w.data[i] = old + h
            fp = net.logits(x).sum().item()
            w.data[i] = old - h
            fm = net.logits(x).sum().item()
            w.data[i] = old
            assert g[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-5)
