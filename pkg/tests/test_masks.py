import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from weightmask import masks as M
from weightmask import tensor as T
from weightmask.masks import BinaryMask
from weightmask.optim import ParamStore


def sigma(x):
    return 1 / (1 + np.exp(-x))


def store(**tensors):
    p = ParamStore()
    for n, v in tensors.items():
        p.add(n, np.asarray(v, dtype=float))
    return p


def scalar_mask(l: float, n: int, tau: float = 1.0) -> M.MaskSet:
    logits = ParamStore()
    logits.add("w", np.full(n, l))
    return M.MaskSet(logits, tau=tau)


class TestInit:
    @pytest.mark.parametrize("p, expected", [(0.9, 2.19722), (0.5, 0.0), (0.27, -0.9946)])
    def test_logit_values(self, p, expected):
        m = M.init_mask(store(w=np.zeros((2, 3))), keep_prob=p)
        np.testing.assert_allclose(m.logits["w"].data, expected, atol=1e-4)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_keep_prob_outside_open_interval(self, p):
        with pytest.raises(ValueError):
            M.init_mask(store(w=[1.0]), keep_prob=p)

    def test_excluded_not_masked(self):
        m = M.init_mask(store(w=[1.0, 2.0], emb=[3.0]), exclude=["emb"])
        assert m.trained_names() == ["w"]

    def test_alignment_enforced(self):
        m = M.init_mask(store(w=[1.0, 2.0]))
        with pytest.raises(ValueError):
            m.check_aligned(store(w=[1.0, 2.0, 3.0]))


class TestSampling:
    def test_symmetric_draw_gives_half(self):
        m = scalar_mask(0.0, 1)
        s = M.sample_soft(m, uniforms={"w": np.full((2, 1), 0.5)})
        assert s["w"].data[0] == pytest.approx(0.5)

    def test_saturated_logit(self):
        m = scalar_mask(10.0, 10_000)
        s = M.sample_soft(m, np.random.default_rng(0))["w"].data
        assert np.median(s) > 0.99
        assert np.mean(s > 0.5) == pytest.approx(sigma(10.0), abs=1e-3)

    def test_soft_sample_in_open_interval(self):
        m = scalar_mask(0.3, 50_000)
        s = M.sample_soft(m, np.random.default_rng(1))["w"].data
        assert np.all((s >= 0) & (s <= 1))

    def test_soft_probability_matches_uniform_oracle(self):
        # P(s > 0.5) = P(U2 ** e^l < U1) = sigma(1) = 0.7311
        m = scalar_mask(1.0, 100_000)
        s = M.sample_soft(m, np.random.default_rng(2))["w"].data
        assert np.mean(s > 0.5) == pytest.approx(0.7311, abs=0.005)

    def test_uniform_clamp_keeps_logs_finite(self):
        m = scalar_mask(0.0, 3)
        u = np.array([[0.0, 0.5, 1 - 2**-24], [0.5, 0.0, 0.5]])
        u = np.maximum(u, M.UNIFORM_EPS)
        s = M.sample_soft(m, uniforms={"w": u})["w"].data
        assert np.all(np.isfinite(s))

    def test_fresh_noise_each_draw(self):
        m = scalar_mask(0.0, 1000)
        g = np.random.default_rng(3)
        a = M.sample_soft(m, g)["w"].data
        b = M.sample_soft(m, g)["w"].data
        assert not np.array_equal(a, b)

    def test_needs_rng_or_uniforms(self):
        with pytest.raises(ValueError):
            M.sample_soft(scalar_mask(0.0, 1))


class TestStraightThrough:
    def test_forward_threshold(self):
        b = M.binarize_ste(T.Tensor([0.7, 0.3]))
        assert b.data.tolist() == [1.0, 0.0]

    def test_identity_gradient(self):
        s = T.Tensor([0.3], requires_grad=True)
        (g,) = T.grad(M.binarize_ste(s).sum(), [s])
        assert g.tolist() == [1.0]

    def test_value_equals_hard_threshold_and_gradients_match(self):
        m = scalar_mask(0.0, 500)
        m.logits["w"].data[:] = np.linspace(-3, 3, 500)
        u = M.draw_uniforms(m, np.random.default_rng(4))
        s = M.sample_soft(m, uniforms=u)["w"]
        b = M.sample_binary(m, uniforms=u)["w"]
        np.testing.assert_array_equal(b.data, (s.data > 0.5).astype(b.data.dtype))
        (g_b,) = T.grad(M.sample_binary(m, uniforms=u)["w"].sum(), [m.logits["w"]])
        (g_s,) = T.grad(M.sample_soft(m, uniforms=u)["w"].sum(), [m.logits["w"]])
        np.testing.assert_array_equal(g_b, g_s)


class TestBernoulliLaw:
    N = 100_000

    @pytest.mark.parametrize("l", [-2.0, -1.0, 0.0, 1.0, 2.0])
    def test_mean_is_sigmoid_of_logit(self, l):
        m = scalar_mask(l, self.N)
        b = M.sample_binary(m, np.random.default_rng(int(l * 10) + 50))["w"].data
        p = sigma(l)
        assert abs(b.mean() - p) < 4 * np.sqrt(p * (1 - p) / self.N)

    def test_temperature_does_not_change_law(self):
        p = sigma(1.0)
        sd = np.sqrt(p * (1 - p) / self.N)
        means = []
        for i, tau in enumerate((0.5, 1.0, 2.0)):
            m = scalar_mask(1.0, self.N, tau=tau)
            means.append(M.sample_binary(m, np.random.default_rng(100 + i))["w"].data.mean())
        for i in range(3):
            for j in range(i + 1, 3):
                # difference of two independent estimates has sd * sqrt(2)
                assert abs(means[i] - means[j]) < 4 * sd * np.sqrt(2)

    @pytest.mark.parametrize("l", [-2.0, 0.0, 1.5])
    def test_exact_agreement_with_uniform_inequality(self, l):
        m = scalar_mask(l, self.N)
        with T.precision(64):
            m64 = scalar_mask(l, self.N)
            u = M.draw_uniforms(m64, np.random.default_rng(7))
            b = M.sample_binary(m64, uniforms=u)["w"].data
            oracle = u["w"][1].astype(np.float64) ** np.exp(l) < u["w"][0]
        assert np.count_nonzero(b.astype(bool) != oracle) == 0
        assert m.logits["w"].size == self.N


class TestApplyMask:
    def test_elementwise(self):
        p = store(w=[1.0, -2.0, 3.0])
        out = M.apply_mask(p, {"w": np.array([1.0, 0.0, 1.0])})
        assert out["w"].data.tolist() == [1.0, 0.0, 3.0]
        assert p["w"].data.tolist() == [1.0, -2.0, 3.0]

    def test_excluded_pass_through(self):
        p = store(w=[1.0], emb=[5.0])
        out = M.apply_mask(p, {"w": np.array([0.0])})
        assert out["emb"] is p["emb"]

    def test_misaligned(self):
        with pytest.raises(ValueError):
            M.apply_mask(store(w=[1.0, 2.0]), {"w": np.ones(3)})
        with pytest.raises(ValueError):
            M.apply_mask(store(w=[1.0, 2.0]), {"v": np.ones(2)})


class TestRegularizer:
    def test_value(self):
        m = M.MaskSet(store(w=[1.0, 2.0, 3.0]))
        assert M.regularizer(m, 1e-4).item() == pytest.approx(6e-4)

    def test_zero_cases(self):
        m = M.MaskSet(store(w=[0.0, 0.0]))
        assert M.regularizer(m, 1.0).item() == 0
        m = M.MaskSet(store(w=[4.0, -1.0]))
        assert M.regularizer(m, 0.0).item() == 0

    def test_gradient_is_alpha(self):
        with T.precision(64):
            m = M.MaskSet(store(w=np.random.default_rng(0).normal(size=(4, 5)), b=[1.0, -3.0]))
            grads = T.grad(M.regularizer(m, 3e-5), m.logits.tensors())
        for g in grads:
            assert np.all(g == 3e-5)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            M.regularizer(M.MaskSet(store(w=[1.0])), -1.0)


class TestThresholdInvert:
    def test_threshold_strict(self):
        m = M.MaskSet(store(w=[2.197, -1.0, 0.0]))
        assert M.threshold(m).bits["w"].tolist() == [True, False, False]

    def test_invert(self):
        bm = BinaryMask({"w": np.array([1, 0, 1])})
        assert M.invert(bm).bits["w"].tolist() == [False, True, False]

    @settings(max_examples=50, deadline=None)
    @given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))))
    def test_involution_and_partition(self, bits):
        bm = BinaryMask({"w": bits})
        inv = bm.invert()
        assert inv.invert().equals(bm)
        assert not np.any(bm.bits["w"] & inv.bits["w"])
        assert np.all(bm.bits["w"] | inv.bits["w"])
        assert bm.kept() + inv.kept() == bm.total()

    def test_fixed_bits_survive_threshold(self):
        p = store(w=[1.0, 2.0], out=[3.0, 4.0])
        m = M.init_mask(p, fixed={"out": np.array([True, False])})
        bm = M.threshold(m)
        assert bm.bits["out"].tolist() == [True, False]
        assert m.trained_names() == ["w"]

    def test_pack_round_trip(self):
        rng = np.random.default_rng(0)
        bm = BinaryMask({"a": rng.random((7, 3)) > 0.5, "b": rng.random(13) > 0.5})
        back = BinaryMask.unpack(bm.pack(), {"a": (7, 3), "b": (13,)})
        assert back.equals(bm)


class TestMultiSample:
    @pytest.mark.parametrize("n, k, sizes", [(128, 4, [32] * 4), (10, 4, [3, 3, 2, 2]), (5, 1, [5])])
    def test_split_sizes(self, n, k, sizes):
        assert M.split_sizes(n, k) == sizes

    def test_k_larger_than_batch(self):
        with pytest.raises(ValueError):
            M.split_sizes(3, 4)

    def _setup(self):
        p = store(w=np.arange(6.0).reshape(3, 2) / 6)
        p.freeze()
        m = M.init_mask(p, 0.7)
        x = np.random.default_rng(0).normal(size=(10, 3))

        def forward(xp, weights):
            return xp @ weights["w"]

        def loss_fn(z, rows):
            return (z * z).mean()

        return p, m, x, forward, loss_fn

    def test_k1_is_single_sample(self):
        p, m, x, forward, loss_fn = self._setup()
        loss = M.multi_sample_step(forward, loss_fn, p, m, x, 1, np.random.default_rng(5))
        w = M.apply_mask(p, M.sample_binary(m, np.random.default_rng(5)))
        assert loss.item() == pytest.approx(loss_fn(forward(x, w), slice(None)).item())

    def test_parts_use_independent_samples_and_weights(self):
        p, m, x, forward, loss_fn = self._setup()
        loss = M.multi_sample_step(forward, loss_fn, p, m, x, 4, np.random.default_rng(6))
        g = np.random.default_rng(6)
        expected = 0.0
        for rows, size in ((slice(0, 3), 3), (slice(3, 6), 3), (slice(6, 8), 2), (slice(8, 10), 2)):
            w = M.apply_mask(p, M.sample_binary(m, g))
            expected += loss_fn(forward(x[rows], w), rows).item() * size / 10
        assert loss.item() == pytest.approx(expected, rel=1e-6)
        (grad,) = T.grad(loss, [m.logits["w"]])
        assert np.any(grad != 0)


class TestBiasedReinit:
    def test_values(self):
        p = store(w=np.zeros(4))
        prev = BinaryMask({"w": np.array([1, 0, 1, 0])})
        m = M.biased_reinit(M.init_mask(p), prev, 0.88, 0.5)
        np.testing.assert_allclose(m.logits["w"].data, [1.992, 0, 1.992, 0], atol=1e-3)
        m = M.biased_reinit(M.init_mask(p), prev, 0.88, 0.27)
        np.testing.assert_allclose(m.logits["w"].data[[1, 3]], -1.0, atol=0.01)

    def test_order_enforced(self):
        p = store(w=np.zeros(2))
        with pytest.raises(ValueError):
            M.biased_reinit(M.init_mask(p), BinaryMask({"w": np.ones(2)}), 0.3, 0.6)


@pytest.mark.parametrize("tau", [1.0, 0.5])
def test_fused_sample_matches_primitives(tau):
    params = ParamStore()
    params.add("w", np.zeros((5, 7)))
    with T.precision(64):
        mask = M.init_mask(params, tau=tau)
        mask.logits["w"].data[:] = np.random.default_rng(0).normal(size=(5, 7))
        u = M.draw_uniforms(mask, np.random.default_rng(1))
        fused = M.sample_binary(mask, uniforms=u)["w"]
        ref = M.binarize_ste(M.sample_soft(mask, uniforms=u)["w"])
        assert np.array_equal(fused.data, ref.data)
        c = np.random.default_rng(2).normal(size=(5, 7))
        (g1,) = T.grad((fused * c).sum(), [mask.logits["w"]])
        (g2,) = T.grad((ref * c).sum(), [mask.logits["w"]])
        np.testing.assert_allclose(g1, g2, rtol=1e-12)
