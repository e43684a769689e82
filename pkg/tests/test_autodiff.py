import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cvformer import autodiff as ad
from cvformer.autodiff import ContractError, NonFiniteError, ShapeError, Tensor

from oracles import gelu_erf, layer_norm_row, matmul_loops, softmax_row

F64 = np.float64


def leaf(x):
    return Tensor(x, requires_grad=True, dtype=F64)


finite_rows = hnp.arrays(
    F64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
    elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False),
)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_zero_annihilates(self):
        out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        out = ad.matmul(Tensor(a, dtype=F64), Tensor(b, dtype=F64))
        assert np.abs(out.data - matmul_loops(a, b)).max() < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_mac_count(self):
        ad.reset_macs()
        ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
        assert ad.mac_count() == 3 * 4 * 5

    def test_backward_rules(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        g = rng.standard_normal((3, 2))
        ad.backward(ad.sum_all(ad.mul(ad.matmul(a, b), g)))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_values_do_not_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-7)

    def test_matches_exp_normalize(self):
        out = ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]], dtype=F64))
        frozen = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
        assert np.abs(out.data[0] - softmax_row([1.0, 2.0, 3.0])).max() < 1e-6
        assert np.abs(out.data[0] - frozen).max() < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(finite_rows)
    def test_rows_are_distributions(self, x):
        out = ad.softmax_rows(Tensor(x, dtype=F64)).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_token_maps_to_zero(self):
        out = ad.layer_norm(Tensor([[5.0, 5, 5, 5]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_standardised_token_is_fixed(self):
        out = ad.layer_norm(Tensor([[1.0, -1.0]], dtype=F64), Tensor([1.0, 1.0], dtype=F64),
                            Tensor([0.0, 0.0], dtype=F64), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_matches_mean_variance_formula(self):
        out = ad.layer_norm(Tensor([[1.0, 2, 3]], dtype=F64), Tensor([2.0] * 3, dtype=F64),
                            Tensor([1.0] * 3, dtype=F64))
        frozen = [-1.4494713718167804, 1.0, 3.4494713718167804]
        np.testing.assert_allclose(out.data[0], layer_norm_row([1, 2, 3], [2] * 3, [1] * 3), atol=1e-12)
        np.testing.assert_allclose(out.data[0], frozen, atol=1e-12)

    def test_width_one_rejected(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(F64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                      elements=st.floats(-100, 100, allow_nan=False)))
    def test_standardises_non_constant_tokens(self, x):
        # eps shrinks the variance to var / (var + eps); keep tokens where that is < 1e-4 off
        x = x[x.var(axis=-1) > 0.1]
        if not len(x):
            return
        out = ad.layer_norm(Tensor(x, dtype=F64), Tensor(np.ones(x.shape[1]), dtype=F64),
                            Tensor(np.zeros(x.shape[1]), dtype=F64)).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-4


class TestGelu:
    def test_zero(self):
        assert ad.gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_input_is_identity(self):
        assert abs(ad.gelu(Tensor([10.0], dtype=F64)).data[0] - 10.0) < 1e-4

    def test_matches_erf(self):
        value = ad.gelu(Tensor([1.0], dtype=F64)).data[0]
        assert abs(value - gelu_erf(1.0)) < 1e-6
        assert abs(value - 0.8413447460685429) < 1e-6

    def test_not_tanh_approximation(self):
        x = 1.5
        tanh_form = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        value = ad.gelu(Tensor([x], dtype=F64)).data[0]
        assert abs(value - gelu_erf(x)) < 1e-12
        assert abs(value - tanh_form) > 1e-5

    def test_float32_stays_float32(self):
        assert ad.gelu(Tensor([1.0], dtype=np.float32)).dtype == np.float32


class TestMinorOps:
    def test_elementwise_against_numpy(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((3, 4)), rng.uniform(0.5, 2, (3, 4))
        ta, tb = Tensor(a, dtype=F64), Tensor(b, dtype=F64)
        np.testing.assert_allclose(ad.add(ta, tb).data, a + b)
        np.testing.assert_allclose(ad.sub(ta, tb).data, a - b)
        np.testing.assert_allclose(ad.mul(ta, tb).data, a * b)
        np.testing.assert_allclose(ad.div(ta, tb).data, a / b)
        np.testing.assert_allclose(ad.scale(ta, 3.0).data, 3 * a)

    def test_identity_and_zero_cases(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        zero = Tensor(np.zeros((2, 2)))
        np.testing.assert_array_equal(ad.add(x, zero).data, x.data)
        np.testing.assert_array_equal(ad.mul(x, zero).data, zero.data)
        np.testing.assert_array_equal(ad.scale(x, 1.0).data, x.data)
        np.testing.assert_array_equal(ad.transpose(ad.transpose(x)).data, x.data)

    def test_shape_ops(self):
        x = np.arange(12.0).reshape(3, 4)
        t = Tensor(x)
        np.testing.assert_array_equal(ad.transpose(t).data, x.T)
        np.testing.assert_array_equal(ad.concat([t, t], axis=0).data, np.vstack([x, x]))
        np.testing.assert_array_equal(ad.take(t, (slice(1, 3),)).data, x[1:3])
        np.testing.assert_allclose(ad.mean(t, axis=0).data, x.mean(axis=0))
        np.testing.assert_allclose(ad.sum_axis(t, axis=1).data, x.sum(axis=1))

    def test_mac_counts_are_exact_and_deterministic(self):
        x = Tensor(np.ones((3, 4)))

        def run():
            ad.reset_macs()
            ad.softmax_rows(x)
            ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
            ad.gelu(x)
            return ad.mac_count()

        assert run() == 12 + 48 + 12
        assert run() == run()


class TestBackward:
    def test_sum_gives_ones(self):
        w = leaf(np.zeros((2, 3)))
        ad.backward(ad.sum_all(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_quadratic(self):
        w = leaf([1.0, 2.0, 3.0])
        ad.backward(ad.sum_all(ad.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_rejected(self):
        w = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            ad.backward(ad.mul(w, w))

    def test_second_backward_rejected(self):
        w = leaf([1.0, 2.0])
        loss = ad.sum_all(ad.mul(w, w))
        ad.backward(loss)
        with pytest.raises(ContractError):
            ad.backward(loss)

    def test_gradients_accumulate_until_zeroed(self):
        w = leaf([1.0, 2.0])
        ad.backward(ad.sum_all(w))
        ad.backward(ad.sum_all(ad.scale(w, 2.0)))
        np.testing.assert_array_equal(w.grad, [3.0, 3.0])
        ad.zero_grad([w])
        assert w.grad is None

    def test_shared_subexpression(self):
        w = leaf([3.0])
        y = ad.mul(w, w)
        ad.backward(ad.sum_all(ad.add(y, y)))
        np.testing.assert_array_equal(w.grad, [12.0])

    def test_tape_is_topological(self):
        w = leaf([1.0, 2.0])
        loss = ad.sum_all(ad.exp(ad.mul(w, w)))
        tape = ad.Tape.from_loss(loss)
        assert [n.name for n in tape.nodes] == ["mul", "exp", "sum_all"]
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for inp in node.inputs:
                if inp._node is not None:
                    assert position[id(inp._node)] < position[id(node)]

    def test_no_grad_records_nothing(self):
        w = leaf([1.0])
        with ad.no_grad():
            out = ad.mul(w, w)
        assert out.is_leaf and not out.requires_grad


class TestFinite:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, float("nan")])

    def test_overflow_rejected(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                ad.exp(Tensor([1000.0], dtype=F64))

    def test_log_of_zero_rejected(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError):
                ad.log(Tensor([0.0]))


class TestPrecision:
    def test_context_switches_default(self):
        before = ad.get_default_dtype()
        with ad.precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert ad.get_default_dtype() == before

    def test_float32_and_float64_agree(self):
        from cvformer.model import CvFormer, ModelConfig

        config = ModelConfig(M=12, P=4, d_model=16, num_heads=2, L=2)
        rng = np.random.default_rng(3)
        fcn = np.tanh(rng.standard_normal((2, 12, 12)))
        adj = (rng.random((2, 12, 12)) > 0.7).astype(float)
        with ad.precision(np.float64):
            m64 = CvFormer(config, seed=1)
            out64 = m64(fcn, adj)
        with ad.precision(np.float32):
            m32 = CvFormer(config, seed=1, params={
                k: Tensor(v.data, requires_grad=True, dtype=np.float32) for k, v in m64.params.items()})
            out32 = m32(fcn, adj)
        for a, b in [(out32.embedding.cls_r, out64.embedding.cls_r), (out32.logits_c, out64.logits_c)]:
            assert a.dtype == np.float32
            np.testing.assert_allclose(a.data, b.data, rtol=1e-3, atol=1e-4)


class TestGradCheck:
    def test_requires_float64(self):
        x = Tensor([1.0], requires_grad=True, dtype=np.float32)
        with pytest.raises(ContractError):
            ad.grad_check(lambda: ad.sum_all(x), [x])

    def test_identity_sum(self):
        x = leaf(np.random.default_rng(4).standard_normal((3, 3)))
        assert ad.grad_check(lambda: ad.sum_all(x), [x]) < 1e-10

    def test_softmax_first_column(self):
        x = leaf(np.random.default_rng(5).standard_normal((3, 4)))
        f = lambda: ad.sum_all(ad.take(ad.softmax_rows(x), (slice(None), 0)))  # noqa: E731
        assert ad.grad_check(f, [x]) < 1e-6

    def test_single_encoder_layer(self):
        from cvformer.model import ModelConfig, encoder_layer, init_params
        from cvformer.tokenizers import TokenSequence

        config = ModelConfig(M=6, P=3, d_model=8, num_heads=2, r=2, L=1)
        with ad.precision(np.float64):
            params = init_params(config, np.random.default_rng(6))
            block = {k: v for k, v in params.items() if k.startswith("enc1.r.")}
            for v in block.values():
                v.data = v.data + 0.3 * np.random.default_rng(7).standard_normal(v.shape)
            x = leaf(np.random.default_rng(8).standard_normal((5, 8)))
            w = np.random.default_rng(9).standard_normal((5, 8))
            f = lambda: ad.sum_all(ad.mul(encoder_layer(TokenSequence(x, "roi", 4), block, "enc1.r", 2).tokens, w))  # noqa: E731
            assert ad.grad_check(f, [x, *block.values()]) < 1e-4

    def test_detects_wrong_gradient(self, monkeypatch):
        monkeypatch.setattr(ad.Exp, "backward", lambda self, g: (g,))
        x = leaf([0.5, 1.0])
        assert ad.grad_check(lambda: ad.sum_all(ad.exp(x)), [x]) > 0.1
