import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvformer import autodiff as ad
from cvformer.autodiff import Tensor
from cvformer.tokenizers import (
    encode_connectivity, encode_roi, init_tokenizer_params, patch_count, patchify, unpatchify,
)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def params_for(m, p, d, seed=0):
    return init_tokenizer_params(m, p, d, np.random.default_rng(seed))


class TestPatchify:
    @pytest.mark.parametrize("m,p,n", [(90, 30, 9), (90, 45, 4), (90, 32, 9), (8, 4, 4), (10, 4, 9)])
    def test_counts(self, m, p, n):
        assert patch_count(m, p) == n
        assert patchify(np.zeros((m, m)), p).shape == (n, p * p)

    def test_padding_is_zero(self):
        patches = patchify(np.ones((90, 90)), 32)
        blocks = patches.reshape(3, 3, 32, 32)
        # the last block row and column carry 6 padded lines
        assert blocks[2, 2, -6:, :].sum() == 0 and blocks[2, 2, :, -6:].sum() == 0
        assert blocks[0, 0].sum() == 32 * 32
        assert patches.sum() == 90 * 90

    def test_row_major_blocks(self):
        a = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(patchify(a, 2)[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patchify(a, 2)[2], [8, 9, 12, 13])

    def test_small_patch_rejected(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((4, 4)), 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 20), st.integers(2, 8), st.integers(0, 1000))
    def test_round_trip(self, m, p, seed):
        a = (np.random.default_rng(seed).random((m, m)) > 0.5).astype(float)
        np.testing.assert_array_equal(unpatchify(patchify(a, p), m, p), a)


class TestEncodeRoi:
    def test_zero_features_give_positions(self):
        params = params_for(6, 3, 8)
        seq = encode_roi(np.zeros((6, 6)), params)
        np.testing.assert_array_equal(seq.content.data, params["tok.pos_r"].data[1:])
        np.testing.assert_allclose(seq.cls.data[0], params["tok.cls_r"].data + params["tok.pos_r"].data[0])

    def test_identity_projection(self):
        m = 6
        params = params_for(m, 3, m)
        params["tok.roi_w"].data = np.eye(m, dtype=np.float32)
        params["tok.pos_r"].data[:] = 0
        fcn = np.random.default_rng(1).uniform(-1, 1, (m, m)).astype(np.float32)
        np.testing.assert_array_equal(encode_roi(fcn, params).content.data, fcn)

    def test_matches_affine_oracle(self, f64):
        params = params_for(7, 3, 5, seed=2)
        params["tok.roi_b"].data = np.random.default_rng(3).standard_normal(5)
        x = np.random.default_rng(4).uniform(-1, 1, (7, 7))
        tokens = encode_roi(x, params).tokens.data
        w, b, pos = (params[k].data for k in ("tok.roi_w", "tok.roi_b", "tok.pos_r"))
        for i in range(1, 8):
            expected = [sum(x[i - 1, j] * w[j, c] for j in range(7)) + b[c] + pos[i, c] for c in range(5)]
            assert np.abs(tokens[i] - expected).max() < 1e-6

    def test_token_count_and_tag(self):
        seq = encode_roi(np.zeros((3, 9, 9)), params_for(9, 3, 4))
        assert seq.tokens.shape == (3, 10, 4) and seq.count == 9 and seq.view_tag == "roi"

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            encode_roi(np.zeros((5, 5)), params_for(6, 3, 4))


class TestEncodeConnectivity:
    def test_empty_adjacency_gives_positions(self):
        params = params_for(8, 4, 6)
        seq = encode_connectivity(np.zeros((8, 8)), params, 4)
        np.testing.assert_array_equal(seq.content.data, params["tok.pos_c"].data[1:])
        assert seq.tokens.shape == (5, 6) and seq.count == 4 and seq.view_tag == "connectivity"

    def test_single_block_touches_one_token(self):
        params = params_for(8, 4, 6)
        empty = encode_connectivity(np.zeros((8, 8)), params, 4).tokens.data
        adj = np.zeros((8, 8))
        adj[0, 1] = adj[1, 0] = 1.0
        changed = np.flatnonzero(np.abs(encode_connectivity(adj, params, 4).tokens.data - empty).max(axis=1) > 0)
        np.testing.assert_array_equal(changed, [1])

    def test_matches_affine_oracle(self, f64):
        params = params_for(6, 3, 4, seed=5)
        params["tok.patch_b"].data = np.random.default_rng(6).standard_normal(4)
        adj = (np.random.default_rng(7).random((6, 6)) > 0.5).astype(float)
        tokens = encode_connectivity(adj, params, 3).tokens.data
        w, b, pos = (params[k].data for k in ("tok.patch_w", "tok.patch_b", "tok.pos_c"))
        for i, (r, c) in enumerate([(0, 0), (0, 3), (3, 0), (3, 3)], start=1):
            patch = adj[r:r + 3, c:c + 3].reshape(-1)
            assert np.abs(tokens[i] - (patch @ w + b + pos[i])).max() < 1e-6

    def test_patch_size_mismatch(self):
        with pytest.raises(ValueError):
            encode_connectivity(np.zeros((8, 8)), params_for(8, 4, 6), 2)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
def test_encoders_are_affine(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        params = params_for(6, 3, 4, seed)
        a, b = rng.uniform(-1, 1, (6, 6)), rng.uniform(-1, 1, (6, 6))
        for encode in (lambda x: encode_roi(x, params), lambda x: encode_connectivity(x, params, 3)):
            lhs = encode(alpha * a + beta * b).content.data
            rhs = (alpha * encode(a).content.data + beta * encode(b).content.data
                   + (1 - alpha - beta) * encode(np.zeros((6, 6))).content.data)
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_tokens_are_trainable():
    params = params_for(4, 2, 4)
    seq = encode_roi(np.eye(4), params)
    ad.backward(ad.sum_all(seq.tokens))
    assert all(p.grad is not None for k, p in params.items() if k.endswith("_r") or "roi" in k)
    assert isinstance(seq.tokens, Tensor)
