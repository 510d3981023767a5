import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfcikit.errors import FormatError, ValidationError
from dfcikit.kernels import (
    facial_attention,
    format_matrix,
    load_matrix,
    masked_loss,
    masked_loss_grad,
    masked_loss_terms,
    parse_matrix,
    sampler_attention,
    save_matrix,
    softmax,
    token_layout,
)


def exp_sum_attention(Q, K, V):
    f = Q.shape[1]
    out = np.zeros((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        logits = [float(np.dot(Q[i], K[j])) / math.sqrt(f) for j in range(K.shape[0])]
        m = max(logits)
        w = [math.exp(z - m) for z in logits]
        total = sum(w)
        for j in range(K.shape[0]):
            out[i] += w[j] / total * V[j]
    return out


def central_differences(eps, pred, m, lam, h=1e-3):
    g = np.zeros_like(pred)
    for i in range(pred.size):
        up, down = pred.copy(), pred.copy()
        up.flat[i] += h
        down.flat[i] -= h
        g.flat[i] = (masked_loss(eps, up, m, lam) - masked_loss(eps, down, m, lam)) / (2 * h)
    return g


class TestSoftmax:
    def test_rows_sum_to_one(self):
        p = softmax(np.random.default_rng(0).normal(size=(5, 7)) * 30)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_extreme_logits(self):
        p = softmax(np.array([[1e4, -1e4, 0.0], [-1e4, -1e4 + 1.0, -1e4]]))
        assert np.all(np.isfinite(p))
        assert p[0, 0] == 1.0


class TestSamplerAttention:
    def test_zero_query_gives_value_mean(self):
        rng = np.random.default_rng(0)
        D = rng.normal(size=(7, 4))
        WK, WV = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        out = sampler_attention(D, WK, WV, np.zeros((3, 4)))
        expected = (D @ WV).mean(axis=0)
        assert np.max(np.abs(out - expected)) <= 1e-12

    def test_scalar_hand_case(self):
        out, A = sampler_attention([[1.0], [2.0]], [[1.0]], [[1.0]], [[1.0]], return_weights=True)
        assert A[0] == pytest.approx([0.26894, 0.73106], abs=1e-5)
        assert out[0, 0] == pytest.approx(1.73106, abs=1e-5)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(1)
        D = rng.normal(size=(9, 5))
        WK, WV, Q = rng.normal(size=(5, 5)), rng.normal(size=(5, 5)), rng.normal(size=(2, 5))
        base = sampler_attention(D, WK, WV, Q)
        for _ in range(5):
            perm = rng.permutation(9)
            assert np.max(np.abs(sampler_attention(D[perm], WK, WV, Q) - base)) <= 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_exp_sum_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, N, f = rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 6)
        D = rng.normal(size=(N, f))
        WK, WV, Q = rng.normal(size=(f, f)), rng.normal(size=(f, f)), rng.normal(size=(n, f))
        got = sampler_attention(D, WK, WV, Q)
        ref = exp_sum_attention(Q, D @ WK, D @ WV)
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-13)

    def test_output_shape(self):
        out = sampler_attention(np.ones((10, 3)), np.eye(3), np.eye(3), np.ones((4, 3)))
        assert out.shape == (4, 3)

    @pytest.mark.parametrize("args", [
        (np.ones((3, 2)), np.eye(3), np.eye(2), np.ones((1, 2))),
        (np.ones((3, 2)), np.eye(2), np.eye(2), np.ones((1, 3))),
        (np.ones((3, 2)), np.eye(2), np.eye(2), np.ones((0, 2))),
    ])
    def test_shape_errors(self, args):
        with pytest.raises(ValidationError):
            sampler_attention(*args)

    def test_non_finite(self):
        D = np.ones((2, 2))
        D[0, 0] = np.inf
        with pytest.raises(ValidationError, match="non-finite"):
            sampler_attention(D, np.eye(2), np.eye(2), np.ones((1, 2)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_weights_row_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        n, N, f = rng.integers(1, 6, size=3)
        _, A = sampler_attention(rng.normal(size=(N, f)) * 10, rng.normal(size=(f, f)),
                                 rng.normal(size=(f, f)), rng.normal(size=(n, f)),
                                 return_weights=True)
        assert np.all((A >= 0) & (A <= 1))
        assert np.max(np.abs(A.sum(axis=1) - 1.0)) <= 1e-9


class TestFacialAttention:
    def test_zero_query(self):
        rng = np.random.default_rng(2)
        K, V = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        out = facial_attention(np.zeros((1, 3)), K, V)
        assert np.max(np.abs(out - V.mean(axis=0))) <= 1e-12

    def test_single_token(self):
        V = np.array([[0.3, -2.0]])
        out = facial_attention(np.array([[5.0, 7.0]]), np.array([[1.0, 1.0]]), V)
        assert np.array_equal(out, V)

    def test_hand_case(self):
        out, A = facial_attention([[1.0]], [[0.0], [math.log(3.0)]], [[0.0], [1.0]],
                                  return_weights=True)
        assert A[0] == pytest.approx([0.25, 0.75], abs=1e-12)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(0.75, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        q, K, V = rng.normal(size=(1, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        assert facial_attention(q, K, V) == pytest.approx(exp_sum_attention(q, K, V), rel=1e-10)

    def test_shape_errors(self):
        with pytest.raises(ValidationError):
            facial_attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((4, 3)))
        with pytest.raises(ValidationError):
            facial_attention(np.ones((1, 3)), np.ones((4, 3)), np.ones((5, 3)))


class TestMaskedLoss:
    def test_empty_mask_is_mse(self):
        rng = np.random.default_rng(0)
        eps, pred = rng.normal(size=20), rng.normal(size=20)
        for lam in (1.0, 4.0, 9.0):
            assert masked_loss(eps, pred, np.zeros(20), lam) == pytest.approx(
                np.mean((eps - pred) ** 2), abs=1e-15)

    def test_unit_lambda_is_mse(self):
        rng = np.random.default_rng(1)
        eps, pred = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        m = (rng.random((3, 5)) < 0.5).astype(float)
        assert masked_loss(eps, pred, m, 1.0) == pytest.approx(np.mean((eps - pred) ** 2),
                                                               abs=1e-15)

    def test_hand_case(self):
        assert masked_loss([1.0, 2.0], [0.0, 0.0], [0.0, 1.0], 4.0) == pytest.approx(8.5,
                                                                                  abs=1e-12)

    def test_default_lambda_is_four(self):
        assert masked_loss([1.0, 2.0], [0.0, 0.0], [0.0, 1.0]) == pytest.approx(8.5)

    def test_affine_in_lambda(self):
        rng = np.random.default_rng(2)
        eps, pred = rng.normal(size=30), rng.normal(size=30)
        m = (rng.random(30) < 0.4).astype(float)
        _, fg = masked_loss_terms(eps, pred, m)
        for l1, l2 in ((1.0, 4.0), (2.5, 7.0)):
            diff = masked_loss(eps, pred, m, l2) - masked_loss(eps, pred, m, l1)
            assert abs(diff - (l2 - l1) * fg) <= 1e-12

    @pytest.mark.parametrize("kw,match", [
        ({"lam": 0.5}, "lambda"),
        ({"m": [0.0, 0.5]}, "binary"),
        ({"pred": [0.0]}, "shape"),
    ])
    def test_errors(self, kw, match):
        args = {"eps": [1.0, 2.0], "pred": [0.0, 0.0], "m": [0.0, 1.0], "lam": 4.0}
        args.update(kw)
        with pytest.raises(ValidationError, match=match):
            masked_loss(**args)
        with pytest.raises(ValidationError, match=match):
            masked_loss_grad(**args)


class TestMaskedLossGrad:
    def test_empty_mask_is_mse_gradient(self):
        rng = np.random.default_rng(3)
        eps, pred = rng.normal(size=8), rng.normal(size=8)
        g = masked_loss_grad(eps, pred, np.zeros(8), 4.0)
        assert np.allclose(g, -(2 / 8) * (eps - pred), atol=1e-15)

    def test_hand_case(self):
        g = masked_loss_grad(np.array([1.0, 2.0]), np.zeros(2), np.array([0.0, 1.0]), 4.0)
        assert np.max(np.abs(g - np.array([-1.0, -8.0]))) <= 1e-12

    @pytest.mark.parametrize("seed", range(25))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        eps, pred = rng.normal(size=64), rng.normal(size=64)
        m = (rng.random(64) < 0.5).astype(float)
        lam = rng.uniform(1.0, 10.0)
        g = masked_loss_grad(eps, pred, m, lam)
        fd = central_differences(eps, pred, m, lam)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
        assert rel.max() < 1e-4

    def test_shape_preserved(self):
        g = masked_loss_grad(np.ones((2, 3, 4)), np.zeros((2, 3, 4)), np.ones((2, 3, 4)), 2.0)
        assert g.shape == (2, 3, 4)


class TestTokenLayout:
    def test_strict(self):
        assert token_layout(8, 4, 2, 3, 5, "strict") == 17

    def test_no_id_tokens(self):
        assert token_layout(8, 4, 2, 3, 0) == 12
        assert token_layout(9, 4, 2, 3, 0, "causal") == 3 * 6

    def test_causal(self):
        assert token_layout(49, 4, 1, 1, 0, "causal") == 13

    @pytest.mark.parametrize("L", [1, 2, 5, 9])
    def test_modes_agree_for_unit_kernel(self, L):
        assert token_layout(L, 1, 3, 4, 7, "strict") == token_layout(L, 1, 3, 4, 7, "causal")

    def test_divisibility(self):
        with pytest.raises(ValidationError, match="k \\| L"):
            token_layout(9, 4, 2, 2, 0, "strict")
        with pytest.raises(ValidationError, match="L - 1"):
            token_layout(8, 4, 2, 2, 0, "causal")

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            token_layout(8, 4, 1, 1, 0, "spatial")


class TestMatrixText:
    def test_roundtrip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(3, 4))
        save_matrix(tmp_path / "a.txt", a)
        assert np.array_equal(load_matrix(tmp_path / "a.txt"), a)

    def test_parse(self):
        a = parse_matrix("# 2 2\n1 2\n3   4.5\n")
        assert a.tolist() == [[1.0, 2.0], [3.0, 4.5]]

    def test_header_mismatch(self):
        with pytest.raises(FormatError):
            parse_matrix("# 2 3\n1 2 3\n")
        with pytest.raises(FormatError):
            parse_matrix("1 2\n")

    def test_format_has_header(self):
        assert format_matrix(np.zeros((1, 2))).startswith("# 1 2\n")
