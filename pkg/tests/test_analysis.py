"""Closed-form moment machinery and the variance-propagation predictors.

Quadrature moments are validated against independently derived closed
forms (Gaussian cdf/pdf algebra), scipy integration, and Monte Carlo;
the published-formula mode is pinned to its printed values, including
the a=0 second moment where the two modes disagree (1.5 vs 0.5).
"""

import math

import numpy as np
import pytest
import scipy.integrate
import scipy.stats

from bngrad.analysis import (
    BlockWeightInfo,
    MomentMode,
    backward_variance_conv,
    bn_grad_variance,
    blocks_from_model,
    c_constants,
    estimate_K,
    forward_variance_conv,
    kantorovich_bound,
    layer_grad_variance_bounds,
    layer_grad_variance_ratio,
    mean_inv_mean,
    moment_report,
    predict_blocks,
    relu_grad_variance,
    relu_moments_formula,
    relu_moments_monte_carlo,
    relu_moments_quadrature,
    resnet_backward_variance_bound,
    resnet_forward_variance,
    resnet_forward_variance_closed_form,
)
from bngrad.layers import BnParams, DenseParams, bn_backward, bn_forward, dense_backward
from bngrad.numerics import SeededRng
from bngrad.resnet import NetSpec, build_network


def shifted_relu_moments_exact(a):
    """Independent oracle: exact moments of ReLU(z+a) via Phi/phi algebra."""
    phi = scipy.stats.norm.pdf(a)
    Phi = scipy.stats.norm.cdf(a)
    return phi + a * Phi, (1.0 + a * a) * Phi + a * phi


class TestFormulaMoments:
    def test_printed_values_at_zero(self):
        e_y, e_y2 = relu_moments_formula(0.0)
        np.testing.assert_allclose(e_y, 1.0 / math.sqrt(2 * math.pi), atol=1e-12)
        assert e_y2 == 1.5  # exactly as printed: 0.5 + 0 + 0 + exp(0) + p(0)

    def test_printed_value_at_one(self):
        e_y, e_y2 = relu_moments_formula(1.0)
        np.testing.assert_allclose(e_y, 1.0559138362837218, atol=1e-12)
        np.testing.assert_allclose(e_y2, 2.7457599665840413, atol=1e-12)


class TestQuadratureMoments:
    def test_values_at_zero(self):
        e_y, e_y2 = relu_moments_quadrature(0.0)
        np.testing.assert_allclose(e_y, 0.3989422804014327, atol=1e-8)
        np.testing.assert_allclose(e_y2, 0.5, atol=1e-8)

    @pytest.mark.parametrize("a", [-3.0, -1.5, -0.5, 0.0, 0.3, 1.0, 2.0, 3.0])
    def test_against_exact_closed_form(self, a):
        e_y, e_y2 = relu_moments_quadrature(a)
        ref_y, ref_y2 = shifted_relu_moments_exact(a)
        np.testing.assert_allclose(e_y, ref_y, atol=1e-8)
        np.testing.assert_allclose(e_y2, ref_y2, atol=1e-8)

    def test_against_scipy_quad(self):
        for a in (-1.0, 0.5, 2.0):
            ref, _ = scipy.integrate.quad(
                lambda z: (z + a) ** 2 * scipy.stats.norm.pdf(z), -a, np.inf)
            np.testing.assert_allclose(relu_moments_quadrature(a)[1], ref, atol=1e-8)

    def test_mostly_inactive_limit(self):
        # a >> 0: the ReLU never clips, so e_y2 -> full second moment a^2 + 1
        _, e_y2 = relu_moments_quadrature(8.0)
        np.testing.assert_allclose(e_y2, 65.0, atol=1e-6)

    def test_variance_positive_and_mean_monotone(self):
        grid = np.linspace(-3.0, 3.0, 25)
        prev = -np.inf
        for a in grid:
            e_y, e_y2 = relu_moments_quadrature(a)
            assert e_y2 - e_y ** 2 > 0
            assert e_y > prev
            prev = e_y

    def test_monte_carlo_agreement(self):
        rng = SeededRng(2024)
        for a in (-1.0, 0.0, 1.0):
            qy, qy2 = relu_moments_quadrature(a)
            my, my2, se_y, se_y2 = relu_moments_monte_carlo(a, 400_000, rng)
            assert abs(qy - my) <= 4 * se_y
            assert abs(qy2 - my2) <= 4 * se_y2


class TestConstants:
    def test_paper_mode_at_zero(self):
        assert c_constants(0.0, MomentMode.PAPER) == (0.5, 1.5)

    def test_oracle_mode_at_zero(self):
        c1, c2 = c_constants(0.0, MomentMode.ORACLE)
        assert c1 == 0.5
        np.testing.assert_allclose(c2, 0.5, atol=1e-8)
        np.testing.assert_allclose(c1 / c2, 1.0, atol=1e-6)

    def test_paper_mode_ratio_at_one(self):
        r = moment_report(1.0, "paper")
        np.testing.assert_allclose(r.c_ratio, 0.30641598548588617, atol=1e-12)
        assert 0.28 <= r.c_ratio <= 0.34

    def test_report_invariants(self):
        for mode in ("paper", "oracle"):
            for a in (-1.0, 0.0, 0.7):
                r = moment_report(a, mode)
                np.testing.assert_allclose(r.c1, 0.5 + r.p_a, atol=1e-15)
                assert r.c2 == r.e_y2
                if r.mode is MomentMode.ORACLE:
                    assert r.e_y2 >= r.e_y ** 2 >= 0.0


class TestBnGradVariance:
    def test_uncorrelated_case(self):
        out = bn_grad_variance(2.0, 0.0, 3.0, 4.0)
        np.testing.assert_allclose(out, 9.0 * 2.0 / 4.0)

    def test_boundary_case(self):
        np.testing.assert_allclose(bn_grad_variance(0.25, 0.5, 1.0, 1.0), 0.0)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            bn_grad_variance(1.0, 0.0, 1.0, 0.0)

    def test_matches_bn_backward_empirically(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(512, 4))
        dy = 0.3 * rng.normal(size=(512, 4))
        p = BnParams(rng.uniform(0.5, 2.0, 4), rng.normal(size=4), epsilon=1e-8)
        _, cache = bn_forward(x, p)
        dx, _, _ = bn_backward(dy, cache, p)
        pred = bn_grad_variance(dy.var(axis=0), (dy * cache.xhat).mean(axis=0),
                                p.gamma, x.var(axis=0))
        np.testing.assert_allclose(dx.var(axis=0), pred, rtol=1e-3)


class TestVarianceMaps:
    W = np.array([[1.0, 2.0], [3.0, 4.0]])

    def test_forward_example(self):
        np.testing.assert_array_equal(forward_variance_conv(self.W, [1.0, 1.0]), [5.0, 25.0])

    def test_backward_example(self):
        np.testing.assert_array_equal(backward_variance_conv(self.W, [1.0, 1.0]), [10.0, 20.0])

    def test_zero_input(self):
        assert np.all(forward_variance_conv(self.W, [0.0, 0.0]) == 0.0)
        assert np.all(backward_variance_conv(self.W, [0.0, 0.0]) == 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(4, 6))
        u, v = rng.uniform(0.1, 2.0, 6), rng.uniform(0.1, 2.0, 6)
        np.testing.assert_allclose(
            forward_variance_conv(w, 2.0 * u + v),
            2.0 * forward_variance_conv(w, u) + forward_variance_conv(w, v), rtol=1e-12)

    def test_forward_empirical(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(8, 8)) * 0.4
        var_in = rng.uniform(0.5, 2.0, 8)
        x = rng.normal(size=(100_000, 8)) * np.sqrt(var_in)
        emp = (x @ w.T).var(axis=0)
        np.testing.assert_allclose(emp, forward_variance_conv(w, var_in), rtol=0.05)

    def test_backward_empirical(self):
        rng = np.random.default_rng(15)
        w = DenseParams(rng.normal(size=(8, 8)) * 0.4)
        var_dout = rng.uniform(0.5, 2.0, 8)
        dy = rng.normal(size=(100_000, 8)) * np.sqrt(var_dout)
        dx, _ = dense_backward(dy, np.zeros((100_000, 8)), w)
        np.testing.assert_allclose(
            dx.var(axis=0), backward_variance_conv(w.weights, var_dout), rtol=0.05)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_variance_conv(self.W, [1.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            backward_variance_conv(self.W, [1.0])


class TestReluGradVariance:
    def test_at_zero(self):
        np.testing.assert_allclose(relu_grad_variance(0.0, 2.0), 1.0)

    def test_limits(self):
        np.testing.assert_allclose(relu_grad_variance(40.0, 3.0), 3.0, atol=1e-12)
        np.testing.assert_allclose(relu_grad_variance(-40.0, 3.0), 0.0, atol=1e-12)


class TestLayerRatio:
    def test_printed_substitution(self):
        # numerator sum 10, denominator row-sum 2
        w_L = np.array([[1.0], [2.0]])
        var_dy = np.array([2.0, 2.0])
        w_Lm1 = np.array([[math.sqrt(2.0)]])
        paper = layer_grad_variance_ratio(w_L, w_Lm1, var_dy, 0.0, "paper")
        np.testing.assert_allclose(paper, [10.0 / 2.0 / 3.0], rtol=1e-12)
        oracle = layer_grad_variance_ratio(w_L, w_Lm1, var_dy, 0.0, "oracle")
        np.testing.assert_allclose(oracle, [5.0], rtol=1e-6)

    def test_zero_gradient(self):
        out = layer_grad_variance_ratio(np.ones((3, 2)), np.ones((2, 2)), np.zeros(3), 0.0, "paper")
        assert np.all(out == 0.0)

    def test_zero_row_sum_rejected(self):
        with pytest.raises(ValueError):
            layer_grad_variance_ratio(np.ones((2, 2)), np.zeros((2, 2)), np.ones(2), 0.0, "paper")


class TestLayerBounds:
    def test_variance_preserved_case(self):
        lo, hi = layer_grad_variance_bounds(16, 16, 0.1, 0.1, 2.5, 0.0, "oracle", K=1.0)
        np.testing.assert_allclose(lo, 2.5, rtol=1e-6)
        np.testing.assert_allclose(hi, 2.5, rtol=1e-6)

    def test_k_one_collapses(self):
        lo, hi = layer_grad_variance_bounds(8, 4, 0.2, 0.1, 1.0, 0.5, "paper", K=1.0)
        assert lo == hi

    def test_linear_in_weight_variance(self):
        lo1, hi1 = layer_grad_variance_bounds(8, 8, 0.1, 0.1, 1.0, 0.0, "oracle", K=1.3)
        lo2, hi2 = layer_grad_variance_bounds(8, 8, 0.2, 0.1, 1.0, 0.0, "oracle", K=1.3)
        np.testing.assert_allclose([lo2, hi2], [2 * lo1, 2 * hi1], rtol=1e-12)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            layer_grad_variance_bounds(8, 8, -0.1, 0.1, 1.0, 0.0, "paper")
        with pytest.raises(ValueError):
            layer_grad_variance_bounds(8, 8, 0.1, 0.1, 1.0, 0.0, "paper", K=0.5)


class TestKantorovich:
    def test_degenerate_interval(self):
        assert kantorovich_bound(2.0, 2.0) == 1.0

    def test_printed_substitution(self):
        assert kantorovich_bound(1.0, 4.0) == 25.0 / 16.0

    def test_rejects_bad_interval(self):
        with pytest.raises(ValueError):
            kantorovich_bound(0.0, 1.0)
        with pytest.raises(ValueError):
            kantorovich_bound(3.0, 1.0)

    def test_estimate_within_bound_for_xavier(self):
        rng = SeededRng(31)
        for _ in range(100):
            w = rng.uniform(-math.sqrt(6 / 128), math.sqrt(6 / 128), (64, 64))
            k_emp, k_bound = estimate_K(w)
            assert 1.0 <= k_emp <= k_bound

    def test_mean_inv_mean_jensen(self):
        x = np.random.default_rng(32).uniform(0.5, 3.0, 1000)
        assert mean_inv_mean(x) >= 1.0


def toy_blocks(unit_scale=1.0):
    """Two-block single-scale stack with all-ones 2x2 weights."""
    ones = np.ones((2, 2)) * unit_scale
    return [BlockWeightInfo(True, ones, ones, ones), BlockWeightInfo(False, ones, ones)]


class TestForwardVariancePrediction:
    def test_printed_substitution(self):
        out = resnet_forward_variance(toy_blocks(), k=2, a=0.0, mode="paper")
        np.testing.assert_allclose(out[1], [6.0, 6.0], rtol=1e-12)
        np.testing.assert_allclose(out[0], [3.0, 3.0], rtol=1e-12)

    def test_zero_weights(self):
        out = resnet_forward_variance(toy_blocks(0.0), k=2, a=0.0, mode="paper")
        assert all(np.all(v == 0.0) for v in out)

    def test_oracle_mode_uses_exact_relu_variance(self):
        e_y, e_y2 = relu_moments_quadrature(0.0)
        out = resnet_forward_variance(toy_blocks(), k=2, a=0.0, mode="oracle")
        unit = e_y2 - e_y ** 2
        np.testing.assert_allclose(out[0], unit * 4.0 * np.ones(2), rtol=1e-8)

    @pytest.mark.parametrize("mode", ["paper", "oracle"])
    @pytest.mark.parametrize("seed", range(5))
    def test_closed_form_equals_recursion(self, mode, seed):
        rng = np.random.default_rng(seed)
        blocks = []
        width = int(rng.integers(2, 6))
        for s in range(int(rng.integers(1, 4))):
            n = int(rng.integers(1, 9))
            prev = width
            width = 2 * width if s else width
            for j in range(n):
                w_in = prev if j == 0 else width
                blocks.append(BlockWeightInfo(
                    j == 0,
                    rng.normal(size=(width, w_in)),
                    rng.normal(size=(width, width)),
                    rng.normal(size=(width, w_in)) if j == 0 else None))
        rec = resnet_forward_variance(blocks, 2, 0.4, mode)
        closed = resnet_forward_variance_closed_form(blocks, 2, 0.4, mode)
        for r, c in zip(rec, closed):
            np.testing.assert_allclose(r, c, atol=1e-12)

    def test_requires_leading_scale_block(self):
        with pytest.raises(ValueError):
            resnet_forward_variance([BlockWeightInfo(False, np.ones((2, 2)), np.ones((2, 2)))],
                                    2, 0.0, "paper")


class TestBackwardBound:
    def equal_var_blocks(self, n, v=0.04):
        scale = math.sqrt(v)

        def mat():
            # alternating +-sqrt(v): matrix mean exactly 0, variance exactly v
            flat = scale * np.tile([1.0, -1.0], 8)
            return flat.reshape(4, 4)

        return [BlockWeightInfo(i == 0, mat(), mat(), mat() if i == 0 else None)
                for i in range(n)]

    def test_simplified_ratio_at_five(self):
        out = resnet_backward_variance_bound(self.equal_var_blocks(5), 2, 0.0, "oracle")
        assert out[4][1] == 5.0 / 4.0

    def test_factor_at_three_equal_variances(self):
        out = resnet_backward_variance_bound(self.equal_var_blocks(3), 2, 0.0, "oracle")
        np.testing.assert_allclose(out[2][0], 1.5, rtol=1e-6)

    def test_zero_gradient_gives_zero_bound(self):
        blocks = self.equal_var_blocks(3)
        out = resnet_backward_variance_bound(blocks, 2, 0.0, "oracle",
                                             e_var_dyL=[0.0, 0.0, 0.0])
        assert out[1][0] == 0.0

    def test_first_block_undefined(self):
        out = resnet_backward_variance_bound(self.equal_var_blocks(2), 2, 0.0, "paper")
        assert math.isnan(out[0][0]) and math.isnan(out[0][1])

    def test_k_must_be_at_least_one(self):
        with pytest.raises(ValueError):
            resnet_backward_variance_bound(self.equal_var_blocks(2), 2, 0.0, "paper",
                                           K_per_block=[1.0, 0.9])


class TestModelPredictions:
    def test_one_row_per_block(self):
        model = build_network(NetSpec(scales=[(3, 8), (3, 16)], input_dim=6, num_classes=4),
                              SeededRng(5))
        preds = predict_blocks(model, 0.0, "oracle")
        assert len(preds) == 6
        assert [p.block_index for p in preds] == [1, 2, 3, 4, 5, 6]
        for p in preds:
            assert p.forward_var_mean > 0
            if math.isnan(p.k_estimate):
                assert p.scale_index in (1, 2)
            else:
                assert p.k_estimate >= 1.0
                assert p.bound_factor > 1.0
