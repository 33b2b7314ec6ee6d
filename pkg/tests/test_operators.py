"""Span operators and the representer-form descent iterate."""

import numpy as np
import pytest

from oplab.grid import Field, GridSpec, GrfConfig, SeededRng, inner_product, norm, sample_grf
from oplab.kernels import HSKernel, InputKernel, gram_x, kx_eval, ky_apply, make_output_operator
from oplab.operators import (RepresenterOperator, gd_step, gd_zero, load_span_operator,
                             sample_span_operator, save_span_operator, span_apply,
                             squared_loss, steepest_direction)

GRID = GridSpec(8)
GRF = GrfConfig(1, 1, 2, GRID)


def kappa(kx="laplacian", ky="gaussian"):
    return HSKernel(InputKernel(kx), make_output_operator(ky, 0.5, GRID))


def grf(seed, stream=0):
    return sample_grf(GRF, SeededRng(seed, stream))


def context(kap, n, seed=0):
    rng = SeededRng(seed, 5)
    op = sample_span_operator(kap, 30, 1.0, GRF, rng)
    inputs = [sample_grf(GRF, rng) for _ in range(n)]
    return [(f, op.apply(f)) for f in inputs]


class TestSpanOperator:
    def test_zero_alphas_give_zero_operator(self):
        kap = kappa()
        op = sample_span_operator(kap, 5, 1.0, GRF, SeededRng(0, 0))
        zeroed = type(op)(kap, np.zeros_like(op.alphas), op.phis, op.tpsis)
        out = span_apply(zeroed, grf(1))
        assert np.max(np.abs(out.values)) == 0.0

    def test_single_term_matches_manual_composition(self):
        kap = kappa("laplacian")
        op = sample_span_operator(kap, 1, 1.0, GRF, SeededRng(2, 0))
        f = grf(3)
        manual = op.alphas[0] * kx_eval(kap.kx, op.phis[0], f) * op.tpsis[0].values
        assert np.max(np.abs(span_apply(op, f).values - manual)) <= 1e-13

    def test_reproducible_per_seed(self):
        kap = kappa()
        a = span_apply(sample_span_operator(kap, 30, 1.0, GRF, SeededRng(7, 3)), grf(8))
        b = span_apply(sample_span_operator(kap, 30, 1.0, GRF, SeededRng(7, 3)), grf(8))
        assert np.array_equal(a.values, b.values)

    def test_linear_kernel_additivity(self):
        kap = kappa("linear")
        op = sample_span_operator(kap, 10, 1.0, GRF, SeededRng(9, 0))
        f, g = grf(10), grf(11)
        fg = Field(GRID, f.values + g.values)
        lhs = span_apply(op, fg).values
        rhs = span_apply(op, f).values + span_apply(op, g).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (np.max(np.abs(rhs)) + 1.0)

    def test_nonlinear_kernel_breaks_additivity(self):
        kap = kappa("laplacian")
        op = sample_span_operator(kap, 10, 1.0, GRF, SeededRng(12, 0))
        f, g = grf(13), grf(14)
        fg = Field(GRID, f.values + g.values)
        lhs = span_apply(op, fg).values
        rhs = span_apply(op, f).values + span_apply(op, g).values
        assert np.max(np.abs(lhs - rhs)) > 1e-6

    def test_save_load_round_trip(self, tmp_path):
        kap = kappa("energy", "laplace")
        op = sample_span_operator(kap, 4, 0.7, GRF, SeededRng(15, 0))
        save_span_operator(op, tmp_path / "op")
        back = load_span_operator(tmp_path / "op")
        f = grf(16)
        assert np.max(np.abs(span_apply(back, f).values - span_apply(op, f).values)) <= 1e-15


class TestGdZero:
    def test_applies_to_zero(self):
        kap = kappa()
        anchors = [grf(20 + i) for i in range(3)]
        op = gd_zero(kap, anchors)
        for i in range(3):
            assert np.max(np.abs(op.apply(grf(30 + i)).values)) == 0.0

    def test_all_coeffs_zero(self):
        op = gd_zero(kappa(), [grf(40)])
        assert all(norm(c) == 0.0 for c in op.coeffs)


class TestGdStep:
    def test_one_step_from_zero(self):
        # first step: coeffs_i = step * u_i, prediction = step * sum k_x(f_i, f) T u_i
        kap = kappa("laplacian")
        data = context(kap, 4, seed=1)
        op = gd_step(gd_zero(kap, [f for f, _ in data]), data, 0.3)
        f = grf(50)
        expected = np.zeros((8, 8))
        for fi, ui in data:
            expected += 0.3 * kx_eval(kap.kx, fi, f) * ky_apply(kap.T, ui).values
        assert np.max(np.abs(op.apply(f).values - expected)) <= 1e-12

    def test_zero_step_is_identity(self):
        kap = kappa()
        data = context(kap, 3, seed=2)
        op = gd_step(gd_zero(kap, [f for f, _ in data]), data, 0.5)
        same = gd_step(op, data, 0.0)
        for a, b in zip(op.coeffs, same.coeffs):
            assert np.array_equal(a.values, b.values)

    def test_zero_residuals_are_fixed_point(self):
        kap = kappa("linear")
        anchors = [grf(60 + i) for i in range(3)]
        op = gd_zero(kap, anchors)
        rng = np.random.default_rng(0)
        coeffs = [Field(GRID, rng.standard_normal((8, 8))) for _ in range(3)]
        op = RepresenterOperator(kap, anchors, coeffs)
        data = [(f, op.apply(f)) for f in anchors]
        stepped = gd_step(op, data, 0.7)
        for a, b in zip(op.coeffs, stepped.coeffs):
            assert np.max(np.abs(a.values - b.values)) <= 1e-12

    def test_step_reversibility(self):
        kap = kappa()
        data = context(kap, 4, seed=3)
        op0 = gd_zero(kap, [f for f, _ in data])
        op1 = gd_step(op0, data, 0.4)
        # stepping +r then -r from the same residual state must cancel
        res_before = [u.values - op1.apply(f).values for f, u in data]
        op2 = gd_step(op1, data, 0.4)
        op3 = RepresenterOperator(kap, op2.anchors,
                                  [Field(GRID, c.values - 0.4 * r)
                                   for c, r in zip(op2.coeffs, res_before)])
        for a, b in zip(op1.coeffs, op3.coeffs):
            assert np.max(np.abs(a.values - b.values)) <= 1e-12

    def test_anchor_mismatch_rejected(self):
        kap = kappa()
        data = context(kap, 3, seed=4)
        op = gd_zero(kap, [f for f, _ in data])
        bad = [(grf(70), u) for _, u in data]
        with pytest.raises(ValueError):
            gd_step(op, bad, 0.1)

    def test_loss_monotone_under_stable_step(self):
        from oplab.analysis import select_delta
        for trial in range(20):
            kap = kappa(("linear", "laplacian", "gradient_rbf", "energy")[trial % 4])
            data = context(kap, 4, seed=100 + trial)
            delta = select_delta(kap, [f for f, _ in data])
            op = gd_zero(kap, [f for f, _ in data])
            losses = [squared_loss(op, data)]
            for _ in range(10):
                op = gd_step(op, data, delta)
                losses.append(squared_loss(op, data))
            diffs = np.diff(losses)
            assert np.all(diffs <= 1e-12 * (1.0 + losses[0]))

    def test_apply_matches_double_loop(self):
        kap = kappa("laplacian")
        data = context(kap, 3, seed=5)
        op = gd_step(gd_zero(kap, [f for f, _ in data]), data, 0.25)
        op = gd_step(op, data, 0.25)
        f = grf(80)
        dense = kap.T.dense_matrix()
        expected = np.zeros(64)
        for anchor, coeff in zip(op.anchors, op.coeffs):
            expected += kx_eval(kap.kx, anchor, f) * (dense @ coeff.values.ravel())
        assert np.max(np.abs(op.apply(f).values.ravel() - expected)) <= 1e-12


class TestSteepestDirection:
    def test_single_pair_normalizer(self):
        kap = kappa("laplacian")
        f, u = context(kap, 1, seed=6)[0]
        op = gd_zero(kap, [f])
        direction, c = steepest_direction(op, [(f, u)])
        expected_c = 1.0 / (kx_eval(kap.kx, f, f) * inner_product(u, ky_apply(kap.T, u)))
        assert c == pytest.approx(expected_c, rel=1e-12)

    def test_residual_scaling_leaves_direction_invariant(self):
        kap = kappa("linear")
        data = context(kap, 3, seed=7)
        op = gd_zero(kap, [f for f, _ in data])
        d1, _ = steepest_direction(op, data)
        doubled = [(f, Field(GRID, 2.0 * u.values)) for f, u in data]
        d2, _ = steepest_direction(gd_zero(kap, [f for f, _ in doubled]), doubled)
        for a, b in zip(d1.coeffs, d2.coeffs):
            assert np.max(np.abs(a.values - b.values)) <= 1e-12

    def test_unit_norm_postcondition(self):
        for trial in range(5):
            kap = kappa(("linear", "laplacian", "gradient_rbf", "energy")[trial % 4])
            data = context(kap, 4, seed=200 + trial)
            op = gd_zero(kap, [f for f, _ in data])
            direction, _ = steepest_direction(op, data)
            gram = gram_x(kap.kx, direction.anchors, direction.anchors)
            quad = 0.0
            for i, ci in enumerate(direction.coeffs):
                for j, cj in enumerate(direction.coeffs):
                    quad += gram[i, j] * inner_product(ci, ky_apply(kap.T, cj))
            assert quad == pytest.approx(1.0, abs=1e-8)

    def test_zero_residuals_rejected(self):
        kap = kappa()
        anchors = [grf(90)]
        op = gd_zero(kap, anchors)
        data = [(anchors[0], Field(GRID, np.zeros((8, 8))))]
        with pytest.raises(ValueError):
            steepest_direction(op, data)
