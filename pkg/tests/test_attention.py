"""Masked kernel attention: weights, layer updates, full forward pass."""

import numpy as np
import pytest

from oplab.attention import (ContextWindow, LayerParams, TransformerParams,
                             attention_weights, forward, gradient_descent_params,
                             icl_loss, layer_forward, make_window)
from oplab.grid import Field, GridSpec, GrfConfig, SeededRng, inner_product, sample_grf
from oplab.kernels import HSKernel, InputKernel, kx_eval, ky_apply, make_output_operator
from oplab.grid import apply_fourier_multiplier

GRID = GridSpec(8)
GRF = GrfConfig(1, 1, 2, GRID)


def kappa(kx="laplacian", ky="gaussian"):
    return HSKernel(InputKernel(kx), make_output_operator(ky, 0.5, GRID))


def grf(seed, stream=0):
    return sample_grf(GRF, SeededRng(seed, stream))


def sample_window(kap, n, seed=0, with_target=True):
    from oplab.operators import sample_span_operator
    rng = SeededRng(seed, 11)
    op = sample_span_operator(kap, 30, 1.0, GRF, rng)
    fields = [sample_grf(GRF, rng) for _ in range(n + 1)]
    pairs = [(f, op.apply(f)) for f in fields[:n]]
    target = op.apply(fields[n]) if with_target else None
    return make_window(pairs, fields[n], target)


def random_layer(seed, r=None):
    rng = np.random.default_rng(seed)
    return LayerParams(float(rng.normal()) if r is None else r,
                       rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))


class TestAttentionWeights:
    def test_identity_blocks_laplacian_diagonal(self):
        kap = kappa("laplacian")
        w = sample_window(kap, 4)
        layer = LayerParams(-0.1, np.ones((4, 4)), np.ones((4, 4)))
        A = attention_weights(layer, kap, w.inputs)
        assert np.max(np.abs(np.diag(A) - 1.0)) <= 1e-12

    def test_zero_blocks_linear_kernel(self):
        kap = kappa("linear")
        w = sample_window(kap, 3)
        layer = LayerParams(0.5, np.zeros((4, 4)), np.zeros((4, 4)))
        A = attention_weights(layer, kap, w.inputs)
        assert np.max(np.abs(A)) == 0.0

    @pytest.mark.parametrize("kind", ["linear", "laplacian", "gradient_rbf", "energy"])
    def test_matches_kernel_loop(self, kind):
        kap = kappa(kind)
        w = sample_window(kap, 3, seed=2)
        layer = random_layer(3)
        A = attention_weights(layer, kap, w.inputs)
        for j, fj in enumerate(w.inputs):
            qj = apply_fourier_multiplier(layer.Rq, fj)
            for i, fi in enumerate(w.inputs):
                ki = apply_fourier_multiplier(layer.Rk, fi)
                assert A[j, i] == pytest.approx(kx_eval(kap.kx, qj, ki), abs=1e-12)

    def test_symmetric_with_identity_blocks(self):
        kap = kappa("laplacian")
        w = sample_window(kap, 4, seed=4)
        layer = LayerParams(0.0, np.ones((4, 4)), np.ones((4, 4)))
        A = attention_weights(layer, kap, w.inputs)
        assert np.max(np.abs(A - A.T)) <= 1e-13

    def test_context_permutation_permutes_rows_and_columns(self):
        kap = kappa("energy")
        w = sample_window(kap, 5, seed=21)
        layer = LayerParams(0.0, np.ones((4, 4)), np.ones((4, 4)))
        A = attention_weights(layer, kap, w.inputs)
        perm = [3, 1, 4, 0, 2]
        inputs2 = [w.inputs[i] for i in perm] + [w.inputs[-1]]
        A2 = attention_weights(layer, kap, inputs2)
        full = perm + [5]
        assert np.max(np.abs(A2 - A[np.ix_(full, full)])) <= 1e-13


class TestLayerForward:
    def test_zero_r_is_identity(self):
        kap = kappa()
        w = sample_window(kap, 3, seed=5)
        layer = LayerParams(0.0, np.ones((4, 4)), np.ones((4, 4)))
        out = layer_forward(w, layer, kap)
        for a, b in zip(w.outputs, out.outputs):
            assert np.array_equal(a.values, b.values)

    def test_one_layer_matches_descent_formula(self):
        # from the zero slot, one layer with r = -step gives
        # slot = -step * sum_i k_x(f, f_i) T u_i
        kap = kappa("laplacian")
        w = sample_window(kap, 4, seed=6)
        step = 0.37
        layer = LayerParams(-step, np.ones((4, 4)), np.ones((4, 4)))
        out = layer_forward(w, layer, kap)
        n = w.n_context
        expected = np.zeros((8, 8))
        for fi, ui in zip(w.inputs[:n], w.outputs[:n]):
            expected -= step * kx_eval(kap.kx, w.inputs[n], fi) * ky_apply(kap.T, ui).values
        assert np.max(np.abs(out.outputs[n].values - expected)) <= 1e-12

    def test_inputs_unchanged(self):
        kap = kappa("energy")
        w = sample_window(kap, 3, seed=7)
        out = layer_forward(w, random_layer(8), kap)
        for a, b in zip(w.inputs, out.inputs):
            assert a.values is b.values

    def test_slot_shift_equivariance_random_params(self):
        # adding a constant c to the query slot shifts all later slots by c
        kap = kappa("gradient_rbf")
        w = sample_window(kap, 4, seed=9)
        c = 1.618
        shifted_outputs = list(w.outputs)
        shifted_outputs[-1] = Field(GRID, w.outputs[-1].values + c)
        w_shift = ContextWindow(w.inputs, shifted_outputs, w.target)
        layer = random_layer(10)
        a = layer_forward(w, layer, kap)
        b = layer_forward(w_shift, layer, kap)
        assert np.max(np.abs(b.outputs[-1].values - a.outputs[-1].values - c)) <= 1e-12
        for x, y in zip(a.outputs[:-1], b.outputs[:-1]):
            assert np.max(np.abs(x.values - y.values)) <= 1e-12


class TestForward:
    def test_depth_one_reduces_to_layer_forward(self):
        kap = kappa()
        w = sample_window(kap, 3, seed=11)
        layer = random_layer(12, r=-0.2)
        params = TransformerParams([layer], kap, GRID)
        trace = forward(w, params)
        direct = layer_forward(w, layer, kap)
        assert trace.depth == 1
        for a, b in zip(trace.output_rows[1], direct.outputs):
            assert np.array_equal(a.values, b.values)

    def test_zero_r_layers_keep_predictions_zero(self):
        kap = kappa()
        w = sample_window(kap, 3, seed=13)
        ones = np.ones((4, 4))
        params = TransformerParams([LayerParams(0.0, ones, ones)] * 5, kap, GRID)
        trace = forward(w, params)
        for ell in range(6):
            assert np.max(np.abs(trace.prediction(ell).values)) == 0.0

    def test_permutation_invariance_of_prediction(self):
        kap = kappa("laplacian")
        w = sample_window(kap, 5, seed=14)
        params = gradient_descent_params(kap, GRID, 3, 0.2)
        trace = forward(w, params)
        perm = [2, 0, 4, 1, 3]
        w2 = make_window([(w.inputs[i], w.outputs[i]) for i in perm],
                         w.inputs[-1], w.target)
        trace2 = forward(w2, params)
        assert np.max(np.abs(trace.prediction(3).values - trace2.prediction(3).values)) <= 1e-12

    def test_deterministic(self):
        kap = kappa()
        w = sample_window(kap, 3, seed=15)
        params = gradient_descent_params(kap, GRID, 4, 0.15)
        a = forward(w, params).prediction(4)
        b = forward(w, params).prediction(4)
        assert np.array_equal(a.values, b.values)

    def test_trace_length_and_attention_count(self):
        kap = kappa()
        w = sample_window(kap, 3, seed=16)
        params = gradient_descent_params(kap, GRID, 6, 0.1)
        trace = forward(w, params)
        assert len(trace.output_rows) == 7
        assert len(trace.attention) == 6


class TestIclLoss:
    def test_negated_target_gives_zero(self):
        t = grf(17)
        slot = Field(GRID, -t.values)
        assert icl_loss(slot, t) == 0.0

    def test_zero_slot_gives_target_energy(self):
        t = grf(18)
        zero = Field(GRID, np.zeros((8, 8)))
        assert icl_loss(zero, t) == pytest.approx(inner_product(t, t), rel=1e-14)

    def test_matches_inner_product_expansion(self):
        s, t = grf(19), grf(20)
        expanded = (inner_product(s, s) + 2 * inner_product(s, t) + inner_product(t, t))
        assert icl_loss(s, t) == pytest.approx(expanded, rel=1e-12)
