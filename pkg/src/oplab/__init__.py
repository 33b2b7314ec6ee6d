"""Numerical laboratory for in-context operator learning with kernel
attention over discretized fields on the 2-torus."""

from .grid import (Field, GridSpec, GrfConfig, SeededRng, SpectralField,
                   apply_fourier_multiplier, constant_field, dump_field,
                   field_from_values, from_spectral, inner_product, load_field,
                   norm, sample_grf, spectral_gradient, to_spectral)
from .kernels import (HSKernel, InputKernel, OutputOperator, gram_x, hs_apply,
                      kx_eval, ky_apply, make_output_operator)
from .operators import (RepresenterOperator, SpanOperator, gd_step, gd_zero,
                        sample_span_operator, span_apply, squared_loss,
                        steepest_direction)
from .attention import (ContextWindow, ForwardTrace, LayerParams,
                        TransformerParams, attention_weights, forward,
                        gradient_descent_params, icl_loss, layer_forward,
                        make_window)
from .analysis import (BlupResult, EquivalenceReport, blup_factored,
                       blup_neumann, check_gd_equivalence,
                       check_rescale_invariance, estimate_contraction,
                       power_iteration, predicted_depth,
                       random_invertible_symbol, select_delta)
from .training import (AdamState, Gradients, MetricHistory, TrainConfig,
                       adam_step, build_dataset, loss_and_grads,
                       pairwise_cosine, train)

__version__ = "0.1.0"
