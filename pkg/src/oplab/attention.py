"""
Masked kernel attention over context windows of fields.

A window holds n input-output pairs plus a query input whose output
slot starts at zero.  Each layer transforms query and key copies of the
inputs with Fourier-multiplier operators, evaluates the scalar kernel
Gram between them, and adds r * sum_i A[j, i] * (T u_i) to every output
slot, the sum masked to the n context columns.  The input row is never
modified, and the query's output slot accumulates the negated
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field, GridSpec, inner_product, multiplier_symbol
from .kernels import HSKernel, cross_gram

__all__ = [
    "ContextWindow",
    "LayerParams",
    "TransformerParams",
    "ForwardTrace",
    "identity_block",
    "gradient_descent_params",
    "attention_weights",
    "layer_forward",
    "forward",
    "icl_loss",
]


@dataclass(frozen=True)
class ContextWindow:
    """n+1 input fields and n+1 output fields; the last output slot is zero."""

    inputs: list[Field]
    outputs: list[Field]
    target: Field | None = None

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.outputs) or len(self.inputs) < 2:
            raise ValueError("window needs equal-length input/output rows with n >= 1")
        grids = {f.grid.N for f in self.inputs} | {f.grid.N for f in self.outputs}
        if self.target is not None:
            grids.add(self.target.grid.N)
        if len(grids) != 1:
            raise ValueError("all window fields must share one grid")

    @property
    def n_context(self) -> int:
        return len(self.inputs) - 1

    @property
    def grid(self) -> GridSpec:
        return self.inputs[0].grid


def make_window(context: list[tuple[Field, Field]], query: Field,
                target: Field | None = None) -> ContextWindow:
    """Assemble a window from context pairs and a query input."""
    grid = query.grid
    zero = Field(grid, np.zeros((grid.N, grid.N)))
    inputs = [f for f, _ in context] + [query]
    outputs = [u for _, u in context] + [zero]
    return ContextWindow(inputs, outputs, target)


@dataclass(frozen=True)
class LayerParams:
    """Value scalar r plus (N/2) x (N/2) query/key multiplier blocks."""

    r: float
    Rq: np.ndarray
    Rk: np.ndarray

    def __post_init__(self) -> None:
        rq = np.asarray(self.Rq, dtype=np.float64)
        rk = np.asarray(self.Rk, dtype=np.float64)
        if rq.shape != rk.shape or rq.ndim != 2 or rq.shape[0] != rq.shape[1]:
            raise ValueError("Rq and Rk must be equal square blocks")
        if not (np.isfinite(self.r) and np.all(np.isfinite(rq)) and np.all(np.isfinite(rk))):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "Rq", rq)
        object.__setattr__(self, "Rk", rk)


@dataclass(frozen=True)
class TransformerParams:
    layers: list[LayerParams]
    kappa: HSKernel
    grid: GridSpec

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("depth must be >= 1")
        half = self.grid.N // 2
        for lp in self.layers:
            if lp.Rq.shape != (half, half):
                raise ValueError("layer blocks must match the grid Nyquist size")

    @property
    def depth(self) -> int:
        return len(self.layers)


@dataclass
class ForwardTrace:
    """Per-layer output rows and attention matrices; entry 0 is the input state."""

    output_rows: list[list[Field]]
    attention: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.output_rows) - 1

    def prediction(self, layer: int) -> Field:
        """User-facing prediction at a layer: the negated query slot."""
        slot = self.output_rows[layer][-1]
        return Field(slot.grid, -slot.values)

    def predictions(self) -> list[Field]:
        return [self.prediction(ell) for ell in range(len(self.output_rows))]


def identity_block(grid: GridSpec) -> np.ndarray:
    """All-ones multiplier block: the identity on band-limited fields."""
    half = grid.N // 2
    return np.ones((half, half))


def gradient_descent_params(kappa: HSKernel, grid: GridSpec, depth: int,
                            step_size: float) -> TransformerParams:
    """Parameters under which the forward pass runs kernel-space descent.

    Identity query/key blocks with value scalar r = -step_size per layer.
    """
    ones = identity_block(grid)
    layers = [LayerParams(-step_size, ones, ones) for _ in range(depth)]
    return TransformerParams(layers, kappa, grid)


def _transformed_stack(block: np.ndarray, stack_hat: np.ndarray, grid: GridSpec) -> np.ndarray:
    sym = multiplier_symbol(block, grid)
    return np.real(np.fft.ifft2(sym * stack_hat))


def attention_weights(layer: LayerParams, kappa: HSKernel, inputs: list[Field]) -> np.ndarray:
    """Scalar attention matrix A[j, i] = k_x(W_q f_j, W_k f_i)."""
    grid = inputs[0].grid
    stack = np.stack([f.values for f in inputs])
    stack_hat = np.fft.fft2(stack)
    qf = _transformed_stack(layer.Rq, stack_hat, grid)
    kf = _transformed_stack(layer.Rk, stack_hat, grid)
    return cross_gram(kappa.kx, qf, kf, grid.N)


def _masked_update(outputs: np.ndarray, A: np.ndarray, r: float,
                   symbol: np.ndarray) -> np.ndarray:
    n = outputs.shape[0] - 1
    tu = np.real(np.fft.ifft2(symbol * np.fft.fft2(outputs[:n])))
    return outputs + r * np.einsum("ji,inm->jnm", A[:, :n], tu)


def layer_forward(window: ContextWindow, layer: LayerParams,
                  kappa: HSKernel) -> ContextWindow:
    """Apply one attention layer; inputs pass through unchanged."""
    A = attention_weights(layer, kappa, window.inputs)
    out = np.stack([u.values for u in window.outputs])
    new = _masked_update(out, A, layer.r, kappa.T.symbol)
    outputs = [Field(window.grid, v) for v in new]
    return ContextWindow(window.inputs, outputs, window.target)


def forward(window: ContextWindow, params: TransformerParams) -> ForwardTrace:
    """Run the full layer stack, recording rows and attention matrices.

    Since the input row is constant, the attention matrix is reused
    whenever consecutive layers share identical multiplier blocks.
    """
    rows = [list(window.outputs)]
    mats: list[np.ndarray] = []
    out = np.stack([u.values for u in window.outputs])
    grid = window.grid
    prev_blocks: tuple[np.ndarray, np.ndarray] | None = None
    A: np.ndarray | None = None
    for lp in params.layers:
        if (A is None or prev_blocks is None
                or not (np.array_equal(prev_blocks[0], lp.Rq)
                        and np.array_equal(prev_blocks[1], lp.Rk))):
            A = attention_weights(lp, params.kappa, window.inputs)
            prev_blocks = (lp.Rq, lp.Rk)
        out = _masked_update(out, A, lp.r, params.kappa.T.symbol)
        rows.append([Field(grid, v) for v in out])
        mats.append(A)
    return ForwardTrace(rows, mats)


def icl_loss(prediction_slot: Field, target: Field) -> float:
    """Squared distance between the raw (negated) slot and -target."""
    if prediction_slot.grid.N != target.grid.N:
        raise ValueError("grid mismatch")
    diff = Field(target.grid, prediction_slot.values + target.values)
    return inner_product(diff, diff)
