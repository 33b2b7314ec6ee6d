"""
Independent oracles and consistency checks.

check_gd_equivalence runs the forward pass with identity query/key
blocks against the explicit representer-form descent iterate on the
same context and compares predictions layer by layer.  blup_factored
computes the kriging predictor through the scalar Gram alone (the
shared output operator cancels), while blup_neumann reaches the same
limit by transformer depth; their agreement validates both routes.
check_rescale_invariance measures how far a kernel moves under the
conjugate spectral rescaling (f, g) -> (S f, S^-1 g).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .attention import forward, gradient_descent_params, make_window
from .grid import Field, GridSpec, SeededRng, apply_symbol, norm
from .kernels import HSKernel, gram_x, kx_eval
from .operators import gd_step, gd_zero

logger = logging.getLogger(__name__)

__all__ = [
    "EquivalenceReport",
    "BlupResult",
    "power_iteration",
    "select_delta",
    "check_gd_equivalence",
    "blup_factored",
    "blup_neumann",
    "estimate_contraction",
    "predicted_depth",
    "random_invertible_symbol",
    "check_rescale_invariance",
]


@dataclass
class EquivalenceReport:
    """Per-layer max relative error between forward-pass and descent predictions."""

    per_layer_error: np.ndarray
    config: dict

    @property
    def max_error(self) -> float:
        return float(np.max(self.per_layer_error)) if len(self.per_layer_error) else 0.0

    def to_json(self) -> str:
        return json.dumps({"config": self.config,
                           "per_layer_error": [float(e) for e in self.per_layer_error]},
                          indent=2)


@dataclass
class BlupResult:
    prediction: Field
    method: str
    iterations: int = 0
    contraction: float = float("nan")
    condition_number: float = float("nan")
    ridged: bool = False
    errors_vs: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "iterations": self.iterations,
            "contraction": self.contraction,
            "condition_number": self.condition_number,
            "ridged": self.ridged,
            "errors_vs": None if self.errors_vs is None else [float(e) for e in self.errors_vs],
        }, indent=2)


def power_iteration(mat: np.ndarray, tol: float = 1e-13, max_iter: int = 20000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    n = mat.shape[0]
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            raise ValueError("zero matrix has no dominant eigenvalue")
        v = w / nw
        new = float(v @ (mat @ v))
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            return new
        lam = new
    return lam


def select_delta(kappa: HSKernel, context_inputs: list[Field]) -> float:
    """Stable step size 1 / (lambda_max(Gram) * lambda_max(T)).

    Scales the update so the masked iteration matrix has spectrum in
    [0, 1]; the Gram top eigenvalue comes from power iteration and the
    operator top eigenvalue from the circulant symbol.
    """
    if not context_inputs:
        raise ValueError("context must be nonempty")
    gram = gram_x(kappa.kx, context_inputs, context_inputs)
    lam = power_iteration(gram)
    if lam <= 0.0:
        raise ValueError("Gram matrix has no positive spectrum")
    return 1.0 / (lam * kappa.T.max_eigenvalue)


def check_gd_equivalence(kappa: HSKernel, context: list[tuple[Field, Field]],
                         test_fields: list[Field], depth: int,
                         step_size: float | None = None,
                         forward_kappa: HSKernel | None = None) -> EquivalenceReport:
    """Compare transformer predictions against the descent oracle per layer.

    The forward pass uses identity multiplier blocks, r = -step, and the
    kernel as attention nonlinearity; the oracle iterates the
    representer update from the zero operator with step +step.  Passing
    a different forward_kappa runs the forward pass under that kernel
    while the oracle keeps kappa, which should make the comparison fail
    loudly (a detection sanity check).
    """
    grid = context[0][0].grid
    delta = select_delta(kappa, [f for f, _ in context]) if step_size is None else step_size
    fwd_kappa = kappa if forward_kappa is None else forward_kappa
    params = gradient_descent_params(fwd_kappa, grid, depth, delta) if depth > 0 else None

    traces = []
    if depth > 0:
        for f in test_fields:
            traces.append(forward(make_window(context, f), params))

    op = gd_zero(kappa, [f for f, _ in context])
    errors = np.zeros(depth + 1)
    for ell in range(depth + 1):
        for t, f in enumerate(test_fields):
            oracle = op.apply(f)
            pred = traces[t].prediction(ell) if depth > 0 else oracle
            scale = max(norm(oracle), 1e-300)
            errors[ell] = max(errors[ell], norm(Field(grid, pred.values - oracle.values)) / scale)
        if ell < depth:
            op = gd_step(op, context, delta)
    cfg = {"N": grid.N, "n": len(context), "depth": depth, "delta": delta,
           "kx": kappa.kx.kind, "ky": kappa.T.kind}
    return EquivalenceReport(errors, cfg)


def blup_factored(kappa: HSKernel, context: list[tuple[Field, Field]],
                  query: Field) -> BlupResult:
    """Kriging predictor sum_j (v^T G^-1)_j u_j through the scalar Gram.

    The shared output operator cancels between the cross-covariance and
    the inverse block covariance, so the prediction is independent of
    its conditioning.  A tiny ridge is added only if the Gram condition
    number exceeds 1e12, and is flagged in the result.
    """
    inputs = [f for f, _ in context]
    gram = gram_x(kappa.kx, inputs, inputs)
    v = np.array([kx_eval(kappa.kx, query, f) for f in inputs])
    evals = np.linalg.eigvalsh(gram)
    if evals[0] < -1e-10 * np.trace(gram):
        # the energy and gradient-similarity kernels admit indefinite Grams
        logger.warning("input-kernel Gram is not PSD (min eigenvalue %.3e)", evals[0])
    cond = float(evals[-1] / evals[0]) if evals[0] > 0 else float("inf")
    ridged = False
    if cond > 1e12:
        gram = gram + np.eye(len(inputs)) * (1e-10 * np.trace(gram) / len(inputs))
        ridged = True
    w = np.linalg.solve(gram, v)
    acc = np.einsum("j,jnm->nm", w, np.stack([u.values for _, u in context]))
    return BlupResult(Field(query.grid, acc), "factored",
                      condition_number=cond, ridged=ridged)


def estimate_contraction(kappa: HSKernel, context: list[tuple[Field, Field]],
                         delta: float) -> float:
    """Contraction factor 1 - delta * lambda_min(Gram) * mu_min restricted to the outputs.

    mu_min is the smallest positive symbol value of T over modes where
    the context outputs carry at least 1e-10 of their total energy, so
    spectrally empty directions do not drive the estimate to 1.
    """
    inputs = [f for f, _ in context]
    gram = gram_x(kappa.kx, inputs, inputs)
    lam_min = float(np.linalg.eigvalsh(gram)[0])
    n = inputs[0].grid.N
    uhat = np.stack([np.fft.fft2(u.values) / (n * n) for _, u in context])
    energy = np.sum(np.abs(uhat) ** 2, axis=0)
    active = energy >= 1e-10 * float(np.sum(energy))
    mu = kappa.T.symbol[active]
    mu = mu[mu > 0]
    if mu.size == 0:
        return 1.0
    return float(1.0 - delta * max(lam_min, 0.0) * float(np.min(mu)))


def predicted_depth(contraction: float, target: float = 1e-3) -> int:
    """Depth at which contraction^depth falls below the target error."""
    if not 0.0 < contraction < 1.0:
        raise ValueError("contraction must lie in (0, 1)")
    return int(np.ceil(np.log(target) / np.log(contraction)))


def blup_neumann(kappa: HSKernel, context: list[tuple[Field, Field]],
                 query: Field, delta: float, depth: int,
                 reference: Field | None = None) -> BlupResult:
    """Approach the kriging predictor by running the descent-configured stack.

    Records the relative error against `reference` (typically the
    factored prediction) after every layer when one is given.
    """
    grid = query.grid
    rho = estimate_contraction(kappa, context, delta)
    if depth == 0:
        zero = Field(grid, np.zeros((grid.N, grid.N)))
        return BlupResult(zero, "neumann", 0, rho)
    params = gradient_descent_params(kappa, grid, depth, delta)
    trace = forward(make_window(context, query), params)
    errors = None
    if reference is not None:
        scale = max(norm(reference), 1e-300)
        errors = np.array([
            norm(Field(grid, trace.prediction(ell).values - reference.values)) / scale
            for ell in range(1, depth + 1)
        ])
    return BlupResult(trace.prediction(depth), "neumann", depth, rho, errors_vs=errors)


def random_invertible_symbol(grid: GridSpec, rng: SeededRng,
                             low: float = 0.5, high: float = 2.0) -> np.ndarray:
    """Random even real symbol with entries in [low, high]: an invertible,
    self-adjoint Fourier multiplier."""
    if low <= 0:
        raise ValueError("symbol must be bounded away from zero")
    n = grid.N
    draw = rng.uniform(low, high, (n, n))
    flip = (-np.arange(n)) % n
    return 0.5 * (draw + draw[flip][:, flip])


def check_rescale_invariance(kernel, S_symbol: np.ndarray,
                             F1: list[Field], F2: list[Field]) -> float:
    """Max deviation |k(S f_i, S^-1 g_j) - k(f_i, g_j)| over all pairs.

    S is self-adjoint (real even symbol), so S* = S; its inverse is the
    reciprocal symbol.
    """
    if float(np.min(np.abs(S_symbol))) < 1e-8:
        raise ValueError("symbol too close to zero to invert")
    sf = [apply_symbol(S_symbol, f) for f in F1]
    sg = [apply_symbol(1.0 / S_symbol, g) for g in F2]
    base = gram_x(kernel, F1, F2)
    moved = gram_x(kernel, sf, sg)
    return float(np.max(np.abs(moved - base)))
