"""
Data-generating span operators and the explicit kernel-space gradient
descent iterate in representer form.

A span operator is a random element O = sum_s alpha_s * k_x(phi_s, .) * T psi_s
of the operator space induced by an HS kernel.  The gradient-descent
iterate for the squared in-context loss keeps the representer form
O = sum_i k_x(f_i, .) * T c_i over the context anchors f_i, with
coefficient fields c_i updated by the residuals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Field, GrfConfig, SeededRng, dump_field, load_field, sample_grf
from .kernels import HSKernel, cross_gram, gram_x, ky_apply

__all__ = [
    "SpanOperator",
    "RepresenterOperator",
    "sample_span_operator",
    "span_apply",
    "gd_zero",
    "gd_step",
    "steepest_direction",
    "squared_loss",
    "save_span_operator",
    "load_span_operator",
]


@dataclass(frozen=True)
class SpanOperator:
    """Random operator sum_s alpha_s * k_x(phi_s, f) * (T psi_s); T psi precomputed."""

    kappa: HSKernel
    alphas: np.ndarray
    phis: list[Field]
    tpsis: list[Field]

    def apply(self, f: Field) -> Field:
        w = cross_gram(self.kappa.kx, np.stack([p.values for p in self.phis]),
                       f.values[None], f.grid.N)[:, 0]
        acc = np.einsum("s,snm->nm", self.alphas * w, np.stack([t.values for t in self.tpsis]))
        return Field(f.grid, acc)


@dataclass(frozen=True)
class RepresenterOperator:
    """Iterate sum_i k_x(f_i, .) * (T c_i) anchored on the context inputs."""

    kappa: HSKernel
    anchors: list[Field]
    coeffs: list[Field]

    def __post_init__(self) -> None:
        if len(self.anchors) != len(self.coeffs):
            raise ValueError("anchors and coeffs must have equal length")

    def apply(self, f: Field) -> Field:
        w = cross_gram(self.kappa.kx, np.stack([a.values for a in self.anchors]),
                       f.values[None], f.grid.N)[:, 0]
        tc = [ky_apply(self.kappa.T, c) for c in self.coeffs]
        acc = np.einsum("i,inm->nm", w, np.stack([t.values for t in tc]))
        return Field(f.grid, acc)


def sample_span_operator(kappa: HSKernel, count: int, sigma: float,
                         grf: GrfConfig, rng: SeededRng) -> SpanOperator:
    """Draw a span operator: alphas ~ N(0, sigma^2), phi/psi ~ GRF."""
    if count < 1:
        raise ValueError("count must be >= 1")
    alphas = rng.normal(0.0, sigma, count)
    phis = [sample_grf(grf, rng) for _ in range(count)]
    tpsis = [ky_apply(kappa.T, sample_grf(grf, rng)) for _ in range(count)]
    return SpanOperator(kappa, alphas, phis, tpsis)


def span_apply(op: SpanOperator, f: Field) -> Field:
    return op.apply(f)


def gd_zero(kappa: HSKernel, anchors: list[Field]) -> RepresenterOperator:
    """The zero operator in representer form over the given anchors."""
    grid = anchors[0].grid
    zeros = [Field(grid, np.zeros((grid.N, grid.N))) for _ in anchors]
    return RepresenterOperator(kappa, list(anchors), zeros)


def _check_anchor_match(op: RepresenterOperator, data: list[tuple[Field, Field]]) -> None:
    if len(data) != len(op.anchors):
        raise ValueError("data length does not match operator anchors")
    for (f, _), a in zip(data, op.anchors):
        if f.values is not a.values and not np.array_equal(f.values, a.values):
            raise ValueError("data inputs must equal the operator anchors")


def _residuals(op: RepresenterOperator, data: list[tuple[Field, Field]]) -> list[Field]:
    gram = gram_x(op.kappa.kx, op.anchors, op.anchors)
    tc = np.stack([ky_apply(op.kappa.T, c).values for c in op.coeffs])
    fitted = np.einsum("ji,jnm->inm", gram, tc)
    return [Field(u.grid, u.values - fitted[i]) for i, (_, u) in enumerate(data)]


def gd_step(op: RepresenterOperator, data: list[tuple[Field, Field]],
            step_size: float) -> RepresenterOperator:
    """One fixed-step update: c_i += step_size * (u_i - O f_i)."""
    _check_anchor_match(op, data)
    res = _residuals(op, data)
    coeffs = [Field(c.grid, c.values + step_size * r.values)
              for c, r in zip(op.coeffs, res)]
    return RepresenterOperator(op.kappa, op.anchors, coeffs)


def squared_loss(op: RepresenterOperator, data: list[tuple[Field, Field]]) -> float:
    """Sum of squared residual norms over the context pairs."""
    _check_anchor_match(op, data)
    res = _residuals(op, data)
    n2 = op.anchors[0].grid.N ** 2
    return float(sum(np.sum(r.values * r.values) / n2 for r in res))


def steepest_direction(op: RepresenterOperator,
                       data: list[tuple[Field, Field]]) -> tuple[RepresenterOperator, float]:
    """Unit-norm steepest descent direction and its residual normalizer.

    The direction has representer coefficients proportional to the
    residuals, scaled to unit norm in the operator space.  The returned
    scalar is c = 1 / sum_ij <res_i, kappa(f_i, f_j) res_j>, the inverse
    of the residual quadratic form.
    """
    _check_anchor_match(op, data)
    res = _residuals(op, data)
    gram = gram_x(op.kappa.kx, op.anchors, op.anchors)
    tres = np.stack([ky_apply(op.kappa.T, r).values for r in res])
    rstack = np.stack([r.values for r in res])
    n2 = op.anchors[0].grid.N ** 2
    quad = float(np.einsum("inm,ij,jnm->", rstack, gram, tres) / n2)
    if quad <= 0.0:
        raise ValueError("degenerate direction: residual quadratic form is not positive")
    scale = 1.0 / np.sqrt(quad)
    coeffs = [Field(r.grid, scale * r.values) for r in res]
    return RepresenterOperator(op.kappa, op.anchors, coeffs), 1.0 / quad


def save_span_operator(op: SpanOperator, directory) -> None:
    """Serialize a span operator: JSON manifest plus field dumps."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kx": op.kappa.kx.kind,
        "sigma_x": op.kappa.kx.sigma_x,
        "ky": op.kappa.T.kind,
        "sigma_y": op.kappa.T.sigma_y,
        "N": op.kappa.T.grid.N,
        "alphas": [float(a) for a in op.alphas],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for i, (phi, tpsi) in enumerate(zip(op.phis, op.tpsis)):
        dump_field(phi, d / f"phi_{i:04d}.ctf")
        dump_field(tpsi, d / f"tpsi_{i:04d}.ctf")


def load_span_operator(directory) -> SpanOperator:
    from .kernels import InputKernel, make_output_operator
    from .grid import GridSpec

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    grid = GridSpec(manifest["N"])
    kappa = HSKernel(
        InputKernel(manifest["kx"], manifest["sigma_x"]),
        make_output_operator(manifest["ky"], manifest["sigma_y"], grid),
    )
    alphas = np.array(manifest["alphas"])
    phis = [load_field(d / f"phi_{i:04d}.ctf") for i in range(len(alphas))]
    tpsis = [load_field(d / f"tpsi_{i:04d}.ctf") for i in range(len(alphas))]
    return SpanOperator(kappa, alphas, phis, tpsis)
