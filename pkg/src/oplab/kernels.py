"""
Scalar input kernels, the output integral operator, and their
Hilbert-Schmidt composition kappa(f1, f2) = k_x(f1, f2) * T.

The output operator T is a stationary kernel integral on the torus,
discretized as T u = (1/N^2) * sum_y' k_y(y', y) u(y').  The kernel is
periodized (summed over integer image shifts) so T is circulant,
applied in O(N^2 log N) by FFT, and positive semidefinite.  A dense
N^2 x N^2 matrix path exists purely as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field, GridSpec, inner_product, spectral_gradient

__all__ = [
    "KX_KINDS",
    "KY_KINDS",
    "InputKernel",
    "OutputOperator",
    "HSKernel",
    "make_output_operator",
    "kx_eval",
    "ky_apply",
    "hs_apply",
    "gram_x",
    "cross_gram",
]

KX_KINDS = ("linear", "laplacian", "gradient_rbf", "energy")
KY_KINDS = ("laplace", "gaussian")


@dataclass(frozen=True)
class InputKernel:
    """Scalar kernel on fields: linear | laplacian | gradient_rbf | energy."""

    kind: str
    sigma_x: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KX_KINDS:
            raise ValueError(f"unknown input kernel {self.kind!r}, expected one of {KX_KINDS}")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be positive")


@dataclass(frozen=True)
class OutputOperator:
    """Circulant integral operator built from a stationary kernel k_y.

    stencil[a, b] = k_y(d((a/N, b/N), 0)) after periodization; symbol is
    the eigenvalue grid of the quadrature-weighted operator, i.e. the
    FFT of stencil / N^2.
    """

    kind: str
    sigma_y: float
    grid: GridSpec
    stencil: np.ndarray
    symbol: np.ndarray

    def dense_matrix(self) -> np.ndarray:
        """Materialize T as an N^2 x N^2 matrix (test oracle; small N only)."""
        n = self.grid.N
        mat = np.empty((n * n, n * n))
        for a in range(n):
            for b in range(n):
                mat[:, a * n + b] = np.roll(self.stencil, (a, b), axis=(0, 1)).ravel()
        return mat / (n * n)

    @property
    def max_eigenvalue(self) -> float:
        return float(np.max(self.symbol))


def _periodized_stencil(kind: str, sigma_y: float, grid: GridSpec) -> np.ndarray:
    # Sum the kernel over integer image shifts until the tail is below
    # double precision; the wrapped kernel is positive definite on the
    # torus while the bare minimum-image version is not.
    n = grid.N
    x = np.arange(n) / n
    if kind == "gaussian":
        reach = int(np.ceil(9.0 * sigma_y)) + 1
    else:
        reach = int(np.ceil(40.0 * sigma_y)) + 1
    out = np.zeros((n, n))
    for m1 in range(-reach, reach + 1):
        d1 = (x + m1) ** 2
        for m2 in range(-reach, reach + 1):
            d2 = (x + m2) ** 2
            dd = d1[:, None] + d2[None, :]
            if kind == "gaussian":
                out += np.exp(-dd / (2.0 * sigma_y**2))
            else:
                out += np.exp(-np.sqrt(dd) / sigma_y)
    return out


def make_output_operator(kind: str, sigma_y: float, grid: GridSpec) -> OutputOperator:
    if kind not in KY_KINDS:
        raise ValueError(f"unknown output kernel {kind!r}, expected one of {KY_KINDS}")
    if not sigma_y > 0:
        raise ValueError("sigma_y must be positive")
    stencil = _periodized_stencil(kind, sigma_y, grid)
    symbol = np.real(np.fft.fft2(stencil)) / (grid.N * grid.N)
    stencil.setflags(write=False)
    symbol.setflags(write=False)
    return OutputOperator(kind, sigma_y, grid, stencil, symbol)


@dataclass(frozen=True)
class HSKernel:
    """Operator-valued kernel kappa(f1, f2) u = k_x(f1, f2) * (T u)."""

    kx: InputKernel
    T: OutputOperator


def kx_eval(kernel: InputKernel, f: Field, g: Field) -> float:
    """Evaluate the scalar input kernel on a pair of fields."""
    if f.grid.N != g.grid.N:
        raise ValueError("grid mismatch")
    s = kernel.sigma_x
    if kernel.kind == "linear":
        return inner_product(f, g)
    if kernel.kind == "laplacian":
        diff = Field(f.grid, f.values - g.values)
        return float(np.exp(-np.sqrt(max(inner_product(diff, diff), 0.0)) / s))
    if kernel.kind == "gradient_rbf":
        f1, f2 = spectral_gradient(f)
        g1, g2 = spectral_gradient(g)
        d1 = Field(f.grid, f1.values - g1.values)
        d2 = Field(f.grid, f2.values - g2.values)
        q = inner_product(d1, d1) + inner_product(d2, d2)
        return float(np.exp(-q / (2.0 * s * s)))
    # energy
    ef = inner_product(f, f)
    eg = inner_product(g, g)
    return float(np.exp(-((ef - eg) ** 2) / (2.0 * s * s)))


def ky_apply(T: OutputOperator, u: Field) -> Field:
    """Apply the output integral operator by circulant FFT convolution."""
    if u.grid.N != T.grid.N:
        raise ValueError("grid mismatch")
    out = np.real(np.fft.ifft2(T.symbol * np.fft.fft2(u.values)))
    return Field(u.grid, out)


def hs_apply(kappa: HSKernel, f1: Field, f2: Field, u: Field) -> Field:
    """Apply kappa(f1, f2) to u: scalar similarity times the shared T."""
    w = kx_eval(kappa.kx, f1, f2)
    tu = ky_apply(kappa.T, u)
    return Field(u.grid, w * tu.values)


def _stack(fields: list[Field]) -> np.ndarray:
    return np.stack([f.values for f in fields])


def cross_gram(kernel: InputKernel, A: np.ndarray, B: np.ndarray, grid_n: int) -> np.ndarray:
    """Gram matrix on stacked value arrays; entry (i, j) = k_x(A_i, B_j).

    Pairwise distances are taken on explicit differences so coincident
    fields evaluate to exactly 1 for the exponential kernels.
    """
    s2 = grid_n * grid_n
    if kernel.kind == "linear":
        return A.reshape(len(A), -1) @ B.reshape(len(B), -1).T / s2
    s = kernel.sigma_x
    if kernel.kind == "laplacian":
        diff = A[:, None] - B[None, :]
        d2 = np.einsum("ijnm,ijnm->ij", diff, diff) / s2
        return np.exp(-np.sqrt(np.maximum(d2, 0.0)) / s)
    if kernel.kind == "gradient_rbf":
        dA = _grad_stack(A)
        dB = _grad_stack(B)
        diff = dA[:, None] - dB[None, :]
        q = np.einsum("ijknm,ijknm->ij", diff, diff) / s2
        return np.exp(-q / (2.0 * s * s))
    ea = np.einsum("inm,inm->i", A, A) / s2
    eb = np.einsum("inm,inm->i", B, B) / s2
    return np.exp(-((ea[:, None] - eb[None, :]) ** 2) / (2.0 * s * s))


def _grad_stack(A: np.ndarray) -> np.ndarray:
    """Spectral gradients of a stack of fields, shape (n, 2, N, N)."""
    n = A.shape[-1]
    nu = np.fft.fftfreq(n, d=1.0 / n)
    n1, n2 = np.meshgrid(nu, nu, indexing="ij")
    half = n // 2
    m1 = 2j * np.pi * n1
    m2 = 2j * np.pi * n2
    m1[np.abs(n1) == half] = 0.0
    m2[np.abs(n2) == half] = 0.0
    ah = np.fft.fft2(A)
    return np.stack([np.real(np.fft.ifft2(m1 * ah)), np.real(np.fft.ifft2(m2 * ah))], axis=1)


def gram_x(kernel: InputKernel, A: list[Field], B: list[Field]) -> np.ndarray:
    """Scalar Gram matrix between two field lists."""
    if not A or not B:
        raise ValueError("gram_x requires nonempty field lists")
    grids = {f.grid.N for f in A} | {f.grid.N for f in B}
    if len(grids) != 1:
        raise ValueError("all fields must share one grid")
    return cross_gram(kernel, _stack(A), _stack(B), grids.pop())
