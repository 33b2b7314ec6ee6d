"""
Discretized function space on the unit 2-torus.

Real scalar fields live on an N x N uniform grid over [0, 1)^2 with
spacing 1/N and unit total measure, so the L2 inner product is the plain
grid average (1/N^2) * sum(f * g).  Spectral representations use the
basis e^{2*pi*i*nu.x} with integer frequencies nu, normalized so that
Parseval holds exactly against the grid quadrature.

Gaussian random fields are sampled mode-by-mode in Fourier space with
covariance alpha * (-Laplacian + beta*I)^(-gamma) and Hermitian
symmetrization so the result is real.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "Field",
    "SpectralField",
    "GrfConfig",
    "SeededRng",
    "constant_field",
    "field_from_values",
    "inner_product",
    "norm",
    "to_spectral",
    "from_spectral",
    "spectral_gradient",
    "spectral_laplacian",
    "sample_grf",
    "multiplier_symbol",
    "apply_fourier_multiplier",
    "apply_symbol",
    "dump_field",
    "load_field",
]

_MAGIC = b"CTF0"
_HEADER = struct.Struct("<4sIII")  # magic, N, reserved, pad -> 16 bytes


@dataclass(frozen=True)
class GridSpec:
    """Uniform N x N grid on the unit 2-torus; N must be even and >= 4."""

    N: int

    def __post_init__(self) -> None:
        if self.N < 4 or self.N % 2 != 0:
            raise ValueError(f"grid size must be even and >= 4, got {self.N}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.N

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid of sample coordinates, entry (a, b) = (a/N, b/N)."""
        x = np.arange(self.N) / self.N
        return np.meshgrid(x, x, indexing="ij")

    def frequencies(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer frequency meshgrid in FFT layout (0..N/2-1, -N/2..-1)."""
        nu = np.fft.fftfreq(self.N, d=1.0 / self.N)
        return np.meshgrid(nu, nu, indexing="ij")


def _lock(values: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(values)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Field:
    """Real scalar function sampled on a grid; values[a, b] = f(a/N, b/N)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.N, self.grid.N):
            raise ValueError(f"expected shape {(self.grid.N,) * 2}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", _lock(v))


@dataclass(frozen=True)
class SpectralField:
    """Fourier coefficients of a field, indexed by integer frequencies.

    coeffs[a, b] is the coefficient of e^{2*pi*i*nu.x} for nu in FFT
    layout; for real fields coeffs(-nu) = conj(coeffs(nu)).  Normalized
    so that inner_product(f, g) == sum(coeffs_f * conj(coeffs_g)).
    """

    grid: GridSpec
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (self.grid.N, self.grid.N):
            raise ValueError(f"expected shape {(self.grid.N,) * 2}, got {c.shape}")
        object.__setattr__(self, "coeffs", _lock(c))


@dataclass(frozen=True)
class GrfConfig:
    """Spectral parameters of the Gaussian random field alpha*(-Lap+beta)^(-gamma)."""

    alpha: float
    beta: float
    gamma: float
    grid: GridSpec

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 1):
            raise ValueError("require alpha > 0, beta > 0, gamma > 1")
        if not all(np.isfinite([self.alpha, self.beta, self.gamma])):
            raise ValueError("GRF parameters must be finite")


class SeededRng:
    """Deterministic random stream keyed by (seed, stream).

    Identical (seed, stream) pairs reproduce the same draw sequence;
    distinct stream ids give statistically independent substreams.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def normal(self, loc: float, scale: float, shape) -> np.ndarray:
        return self._gen.normal(loc, scale, shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def lognormal(self, mean: float, sigma: float, shape) -> np.ndarray:
        return self._gen.lognormal(mean, sigma, shape)


def constant_field(grid: GridSpec, value: float) -> Field:
    return Field(grid, np.full((grid.N, grid.N), float(value)))


def field_from_values(grid: GridSpec, values: np.ndarray) -> Field:
    return Field(grid, values)


def _check_same_grid(f: Field, g: Field) -> None:
    if f.grid.N != g.grid.N:
        raise ValueError(f"grid mismatch: {f.grid.N} vs {g.grid.N}")


def inner_product(f: Field, g: Field) -> float:
    """L2(T^2) inner product by uniform quadrature (1/N^2) * sum(f*g)."""
    _check_same_grid(f, g)
    n = f.grid.N
    return float(np.sum(f.values * g.values) / (n * n))


def norm(f: Field) -> float:
    return float(np.sqrt(max(inner_product(f, f), 0.0)))


def to_spectral(f: Field) -> SpectralField:
    n = f.grid.N
    return SpectralField(f.grid, np.fft.fft2(f.values) / (n * n))


def from_spectral(s: SpectralField) -> Field:
    n = s.grid.N
    return Field(s.grid, np.real(np.fft.ifft2(s.coeffs * (n * n))))


def _gradient_multipliers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    # 2*pi*i*nu per axis; the Nyquist line is zeroed so real fields map
    # to real fields (its odd-derivative phase has no Hermitian partner).
    n1, n2 = grid.frequencies()
    half = grid.N // 2
    m1 = 2j * np.pi * n1
    m2 = 2j * np.pi * n2
    m1[np.abs(n1) == half] = 0.0
    m2[np.abs(n2) == half] = 0.0
    return m1, m2


def spectral_gradient(f: Field) -> tuple[Field, Field]:
    """Partial derivatives (d/dx1, d/dx2) via Fourier multipliers."""
    m1, m2 = _gradient_multipliers(f.grid)
    fh = np.fft.fft2(f.values)
    d1 = np.real(np.fft.ifft2(m1 * fh))
    d2 = np.real(np.fft.ifft2(m2 * fh))
    return Field(f.grid, d1), Field(f.grid, d2)


def spectral_laplacian(f: Field) -> Field:
    """Composition of the two spectral first derivatives, d1^2 + d2^2."""
    m1, m2 = _gradient_multipliers(f.grid)
    fh = np.fft.fft2(f.values)
    out = np.real(np.fft.ifft2((m1 * m1 + m2 * m2) * fh))
    return Field(f.grid, out)


def sample_grf(cfg: GrfConfig, rng: SeededRng) -> Field:
    """Draw a mean-zero Gaussian random field with the configured covariance.

    Per-mode complex amplitudes Z_nu have unit variance (real and
    imaginary parts N(0, 1/2)) and are Hermitian-symmetrized so the
    field is real; self-conjugate modes come out real N(0, 1).  Modes on
    the Nyquist lines are excluded, keeping samples inside the band the
    (N/2) x (N/2) multiplier blocks act on as an exact identity.
    """
    n = cfg.grid.N
    half = n // 2
    re = rng.standard_normal((n, n))
    im = rng.standard_normal((n, n))
    w = np.sqrt(0.5) * (re + 1j * im)
    flip = (-np.arange(n)) % n
    z = (w + np.conj(w[flip][:, flip])) / np.sqrt(2.0)

    n1, n2 = cfg.grid.frequencies()
    amp = np.sqrt(cfg.alpha) * (4.0 * np.pi**2 * (n1**2 + n2**2) + cfg.beta) ** (-cfg.gamma / 2.0)
    band = (np.abs(n1) < half) & (np.abs(n2) < half)
    coeffs = z * amp * band

    values = np.fft.ifft2(coeffs * (n * n))
    residue = float(np.max(np.abs(values.imag)))
    if residue > 1e-12 * max(1.0, float(np.max(np.abs(values.real)))):
        raise AssertionError(f"Hermitian symmetrization failed, imag residue {residue:.3e}")
    return Field(cfg.grid, values.real)


def multiplier_symbol(block: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Expand an (N/2) x (N/2) block indexed by (|nu1|, |nu2|) to the full mode grid.

    The block value at (|nu1|, |nu2|) is applied identically to all four
    conjugate modes; modes with max(|nu1|, |nu2|) >= N/2 are zeroed.  The
    resulting symbol is real and even, so the operator is self-adjoint
    and maps real fields to real fields.
    """
    n, half = grid.N, grid.N // 2
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (half, half):
        raise ValueError(f"expected block shape {(half, half)}, got {block.shape}")
    n1, n2 = grid.frequencies()
    a1 = np.abs(n1).astype(int)
    a2 = np.abs(n2).astype(int)
    inside = (a1 < half) & (a2 < half)
    sym = np.zeros((n, n))
    sym[inside] = block[a1[inside], a2[inside]]
    return sym


def apply_symbol(symbol: np.ndarray, f: Field) -> Field:
    """Apply a full-grid Fourier-multiplier symbol to a field."""
    out = np.real(np.fft.ifft2(symbol * np.fft.fft2(f.values)))
    return Field(f.grid, out)


def apply_fourier_multiplier(block: np.ndarray, f: Field) -> Field:
    """Apply the magnitude-indexed multiplier block to a field."""
    return apply_symbol(multiplier_symbol(block, f.grid), f)


def dump_field(f: Field, path) -> None:
    """Write a field in the binary dump format.

    Layout: 16-byte header (magic "CTF0", u32 N, u32 reserved, u32 pad,
    all little-endian) followed by N^2 float64 values, row-major.
    """
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, f.grid.N, 0, 0))
        fh.write(f.values.astype("<f8").tobytes())


def load_field(path) -> Field:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        magic, n, _, _ = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        data = np.frombuffer(fh.read(n * n * 8), dtype="<f8").reshape(n, n)
    return Field(GridSpec(n), data.copy())
