"""
Differentiable forward pass and Adam training of the layer parameters.

Gradients come from a handwritten reverse pass over the fixed primitive
chain (multiplier application, kernel Gram, masked attention mixing,
the shared output operator); the output operator and the FFT are
self-adjoint constant maps, so their backward pass reuses the forward
kernels.  Gradients are accumulated in a fixed window order so results
are bit-deterministic for a given seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import ContextWindow, LayerParams, TransformerParams, make_window
from .grid import GridSpec, GrfConfig, SeededRng, multiplier_symbol, sample_grf
from .kernels import HSKernel, InputKernel, make_output_operator
from .operators import sample_span_operator

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LayerGrads",
    "Gradients",
    "AdamState",
    "MetricHistory",
    "NonFiniteLossError",
    "build_dataset",
    "loss_and_grads",
    "adam_step",
    "pairwise_cosine",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.  Full-scale defaults: 250 layers, 64 x 64
    grid, 25 prompts, 30 bases, Adam 1e-3, 10 epochs, 128 samples,
    momentum 0, r init -0.01; shrink depth and N for desk-scale runs."""

    depth: int = 250
    N: int = 64
    n_prompts: int = 25
    n_bases: int = 30
    n_samples: int = 128
    epochs: int = 10
    learning_rate: float = 1e-3
    momentum: float = 0.0
    r_init: float = -0.01
    kx: str = "linear"
    ky: str = "gaussian"
    sigma_x: float = 1.0
    sigma_y: float = 0.5
    grf_alpha: float = 1.0
    grf_beta: float = 1.0
    grf_gamma: float = 2.0
    alpha_sigma: float = 1.0
    batch_size: int = 2
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        sizes = (self.depth, self.N, self.n_prompts, self.n_bases,
                 self.n_samples, self.epochs, self.batch_size)
        if any(s < 1 for s in sizes):
            raise ValueError("all sizes must be positive")

    def kappa(self) -> HSKernel:
        grid = GridSpec(self.N)
        return HSKernel(InputKernel(self.kx, self.sigma_x),
                        make_output_operator(self.ky, self.sigma_y, grid))

    def grf(self) -> GrfConfig:
        return GrfConfig(self.grf_alpha, self.grf_beta, self.grf_gamma, GridSpec(self.N))


@dataclass
class LayerGrads:
    dr: float
    dRq: np.ndarray
    dRk: np.ndarray


@dataclass
class Gradients:
    layers: list[LayerGrads]


@dataclass
class AdamState:
    step: int
    m: list[LayerGrads]
    v: list[LayerGrads]

    @staticmethod
    def zeros(params: TransformerParams) -> "AdamState":
        half = params.grid.N // 2
        z = lambda: np.zeros((half, half))
        return AdamState(0,
                         [LayerGrads(0.0, z(), z()) for _ in params.layers],
                         [LayerGrads(0.0, z(), z()) for _ in params.layers])


@dataclass
class MetricHistory:
    """Per-step training records: loss, average pairwise cosine, wall time."""

    steps: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, step: int, loss: float, cosbar: float, wall_ms: float) -> None:
        if not -1.0 - 1e-12 <= cosbar <= 1.0 + 1e-12:
            raise ValueError(f"cosine metric out of range: {cosbar}")
        self.steps.append((step, loss, cosbar, wall_ms))

    def losses(self) -> np.ndarray:
        return np.array([s[1] for s in self.steps])

    def cosines(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps])


class NonFiniteLossError(RuntimeError):
    def __init__(self, window_index: int):
        super().__init__(f"non-finite loss at window {window_index}")
        self.window_index = window_index


def build_dataset(cfg: TrainConfig, base_stream: int = 0) -> list[ContextWindow]:
    """One window per sample: fresh operator draw, fresh inputs, u = O f.

    Window w draws everything from the substream (cfg.seed, base_stream + w).
    """
    kappa = cfg.kappa()
    grf = cfg.grf()
    windows = []
    for w in range(cfg.n_samples):
        rng = SeededRng(cfg.seed, base_stream + w)
        op = sample_span_operator(kappa, cfg.n_bases, cfg.alpha_sigma, grf, rng)
        fields = [sample_grf(grf, rng) for _ in range(cfg.n_prompts + 1)]
        pairs = [(f, op.apply(f)) for f in fields[:-1]]
        query = fields[-1]
        windows.append(make_window(pairs, query, target=op.apply(query)))
    return windows


# ---------------------------------------------------------------------------
# differentiable kernel Gram
# ---------------------------------------------------------------------------

def _grad_multipliers(n: int) -> np.ndarray:
    nu = np.fft.fftfreq(n, d=1.0 / n)
    n1, n2 = np.meshgrid(nu, nu, indexing="ij")
    half = n // 2
    m1 = 2j * np.pi * n1
    m2 = 2j * np.pi * n2
    m1[np.abs(n1) == half] = 0.0
    m2[np.abs(n2) == half] = 0.0
    return m1 * m1 + m2 * m2  # spectral laplacian symbol (real, <= 0)


def _kernel_forward(kind: str, sigma: float, qf: np.ndarray, kf: np.ndarray):
    n2 = qf.shape[-1] ** 2
    if kind == "linear":
        A = np.einsum("jnm,inm->ji", qf, kf) / n2
        return A, None
    if kind == "laplacian":
        diff = qf[:, None] - kf[None, :]
        dist = np.sqrt(np.maximum(np.einsum("jinm,jinm->ji", diff, diff) / n2, 0.0))
        return np.exp(-dist / sigma), dist
    if kind == "gradient_rbf":
        lap = np.real(_grad_multipliers(qf.shape[-1]))
        lq = np.real(np.fft.ifft2(lap * np.fft.fft2(qf)))
        lk = np.real(np.fft.ifft2(lap * np.fft.fft2(kf)))
        # |grad p - grad q|^2 = -<p - q, lap(p - q)> by parts
        diff = qf[:, None] - kf[None, :]
        ldiff = lq[:, None] - lk[None, :]
        g2 = np.maximum(-np.einsum("jinm,jinm->ji", diff, ldiff) / n2, 0.0)
        return np.exp(-g2 / (2.0 * sigma * sigma)), (lq, lk)
    eq = np.einsum("jnm,jnm->j", qf, qf) / n2
    ek = np.einsum("inm,inm->i", kf, kf) / n2
    gap = eq[:, None] - ek[None, :]
    return np.exp(-(gap**2) / (2.0 * sigma * sigma)), (eq, ek)


def _kernel_backward(kind: str, sigma: float, barA: np.ndarray, A: np.ndarray,
                     qf: np.ndarray, kf: np.ndarray, extras):
    n2 = qf.shape[-1] ** 2
    if kind == "linear":
        barqf = np.einsum("ji,inm->jnm", barA, kf) / n2
        barkf = np.einsum("ji,jnm->inm", barA, qf) / n2
        return barqf, barkf
    if kind == "laplacian":
        dist = extras
        # subgradient 0 at coincident fields
        safe = np.where(dist > 1e-9, dist, np.inf)
        w = barA * A * (-1.0 / (sigma * safe * n2))
        barqf = qf * np.sum(w, axis=1)[:, None, None] - np.einsum("ji,inm->jnm", w, kf)
        barkf = kf * np.sum(w, axis=0)[:, None, None] - np.einsum("ji,jnm->inm", w, qf)
        return barqf, barkf
    if kind == "gradient_rbf":
        lq, lk = extras
        w = barA * A / (sigma * sigma * n2)
        barqf = lq * np.sum(w, axis=1)[:, None, None] - np.einsum("ji,inm->jnm", w, lk)
        barkf = lk * np.sum(w, axis=0)[:, None, None] - np.einsum("ji,jnm->inm", w, lq)
        return barqf, barkf
    eq, ek = extras
    w = barA * A * (eq[:, None] - ek[None, :]) / (sigma * sigma)
    barqf = qf * (-2.0 / n2) * np.sum(w, axis=1)[:, None, None]
    barkf = kf * (2.0 / n2) * np.sum(w, axis=0)[:, None, None]
    return barqf, barkf


# ---------------------------------------------------------------------------
# forward / backward over one window
# ---------------------------------------------------------------------------

def _block_scatter_indices(grid: GridSpec):
    n1, n2 = grid.frequencies()
    a1 = np.abs(n1).astype(int)
    a2 = np.abs(n2).astype(int)
    half = grid.N // 2
    inside = (a1 < half) & (a2 < half)
    return a1, a2, inside


def _symbol_to_block(bar_symbol: np.ndarray, grid: GridSpec) -> np.ndarray:
    a1, a2, inside = _block_scatter_indices(grid)
    half = grid.N // 2
    out = np.zeros((half, half))
    np.add.at(out, (a1[inside], a2[inside]), bar_symbol[inside])
    return out


def _window_pass(params: TransformerParams, window: ContextWindow,
                 want_grads: bool) -> tuple[float, list[LayerGrads] | None]:
    kind = params.kappa.kx.kind
    sigma = params.kappa.kx.sigma_x
    sym = params.kappa.T.symbol
    grid = params.grid
    nn = grid.N * grid.N
    n = window.n_context

    F = np.stack([f.values for f in window.inputs])
    Fhat = np.fft.fft2(F)
    U = np.stack([u.values for u in window.outputs])
    target = window.target.values

    saved = []
    for lp in params.layers:
        mq = multiplier_symbol(lp.Rq, grid)
        mk = multiplier_symbol(lp.Rk, grid)
        qf = np.real(np.fft.ifft2(mq * Fhat))
        kf = np.real(np.fft.ifft2(mk * Fhat))
        A, extras = _kernel_forward(kind, sigma, qf, kf)
        TU = np.real(np.fft.ifft2(sym * np.fft.fft2(U[:n])))
        mix = np.einsum("ji,inm->jnm", A[:, :n], TU)
        U = U + lp.r * mix
        if want_grads:
            saved.append((qf, kf, A, extras, TU, mix))

    loss = float(np.sum((U[n] + target) ** 2) / nn)
    if not want_grads or not np.isfinite(loss):
        return loss, None

    barU = np.zeros_like(U)
    barU[n] = 2.0 / nn * (U[n] + target)
    grads: list[LayerGrads] = []
    for lp, (qf, kf, A, extras, TU, mix) in zip(reversed(params.layers), reversed(saved)):
        dr = float(np.sum(barU * mix))
        barA = np.zeros_like(A)
        barA[:, :n] = lp.r * np.einsum("jnm,inm->ji", barU, TU)
        barTU = lp.r * np.einsum("ji,jnm->inm", A[:, :n], barU)
        barU[:n] += np.real(np.fft.ifft2(sym * np.fft.fft2(barTU)))

        barqf, barkf = _kernel_backward(kind, sigma, barA, A, qf, kf, extras)
        bar_mq = np.sum(np.real(Fhat * np.conj(np.fft.fft2(barqf))), axis=0) / nn
        bar_mk = np.sum(np.real(Fhat * np.conj(np.fft.fft2(barkf))), axis=0) / nn
        grads.append(LayerGrads(dr, _symbol_to_block(bar_mq, grid),
                                _symbol_to_block(bar_mk, grid)))
    return loss, list(reversed(grads))


def loss_and_grads(params: TransformerParams,
                   batch: list[ContextWindow]) -> tuple[float, Gradients]:
    """Batch-mean in-context loss and its gradients w.r.t. all layer params."""
    if not batch:
        raise ValueError("batch must be nonempty")
    for w in batch:
        if w.grid.N != params.grid.N:
            raise ValueError("window grid does not match params grid")
        if w.target is None:
            raise ValueError("training windows need targets")
    scale = 1.0 / len(batch)
    total_loss = 0.0
    acc: list[LayerGrads] | None = None
    for idx, window in enumerate(batch):
        loss, grads = _window_pass(params, window, want_grads=True)
        if not np.isfinite(loss):
            raise NonFiniteLossError(idx)
        total_loss += scale * loss
        if acc is None:
            acc = [LayerGrads(scale * g.dr, scale * g.dRq, scale * g.dRk) for g in grads]
        else:
            for a, g in zip(acc, grads):
                a.dr += scale * g.dr
                a.dRq = a.dRq + scale * g.dRq
                a.dRk = a.dRk + scale * g.dRk
    return total_loss, Gradients(acc)


def batch_loss(params: TransformerParams, batch: list[ContextWindow]) -> float:
    """Forward-only batch-mean loss (used by finite-difference checks)."""
    return float(np.mean([_window_pass(params, w, want_grads=False)[0] for w in batch]))


def adam_step(params: TransformerParams, grads: Gradients, state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> tuple[TransformerParams, AdamState]:
    """One Adam update; params and state are replaced, not mutated."""
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_layers = []
    new_m, new_v = [], []
    for lp, g, m, v in zip(params.layers, grads.layers, state.m, state.v):
        mr = b1 * m.dr + (1 - b1) * g.dr
        vr = b2 * v.dr + (1 - b2) * g.dr**2
        mq = b1 * m.dRq + (1 - b1) * g.dRq
        vq = b2 * v.dRq + (1 - b2) * g.dRq**2
        mk = b1 * m.dRk + (1 - b1) * g.dRk
        vk = b2 * v.dRk + (1 - b2) * g.dRk**2
        r = lp.r - lr * (mr / c1) / (np.sqrt(vr / c2) + eps)
        Rq = lp.Rq - lr * (mq / c1) / (np.sqrt(vq / c2) + eps)
        Rk = lp.Rk - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
        new_layers.append(LayerParams(r, Rq, Rk))
        new_m.append(LayerGrads(mr, mq, mk))
        new_v.append(LayerGrads(vr, vq, vk))
    return (TransformerParams(new_layers, params.kappa, params.grid),
            AdamState(t, new_m, new_v))


def pairwise_cosine(params: TransformerParams, layer_sample: list[int]) -> float:
    """Mean Frobenius cosine over query/key blocks of the sampled layers.

    Averages all ordered pairs (including self-pairs); zero-norm blocks
    are excluded with a warning.
    """
    mats = []
    for ell in layer_sample:
        for label, mat in (("Rq", params.layers[ell].Rq), ("Rk", params.layers[ell].Rk)):
            nrm = float(np.linalg.norm(mat))
            if nrm == 0.0:
                logger.warning("excluding zero-norm block %s at layer %d", label, ell)
                continue
            mats.append(mat / nrm)
    if not mats:
        raise ValueError("no nonzero blocks to compare")
    stack = np.stack([m.ravel() for m in mats])
    return float(np.mean(stack @ stack.T))


def init_params(cfg: TrainConfig, rng: SeededRng) -> TransformerParams:
    """Value scalars at r_init; multiplier blocks small, positive, heavy-tailed.

    Positive entries keep the layer updates sign-coherent from the start;
    the small scale lets the learned common profile dominate the block
    norms once training moves them.
    """
    grid = GridSpec(cfg.N)
    half = cfg.N // 2
    layers = []
    for _ in range(cfg.depth):
        rq = cfg.init_scale * rng.lognormal(0.0, 1.0, (half, half))
        rk = cfg.init_scale * rng.lognormal(0.0, 1.0, (half, half))
        layers.append(LayerParams(cfg.r_init, rq, rk))
    return TransformerParams(layers, cfg.kappa(), grid)


def sample_metric_layers(cfg: TrainConfig, rng: SeededRng, count: int = 10) -> list[int]:
    if cfg.depth <= count:
        return list(range(cfg.depth))
    idx = rng.uniform(0.0, 1.0, cfg.depth).argsort()[:count]
    return sorted(int(i) for i in idx)


def train(cfg: TrainConfig) -> tuple[TransformerParams, MetricHistory]:
    """Adam training over deterministic sequential mini-batches.

    History has one record per step, epochs * ceil(n_samples / batch_size)
    in total; reruns with the same config are bit-identical.
    """
    dataset = build_dataset(cfg)
    params = init_params(cfg, SeededRng(cfg.seed, cfg.n_samples))
    metric_layers = sample_metric_layers(cfg, SeededRng(cfg.seed, cfg.n_samples + 1))
    state = AdamState.zeros(params)
    history = MetricHistory()
    step = 0
    for _ in range(cfg.epochs):
        for lo in range(0, cfg.n_samples, cfg.batch_size):
            t0 = time.perf_counter()
            batch = dataset[lo:lo + cfg.batch_size]
            loss, grads = loss_and_grads(params, batch)
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            step += 1
            wall_ms = 1000.0 * (time.perf_counter() - t0)
            history.append(step, loss, pairwise_cosine(params, metric_layers), wall_ms)
    return params, history
