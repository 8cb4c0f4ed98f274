"""Learning a filter-bank sparsifying transform by alternating minimization.

The objective over the transform ``W`` and sparse codes ``Z`` is::

    f(W, Z) + mu * J1(W) + lam * J2(W) + (nu**2 / 2) * ||Z||_0

with

* ``f = 1/2 ||W X - Z||_F^2`` over unit-stride periodic patches ``X``,
* ``J1 = 1/2 sum_i ||w_i||^2 - sum_k log lambda_k - sum_i log ||w_i||^2``,
  where ``lambda_k`` are the Gram eigenvalues on an ``N_F x N_F`` grid in the
  orthonormal DFT convention,
* ``J2 = -sum_{i<j} log(1 - c_ij^2)``, with ``c_ij`` the normalized inner
  product between the squared magnitude responses of filters ``i`` and ``j``.

The ``||Z||_0`` weight ``nu**2 / 2`` is the one for which hard thresholding at
``nu`` (keep ``t`` iff ``t**2 > nu**2``) is the exact sparse-coding minimizer,
so every half-step of :func:`learn` is non-increasing.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.fft import dct

from .errors import InfeasibleTransformError, ShapeError
from .filterbank import (
    PR_RTOL,
    FilterBankTransform,
    analyze,
    gram_eigenvalues,
    magnitude_responses,
)
from .imaging import as_image
from .lbfgs import LBFGSParams, lbfgs_minimize

log = logging.getLogger(__name__)

__all__ = [
    "LearnConfig",
    "TrainingSet",
    "Moments",
    "ObjectiveBreakdown",
    "hard_threshold",
    "sparse_code",
    "precompute_moments",
    "image_gram",
    "image_cross",
    "sample_patches",
    "j1_value_grad",
    "j2_value_grad",
    "objective_and_grad",
    "dct_basis",
    "init_transform",
    "scale_nu_for_size",
    "learn",
]

REFERENCE_PIXELS = 512 * 512

# 1 - c**2 at or below this counts as duplicated magnitude responses
COHERENCE_FLOOR = 1e-12


@dataclass(frozen=True)
class LearnConfig:
    num_channels: int = 64
    filter_size: int = 8
    mu: float = 3.0
    lam: float = 7e-4
    nu: float = 5.5e-3
    outer_iterations: int = 1000
    fft_size: int = 0  # 0 selects 4 * filter_size
    init: str = "random_gaussian"
    seed: int = 0
    lbfgs: LBFGSParams = field(default_factory=LBFGSParams)

    def __post_init__(self):
        if self.num_channels < 1 or self.filter_size < 1:
            raise ValueError("num_channels and filter_size must be positive")
        if self.mu < 0 or self.lam < 0 or self.nu < 0:
            raise ValueError("mu, lam and nu must be non-negative")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be non-negative")
        if self.init not in ("random_gaussian", "dct"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.fft_size and self.fft_size < 2 * self.filter_size - 1:
            raise ValueError("fft_size must be at least 2K-1")

    @property
    def n_fft(self) -> int:
        return self.fft_size or 4 * self.filter_size


@dataclass
class TrainingSet:
    """Whole images (all unit-stride periodic patches) or explicit patch samples.

    Exactly one of `images` and `patches` is set. `patches` is a ``K*K x P``
    matrix laid out like :func:`fbst.imaging.build_patch_matrix` columns.
    """

    images: list | None = None
    patches: np.ndarray | None = None

    def __post_init__(self):
        if (self.images is None) == (self.patches is None):
            raise ValueError("give exactly one of images or patches")
        if self.images is not None:
            if len(self.images) == 0:
                raise ValueError("training set has no images")
            self.images = [as_image(x) for x in self.images]
        else:
            P = np.asarray(self.patches, dtype=np.float64)
            if P.ndim != 2 or P.shape[1] < 1:
                raise ShapeError("patches must be a K*K x P matrix with P >= 1")
            self.patches = P


@dataclass(frozen=True)
class Moments:
    """Second-order statistics that determine the sparsification error.

    ``||W X - Z||^2 = tr(W^T W G) - 2 tr(W Y) + zsq`` with ``G = X X^T``,
    ``Y = X Z^T`` and ``zsq = ||Z||_F^2``.
    """

    G: np.ndarray
    Y: np.ndarray
    zsq: float


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    f: float
    j1: float
    j2: float
    sparsity: float = 0.0
    iteration: int = 0
    wall_seconds: float = 0.0


def hard_threshold(t, nu: float) -> np.ndarray:
    """Keep entries with ``t**2 > nu**2`` and zero the rest (ties go to zero)."""
    t = np.asarray(t, dtype=np.float64)
    # |t| > nu is the same rule for nu >= 0 and cannot underflow
    return np.where(np.abs(t) > abs(nu), t, 0.0)


def sparse_code(H: FilterBankTransform, x, nu: float) -> np.ndarray:
    """Exact minimizer over ``Z`` of ``1/2 ||H x - Z||^2 + (nu**2/2) ||Z||_0``."""
    return hard_threshold(analyze(H, x), nu)


def precompute_moments(X, Z) -> Moments:
    """Dense moments from an explicit patch matrix ``X`` and code matrix ``Z``."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if X.ndim != 2 or Z.ndim != 2 or X.shape[1] != Z.shape[1]:
        raise ShapeError(f"X {X.shape} and Z {Z.shape} must have matching column counts")
    return Moments(X @ X.T, X @ Z.T, float(np.sum(Z * Z)))


def image_gram(x, K: int) -> np.ndarray:
    """``X X^T`` for the unit-stride periodic patch matrix of `x`, via the FFT.

    Entry ``(r, r')`` with ``r = m*K + n`` is the cyclic autocorrelation of `x`
    at lag ``(m - m', n - n')``.
    """
    x = as_image(x)
    F = np.fft.rfft2(x)
    R = np.fft.irfft2(F.real**2 + F.imag**2, s=x.shape)
    m, n = np.divmod(np.arange(K * K), K)
    return R[(m[:, None] - m[None, :]) % x.shape[0], (n[:, None] - n[None, :]) % x.shape[1]]


def image_cross(x, Z, K: int) -> np.ndarray:
    """``X Z^T`` for the periodic patch matrix of `x` and a coefficient stack `Z`, via the FFT."""
    x = as_image(x)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3 or Z.shape[1:] != x.shape:
        raise ShapeError(f"code stack {Z.shape} does not match image {x.shape}")
    C = np.fft.irfft2(np.conj(np.fft.rfft2(x)) * np.fft.rfft2(Z), s=x.shape)
    return C[:, :K, :K].reshape(Z.shape[0], K * K).T


def sample_patches(images: Sequence, K: int, count: int, seed: int) -> np.ndarray:
    """Draw `count` periodic patches uniformly over images and positions.

    Columns use the same flipped vectorization as
    :func:`fbst.imaging.build_patch_matrix`.
    """
    images = [as_image(x) for x in images]
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = np.array([x.size for x in images], dtype=np.float64)
    which = rng.choice(len(images), size=count, p=sizes / sizes.sum())
    out = np.empty((K * K, count))
    offs = np.arange(K) - (K - 1)
    for idx, x in enumerate(images):
        cols = np.flatnonzero(which == idx)
        if cols.size == 0:
            continue
        a = rng.integers(0, x.shape[0], size=cols.size)
        b = rng.integers(0, x.shape[1], size=cols.size)
        r = (a[:, None] + offs) % x.shape[0]
        c = (b[:, None] + offs) % x.shape[1]
        patches = x[r[:, :, None], c[:, None, :]].reshape(cols.size, K * K)[:, ::-1]
        out[:, cols] = patches.T
    return out


def _spectral_grad(A, G_V, K: int) -> np.ndarray:
    # d/dW of sum_k G_V[i,k] |A[i,k]|^2 with A = fft2(h_i, N_F) / N_F
    nf = A.shape[-1]
    B = np.fft.fft2(G_V * np.conj(A))
    return (2.0 / nf) * B.real[:, :K, :K].reshape(A.shape[0], K * K)


def _infeasible(W):
    return math.inf, np.full_like(W, np.nan)


def j1_value_grad(W, fft_size: int) -> tuple[float, np.ndarray]:
    """Frame regularizer and its gradient; ``inf`` at zero rows or singular spectra."""
    W = np.asarray(W, dtype=np.float64)
    K = math.isqrt(W.shape[1])
    norms2 = np.sum(W * W, axis=1)
    if np.any(norms2 <= 0):
        return _infeasible(W)
    A, V = magnitude_responses(W, fft_size)
    lam = V.sum(axis=0)
    # numerically zero eigenvalues (the PR tolerance) count as outside the barrier
    if lam.min() <= PR_RTOL * lam.max():
        return _infeasible(W)
    value = 0.5 * norms2.sum() - np.log(lam).sum() - np.log(norms2).sum()
    grad = W - 2.0 * W / norms2[:, None] + _spectral_grad(A, -1.0 / lam, K)
    return float(value), grad


def j2_value_grad(W, fft_size: int) -> tuple[float, np.ndarray]:
    """Coherence barrier on squared magnitude responses, with gradient."""
    W = np.asarray(W, dtype=np.float64)
    K = math.isqrt(W.shape[1])
    nc = W.shape[0]
    if np.any(np.sum(W * W, axis=1) <= 0):
        return _infeasible(W)
    A, V = magnitude_responses(W, fft_size)
    v = V.reshape(nc, -1)
    n = np.linalg.norm(v, axis=1)
    U = v / n[:, None]
    C = U @ U.T
    gap = 1.0 - C * C
    iu = np.triu_indices(nc, 1)
    if nc > 1 and np.min(gap[iu]) <= COHERENCE_FLOOR:
        return _infeasible(W)
    value = -np.log(gap[iu]).sum()
    np.fill_diagonal(gap, 1.0)
    D = 2.0 * C / gap
    np.fill_diagonal(D, 0.0)
    G_v = (D @ U - np.sum(D * C, axis=1)[:, None] * U) / n[:, None]
    grad = _spectral_grad(A, G_v.reshape(V.shape), K)
    return float(value), grad


def objective_and_grad(
    W, moments: Moments | None, mu: float, lam: float, fft_size: int
) -> tuple[ObjectiveBreakdown, np.ndarray]:
    """Transform-update objective ``f + mu J1 + lam J2`` at fixed codes, with gradient.

    `moments` of ``None`` drops the data term. Infeasible points give a
    ``total`` of ``inf``.
    """
    W = np.asarray(W, dtype=np.float64)
    grad = np.zeros_like(W)
    f = 0.0
    if moments is not None:
        WG = W @ moments.G
        f = 0.5 * (np.sum(WG * W) - 2.0 * np.sum(W * moments.Y.T) + moments.zsq)
        grad += WG - moments.Y.T
    j1 = j2 = 0.0
    if mu:
        j1, g1 = j1_value_grad(W, fft_size)
        if not math.isfinite(j1):
            return ObjectiveBreakdown(math.inf, f, j1, j2), g1
        grad += mu * g1
    if lam:
        j2, g2 = j2_value_grad(W, fft_size)
        if not math.isfinite(j2):
            return ObjectiveBreakdown(math.inf, f, j1, j2), g2
        grad += lam * g2
    return ObjectiveBreakdown(float(f + mu * j1 + lam * j2), float(f), j1, j2), grad


def dct_basis(K: int) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis as rows, ordered by total frequency ``u + v``."""
    C = dct(np.eye(K), norm="ortho", axis=0)  # row u is the u-th 1-D basis vector
    order = sorted(((u, v) for u in range(K) for v in range(K)), key=lambda p: (p[0] + p[1], p[0]))
    return np.stack([np.outer(C[u], C[v]).ravel() for u, v in order])


def _is_feasible(W, fft_size: int, need_j2: bool) -> bool:
    if np.any(np.sum(W * W, axis=1) <= 0):
        return False
    lam = gram_eigenvalues(FilterBankTransform(W, fft_size), fft_size)
    if lam.min() <= PR_RTOL * lam.max():
        return False
    return not need_j2 or math.isfinite(j2_value_grad(W, fft_size)[0])


def init_transform(
    K: int,
    num_channels: int,
    mode: str = "random_gaussian",
    seed: int = 0,
    fft_size: int = 0,
    check_coherence: bool = True,
    max_retries: int = 100,
) -> FilterBankTransform:
    """Feasible starting transform.

    ``'random_gaussian'`` draws i.i.d. ``N(0, 1/K**2)`` entries. ``'dct'`` takes
    the lowest-frequency rows of the 2-D DCT basis; channels beyond ``K*K``
    are Gaussian. Gaussian rows are redrawn until the bank is PR on the
    ``N_F`` grid and (if `check_coherence`) no two magnitude responses
    coincide.
    """
    if mode not in ("random_gaussian", "dct"):
        raise ValueError(f"unknown init mode {mode!r}")
    nf = fft_size or 4 * K
    rng = np.random.Generator(np.random.PCG64(seed))
    n_fixed = min(num_channels, K * K) if mode == "dct" else 0
    fixed = dct_basis(K)[:n_fixed]
    for _ in range(max_retries):
        W = np.vstack([fixed, rng.standard_normal((num_channels - n_fixed, K * K)) / K])
        if _is_feasible(W, nf, check_coherence and num_channels > 1):
            return FilterBankTransform(W, nf)
        if n_fixed == num_channels:
            # a pure DCT subset that is not PR: perturb it
            fixed = fixed + 1e-2 / K * rng.standard_normal(fixed.shape)
    raise InfeasibleTransformError(f"no feasible {mode} initialization after {max_retries} draws")


def scale_nu_for_size(nu: float, num_pixels: float, reference_pixels: float = REFERENCE_PIXELS) -> float:
    """Carry a threshold tuned for unit-norm images of `reference_pixels` to another size.

    Unit-norm images with ``n`` pixels have per-pixel magnitudes proportional
    to ``1/sqrt(n)``, so the equivalent threshold scales by
    ``sqrt(reference_pixels / num_pixels)``.
    """
    return nu * math.sqrt(reference_pixels / num_pixels)


class _DataTerm:
    """Per-iteration sparse coding and moment accumulation for a training set."""

    def __init__(self, training: TrainingSet, K: int):
        self.training = training
        self.K = K
        if training.images is not None:
            self.G = sum(image_gram(x, K) for x in training.images)
        else:
            X = training.patches
            if X.shape[0] != K * K:
                raise ShapeError(f"patch rows {X.shape[0]} != K*K = {K * K}")
            self.G = X @ X.T

    def code(self, H: FilterBankTransform, nu: float) -> tuple[Moments, int]:
        K = self.K
        if self.training.images is not None:
            Y = np.zeros((K * K, H.num_channels))
            zsq, nnz = 0.0, 0
            for x in self.training.images:
                Z = sparse_code(H, x, nu)
                Y += image_cross(x, Z, K)
                zsq += float(np.sum(Z * Z))
                nnz += int(np.count_nonzero(Z))
        else:
            X = self.training.patches
            Z = hard_threshold(H.W @ X, nu)
            Y = X @ Z.T
            zsq = float(np.sum(Z * Z))
            nnz = int(np.count_nonzero(Z))
        return Moments(self.G, Y, zsq), nnz


def learn(
    training: TrainingSet,
    config: LearnConfig,
    initial: FilterBankTransform | None = None,
    callback: Callable[[ObjectiveBreakdown, FilterBankTransform], None] | None = None,
) -> tuple[FilterBankTransform, list[ObjectiveBreakdown]]:
    """Alternate exact sparse coding with L-BFGS transform updates.

    Returns the learned bank and the objective trace: one entry for the
    initial transform and one per outer iteration, each evaluated at the
    current transform and its sparse codes.
    """
    K, nf = config.filter_size, config.n_fft
    if initial is None:
        H = init_transform(K, config.num_channels, config.init, config.seed, nf,
                           check_coherence=config.lam > 0)
    else:
        H = initial
        if H.filter_size != K or H.num_channels != config.num_channels:
            raise ShapeError("initial transform does not match the configuration")
        if H.fft_size != nf:
            H = FilterBankTransform(H.W, nf)
    data = _DataTerm(training, K)
    sparsity_weight = 0.5 * config.nu**2
    start = time.perf_counter()

    def record(it, moments, nnz):
        b, _ = objective_and_grad(H.W, moments, config.mu, config.lam, nf)
        sp = sparsity_weight * nnz
        return replace(b, total=float(b.total + sp), sparsity=sp, iteration=it,
                       wall_seconds=time.perf_counter() - start)

    moments, nnz = data.code(H, config.nu)
    entry = record(0, moments, nnz)
    if not math.isfinite(entry.total):
        raise InfeasibleTransformError("initial transform is infeasible for the objective")
    trace = [entry]
    if callback:
        callback(entry, H)

    for it in range(1, config.outer_iterations + 1):
        def fun(W, moments=moments):
            b, g = objective_and_grad(W, moments, config.mu, config.lam, nf)
            return b.total, g

        res = lbfgs_minimize(fun, H.W, config.lbfgs)
        if res.line_search_failed:
            log.warning("outer iteration %d: transform update stopped on line-search failure", it)
        H = FilterBankTransform(res.x, nf)
        moments, nnz = data.code(H, config.nu)
        entry = record(it, moments, nnz)
        trace.append(entry)
        log.info("iter %d total %.6g f %.4g j1 %.6g j2 %.4g sparsity %.4g", it, entry.total,
                 entry.f, entry.j1, entry.j2, entry.sparsity)
        if callback:
            callback(entry, H)
    return H, trace
