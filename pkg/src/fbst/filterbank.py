"""Undecimated 2-D filter-bank transforms built from a patch transform ``W``.

Row ``i`` of ``W`` (``N_c x K*K``) is the ``i``-th filter, reshaped into a
``K x K`` impulse response by :func:`filter_from_row`. Applying the bank to an
image (:func:`analyze`) is cyclic convolution with every filter, which equals
``W @ build_patch_matrix(x, K, 1)`` reshaped channel by channel.

DFT convention
--------------
Gram eigenvalues are reported with the *unnormalized* DFT,
``lambda[k] = sum_i |DFT_N(h_i)[k]|**2``. These are the true eigenvalues of
the cyclic operator ``H* H`` on ``N x N`` images. The orthonormal 2-D DFT used
by the learning regularizers divides every value by ``N**2``; pass
``orthonormal=True`` to :func:`gram_eigenvalues` to get that scaling. Condition
numbers are identical in both conventions.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ChecksumError, ModelFormatError, ShapeError, SingularOperatorError
from .imaging import as_image, atomic_write

__all__ = [
    "FilterBankTransform",
    "SpectrumReport",
    "filter_from_row",
    "row_from_filter",
    "analyze",
    "adjoint",
    "gram_eigenvalues",
    "autocorrelation_spectrum",
    "linear_pr_threshold",
    "spectrum_report",
    "gram_solve",
    "pseudoinverse_apply",
    "magnitude_responses",
    "coherence_matrix",
    "save_model",
    "load_model",
    "read_metadata",
    "MODEL_MAGIC",
    "MODEL_VERSION",
]

MODEL_MAGIC = b"FBST"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_CRC = struct.Struct("<I")

# relative zero test for Gram eigenvalues
PR_RTOL = 1e-10


def _grid_shape(grid) -> tuple[int, int]:
    if np.isscalar(grid):
        return int(grid), int(grid)
    n1, n2 = grid
    return int(n1), int(n2)


@dataclass(frozen=True, eq=False)
class FilterBankTransform:
    """An undecimated cyclic filter bank parameterized by ``W``.

    Parameters
    ----------
    W : ndarray, shape (num_channels, K*K)
        One vectorized filter per row.
    fft_size : int, optional
        Size ``N_F`` of the DFT grid used by the learning regularizers.
        Defaults to ``4*K``.
    """

    W: np.ndarray
    fft_size: int = 0
    _spectra: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, copy=True)
        if W.ndim != 2 or W.shape[0] < 1:
            raise ShapeError(f"W must be a non-empty 2-D array, got shape {W.shape}")
        K = math.isqrt(W.shape[1])
        if K < 1 or K * K != W.shape[1]:
            raise ShapeError(f"row length {W.shape[1]} is not a perfect square")
        if not np.all(np.isfinite(W)):
            raise ValueError("W contains non-finite entries")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        nf = int(self.fft_size) if self.fft_size else 4 * K
        if nf < 2 * K - 1:
            raise ValueError(f"fft_size {nf} < 2K-1 = {2 * K - 1}")
        object.__setattr__(self, "fft_size", nf)

    @property
    def num_channels(self) -> int:
        return self.W.shape[0]

    @property
    def filter_size(self) -> int:
        return math.isqrt(self.W.shape[1])

    @property
    def filters(self) -> np.ndarray:
        """Impulse responses, shape ``(num_channels, K, K)``."""
        K = self.filter_size
        return np.stack([filter_from_row(w, K) for w in self.W])

    def _rspectrum(self, shape: tuple[int, int]) -> np.ndarray:
        # rfft2 of the zero-padded filters, cached per image shape
        spec = self._spectra.get(shape)
        if spec is None:
            spec = np.fft.rfft2(self.filters, s=shape)
            spec.setflags(write=False)
            self._spectra[shape] = spec
        return spec


@dataclass(frozen=True)
class SpectrumReport:
    """Frame bounds and PR verdicts of a bank on ``image_size x image_size`` images."""

    eigenvalue_grid: np.ndarray
    lambda_min: float
    lambda_max: float
    condition_number: float
    cyclic_pr: bool
    linear_pr_certified: bool
    linear_pr_threshold: float
    image_size: int
    filter_size: int

    def zero_frequencies(self) -> list[tuple[int, int]]:
        """DFT indices where the Gram spectrum vanishes (common zeros of the bank)."""
        eps = PR_RTOL * self.lambda_max
        return [tuple(int(v) for v in k) for k in np.argwhere(self.eigenvalue_grid <= eps)]


def filter_from_row(w, K: int) -> np.ndarray:
    """Impulse response of one channel from a row of ``W``.

    The row is laid out in raster order: ``h[m, n] = w[m*K + n]``. Together
    with the flipped patch vectorization of
    :func:`fbst.imaging.build_patch_matrix` this makes ``w @ patch`` equal to
    the convolution ``(h * x)`` at the patch anchor.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size != K * K:
        raise ShapeError(f"filter row must have length K*K = {K * K}, got shape {w.shape}")
    return w.reshape(K, K).copy()


def row_from_filter(h) -> np.ndarray:
    """Inverse of :func:`filter_from_row`."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ShapeError(f"impulse response must be square, got shape {h.shape}")
    return h.ravel().copy()


def _check_image_for(H: FilterBankTransform, x) -> np.ndarray:
    x = as_image(x)
    K = H.filter_size
    if x.shape[0] < K or x.shape[1] < K:
        raise ShapeError(f"image {x.shape} smaller than {K}x{K} filters")
    return x


def analyze(H: FilterBankTransform, x) -> np.ndarray:
    """Apply the analysis bank: channel ``i`` is the cyclic convolution ``h_i * x``.

    Returns
    -------
    ndarray, shape (num_channels, height, width)
    """
    x = _check_image_for(H, x)
    spec = H._rspectrum(x.shape)
    return np.fft.irfft2(spec * np.fft.rfft2(x), s=x.shape)


def adjoint(H: FilterBankTransform, y) -> np.ndarray:
    """Adjoint of :func:`analyze`: ``sum_i hbar_i * y_i`` with ``hbar_i`` the flipped filter."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[0] != H.num_channels:
        raise ShapeError(
            f"coefficient stack must have shape ({H.num_channels}, h, w), got {y.shape}"
        )
    shape = y.shape[1:]
    K = H.filter_size
    if shape[0] < K or shape[1] < K:
        raise ShapeError(f"channel images {shape} smaller than {K}x{K} filters")
    spec = H._rspectrum(shape)
    acc = np.sum(np.conj(spec) * np.fft.rfft2(y), axis=0)
    return np.fft.irfft2(acc, s=shape)


def gram_eigenvalues(H: FilterBankTransform, grid, orthonormal: bool = False) -> np.ndarray:
    """Eigenvalues of ``H* H`` on images of shape `grid`, indexed by DFT frequency.

    Entry ``(k1, k2)`` is ``sum_i |DFT(h_i)[k1, k2]|**2`` with the filters
    zero-padded to the grid. With ``orthonormal=True`` the values are divided by
    ``N1 * N2``.
    """
    shape = _grid_shape(grid)
    K = H.filter_size
    if shape[0] < K or shape[1] < K:
        raise ValueError(f"grid {shape} smaller than filter size {K}")
    spec = np.fft.fft2(H.filters, s=shape)
    lam = np.sum(spec.real**2 + spec.imag**2, axis=0)
    if orthonormal:
        lam /= shape[0] * shape[1]
    return lam


def autocorrelation(H: FilterBankTransform) -> np.ndarray:
    """Sum of channel autocorrelations, shape ``(2K-1, 2K-1)``, centred on lag 0."""
    K = H.filter_size
    acc = np.zeros((2 * K - 1, 2 * K - 1))
    for h in H.filters:
        acc += signal.correlate2d(h, h, mode="full")
    return acc


def autocorrelation_spectrum(H: FilterBankTransform, grid, orthonormal: bool = False) -> np.ndarray:
    """Gram eigenvalues computed from the summed autocorrelation of the filters.

    The autocorrelation is formed in the spatial domain and its DTFT is
    evaluated on the ``N x N`` DFT frequencies by explicit exponential sums.
    This is an independent route to :func:`gram_eigenvalues`.
    """
    shape = _grid_shape(grid)
    K = H.filter_size
    if min(shape) < 2 * K - 1:
        raise ValueError(f"grid {shape} cannot hold autocorrelation support {2 * K - 1}")
    acf = autocorrelation(H)
    lags = np.arange(-(K - 1), K)
    E1 = np.exp(-2j * np.pi * np.outer(np.arange(shape[0]), lags) / shape[0])
    E2 = np.exp(-2j * np.pi * np.outer(np.arange(shape[1]), lags) / shape[1])
    phi = (E1 @ acf @ E2.T).real
    if orthonormal:
        phi /= shape[0] * shape[1]
    return phi


def linear_pr_threshold(N: int, K: int) -> float:
    """Largest cyclic condition number that certifies linear-convolution PR."""
    if K <= 1:
        return math.inf
    return N / (K - 1) - 1.0


def spectrum_report(H: FilterBankTransform, image_size: int) -> SpectrumReport:
    """Frame bounds, condition number and PR verdicts on ``N x N`` images.

    The cyclic bank is PR when the smallest Gram eigenvalue exceeds
    ``1e-10 * lambda_max``. Linear-convolution PR is certified when, in
    addition, the condition number is at most ``N / (K - 1) - 1``; this needs
    ``N >= 2K - 1``.
    """
    N = int(image_size)
    K = H.filter_size
    if N < 2 * K - 1:
        raise ValueError(f"image size {N} < 2K-1 = {2 * K - 1}")
    grid = gram_eigenvalues(H, N)
    lmin = float(grid.min())
    lmax = float(grid.max())
    cyclic = lmax > 0 and lmin > PR_RTOL * lmax
    kappa = lmax / lmin if cyclic else math.inf
    threshold = linear_pr_threshold(N, K)
    return SpectrumReport(
        eigenvalue_grid=grid,
        lambda_min=lmin,
        lambda_max=lmax,
        condition_number=kappa,
        cyclic_pr=bool(cyclic),
        linear_pr_certified=bool(cyclic and kappa <= threshold),
        linear_pr_threshold=threshold,
        image_size=N,
        filter_size=K,
    )


def gram_solve(H: FilterBankTransform, b, lambda_r: float = 0.0) -> np.ndarray:
    """Solve ``(H* H + lambda_r I) x = b`` exactly in the DFT eigenbasis."""
    b = as_image(b, "right-hand side")
    if lambda_r < 0:
        raise ValueError("lambda_r must be non-negative")
    spec = H._rspectrum(b.shape)
    lam = np.sum(spec.real**2 + spec.imag**2, axis=0)
    denom = lam + lambda_r
    lmax = float(lam.max()) + lambda_r
    if lmax <= 0 or float(denom.min()) <= PR_RTOL * lmax:
        raise SingularOperatorError(
            f"Gram operator is singular on {b.shape} images "
            f"(min eigenvalue {float(lam.min()):.3e}, lambda_r {lambda_r:g})"
        )
    return np.fft.irfft2(np.fft.rfft2(b) / denom, s=b.shape)


def pseudoinverse_apply(H: FilterBankTransform, y, lambda_r: float = 0.0) -> np.ndarray:
    """Apply ``(H* H + lambda_r I)^-1 H*`` to a coefficient stack.

    With ``lambda_r = 0`` this is the minimum-norm synthesis bank, so
    ``pseudoinverse_apply(H, analyze(H, x)) == x`` for any PR bank.
    """
    return gram_solve(H, adjoint(H, y), lambda_r)


def magnitude_responses(W, fft_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal DFT of every filter and its squared magnitude.

    Returns
    -------
    A : ndarray, complex, shape (num_channels, N_F, N_F)
        ``fft2(h_i, (N_F, N_F)) / N_F``.
    V : ndarray, shape (num_channels, N_F, N_F)
        ``|A|**2``. Each channel sums to the squared filter norm.
    """
    W = np.asarray(W, dtype=np.float64)
    K = math.isqrt(W.shape[1])
    A = np.fft.fft2(W.reshape(-1, K, K), s=(fft_size, fft_size)) / fft_size
    return A, A.real**2 + A.imag**2


def coherence_matrix(vectors) -> np.ndarray:
    """Absolute normalized inner products between the rows of `vectors`."""
    v = np.asarray(vectors, dtype=np.float64)
    v = v.reshape(v.shape[0], -1)
    norms = np.linalg.norm(v, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = v / norms[:, None]
    return np.abs(u @ u.T)


def save_model(H: FilterBankTransform, path, metadata: dict | None = None) -> None:
    """Write a bank to the binary model format, plus an optional ``.meta`` sidecar.

    Layout (little-endian): ``b"FBST"``, then u32 format version, u32 ``K``,
    u32 ``N_c``, u32 ``N_F``, then ``N_c*K*K`` float64 entries of ``W`` in
    row-major order, then the u32 CRC32 of every preceding byte.
    """
    body = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, H.filter_size, H.num_channels, H.fft_size)
    body += np.ascontiguousarray(H.W, dtype="<f8").tobytes()
    atomic_write(path, body + _CRC.pack(zlib.crc32(body)))
    if metadata is not None:
        lines = "".join(f"{k}={metadata[k]}\n" for k in sorted(metadata))
        atomic_write(_meta_path(path), lines.encode("utf-8"))


def load_model(path) -> FilterBankTransform:
    """Read a bank written by :func:`save_model`, verifying size and checksum."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _CRC.size:
        raise ModelFormatError("model file too short")
    magic, version, K, nc, nf = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    n = nc * K * K
    expected = _HEADER.size + 8 * n + _CRC.size
    if len(data) != expected:
        raise ModelFormatError(f"model file is {len(data)} bytes, header implies {expected}")
    body = data[: -_CRC.size]
    (crc,) = _CRC.unpack(data[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise ChecksumError("model checksum mismatch")
    W = np.frombuffer(body, dtype="<f8", offset=_HEADER.size, count=n).reshape(nc, K * K)
    try:
        return FilterBankTransform(W.astype(np.float64), fft_size=nf)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def read_metadata(path) -> dict[str, str]:
    """Key/value pairs from the sidecar of a model file (empty if absent)."""
    meta = _meta_path(path)
    if not meta.exists():
        return {}
    out = {}
    for line in meta.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
