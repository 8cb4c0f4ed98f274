"""Denoising with a trained filter bank.

Two estimators are provided. :func:`denoise_threshold` passes the noisy image
through analysis, hard thresholding and the minimum-norm synthesis bank.
:func:`denoise_iterative` minimizes::

    lambda_r/2 ||y - x||^2 + 1/2 ||H x - z||^2 + (nu**2/2) ||z||_0

by alternating exact ``z`` and ``x`` updates; the ``x`` update is a diagonal
solve in the DFT basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filterbank import FilterBankTransform, adjoint, analyze, gram_solve, pseudoinverse_apply
from .imaging import as_image
from .learning import hard_threshold

__all__ = [
    "DenoiseConfig",
    "default_iterations",
    "linear_nu",
    "default_nu",
    "default_lambda_r",
    "denoise_threshold",
    "denoise_iterative",
    "denoising_objective",
    "objective_trace",
]

# thresholds in units of the per-channel noise standard deviation
THRESHOLD_NU_FACTOR = 3.0
ITERATIVE_NU_FACTOR = 2.5  # divided by sqrt(iterations)


def default_iterations(sigma: float) -> int:
    """``ceil(sigma * 255 / 10)`` iterations, at least one."""
    # round first so 20/255*255 does not ceil to 21
    return max(1, math.ceil(round(sigma * 255.0 / 10.0, 9)))


def linear_nu(sigma: float) -> float:
    """Threshold linear in the noise level: ``1e-4 * 0.1 * (255 * sigma)`` for `sigma` in peak-1 units."""
    return 1e-4 * 0.1 * (sigma * 255.0)


def default_nu(H: FilterBankTransform, sigma: float, mode: str = "threshold",
               iterations: int = 1) -> float:
    """Threshold proportional to the noise level seen by an average channel.

    White noise of standard deviation `sigma` has standard deviation
    ``sigma * ||h_i||`` in channel ``i``. The threshold is a multiple of that
    value for the root-mean-square filter norm: 3 in threshold mode, and
    ``2.5 / sqrt(iterations)`` in iterative mode, where repeated thresholding
    compounds.
    """
    rms_norm = math.sqrt(float(np.mean(np.sum(H.W**2, axis=1))))
    if mode == "threshold":
        factor = THRESHOLD_NU_FACTOR
    else:
        factor = ITERATIVE_NU_FACTOR / math.sqrt(iterations)
    return factor * sigma * rms_norm


def default_lambda_r(sigma: float) -> float:
    """``0.1 / sigma**2`` (peak-1 units)."""
    if sigma <= 0:
        raise ValueError("lambda_r default needs sigma > 0")
    return 0.1 / sigma**2


@dataclass(frozen=True)
class DenoiseConfig:
    mode: str = "iterative"
    nu: float = 0.0
    lambda_r: float = 1.0
    iterations: int = 1
    sigma_hint: float = 0.0

    def __post_init__(self):
        if self.mode not in ("iterative", "threshold"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.nu < 0 or self.sigma_hint < 0:
            raise ValueError("nu and sigma_hint must be non-negative")
        if self.mode == "iterative" and (self.lambda_r <= 0 or self.iterations < 1):
            raise ValueError("iterative mode needs lambda_r > 0 and iterations >= 1")

    @classmethod
    def for_sigma(cls, H: FilterBankTransform, sigma: float, mode: str = "iterative",
                  nu: float | None = None, lambda_r: float | None = None,
                  iterations: int | None = None) -> "DenoiseConfig":
        """Fill unspecified parameters from the noise level (peak-1 units)."""
        if iterations is None:
            iterations = default_iterations(sigma)
        return cls(
            mode=mode,
            nu=default_nu(H, sigma, mode, iterations) if nu is None else nu,
            lambda_r=default_lambda_r(sigma) if lambda_r is None else lambda_r,
            iterations=iterations,
            sigma_hint=sigma,
        )


def denoise_threshold(H: FilterBankTransform, y, nu: float) -> np.ndarray:
    """Analysis, hard thresholding at `nu`, then the pseudoinverse synthesis bank."""
    y = as_image(y)
    return pseudoinverse_apply(H, hard_threshold(analyze(H, y), nu), 0.0)


def denoise_iterative(H: FilterBankTransform, y, config: DenoiseConfig,
                      return_iterates: bool = False):
    """Alternating minimization of the regularized denoising objective from ``x = y``.

    Returns the final estimate, or with ``return_iterates=True`` a pair
    ``(x, iterates)`` where ``iterates[k] = (x_k, z_k)`` after iteration
    ``k + 1``.
    """
    y = as_image(y)
    lr = config.lambda_r
    if lr <= 0:
        raise ValueError("lambda_r must be positive")
    x = y
    iterates = []
    for _ in range(config.iterations):
        z = hard_threshold(analyze(H, x), config.nu)
        x = gram_solve(H, adjoint(H, z) + lr * y, lr)
        if return_iterates:
            iterates.append((x, z))
    return (x, iterates) if return_iterates else x


def denoising_objective(H: FilterBankTransform, y, x, z, lambda_r: float, nu: float) -> float:
    """``lambda_r/2 ||y - x||^2 + 1/2 ||H x - z||^2 + (nu**2/2) ||z||_0``."""
    r = analyze(H, x) - z
    return float(0.5 * lambda_r * np.sum((y - x) ** 2) + 0.5 * np.sum(r * r)
                 + 0.5 * nu**2 * np.count_nonzero(z))


def objective_trace(H: FilterBankTransform, y, config: DenoiseConfig, iterates) -> list[float]:
    """Denoising objective at each ``(x_k, z_k)`` produced by :func:`denoise_iterative`."""
    y = as_image(y)
    return [denoising_objective(H, y, x, z, config.lambda_r, config.nu) for x, z in iterates]
