"""Learned undecimated filter-bank sparsifying transforms for 2-D images.

Submodules
----------
imaging
    PGM I/O, normalization, noise, PSNR and periodic patch matrices.
filterbank
    Cyclic analysis/adjoint operators, Gram spectra, PR certification,
    pseudoinverse synthesis and the model file format.
learning
    Alternating sparse coding and L-BFGS transform updates.
denoising
    Thresholding and iterative denoisers.
cli
    The ``fbst`` command.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ChecksumError,
    DataError,
    FBSTError,
    InfeasibleTransformError,
    NumericalError,
    SingularOperatorError,
)
from .filterbank import (  # noqa: E402
    FilterBankTransform,
    SpectrumReport,
    adjoint,
    analyze,
    autocorrelation_spectrum,
    gram_eigenvalues,
    load_model,
    pseudoinverse_apply,
    save_model,
    spectrum_report,
)
from .imaging import (  # noqa: E402
    add_gaussian_noise,
    build_patch_matrix,
    load_pgm,
    normalize_unit_norm,
    psnr,
    save_pgm,
)
from .learning import LearnConfig, TrainingSet, hard_threshold, init_transform, learn  # noqa: E402
from .denoising import DenoiseConfig, denoise_iterative, denoise_threshold  # noqa: E402
