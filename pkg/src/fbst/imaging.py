"""Grayscale images: PGM I/O, normalization, synthetic noise, PSNR and patch matrices.

Images are plain 2-D ``float64`` numpy arrays. Boundaries are periodic
everywhere in this package, so an ``H x W`` image is treated as one period of
an infinite doubly periodic signal.

Noise generation uses numpy's ``PCG64`` bit generator seeded with the caller's
integer seed, and the ziggurat sampler behind ``Generator.standard_normal``.
Both algorithms are fixed by numpy's stream compatibility policy, so a given
seed reproduces the same noise on any platform with the same numpy major
version.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    MalformedHeaderError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedFormatError,
)

__all__ = [
    "as_image",
    "load_pgm",
    "save_pgm",
    "normalize_unit_norm",
    "add_gaussian_noise",
    "psnr",
    "build_patch_matrix",
    "patch_positions",
    "atomic_write",
    "write_csv",
]

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")

_UMASK = os.umask(0)
os.umask(_UMASK)


def as_image(x, name: str = "image") -> np.ndarray:
    """Return `x` as a finite 2-D float64 array, raising on anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite samples")
    return arr


def atomic_write(path, data: bytes) -> None:
    """Write `data` to `path` through a temporary file and an atomic rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        os.chmod(tmp, 0o666 & ~_UMASK)
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_pgm(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise MalformedHeaderError("file too short for a PGM header")
    if data[:2] != b"P5":
        raise UnsupportedFormatError(f"unsupported magic {data[:2]!r}; only binary P5 is read")
    pos = 2
    fields = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeaderError("header ended before width, height and maxval")
        token = m.group(1)
        if not token.isdigit():
            raise MalformedHeaderError(f"non-numeric header field {token!r}")
        fields.append(int(token))
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise MalformedHeaderError(f"maxval {maxval} outside 1..65535")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    bps = 1 if maxval < 256 else 2
    need = width * height * bps
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"expected {need} payload bytes for {width}x{height}, found {len(payload)}"
        )
    dtype = np.uint8 if bps == 1 else np.dtype(">u2")
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return samples.astype(np.float64) / maxval


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file and scale samples to ``[0, 1]`` by ``maxval``."""
    with open(path, "rb") as f:
        data = f.read()
    return _parse_pgm(data)


def save_pgm(image, path) -> None:
    """Write `image` as an 8-bit P5 PGM, clamping samples to ``[0, 1]`` first."""
    x = as_image(image)
    q = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = b"P5\n%d %d\n255\n" % (x.shape[1], x.shape[0])
    atomic_write(path, header + q.tobytes())


def normalize_unit_norm(image) -> tuple[np.ndarray, float]:
    """Scale `image` to unit Euclidean norm.

    Returns
    -------
    normalized : ndarray
        ``image / scale``.
    scale : float
        The original norm; ``normalized * scale`` restores the input.
    """
    x = as_image(image)
    scale = float(np.linalg.norm(x))
    if scale == 0.0:
        raise DegenerateInputError("cannot normalize an all-zero image")
    return x / scale, scale


def add_gaussian_noise(image, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma**2)`` noise drawn from a PCG64 stream seeded by `seed`."""
    x = as_image(image)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return x.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    return x + sigma * rng.standard_normal(x.shape)


def psnr(x, x_star, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, ``20 log10(peak sqrt(n) / ||x - x_star||)``.

    Returns ``inf`` when the images are identical.
    """
    a = as_image(x, "x")
    b = as_image(x_star, "x_star")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = float(np.linalg.norm(a - b))
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(peak * math.sqrt(a.size) / err)


def patch_positions(length: int, s: int) -> np.ndarray:
    """Anchor coordinates of stride-`s` patches along an axis of `length` samples."""
    return np.arange(0, length, s)


def build_patch_matrix(image, K: int, s: int = 1, anchor: str = "lower_right") -> np.ndarray:
    """Periodic-boundary patch matrix with flipped patch vectorization.

    Column ``j`` holds the ``j``-th patch in raster order over anchor positions
    ``(s*a, s*b)``. Each ``K x K`` patch is vectorized in raster order and then
    reversed, so its top-left pixel is the last entry.

    Parameters
    ----------
    image : array_like
        2-D image.
    K : int
        Patch side length.
    s : int
        Stride between patch anchors. Anchors run over ``0, s, 2s, ...`` below
        each image dimension, wrapping periodically, so strides that do not
        divide a dimension still cover every pixel.
    anchor : {'lower_right', 'top_left'}
        Which patch pixel sits on the anchor. ``'lower_right'`` puts the
        bottom-right pixel of the first patch on ``x[0, 0]``; with ``s = 1``
        row ``i`` of ``W @ X`` is then exactly the cyclic convolution of the
        image with filter ``i`` (see :func:`fbst.filterbank.analyze`).
        ``'top_left'`` starts the first patch at ``x[0, 0]``.

    Returns
    -------
    ndarray, shape (K*K, M)
    """
    x = as_image(image)
    if K < 1 or s < 1:
        raise ValueError("patch size and stride must be positive")
    H, W = x.shape
    if anchor == "lower_right":
        offsets = np.arange(K) - (K - 1)
    elif anchor == "top_left":
        offsets = np.arange(K)
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    rows = (patch_positions(H, s)[:, None] + offsets[None, :]) % H
    cols = (patch_positions(W, s)[:, None] + offsets[None, :]) % W
    patches = x[rows[:, None, :, None], cols[None, :, None, :]]
    flat = patches.reshape(-1, K * K)[:, ::-1]
    return np.ascontiguousarray(flat.T)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], append: bool = False) -> None:
    """Write numeric rows as plain ASCII CSV.

    With ``append=True`` rows are appended and the header is written only if
    the file does not exist yet or is empty. Otherwise the file is replaced
    atomically.
    """
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    path = Path(path)
    need_header = not append or not path.exists() or path.stat().st_size == 0
    if need_header:
        writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    text = buf.getvalue().encode("ascii")
    if append:
        with open(path, "ab") as f:
            f.write(text)
    else:
        atomic_write(path, text)
