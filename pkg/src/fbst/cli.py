"""Command-line frontend.

Commands
--------
learn     train a filter bank from PGM images
denoise   denoise a PGM image with a trained bank
analyze   frame bounds, PR verdicts and filter statistics of a bank
psnr      PSNR between two PGM images
montage   render a bank's filters as a PGM grid
addnoise  add seeded Gaussian noise to a PGM image

Noise levels on the command line (``--sigma``) are on the 0-255 scale;
images are read into ``[0, 1]``.

Any long option can also come from a ``--config`` file of ``key = value``
lines (``#`` starts a comment; keys use the option name with or without
leading dashes). Command-line flags override the file, which overrides the
built-in defaults.

Exit status: 0 success, 1 usage error, 2 data error (unreadable or malformed
input), 3 numerical infeasibility (singular or infeasible transform).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoising import DenoiseConfig, denoise_iterative, denoise_threshold, linear_nu
from .errors import DataError, FBSTError, NumericalError, SingularOperatorError
from .filterbank import (
    FilterBankTransform,
    coherence_matrix,
    load_model,
    magnitude_responses,
    save_model,
    spectrum_report,
)
from .imaging import add_gaussian_noise, atomic_write, load_pgm, normalize_unit_norm, psnr, save_pgm, write_csv
from .learning import REFERENCE_PIXELS, LearnConfig, TrainingSet, learn, scale_nu_for_size
from .lbfgs import LBFGSParams

log = logging.getLogger("fbst")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

TRACE_HEADER = ("iteration", "total", "f", "j1", "j2", "sparsity", "wall_seconds")
PSNR_HEADER = ("reference", "test", "psnr_db")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # unset options explain their fallback in the help text itself
    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def filter_montage(H: FilterBankTransform) -> np.ndarray:
    """Tile the filters on a grid of ``ceil(sqrt(N_c))`` columns.

    Each filter is min-max normalized to ``[0, 1]`` (a constant filter becomes
    0.5). Tiles are separated by 1-pixel white lines, with a border of the
    same width.
    """
    K, nc = H.filter_size, H.num_channels
    cols = math.ceil(math.sqrt(nc))
    rows = math.ceil(nc / cols)
    out = np.ones((rows * (K + 1) + 1, cols * (K + 1) + 1))
    for i, h in enumerate(H.filters):
        lo, hi = h.min(), h.max()
        tile = np.full_like(h, 0.5) if hi == lo else (h - lo) / (hi - lo)
        r, c = divmod(i, cols)
        out[1 + r * (K + 1): 1 + r * (K + 1) + K, 1 + c * (K + 1): 1 + c * (K + 1) + K] = tile
    return out


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6g}"


def analysis_lines(H: FilterBankTransform, size: int) -> list[str]:
    """Human-readable spectral report of `H` on ``size x size`` images."""
    rep = spectrum_report(H, size)
    K, nc = H.filter_size, H.num_channels
    norms = np.linalg.norm(H.W, axis=1)
    lines = [
        f"filters: {nc} x {K}x{K}, N_F = {H.fft_size}",
        f"image size: {size}",
        f"lambda_min: {_fmt(rep.lambda_min)}",
        f"lambda_max: {_fmt(rep.lambda_max)}",
        f"condition number: {_fmt(rep.condition_number)}",
        f"cyclic PR: {'yes' if rep.cyclic_pr else 'no'}",
    ]
    zeros = rep.zero_frequencies()
    if zeros:
        shown = ", ".join(f"({a},{b})" for a, b in zeros[:16])
        more = f" ... ({len(zeros)} total)" if len(zeros) > 16 else ""
        lines.append(f"common zeros at DFT frequencies: {shown}{more}")
    thr = "inf" if math.isinf(rep.linear_pr_threshold) else f"{rep.linear_pr_threshold:.3f}"
    verdict = "certified" if rep.linear_pr_certified else "not certified"
    lines.append(f"linear PR: {verdict} (kappa {_fmt(rep.condition_number)} <= N/(K-1) - 1 = {thr})")
    lines.append(f"filter norms: min {norms.min():.6g} max {norms.max():.6g} mean {norms.mean():.6g}")
    if nc > 1:
        iu = np.triu_indices(nc, 1)
        with np.errstate(invalid="ignore"):
            c_filt = coherence_matrix(H.W)[iu]
            _, V = magnitude_responses(H.W, H.fft_size)
            c_mag = coherence_matrix(V)[iu]
        lines.append(f"max coherence (filters): {np.nanmax(c_filt):.6g}")
        lines.append(f"max coherence (magnitude responses): {np.nanmax(c_mag):.6g}")
    return lines


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key=value file supplying option defaults")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="fbst", description="Filter-bank sparsifying transforms.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("learn", help="train a filter bank", formatter_class=fmt)
    p.add_argument("images", nargs="+", help="training images (PGM)")
    p.add_argument("-o", "--output", required=True, help="model file to write")
    p.add_argument("--trace", help="objective trace CSV (default: OUTPUT.trace.csv)")
    p.add_argument("--montage", help="filter montage PGM (default: OUTPUT.montage.pgm)")
    p.add_argument("--channels", type=int, default=64, help="number of filters N_c")
    p.add_argument("--filter-size", type=int, default=8, help="filter side K")
    p.add_argument("--mu", type=float, default=3.0, help="frame regularizer weight")
    p.add_argument("--lam", type=float, default=7e-4, help="coherence barrier weight")
    p.add_argument("--nu", type=float, default=5.5e-3, help="sparse coding threshold at the reference size")
    p.add_argument("--nu-reference-pixels", type=int, default=REFERENCE_PIXELS,
                   help="image size (pixels) --nu is tuned for; the threshold is scaled by "
                        "sqrt(reference / mean training pixels). 0 uses --nu as given")
    p.add_argument("--iters", type=int, default=1000, help="outer iterations")
    p.add_argument("--fft-size", type=int, default=0, help="regularizer DFT grid N_F (0: 4K)")
    p.add_argument("--init", choices=("random_gaussian", "dct"), default="random_gaussian",
                   help="initial transform")
    p.add_argument("--seed", type=int, default=0, help="initialization seed")
    p.add_argument("--lbfgs-iters", type=int, default=20, help="L-BFGS steps per outer iteration")
    p.add_argument("--lbfgs-memory", type=int, default=10, help="L-BFGS curvature pairs")
    _add_common(p)

    p = sub.add_parser("denoise", help="denoise an image", formatter_class=fmt)
    p.add_argument("input", help="noisy image (PGM)")
    p.add_argument("-m", "--model", required=True, help="model file")
    p.add_argument("-o", "--output", required=True, help="denoised image to write (PGM)")
    p.add_argument("--sigma", type=float, required=True, help="noise standard deviation, 0-255 scale")
    p.add_argument("--mode", choices=("iterative", "threshold"), default="iterative",
                   help="alternating minimization or one-pass thresholding")
    p.add_argument("--nu", type=float, default=None,
                   help="threshold (default: from --nu-schedule)")
    p.add_argument("--nu-schedule", choices=("noise", "linear"), default="noise",
                   help="'noise': sigma times the RMS filter norm, times 3 (threshold mode) "
                        "or 2.5/sqrt(iters) (iterative mode); 'linear': 1e-4 * 0.1 * sigma")
    p.add_argument("--lambda-r", type=float, default=None, help="data fidelity weight (default: 0.1/sigma^2)")
    p.add_argument("--iters", type=int, default=None, help="iterations (default: ceil(sigma/10))")
    p.add_argument("--clean", help="ground truth image; prints input and output PSNR")
    _add_common(p)

    p = sub.add_parser("analyze", help="spectral report of a bank", formatter_class=fmt)
    p.add_argument("model", help="model file")
    p.add_argument("--size", type=int, default=256, help="image side N for the PR verdicts")
    p.add_argument("--report", help="also write the report to this text file")
    _add_common(p)

    p = sub.add_parser("psnr", help="PSNR between two images", formatter_class=fmt)
    p.add_argument("reference", help="reference image (PGM)")
    p.add_argument("test", help="test image (PGM)")
    p.add_argument("--csv", help="append a row to this CSV (header written once)")
    _add_common(p)

    p = sub.add_parser("montage", help="render filters as an image", formatter_class=fmt)
    p.add_argument("model", help="model file")
    p.add_argument("-o", "--output", required=True, help="montage to write (PGM)")
    _add_common(p)

    p = sub.add_parser("addnoise", help="add Gaussian noise", formatter_class=fmt)
    p.add_argument("input", help="clean image (PGM)")
    p.add_argument("-o", "--output", required=True, help="noisy image to write (PGM)")
    p.add_argument("--sigma", type=float, required=True, help="noise standard deviation, 0-255 scale")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    _add_common(p)
    return parser


def read_config(path) -> dict[str, str]:
    """Parse a ``key = value`` file into option names (dashes stripped)."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("_", "-")] = v.strip()
    return out


def _apply_config(parser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.option_strings[-1][2:]: a for a in sub._actions
                   if a.option_strings and a.option_strings[-1].startswith("--")}
        defaults = {}
        for key, raw in read_config(known.config).items():
            action = actions.get(key)
            if action is None or key in ("config", "help", "verbose"):
                raise UsageError(f"unknown option {key!r} in config {known.config}")
            try:
                value = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r} in config: {raw!r}") from exc
            if action.choices and value not in action.choices:
                raise UsageError(f"{key!r} must be one of {sorted(action.choices)}")
            defaults[action.dest] = value
            # a required option supplied by the file is no longer required on the command line
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def cmd_learn(args) -> int:
    if args.channels < 1 or args.filter_size < 1 or args.iters < 0:
        raise UsageError("--channels and --filter-size must be positive, --iters non-negative")
    images = [normalize_unit_norm(load_pgm(p))[0] for p in args.images]
    nu = args.nu
    if args.nu_reference_pixels:
        nu = scale_nu_for_size(nu, float(np.mean([x.size for x in images])), args.nu_reference_pixels)
    log.info("sparse coding threshold %.6g", nu)
    try:
        config = LearnConfig(
            num_channels=args.channels, filter_size=args.filter_size, mu=args.mu, lam=args.lam,
            nu=nu, outer_iterations=args.iters, fft_size=args.fft_size, init=args.init,
            seed=args.seed,
            lbfgs=LBFGSParams(memory=args.lbfgs_memory, max_iterations=args.lbfgs_iters),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    H, trace = learn(TrainingSet(images=images), config)
    out = Path(args.output)
    meta = {
        "channels": config.num_channels, "filter_size": config.filter_size, "mu": config.mu,
        "lam": config.lam, "nu": repr(config.nu), "iters": config.outer_iterations,
        "fft_size": config.n_fft, "init": config.init, "seed": config.seed,
        "lbfgs_iters": config.lbfgs.max_iterations, "lbfgs_memory": config.lbfgs.memory,
        "training_images": ",".join(Path(p).name for p in args.images),
    }
    save_model(H, out, meta)
    write_csv(args.trace or f"{out}.trace.csv", TRACE_HEADER,
              [(e.iteration, e.total, e.f, e.j1, e.j2, e.sparsity, e.wall_seconds) for e in trace])
    save_pgm(filter_montage(H), args.montage or f"{out}.montage.pgm")
    print(f"final objective {trace[-1].total:.6g} after {config.outer_iterations} iterations")
    return EXIT_OK


def cmd_denoise(args) -> int:
    if args.sigma <= 0:
        raise UsageError("--sigma must be positive")
    H = load_model(args.model)
    y = load_pgm(args.input)
    sigma = args.sigma / 255.0
    nu = args.nu
    if nu is None and args.nu_schedule == "linear":
        nu = linear_nu(sigma)
    try:
        config = DenoiseConfig.for_sigma(H, sigma, args.mode, nu=nu, lambda_r=args.lambda_r,
                                         iterations=args.iters)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if config.mode == "iterative":
        print(f"iterative: nu {config.nu:.6g}, lambda_r {config.lambda_r:.6g}, "
              f"iterations {config.iterations}")
    else:
        print(f"threshold: nu {config.nu:.6g}")
    try:
        if config.mode == "threshold":
            x = denoise_threshold(H, y, config.nu)
        else:
            x = denoise_iterative(H, y, config)
    except SingularOperatorError as exc:
        raise SingularOperatorError(
            f"{exc}; the bank is not PR at this size, run 'fbst analyze {args.model} "
            f"--size {max(y.shape)}' for its spectrum"
        ) from exc
    save_pgm(x, args.output)
    if args.clean:
        ref = load_pgm(args.clean)
        print(f"input PSNR {psnr(y, ref):.2f} dB")
        print(f"output PSNR {psnr(np.clip(x, 0, 1), ref):.2f} dB")
    return EXIT_OK


def cmd_analyze(args) -> int:
    H = load_model(args.model)
    if args.size < 2 * H.filter_size - 1:
        raise UsageError(f"--size must be at least 2K-1 = {2 * H.filter_size - 1}")
    lines = analysis_lines(H, args.size)
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.report:
        atomic_write(args.report, text.encode("utf-8"))
    return EXIT_OK


def cmd_psnr(args) -> int:
    value = psnr(load_pgm(args.test), load_pgm(args.reference))
    shown = "inf" if math.isinf(value) else f"{value:.2f}"
    print(shown)
    if args.csv:
        write_csv(args.csv, PSNR_HEADER, [(args.reference, args.test, shown)], append=True)
    return EXIT_OK


def cmd_montage(args) -> int:
    save_pgm(filter_montage(load_model(args.model)), args.output)
    return EXIT_OK


def cmd_addnoise(args) -> int:
    if args.sigma < 0:
        raise UsageError("--sigma must be non-negative")
    save_pgm(add_gaussian_noise(load_pgm(args.input), args.sigma / 255.0, args.seed), args.output)
    return EXIT_OK


COMMANDS = {
    "learn": cmd_learn,
    "denoise": cmd_denoise,
    "analyze": cmd_analyze,
    "psnr": cmd_psnr,
    "montage": cmd_montage,
    "addnoise": cmd_addnoise,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"fbst: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fbst: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"fbst: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"fbst: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FBSTError as exc:
        print(f"fbst: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
