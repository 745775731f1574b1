"""Command-line interface.

Usage:
    python -m rimml.cli [--config PATH] [--seed N] [--out DIR] <verb> [options]

Verbs: make-manifest, prepare, train, enhance, evaluate, beta-sweep, phase-study, print-config.
Exit status: 0 on success, 1 on a usage or configuration error, 2 on any runtime failure
(missing files, numerical divergence, ...).
"""
import argparse
import os
import sys
from typing import List, Optional

from rimml.config import ConfigError, load_config, render_config
from rimml.dataset_utils import NOISE_KINDS
from rimml.pipeline import (
    check_beta_grid,
    cmd_beta_sweep,
    cmd_enhance,
    cmd_evaluate,
    cmd_make_manifest,
    cmd_phase_study,
    cmd_prepare,
    cmd_train,
)
from rimml.phase_analysis import DEFAULT_THRESHOLD

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument('--config', default=default, help="INI experiment config (default: $RIMML_CONFIG)")
    p.add_argument('--seed', type=int, default=default, help="master seed (overrides config and $RIMML_SEED)")
    p.add_argument('--out', default=default, help="output directory (overrides config and $RIMML_OUT)")
    p.add_argument('-q', '--quiet', action='store_true',
                   default=argparse.SUPPRESS if suppress else False, help="no progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='rimml', description="RI-spectrogram speech enhancement experiments")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest='verb', metavar='verb', parser_class=_Parser)
    sub.required = True

    def verb(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_globals(p, suppress=True)
        return p

    p = verb('make-manifest', "write a synthetic train/test manifest")
    p.add_argument('--path', help="manifest path (default: <out>/manifest.csv)")
    p.add_argument('--n-train', type=int, default=16)
    p.add_argument('--n-test', type=int, default=4)

    verb('prepare', "extract features and train-split normalization statistics")
    verb('train', "train the configured model on prepared features")

    p = verb('enhance', "enhance one noisy WAV")
    p.add_argument('input', help="noisy WAV")
    p.add_argument('output', help="enhanced WAV to write")
    p.add_argument('--checkpoint', help="checkpoint (default: <out>/model.riml)")

    p = verb('evaluate', "score the test split against the noisy baseline")
    p.add_argument('--checkpoint', help="checkpoint (default: <out>/model.riml)")

    p = verb('beta-sweep', "train and evaluate one model per beta (alpha = 1)")
    p.add_argument('--grid', type=float, nargs='+', help="strictly increasing beta values")

    p = verb('phase-study', "clean-magnitude/noisy-phase SSNR per input SNR")
    p.add_argument('--snr-levels', type=float, nargs='+', default=[-12.0, -6.0, 0.0, 6.0, 12.0])
    p.add_argument('--noise-kind', choices=NOISE_KINDS, default='white')
    p.add_argument('--noise-path', help="noise WAV for --noise-kind file")
    p.add_argument('--clean-dir', help="directory of clean WAVs (default: synthetic utterances)")
    p.add_argument('--threshold', type=float, default=DEFAULT_THRESHOLD,
                   help="phase-difference threshold in radians")

    verb('print-config', "print the merged configuration")
    return parser


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    verbose = not args.quiet
    if args.verb == 'print-config':
        print(render_config(cfg), end='')
    elif args.verb == 'make-manifest':
        if args.n_train < 1 or args.n_test < 1:
            raise ConfigError("--n-train and --n-test must be >= 1")
        cmd_make_manifest(cfg, args.path, args.n_train, args.n_test, verbose=verbose)
    elif args.verb == 'prepare':
        cmd_prepare(cfg, verbose=verbose)
    elif args.verb == 'train':
        cmd_train(cfg, verbose=verbose)
    elif args.verb == 'enhance':
        cmd_enhance(args.checkpoint or os.path.join(cfg.out_dir, 'model.riml'), args.input, args.output)
        if verbose:
            print(f"✅ Wrote {args.output}", flush=True)
    elif args.verb == 'evaluate':
        cmd_evaluate(cfg, args.checkpoint, verbose=verbose)
    elif args.verb == 'beta-sweep':
        try:
            grid = check_beta_grid(cfg.beta_grid if args.grid is None else args.grid)
        except ValueError as err:
            raise ConfigError(f"--grid: {err}") from err
        table = cmd_beta_sweep(cfg, grid, verbose=verbose)
        if verbose:
            print(table.to_string(index=False))
    elif args.verb == 'phase-study':
        table = cmd_phase_study(cfg, args.snr_levels, args.noise_kind, args.clean_dir,
                                args.noise_path, args.threshold, verbose=verbose)
        if verbose:
            print(table.to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        run(args)
    except ConfigError as err:
        print(f"rimml: configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 (mapped to an exit status)
        print(f"rimml: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
