# command line entry: parser, config file defaults, exit codes, manifest

import argparse
import logging
import sys
from typing import List, Optional, Sequence, TextIO

from backend.errors import ConfigError, DataError, DenoiseError, UsageError
from backend.sim_search import PairingMethod
from frontend.handlers.command_handler import CommandHandler
from frontend.handlers.file_handler import FileHandler
from frontend.models.command import Command
from frontend.utils.limits import DenoiseLimits
from frontend.utils.validators import parse_bool, validate_command, validate_numeric_input

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting on bad input"""

    def error(self, message):
        raise UsageError(message)


def _metrics(text: str) -> List[str]:
    names = [m.strip().lower() for m in text.split(',') if m.strip()]
    for name in names:
        if name not in ('psnr', 'ssim'):
            raise argparse.ArgumentTypeError(f"unknown metric '{name}'")
    return names


def _pairing(text: str) -> PairingMethod:
    try:
        return PairingMethod.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help='key = value file with defaults')
    common.add_argument('--threads', type=int, default=DenoiseLimits.THREADS_DEFAULT,
                        help='worker threads')
    common.add_argument('--log-level', choices=LOG_LEVELS, default='INFO')
    common.add_argument('--log-file', metavar='PATH')
    return common


def _seed(p: argparse.ArgumentParser) -> None:
    p.add_argument('--seed', type=int, help='random seed (required)')


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--mode', default='noise2sim',
                   choices=('noise2clean', 'noise2noise', 'noise2sim', 'noise2sim-volume'))
    p.add_argument('--loss', default='mse', choices=('mse', 'l1'))
    p.add_argument('--k', type=int, help='similar pixels (2D) or slice range (volume)')
    p.add_argument('--s', type=int, help='patch size (2D) or mask patch (volume)')
    p.add_argument('--dth', dest='d_th', type=float, help='mask threshold (volume mode)')
    p.add_argument('--pairing', type=_pairing, default=PairingMethod(),
                   help="pairing method 1-4, e.g. 4 or 3:1,2")
    p.add_argument('--window', type=int, help='similar-pixel search window radius')
    p.add_argument('--batch', type=int, default=DenoiseLimits.BATCH_DEFAULT)
    p.add_argument('--crop', type=int, help='random crop size')
    p.add_argument('--steps', type=int, default=DenoiseLimits.STEPS_DEFAULT)
    p.add_argument('--lr', type=float, default=DenoiseLimits.LR_DEFAULT)
    p.add_argument('--augment', action=argparse.BooleanOptionalAction, default=True)
    p.add_argument('--mask', action=argparse.BooleanOptionalAction, default=True,
                   help='exclude dissimilar pixels (volume mode)')
    p.add_argument('--arch', default='unet', choices=('unet', 'conv'))
    p.add_argument('--width1', type=int, default=32)
    p.add_argument('--width2', type=int, default=64)
    p.add_argument('--relu', action=argparse.BooleanOptionalAction, default=True)
    p.add_argument('--residual', action=argparse.BooleanOptionalAction, default=True)
    p.add_argument('--value-scale', type=float, help='default 1000 for HU data, else 1')
    p.add_argument('--log-every', type=int, default=100)
    p.add_argument('--log-csv', metavar='PATH', help='training log (default <output>.csv)')
    p.add_argument('--plot', metavar='PATH', help='loss curve PNG')
    _seed(p)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='noise2sim',
                            description='similarity-based self-supervised denoising')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND',
                                parser_class=ArgumentParser)
    sub.required = True
    common = [_common()]

    p = sub.add_parser('simulate', parents=common, help='add synthetic noise')
    p.add_argument('--kind', default='gaussian', choices=('gaussian', 'poisson'))
    p.add_argument('--std', type=float)
    p.add_argument('--lambda', dest='lam', type=float,
                   help=f'photon scale (default {DenoiseLimits.LAMBDA_DEFAULT:g})')
    _seed(p)
    p.add_argument('input')
    p.add_argument('output')

    p = sub.add_parser('search', parents=common, help='k nearest similar pixels')
    p.add_argument('--k', type=int, default=DenoiseLimits.K_DEFAULT)
    p.add_argument('--s', type=int, default=DenoiseLimits.PATCH_DEFAULT)
    p.add_argument('--window', type=int)
    p.add_argument('input')
    p.add_argument('output')

    p = sub.add_parser('mask', parents=common, help='dissimilar mask of two slices')
    p.add_argument('--s', type=int, default=DenoiseLimits.MASK_PATCH_DEFAULT)
    p.add_argument('--dth', dest='d_th', type=float, default=DenoiseLimits.DTH_DEFAULT)
    p.add_argument('slice_i')
    p.add_argument('slice_j')
    p.add_argument('output')

    p = sub.add_parser('train', parents=common, help='train a denoiser')
    _train_flags(p)
    p.add_argument('data_dir')
    p.add_argument('output')

    p = sub.add_parser('refine', parents=common, help='iterative refinement')
    _train_flags(p)
    p.add_argument('--rounds', type=int, default=1)
    p.add_argument('model')
    p.add_argument('data_dir')
    p.add_argument('output')

    p = sub.add_parser('denoise', parents=common, help='apply a trained model')
    p.add_argument('--tile', type=int, help='tile size for large inputs')
    p.add_argument('--volume', action='store_true', help='treat a 3D input as slices')
    p.add_argument('model')
    p.add_argument('input')
    p.add_argument('output')

    p = sub.add_parser('eval', parents=common, help='PSNR / SSIM')
    p.add_argument('--metric', type=_metrics, default=['psnr', 'ssim'])
    p.add_argument('--peak', type=float, help='default 1, or 400 for HU')
    p.add_argument('--out', dest='output', metavar='PATH', help='CSV copy of the results')
    p.add_argument('a')
    p.add_argument('b')

    p = sub.add_parser('estimate-zcd', parents=common, help='mean similar-pair difference')
    p.add_argument('--m', type=int, default=100_000)
    _seed(p)
    p.add_argument('--out', dest='output', metavar='PATH', help='mean tensor')
    p.add_argument('data_dir')

    p = sub.add_parser('nlm', parents=common, help='non-local means baseline')
    p.add_argument('--h', type=float, required=True)
    p.add_argument('--patch', type=int, default=3)
    p.add_argument('--radius', type=int, default=7)
    p.add_argument('input')
    p.add_argument('output')

    p = sub.add_parser('texture', parents=common, help='procedural test image')
    p.add_argument('--kind', default='stripes',
                   choices=('stripes', 'checker', 'blobs', 'rings'))
    p.add_argument('--size', type=int, default=DenoiseLimits.SIZE_DEFAULT)
    _seed(p)
    p.add_argument('output')

    p = sub.add_parser('phantom', parents=common, help='synthetic HU volume')
    p.add_argument('--slices', type=int, default=32)
    p.add_argument('--size', type=int, default=32)
    p.add_argument('--change', type=float, default=0.2)
    _seed(p)
    p.add_argument('output')

    p = sub.add_parser('experiment', parents=common, help='desk-scale experiments')
    p.add_argument('name', choices=('equivalence', 'ablation', 'median', 'textures'))
    p.add_argument('--steps', type=int)
    _seed(p)
    p.add_argument('--out', dest='output', metavar='PATH')

    return parser


def _find_subparser(parser: argparse.ArgumentParser, argv: Sequence[str]):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for token in argv:
                if token in action.choices:
                    return action.choices[token]
    return None


def _convert(action: argparse.Action, key: str, text: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
        valid, value, msg = parse_bool(text, key)
        if not valid:
            raise ConfigError(msg)
        return value
    if action.type is float:
        valid, value, msg = validate_numeric_input(text, key)
        if not valid:
            raise ConfigError(msg)
        return value
    if action.type is not None:
        try:
            return action.type(text)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise ConfigError(f"config value for '{key}': {e}") from e
    if action.choices is not None and text not in action.choices:
        raise ConfigError(f"config value for '{key}' must be one of {list(action.choices)}")
    return text


def apply_config(parser: argparse.ArgumentParser, argv: Sequence[str],
                 files: FileHandler) -> Optional[str]:
    """load --config and install its values as subcommand defaults"""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return None

    values = files.load_config(known.config)
    sub = _find_subparser(parser, argv)
    if sub is None:
        raise UsageError("no command given")
    # keys may name the dest (d_th) or the flag (dth, value-scale)
    actions = {}
    for action in sub._actions:
        if not action.option_strings or action.dest in ('config', 'help'):
            continue
        actions[action.dest] = action
        for flag in action.option_strings:
            if flag.startswith('--') and not flag.startswith('--no-'):
                actions[flag[2:].replace('-', '_')] = action

    defaults = {}
    for key, text in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key '{key}' for '{sub.prog}'")
        action = actions[key]
        defaults[action.dest] = _convert(action, key, text)
    sub.set_defaults(**defaults)
    return known.config


def parse_command(argv: Sequence[str], files: FileHandler) -> Command:
    parser = build_parser()
    config_path = apply_config(parser, argv, files)
    args = parser.parse_args(list(argv))
    cmd = Command.from_namespace(args, config_path)

    if cmd.is_stochastic and cmd.seed is None:
        raise UsageError(f"'{cmd.name}' needs --seed")
    valid, msg = validate_command(cmd)
    if not valid:
        raise UsageError(msg)
    return cmd


def run(argv: Optional[Sequence[str]] = None, out: Optional[TextIO] = None) -> int:
    """run one command; 0 ok, 1 usage/config error, 2 data error"""
    argv = list(sys.argv[1:] if argv is None else argv)
    files = FileHandler()
    try:
        cmd = parse_command(argv, files)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except DenoiseError as e:
        print(f"error: {e}", file=sys.stderr)
        logger.error(f"Bad command line: {e}")
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_DATA

    handler = CommandHandler(files, out)
    status, error, outputs, code = 'failed', None, [], EXIT_DATA
    try:
        outputs = handler.execute(cmd)
        status, code = 'ok', EXIT_OK
    except ConfigError as e:
        error, code = str(e), EXIT_USAGE
        logger.error(f"'{cmd.name}' rejected its parameters: {e}")
    except (DataError, OSError) as e:
        error, code = str(e), EXIT_DATA
        logger.error(f"'{cmd.name}' failed on its data: {e}")
    except Exception as e:
        error, code = f"{type(e).__name__}: {e}", EXIT_DATA
        logger.error(f"'{cmd.name}' crashed: {e}", exc_info=True)
    finally:
        files.write_manifest(cmd, status, error, outputs)

    if error:
        print(f"error: {error}", file=sys.stderr)
    return code
