#!/usr/bin/env python3
# Noise2Sim denoiser

import argparse
import logging
import os
import sys

# пути
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = 'INFO', log_file: str = None):
    # stdout carries command results, so logs go to stderr
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_dir = os.path.dirname(os.path.abspath(log_file))
        os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )

    from backend import get_version

    logger = logging.getLogger(__name__)
    logger.debug("=" * 60)
    logger.debug(f"Noise2Sim denoiser {get_version()} started")
    if log_file:
        logger.debug(f"Log file: {log_file}")
    logger.debug(f"Python version: {sys.version}")
    logger.debug(f"Working directory: {os.getcwd()}")
    logger.debug("=" * 60)

    return logger


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--log-level', default='INFO')
    pre.add_argument('--log-file')
    known, _ = pre.parse_known_args(argv)
    logger = setup_logging(known.log_level, known.log_file)

    from frontend.cli import run
    exit_code = run(argv)

    logger.debug(f"Exited with code: {exit_code}")
    sys.exit(exit_code)


if __name__ == "__main__":
    main()
