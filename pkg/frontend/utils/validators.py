# command option validation utilities

import logging
from typing import Tuple

from frontend.utils.limits import DenoiseLimits

logger = logging.getLogger(__name__)

# option -> (label, check)
_CHECKS = {
    'std': ("Std", DenoiseLimits.validate_std),
    'lam': ("Lambda", DenoiseLimits.validate_lambda),
    'k': ("k", DenoiseLimits.validate_k),
    's': ("s", DenoiseLimits.validate_patch_size),
    'd_th': ("dth", DenoiseLimits.validate_dth),
    'steps': ("steps", DenoiseLimits.validate_steps),
    'batch': ("batch", DenoiseLimits.validate_batch),
    'lr': ("lr", DenoiseLimits.validate_lr),
    'crop': ("crop", DenoiseLimits.validate_crop),
    'width1': ("width1", DenoiseLimits.validate_width),
    'width2': ("width2", DenoiseLimits.validate_width),
    'threads': ("threads", DenoiseLimits.validate_threads),
    'm': ("m", DenoiseLimits.validate_m),
    'size': ("size", DenoiseLimits.validate_size),
    'peak': ("peak", DenoiseLimits.validate_peak),
    'seed': ("seed", DenoiseLimits.validate_seed),
    'tile': ("tile", DenoiseLimits.validate_tile),
}


def validate_command(cmd) -> Tuple[bool, str]:
    """
    validate every option of a parsed Command that has a known range
    returns: (is_valid, error_message)
    """
    for key, (label, check) in _CHECKS.items():
        value = cmd.options.get(key)
        if value is None:
            continue
        valid, msg = check(value)
        if not valid:
            return False, f"--{label}: {msg}"

    if cmd.name == 'simulate':
        kind = cmd.options.get('kind')
        has_std = cmd.options.get('std') is not None
        has_lam = cmd.options.get('lam') is not None
        if has_std and has_lam:
            return False, "--std and --lambda are mutually exclusive"
        if kind == 'gaussian' and not has_std:
            return False, "gaussian noise needs --std"

    logger.debug(f"Command '{cmd.name}' options validated successfully")
    return True, ""


def parse_bool(text: str, name: str = "Value") -> Tuple[bool, bool, str]:
    """
    parse a config-file boolean
    returns: (is_valid, value, error_message)
    """
    lowered = text.strip().lower()
    if lowered in ('true', 'yes', 'on', '1'):
        return True, True, ""
    if lowered in ('false', 'no', 'off', '0'):
        return True, False, ""
    return False, False, f"Cannot read '{text}' as a boolean for {name} (use true/false)"


def validate_numeric_input(text: str, param_name: str = "Value") -> Tuple[bool, float, str]:
    """
    parse a config-file number
    returns: (is_valid, value, error_message)
    """
    try:
        value = float(text)
        return True, value, ""
    except ValueError:
        return False, 0.0, f"Cannot convert '{text}' to a number for {param_name}"
