# frontend utilities

from .limits import DenoiseLimits
from .validators import validate_command, parse_bool, validate_numeric_input

__all__ = ['DenoiseLimits', 'validate_command', 'parse_bool', 'validate_numeric_input']
