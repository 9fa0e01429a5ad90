# frontend models

from .command import Command, STOCHASTIC_COMMANDS

__all__ = ['Command', 'STOCHASTIC_COMMANDS']
