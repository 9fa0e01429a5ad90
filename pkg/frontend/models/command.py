# parsed command data model

from dataclasses import dataclass, field
from typing import Any, Dict, Optional

# subcommands that draw random numbers and therefore need --seed
STOCHASTIC_COMMANDS = (
    'simulate', 'train', 'refine', 'estimate-zcd', 'texture', 'phantom', 'experiment'
)

# options that never go into a manifest
_PRIVATE = ('func',)


@dataclass
class Command:
    """one subcommand with its resolved options (config file + flags)"""

    name: str
    options: Dict[str, Any] = field(default_factory=dict)
    config_path: Optional[str] = None

    def get(self, key: str, default: Any = None) -> Any:
        value = self.options.get(key)
        return default if value is None else value

    @property
    def seed(self) -> Optional[int]:
        return self.options.get('seed')

    @property
    def is_stochastic(self) -> bool:
        return self.name in STOCHASTIC_COMMANDS

    @property
    def primary_output(self) -> Optional[str]:
        """path the manifest is written beside"""
        return self.options.get('output')

    def to_dict(self) -> dict:
        """options for the manifest, json-safe"""
        opts = {}
        for key, value in sorted(self.options.items()):
            if key in _PRIVATE:
                continue
            if value is not None and not isinstance(value, (bool, int, float, str, list)):
                value = str(value)
            opts[key] = value
        return {
            'command': self.name,
            'config': self.config_path,
            'seed': self.seed,
            'options': opts,
        }

    @classmethod
    def from_namespace(cls, args, config_path: Optional[str] = None) -> 'Command':
        options = {k: v for k, v in vars(args).items() if k != 'command'}
        return cls(name=args.command, options=options, config_path=config_path)
