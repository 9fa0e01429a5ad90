# frontend handlers

from .command_handler import CommandHandler
from .file_handler import FileHandler

__all__ = ['CommandHandler', 'FileHandler']
