from .commands import CommandHandlers, exit_code_for

__all__ = ['CommandHandlers', 'exit_code_for']
