"""Exceptions shared across modules; the CLI maps them to exit codes."""


class NumericError(RuntimeError):
    """Non-finite values in activations, losses, or parameters (exit code 3)."""
