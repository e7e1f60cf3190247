"""Exception hierarchy shared by every vitgauge module.

Two branches exist so the command line can pick an exit code without knowing
which module raised: configuration problems (bad documents, budgets, schedules)
and evaluation problems (non-finite values, singular kernels).
"""


class VitGaugeError(Exception):
    """Base class for all vitgauge errors."""


class ConfigurationError(VitGaugeError, ValueError):
    """Raised when an input, document or setting is invalid."""


class EvaluationError(VitGaugeError, RuntimeError):
    """Raised when a numerical evaluation cannot produce a valid result."""
