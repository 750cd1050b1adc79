"""Exceptions with dedicated CLI exit codes."""


class DegenerateLayoutError(RuntimeError):
    """A decoded occupancy mask is (near-)empty; generation stops early."""


class NumericalError(RuntimeError):
    """A training or sampling step produced non-finite values."""
