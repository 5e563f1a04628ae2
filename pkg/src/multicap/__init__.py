"""Joint training of paired high/low-capacity seq2seq models."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, trace, parameter, set_default_dtype  # noqa: F401
