"""Weakly-supervised localization of objects in images from image-level labels.

A fully convolutional network emits one map per class; extremum pooling turns
each map into a score trained with a class-weighted binary cross-entropy. At
test time the maps' peaks give object positions without any box supervision.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, InputError, NumericalError, StateError, WslocError

__all__ = ["__version__", "WslocError", "ConfigError", "InputError", "FormatError",
           "NumericalError", "StateError"]
