"""Analytic fields evaluated on demand from integer grid indices."""
import numpy as np

from .core import as_shape, function_oracle
from .errors import ConfigurationError

GAUSSIAN_HALF_WIDTH = 2.0


def grid_coordinates(idx, shape, half_width=GAUSSIAN_HALF_WIDTH):
    """Map indices to points of the uniform grid on [-half_width, half_width]^D."""
    n = np.asarray(shape, dtype=np.float64)
    step = np.where(n > 1, 2 * half_width / np.maximum(n - 1, 1), 0.0)
    return -half_width * (n > 1) + idx * step


def gaussian(shape):
    shape = as_shape(shape)

    def fn(idx):
        x = grid_coordinates(idx, shape)
        return np.exp(-np.sum(x * x, axis=1))

    return fn


def hilbert(shape):
    D = len(as_shape(shape))

    def fn(idx):
        return 1.0 / (np.sum(idx, axis=1) + D)

    return fn


def ramp(shape):
    as_shape(shape)

    def fn(idx):
        return np.sum(idx, axis=1).astype(np.float64)

    return fn


def constant(shape):
    as_shape(shape)

    def fn(idx):
        return np.ones(idx.shape[0])

    return fn


FIELDS = {"gaussian": gaussian, "hilbert": hilbert, "ramp": ramp, "constant": constant}


def field_oracle(name, shape):
    """Oracle for a named analytic field; entries are computed only when requested."""
    try:
        make = FIELDS[name]
    except KeyError:
        raise ConfigurationError(f"unknown field {name!r}; choose from {', '.join(sorted(FIELDS))}") from None
    shape = as_shape(shape)
    return function_oracle(shape, make(shape), name=name)
