"""Compiled test targets for the sampler."""
import numpy as np
from numba import njit


@njit(cache=True)
def gaussian(theta, prec):
    """Zero-mean normal with precision matrix ``prec``."""
    g = -(prec @ theta)
    return 0.5 * np.dot(theta, g), g


@njit(cache=True)
def funnel(theta, scale):
    """Centred funnel: v ~ N(0, scale), x_i | v ~ N(0, exp(v / 2))."""
    v = theta[0]
    x = theta[1:]
    n = x.size
    lp = -0.5 * v * v / scale**2 - 0.5 * np.sum(x * x) * np.exp(-v) - 0.5 * n * v
    g = np.empty(theta.size)
    g[0] = -v / scale**2 + 0.5 * np.sum(x * x) * np.exp(-v) - 0.5 * n
    g[1:] = -x * np.exp(-v)
    return lp, g
