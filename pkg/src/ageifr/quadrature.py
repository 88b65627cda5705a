"""Trapezoidal quadrature on a regular age mesh."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ZeroMassBin

_EPS = 1e-9


@dataclass(frozen=True)
class QuadratureMesh:
    """Nodes at multiples of ``step`` plus the exact bin endpoints."""

    step: float = 0.25

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"mesh step must be positive, got {self.step}")

    def nodes(self, start: float, end: float) -> np.ndarray:
        if end <= start:
            return np.array([start, end], dtype=float)
        k_lo = int(np.floor(start / self.step + _EPS)) + 1
        k_hi = int(np.ceil(end / self.step - _EPS)) - 1
        interior = np.arange(k_lo, k_hi + 1) * self.step
        interior = interior[(interior > start + _EPS) & (interior < end - _EPS)]
        return np.concatenate(([start], interior, [end]))


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Weights ``w`` with ``sum(w * g(nodes))`` the trapezoid rule for ``g``."""
    nodes = np.asarray(nodes, dtype=float)
    h = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def trapezoid(values: np.ndarray, nodes: np.ndarray) -> float:
    return float(np.dot(trapezoid_weights(nodes), values))


def bin_average(g: Callable, f: Callable, bin, mesh: QuadratureMesh | None = None) -> float:
    """Density-weighted mean of ``g`` over ``bin``.

    Both the numerator and the normalising mass use the same mesh, so a
    constant ``g`` is returned exactly.
    """
    mesh = mesh or QuadratureMesh()
    a = mesh.nodes(bin.start, bin.end)
    w = trapezoid_weights(a) * np.asarray(f(a), dtype=float)
    mass = w.sum()
    if not mass > 1e-12:
        raise ZeroMassBin(f"density mass over [{bin.start:g}, {bin.end:g}) is {mass:g}")
    v = np.asarray(g(a), dtype=float)
    # centring on v[0] makes a constant g come back exactly
    return float(v[0] + np.dot(w, v - v[0]) / mass)
