"""Natural cubic spline bases of age.

The raw basis is the truncated-power form of a natural cubic spline
(cubic between the boundary knots, linear outside them).  Raw columns are
orthonormalised against the constant column on the integer ages 0..100,
each scaled to unit root-mean-square there.  The intercept is not part of
the basis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REFERENCE_AGES = np.arange(101, dtype=float)


def _truncated_power(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Columns ``x, d_1 - d_{K-1}, ..., d_{K-2} - d_{K-1}``."""
    x = np.asarray(x, dtype=float)[:, None]
    xi = knots
    last = xi[-1]

    def d(k):
        return (np.maximum(x - xi[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - xi[k])

    cols = [x]
    d_pen = d(len(xi) - 2)
    for k in range(len(xi) - 2):
        cols.append(d(k) - d_pen)
    return np.hstack(cols)


@dataclass(frozen=True)
class NaturalSplineDef:
    boundary_knots: tuple[float, float]
    internal_knots: tuple[float, ...] = ()
    _map: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = (float(k) for k in self.boundary_knots)
        inner = tuple(float(k) for k in self.internal_knots)
        if not lo < hi:
            raise ValueError(f"boundary knots must be increasing, got {self.boundary_knots}")
        if any(not lo < k < hi for k in inner):
            raise ValueError(f"internal knots {inner} must lie strictly inside ({lo}, {hi})")
        if any(b <= a for a, b in zip(inner, inner[1:])):
            raise ValueError(f"internal knots must be strictly increasing, got {inner}")
        object.__setattr__(self, "boundary_knots", (lo, hi))
        object.__setattr__(self, "internal_knots", inner)

        raw = np.hstack([np.ones((REFERENCE_AGES.size, 1)),
                         _truncated_power(REFERENCE_AGES, self.knots)])
        _, r = np.linalg.qr(raw)
        # [1, raw] @ inv(r) is orthonormal on the reference ages; drop the constant
        scale = np.sqrt(REFERENCE_AGES.size)
        object.__setattr__(self, "_map", np.linalg.inv(r)[:, 1:] * scale)

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return np.array((lo, *self.internal_knots, hi))

    @property
    def dim(self) -> int:
        return len(self.internal_knots) + 1

    def evaluate(self, ages) -> np.ndarray:
        """Basis matrix of shape ``(len(ages), dim)``."""
        ages = np.atleast_1d(np.asarray(ages, dtype=float))
        raw = np.hstack([np.ones((ages.size, 1)), _truncated_power(ages, self.knots)])
        return raw @ self._map

    def to_dict(self) -> dict:
        return {"boundary_knots": list(self.boundary_knots),
                "internal_knots": list(self.internal_knots)}


def basis_eval(spline: NaturalSplineDef, age) -> np.ndarray:
    """Basis vector at a scalar age (or matrix for an array of ages)."""
    out = spline.evaluate(age)
    return out[0] if np.ndim(age) == 0 else out


IFR_SPLINE = NaturalSplineDef((0.0, 80.0), (10.0, 60.0))
SEROLOGY_SPLINE = NaturalSplineDef((10.0, 80.0), (60.0,))
