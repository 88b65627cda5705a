"""Continuous population age densities built from binned census counts.

Pipeline: binned proportions -> step density (optionally reshaped inside
wide bins by the national age distribution) -> local-linear LOESS on the
integer ages 0..85 plus a zero anchor at age 100 -> shift to non-negative
-> renormalise to unit trapezoidal mass on [0, 100].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AGE_CEILING, AgeBin, LocationRecord
from .errors import BinOverlap, DegenerateFit, EmptyBin, NonNormalized, ZeroNationalMass
from .quadrature import QuadratureMesh, trapezoid, trapezoid_weights

GRID = np.arange(AGE_CEILING + 1, dtype=float)

DEFAULT_SPAN = 0.75
REFINE_WIDTH = 5.0
SAMPLE_MAX_AGE = 85


@dataclass(frozen=True)
class StepDensity:
    """Piecewise-constant density; ``heights[i]`` applies on
    ``[breakpoints[i], breakpoints[i + 1])`` and the last piece is closed."""

    breakpoints: np.ndarray
    heights: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        h = np.asarray(self.heights, dtype=float)
        if b.ndim != 1 or h.shape != (b.size - 1,):
            raise ValueError("need len(breakpoints) == len(heights) + 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(h < 0):
            raise ValueError("heights must be non-negative")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "heights", h)

    def __call__(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = self.breakpoints
        idx = np.clip(np.searchsorted(b, a, side="right") - 1, 0, self.heights.size - 1)
        inside = (a >= b[0]) & (a <= b[-1])
        return np.where(inside, self.heights[idx], 0.0)

    def mass(self, start: float | None = None, end: float | None = None) -> float:
        b = self.breakpoints
        lo = b[0] if start is None else start
        hi = b[-1] if end is None else end
        left = np.clip(b[:-1], lo, hi)
        right = np.clip(b[1:], lo, hi)
        return float(np.sum(self.heights * (right - left)))


@dataclass(frozen=True)
class AgeDensity:
    """Density on the integer ages 0..100, linear in between."""

    grid_values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.grid_values, dtype=float)
        if v.shape != GRID.shape:
            raise ValueError(f"expected {GRID.size} grid values, got {v.shape}")
        object.__setattr__(self, "grid_values", v)

    @property
    def grid_ages(self) -> np.ndarray:
        return GRID

    def __call__(self, a) -> np.ndarray:
        return np.interp(np.asarray(a, dtype=float), GRID, self.grid_values, left=0.0, right=0.0)

    def integral(self) -> float:
        return trapezoid(self.grid_values, GRID)


def _pieces_to_step(pieces) -> StepDensity:
    pieces = sorted(pieces)
    breaks = [pieces[0][0]]
    heights = []
    for start, end, height in pieces:
        if start > breaks[-1]:
            heights.append(0.0)
            breaks.append(start)
        heights.append(height)
        breaks.append(end)
    return StepDensity(np.array(breaks), np.array(heights))


def _check_bins(bins) -> list[tuple[AgeBin, float]]:
    ordered = sorted(bins, key=lambda item: item[0].start)
    for (prev, _), (cur, _) in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise BinOverlap(f"bin {cur.label} overlaps bin {prev.label}", rule="disjoint-bins")
    total = sum(p for _, p in ordered)
    if abs(total - 1.0) > 1e-9:
        raise NonNormalized(f"bin proportions sum to {total!r}, not 1")
    if any(p < 0 for _, p in ordered):
        raise NonNormalized("negative bin proportion")
    return ordered


def proportions(bins: Sequence[tuple[AgeBin, float]]) -> list[tuple[AgeBin, float]]:
    """Normalise raw counts to proportions summing to one."""
    total = float(sum(c for _, c in bins))
    return [(b, c / total) for b, c in bins]


def expand_step(bins: Sequence[tuple[AgeBin, float]]) -> StepDensity:
    """Spread each bin's proportion uniformly over the bin."""
    ordered = _check_bins(bins)
    return _pieces_to_step([(b.start, b.end, p / b.width) for b, p in ordered])


def refine_with_national(
    local_bins: Sequence[tuple[AgeBin, float]],
    national_step: StepDensity,
    threshold: float = REFINE_WIDTH,
) -> StepDensity:
    """Reshape bins wider than ``threshold`` years with the national profile.

    Inside a wide bin the national step is rescaled so that its values at
    the integer ages of the bin sum to the local proportion.  Bins no wider
    than ``threshold`` stay uniform.
    """
    ordered = _check_bins(local_bins)
    nb = national_step.breakpoints
    pieces = []
    for b, p in ordered:
        if b.width <= threshold:
            pieces.append((b.start, b.end, p / b.width))
            continue
        # integer ages in the half-open interval [start, end)
        ints = np.arange(np.ceil(b.start), np.ceil(b.end))
        denom = float(np.sum(national_step(ints)))
        if not denom > 0:
            if p > 0:
                raise ZeroNationalMass(f"national density has no mass over bin {b.label}")
            pieces.append((b.start, b.end, 0.0))
            continue
        cuts = np.concatenate(([b.start], nb[(nb > b.start) & (nb < b.end)], [b.end]))
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            pieces.append((lo, hi, p * float(national_step(lo)) / denom))
    return _pieces_to_step(pieces)


def loess(x, y, x_new, span: float = DEFAULT_SPAN, degree: int = 1) -> np.ndarray:
    """Locally weighted polynomial regression with tricube weights.

    The neighbourhood of each prediction point holds the ``floor(span * n)``
    nearest observations; for ``span > 1`` the bandwidth is the largest
    distance scaled by ``span``.  No robustness iterations.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    n = x.size
    if np.unique(x).size < max(4, degree + 1):
        raise DegenerateFit(f"need at least 4 distinct sample points, got {np.unique(x).size}")
    dist = np.abs(x_new[:, None] - x[None, :])
    if span <= 1:
        q = max(int(np.floor(span * n)), degree + 1)
        h = np.sort(dist, axis=1)[:, q - 1]
    else:
        h = dist.max(axis=1) * span
    h = np.maximum(h, 1e-12)
    u = np.clip(dist / h[:, None], 0.0, 1.0)
    w = (1.0 - u**3) ** 3

    out = np.empty(x_new.size)
    for i, x0 in enumerate(x_new):
        sw = np.sqrt(w[i])
        design = np.vander(x - x0, degree + 1, increasing=True) * sw[:, None]
        coef, *_ = np.linalg.lstsq(design, y * sw, rcond=None)
        out[i] = coef[0]
    return out


def smooth_to_density(step: StepDensity, span: float = DEFAULT_SPAN) -> AgeDensity:
    ages = np.arange(SAMPLE_MAX_AGE + 1, dtype=float)
    x = np.append(ages, AGE_CEILING)
    y = np.append(step(ages), 0.0)
    pred = loess(x, y, GRID, span=span, degree=1)
    # the age-100 anchor is a data point of value zero, kept as-is
    pred[-1] = 0.0
    low = pred.min()
    if low < 0:
        pred = pred - low
    return AgeDensity(pred / trapezoid(pred, GRID))


def location_density(
    loc: LocationRecord,
    national_bins: Sequence[tuple[AgeBin, int]] | None = None,
    span: float = DEFAULT_SPAN,
    threshold: float = REFINE_WIDTH,
) -> AgeDensity:
    """Full pipeline for one location's population table."""
    local = proportions(loc.population_bins)
    if national_bins is not None and any(b.width > threshold for b, _ in local):
        national = expand_step(proportions(national_bins))
        step = refine_with_national(local, national, threshold)
    else:
        step = expand_step(local)
    return smooth_to_density(step, span=span)


def dataset_densities(dataset, span: float = DEFAULT_SPAN) -> dict[str, AgeDensity]:
    return {
        loc.location_id: location_density(
            loc, dataset.national_populations.get(loc.country_id), span=span
        )
        for loc in dataset.locations
    }


def bin_mass(f: AgeDensity, bin: AgeBin, mesh: QuadratureMesh | None = None) -> float:
    if not bin.width > 0:
        raise EmptyBin(f"bin {bin.label} has zero width")
    a = (mesh or QuadratureMesh()).nodes(bin.start, bin.end)
    return float(np.dot(trapezoid_weights(a), f(a)))


def population_in_bin(
    loc: LocationRecord, f: AgeDensity, bin: AgeBin, mesh: QuadratureMesh | None = None
) -> float:
    return loc.total_population * bin_mass(f, bin, mesh)


def write_density_csv(f: AgeDensity, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("age", "density"))
        for a, v in zip(GRID.astype(int), f.grid_values):
            writer.writerow((a, repr(float(v))))
    return path
