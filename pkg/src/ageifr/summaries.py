"""Posterior summaries: curves, IFR at a fixed age, population IFR, and the
naive Rogan-Gladen comparators.

Curves are evaluated from the constrained ``gamma[...]`` / ``beta[...]``
columns of a :class:`~ageifr.sampler.PosteriorDraws`; the spline bases
come from the :class:`~ageifr.model.ModelSpec` used for the fit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .age_density import GRID, AgeDensity
from .data import AgeBin, DeathBinObs, SerologyBinObs
from .errors import (DegenerateTest, InsufficientDraws, ZeroInfections,
                     ZeroPrevalence)
from .model import ModelSpec
from .quadrature import QuadratureMesh, trapezoid_weights

MIN_DRAWS = 100
AGES = GRID
SERO, IFR = "SERO", "IFR"
OWN, STANDARDIZED = "OWN", "STANDARDIZED"
ABOVE, BELOW, OVERLAPS = "ABOVE", "BELOW", "OVERLAPS"
INFECTION_WEIGHTED, POPULATION_WEIGHTED = "infection", "population"
Z95 = float(norm.ppf(0.975))


def _location_id(draws, location) -> str:
    if isinstance(location, (int, np.integer)):
        ids = []
        for n in draws.names:
            if n.startswith("gamma["):
                lid = n[len("gamma["):].rsplit(",", 1)[0]
                if lid not in ids:
                    ids.append(lid)
        return ids[int(location)]
    return str(location)


def _coefficients(draws, prefix: str, location_id: str) -> np.ndarray:
    """``(n_draws, 1 + basis dim)`` coefficient draws of one location."""
    cols = []
    j = 0
    while f"{prefix}[{location_id},{j}]" in draws.names:
        cols.append(draws.names.index(f"{prefix}[{location_id},{j}]"))
        j += 1
    if not cols:
        raise KeyError(f"no {prefix} draws for location {location_id!r}")
    return draws.flat()[:, cols]


def _check_count(n: int) -> None:
    if n < MIN_DRAWS:
        raise InsufficientDraws(f"need at least {MIN_DRAWS} draws, got {n}")


def evaluate_curves(draws, location, which: str, ages=AGES, spec: ModelSpec | None = None) -> np.ndarray:
    """Curve values ``(n_draws, len(ages))`` of every draw."""
    spec = spec or ModelSpec()
    lid = _location_id(draws, location)
    ages = np.asarray(ages, dtype=float)
    if which == SERO:
        c = _coefficients(draws, "gamma", lid)
        return expit(c[:, :1] + c[:, 1:] @ spec.serology_spline.evaluate(ages).T)
    if which == IFR:
        c = _coefficients(draws, "beta", lid)
        return np.exp(c[:, :1] + c[:, 1:] @ spec.ifr_spline.evaluate(ages).T)
    raise ValueError(f"which must be {SERO!r} or {IFR!r}, got {which!r}")


@dataclass(frozen=True)
class CurveSummary:
    location_id: str
    kind: str
    ages: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    lo80: np.ndarray
    hi80: np.ndarray


def _quantiles(values: np.ndarray, axis=0):
    q = np.quantile(values, [0.025, 0.1, 0.5, 0.9, 0.975], axis=axis)
    return q[0], q[1], q[2], q[3], q[4]


def curve_summary(draws, location, which: str = SERO, spec: ModelSpec | None = None) -> CurveSummary:
    """Per-age posterior mean, median and 80% / 95% central intervals.

    Raises
    ------
    InsufficientDraws
        With fewer than 100 draws.
    """
    _check_count(draws.flat().shape[0])
    v = evaluate_curves(draws, location, which, AGES, spec)
    lo95, lo80, med, hi80, hi95 = _quantiles(v)
    return CurveSummary(_location_id(draws, location), which, AGES.copy(), v.mean(axis=0),
                        med, lo95, hi95, lo80, hi80)


@dataclass(frozen=True)
class PointSummary:
    location_id: str
    age: float
    mean: float
    median: float
    lo80: float
    hi80: float
    lo95: float
    hi95: float
    benchmark: float | None = None
    benchmark_flag: str = ""


def compare_benchmark(lo: float, hi: float, benchmark: float | None) -> str:
    """``ABOVE``/``BELOW`` when the interval excludes ``benchmark``."""
    if benchmark is None:
        return ""
    if lo > benchmark:
        return ABOVE
    if hi < benchmark:
        return BELOW
    return OVERLAPS


def ifr_at_age(draws, location, age: float = 60.0, benchmark: float | None = None,
               spec: ModelSpec | None = None) -> PointSummary:
    """Posterior summary of ``ifr(age)``; the benchmark flag uses the 95% interval."""
    _check_count(draws.flat().shape[0])
    v = evaluate_curves(draws, location, IFR, [age], spec)[:, 0]
    lo95, lo80, med, hi80, hi95 = (float(x) for x in _quantiles(v))
    return PointSummary(_location_id(draws, location), float(age), float(v.mean()), med,
                        lo80, hi80, lo95, hi95, benchmark, compare_benchmark(lo95, hi95, benchmark))


@dataclass(frozen=True)
class PopulationIfrSummary:
    location_id: str
    mode: str
    mean: float
    median: float
    lo95: float
    hi95: float


def population_ifr_draws(draws, location, f: AgeDensity, spec: ModelSpec | None = None,
                         weighting: str = INFECTION_WEIGHTED) -> np.ndarray:
    """Population IFR of every draw.

    ``infection`` weighting (default) gives expected deaths over expected
    infections, ``int pi ifr f / int pi f``.  ``population`` weighting gives
    ``int ifr f / int f``.
    """
    spec = spec or ModelSpec()
    a = QuadratureMesh(spec.mesh_step).nodes(0.0, float(GRID[-1]))
    wf = trapezoid_weights(a) * np.asarray(f(a), dtype=float)
    ifr = evaluate_curves(draws, location, IFR, a, spec)
    if weighting == POPULATION_WEIGHTED:
        mass = wf.sum()
        if not mass > 1e-12:
            raise ZeroInfections(f"density mass {mass:g} underflows")
        return ifr @ wf / mass
    if weighting != INFECTION_WEIGHTED:
        raise ValueError(f"unknown weighting {weighting!r}")
    w = evaluate_curves(draws, location, SERO, a, spec) * wf
    den = w.sum(axis=1)
    if np.any(~(den > 1e-12)):
        raise ZeroInfections(f"expected infections underflow 1e-12 in {int(np.sum(~(den > 1e-12)))} draws")
    return np.sum(w * ifr, axis=1) / den


def population_ifr(draws, location, f: AgeDensity, mode: str = OWN, spec: ModelSpec | None = None,
                   weighting: str = INFECTION_WEIGHTED) -> PopulationIfrSummary:
    """Summary of :func:`population_ifr_draws`; ``mode`` labels which density was used.

    Raises
    ------
    InsufficientDraws, ZeroInfections
    """
    _check_count(draws.flat().shape[0])
    v = population_ifr_draws(draws, location, f, spec, weighting)
    lo95, _, med, _, hi95 = _quantiles(v)
    return PopulationIfrSummary(_location_id(draws, location), mode, float(v.mean()), float(med),
                                float(lo95), float(hi95))


def standardized_density(densities: Sequence[AgeDensity] | Mapping[str, AgeDensity]) -> AgeDensity:
    """Pointwise median of the densities at each integer age, renormalised."""
    if isinstance(densities, Mapping):
        densities = list(densities.values())
    if not densities:
        raise ValueError("need at least one density")
    v = np.median(np.stack([d.grid_values for d in densities]), axis=0)
    out = AgeDensity(v)
    return AgeDensity(v / out.integral())


# ---------------------------------------------------------------------------
# naive comparators

@dataclass(frozen=True)
class RoganGladenEstimate:
    estimate: float
    lo95: float
    hi95: float
    raw: float


def _rg(p, sens: float, spec: float):
    return (p + spec - 1.0) / (sens + spec - 1.0)


def rogan_gladen(obs, sens: float, spec: float) -> RoganGladenEstimate:
    """Misclassification-corrected prevalence with a Wald 95% interval.

    Parameters
    ----------
    obs : SerologyBinObs or float
        Counts, or a raw positivity proportion (then the interval is
        ``nan``).
    sens, spec : float
        Treated as known.

    Raises
    ------
    DegenerateTest
        If ``sens + spec <= 1``.
    """
    if not sens + spec > 1.0:
        raise DegenerateTest(f"sens + spec = {sens + spec:g} must exceed 1")
    if isinstance(obs, SerologyBinObs):
        if obs.n_tested <= 0:
            raise ValueError("bin has no tests")
        p = obs.n_positive / obs.n_tested
        half = Z95 * math.sqrt(p * (1.0 - p) / obs.n_tested)
        lo, hi = _rg(p - half, sens, spec), _rg(p + half, sens, spec)
    else:
        p = float(obs)
        lo = hi = math.nan
    est = _rg(p, sens, spec)
    clip = lambda x: x if math.isnan(x) else min(1.0, max(0.0, x))
    return RoganGladenEstimate(clip(est), clip(lo), clip(hi), p)


def naive_ifr(death_bin: DeathBinObs | int, population: float, rg) -> float:
    """Death rate over the Rogan-Gladen prevalence, ``(deaths / N) / rg``.

    Raises
    ------
    ZeroPrevalence
        If ``rg`` is zero.
    """
    deaths = death_bin.deaths if isinstance(death_bin, DeathBinObs) else death_bin
    r = rg.estimate if isinstance(rg, RoganGladenEstimate) else float(rg)
    if r == 0.0:
        raise ZeroPrevalence("Rogan-Gladen prevalence is zero")
    if not population > 0 or r < 0:
        raise ValueError("population and prevalence must be positive")
    return deaths / population / r


# ---------------------------------------------------------------------------
# csv

def _w(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return path


def write_curves_csv(summaries: Sequence[CurveSummary], path) -> Path:
    rows = []
    for s in summaries:
        for i, a in enumerate(s.ages):
            rows.append((s.location_id, s.kind, int(a), s.mean[i], s.median[i], s.lo95[i], s.hi95[i],
                         s.lo80[i], s.hi80[i]))
    return _w(path, ("location_id", "kind", "age", "mean", "median", "lo95", "hi95", "lo80", "hi80"), rows)


def write_population_ifr_csv(summaries: Sequence[PopulationIfrSummary], path) -> Path:
    return _w(path, ("location_id", "mode", "mean", "median", "lo95", "hi95"),
              [(s.location_id, s.mode, s.mean, s.median, s.lo95, s.hi95) for s in summaries])


def write_age_ifr_csv(summaries: Sequence[PointSummary], path) -> Path:
    return _w(path, ("location_id", "median", "lo80", "hi80", "lo95", "hi95", "benchmark_flag"),
              [(s.location_id, s.median, s.lo80, s.hi80, s.lo95, s.hi95, s.benchmark_flag)
               for s in summaries])


def write_rogan_gladen_csv(rows: Sequence[tuple[str, AgeBin, RoganGladenEstimate]], path) -> Path:
    return _w(path, ("location_id", "age_lo", "age_hi", "estimate", "lo95", "hi95"),
              [(lid, b.lo, "" if b.hi is None else b.hi, r.estimate, r.lo95, r.hi95)
               for lid, b, r in rows])
