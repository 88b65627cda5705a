"""Small synthetic study designs for demos, tests and recovery studies."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import (
    AgeBin,
    DeathBinObs,
    LocationRecord,
    SerologyBinObs,
    StudyDataset,
    TestValidation,
)
from .model import Model, ModelSpec, Parameters

SEROLOGY_LABELS = ((9, 20), (21, 30), (31, 40), (41, 50), (51, 60), (61, 70), (71, 80), (81, None))
DEATH_LABELS = tuple((a, a + 9) for a in range(0, 80, 10)) + ((80, None),)


def pyramid(decay: float, width: int = 5) -> list[tuple[AgeBin, float]]:
    """Population shares ``~ exp(-age / decay)`` in ``width``-year bins."""
    edges = list(range(0, 100, width)) + [100]
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        share = decay * (np.exp(-lo / decay) - np.exp(-hi / decay))
        out.append((AgeBin.span(lo, hi), share))
    total = sum(s for _, s in out)
    return [(b, s / total) for b, s in out]


def counts(shares, total: int) -> tuple[tuple[AgeBin, int], ...]:
    raw = np.array([s for _, s in shares]) * total
    ints = np.floor(raw).astype(int)
    ints[np.argmax(raw - ints)] += total - ints.sum()
    return tuple((b, int(c)) for (b, _), c in zip(shares, ints))


def coarsen(bins: Sequence[tuple[AgeBin, int]], edges: Sequence[int]) -> tuple[tuple[AgeBin, int], ...]:
    """Merge integer-count bins onto coarser ``edges`` (which must align)."""
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        c = sum(n for b, n in bins if lo <= b.start and b.end <= hi)
        out.append((AgeBin.span(lo, hi), c))
    return tuple(out)


def template_dataset(
    n_locations: int = 3,
    n_per_bin: int = 2000,
    population: int = 1_000_000,
    n_countries: int = 2,
    n_tests: int = 2,
    serology_labels=SEROLOGY_LABELS,
    death_labels=DEATH_LABELS,
) -> StudyDataset:
    """Design-only dataset (all outcome counts zero) for simulation.

    Locations alternate between countries and tests.  Local population
    tables are in 10-year bins, so the national 5-year tables refine them.
    """
    countries = [f"C{c + 1}" for c in range(n_countries)]
    tests = [TestValidation(f"T{t + 1}", 60 + 20 * t, 0, 200 + 100 * t, 0) for t in range(n_tests)]
    national = {c: counts(pyramid(22.0 + 4.0 * i), 50_000_000) for i, c in enumerate(countries)}
    locations = []
    for i in range(n_locations):
        decay = 20.0 + 5.0 * i
        fine = counts(pyramid(decay, width=5), population)
        local = coarsen(fine, list(range(0, 100, 10)) + [100])
        sero = tuple(SerologyBinObs(AgeBin(lo, hi), n_per_bin, 0) for lo, hi in serology_labels)
        deaths = tuple(DeathBinObs(AgeBin(lo, hi), 0) for lo, hi in death_labels)
        locations.append(LocationRecord(f"L{i + 1}", countries[i % n_countries],
                                        tests[i % n_tests].test_id, sero, deaths, local))
    return StudyDataset(tuple(locations), tuple(tests), national)


def fit_log_curve(target, spline, ages=None) -> np.ndarray:
    """Least-squares ``[intercept, coefficients]`` reproducing ``target(age)``."""
    ages = np.arange(0.0, 101.0) if ages is None else np.asarray(ages, dtype=float)
    design = np.hstack([np.ones((ages.size, 1)), spline.evaluate(ages)])
    coef, *_ = np.linalg.lstsq(design, target(ages), rcond=None)
    return coef


def true_parameters(model: Model, seed: int = 0) -> Parameters:
    """Plausible ground truth: flat-ish prevalence near 0.2-0.35, log-IFR
    rising roughly linearly with age, with location-level variation."""
    rng = np.random.default_rng(seed)
    L, C, T, p1, q1 = model.shape
    spec = model.spec
    gamma = np.zeros((L, p1))
    gamma[:, 0] = rng.uniform(-1.4, -0.6, size=L)
    gamma[:, 1:] = rng.normal(0.0, 0.03, size=(L, p1 - 1))
    beta = np.zeros((L, q1))
    for l in range(L):
        level = -11.0 + rng.normal(0.0, 0.3)
        slope = 0.1 + rng.normal(0.0, 0.005)
        beta[l] = fit_log_curve(lambda a: level + slope * a, spec.ifr_spline)
    bg = beta.mean(axis=0)
    sigma = np.maximum(beta.std(axis=0), 0.05)
    return Parameters(gamma, beta, bg, np.zeros(C), sigma, 0.3,
                      rng.uniform(0.8, 0.95, size=T), rng.uniform(0.97, 0.995, size=T),
                      model.location_ids, model.country_ids, model.test_ids)


def synthetic_study(seed: int = 0, spec: ModelSpec | None = None, **design):
    """Template, truth and one simulated dataset."""
    from .model import simulate_dataset

    template = template_dataset(**design)
    model = Model(template, spec or ModelSpec())
    truth = true_parameters(model, seed=seed)
    data = simulate_dataset(truth, template, seed=seed + 1, model=model)
    return template, truth, data
