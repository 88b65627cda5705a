from dataclasses import replace

import numpy as np
import pytest

from ageifr.data import AgeBin, DeathBinObs, SerologyBinObs, StudyDataset, TestValidation
from ageifr.model import Model, ModelSpec
from ageifr.synthetic import synthetic_study, template_dataset


@pytest.fixture(scope="session")
def study():
    """(template, truth, simulated data) of the 3-location design."""
    return synthetic_study(0)


@pytest.fixture(scope="session")
def model(study):
    return Model(study[2])


def single_location(sero=((20, 29, 10, 3),), deaths=((0, None, 0),), n_sens=50, x_sens=45,
                    n_spec=100, x_spec=99) -> StudyDataset:
    """One location, one country, one test, with the given bins and counts."""
    base = template_dataset(n_locations=1, n_countries=1, n_tests=1)
    loc = base.locations[0]
    loc = replace(
        loc,
        serology=tuple(SerologyBinObs(AgeBin(lo, hi), n, r) for lo, hi, n, r in sero),
        deaths=tuple(DeathBinObs(AgeBin(lo, hi), d) for lo, hi, d in deaths),
    )
    test = TestValidation(loc.test_id, n_sens, x_sens, n_spec, x_spec)
    return StudyDataset((loc,), (test,), dict(base.national_populations))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pinned_serology_spec(**extra) -> ModelSpec:
    """sens = spec = 1 and serology spline coefficients pinned at zero."""
    fixed = {"sens[T1]": 1.0, "spec[T1]": 1.0, "gamma[L1,1]": 0.0, "gamma[L1,2]": 0.0}
    fixed.update(extra.pop("fixed", {}))
    return ModelSpec(fixed=fixed, **extra)


def fd_gradient(fn, theta, h=1e-5):
    """Central finite differences of a scalar ``fn``."""
    g = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


def max_rel_error(analytic, numeric):
    """``max |a - n| / max(|n|, 1)``: relative where the gradient is
    larger than one, absolute below."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1.0)))


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, ok: bool | None, title: str, detail: str) -> None:
    """Store one line of the acceptance report; ``ok=None`` means skipped."""
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:>2}: {title} -- {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
