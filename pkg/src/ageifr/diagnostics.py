"""Split R-hat, effective sample size and the convergence report.

Both statistics work on the ``2 * chains`` half-sequences obtained by
splitting every chain in two, so a single chain is accepted.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoDraws, ZeroVariance

RHAT_MAX = 1.01
ESS_MIN = 1000.0
ESS_INFLATION = 1.5

GROUPS = ("beta", "beta_global", "beta_country", "sigma", "gamma", "sens", "spec")


def _halves(chains) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected (chains, draws), got shape {x.shape}")
    n = x.shape[1] // 2
    if n < 2:
        raise ValueError(f"each chain needs at least 4 draws, got {x.shape[1]}")
    # the middle draw of an odd-length chain is dropped
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def _check_variance(h: np.ndarray) -> None:
    if not np.all(np.isfinite(h)):
        raise ValueError("draws contain non-finite values")
    if np.ptp(h) == 0.0:
        raise ZeroVariance("all draws are identical")


def _unique_chains(x: np.ndarray) -> np.ndarray:
    _, idx = np.unique(x, axis=0, return_index=True)
    return x[np.sort(idx)]


def split_rhat(chains) -> float:
    """Split potential scale reduction factor of one parameter.

    Parameters
    ----------
    chains : array_like, shape (chains, draws)
        A 1-d array is read as a single chain.

    Raises
    ------
    ZeroVariance
        If every draw is identical.
    """
    h = _halves(chains)
    _check_variance(h)
    m, n = h.shape
    W = float(np.mean(np.var(h, axis=1, ddof=1)))
    B = n * float(np.var(np.mean(h, axis=1), ddof=1))
    if W == 0.0:
        # every half is constant but the halves disagree
        return math.inf
    return math.sqrt(((n - 1) / n * W + B / n) / W)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, via FFT."""
    n = x.shape[1]
    size = 1 << (2 * n - 1).bit_length()
    c = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(c, n=size, axis=1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n] / n


def ess(chains) -> float:
    """Effective sample size of one parameter.

    Autocorrelations are averaged over the split half-chains and corrected
    by the between-chain variance; the sum is truncated with Geyer's
    initial monotone sequence.  Chains that duplicate another chain exactly
    are counted once.  The result is capped at ``1.5`` times the number of
    draws used.

    Raises
    ------
    ZeroVariance
        If every draw is identical.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = _unique_chains(x)
    h = _halves(x)
    _check_variance(h)
    m, n = h.shape
    acov = _autocovariance(h)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = float(np.mean(chain_var))
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += float(np.var(np.mean(h, axis=1), ddof=1))
    if var_plus == 0.0:
        return float(m * n)
    rho = 1.0 - (W - np.mean(acov, axis=0)) / var_plus
    rho[0] = 1.0

    # paired sums, truncated at the first negative pair, then made monotone
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.nonzero(pairs < 0.0)[0]
    k = int(neg[0]) if neg.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
    tau = -1.0 + 2.0 * float(np.sum(pairs))
    total = float(m * n)
    if tau <= 0.0:
        return ESS_INFLATION * total
    return min(total / tau, ESS_INFLATION * total)


# ---------------------------------------------------------------------------
# report

def parameter_group(name: str) -> str | None:
    """Report group of a constrained parameter name, or ``None``."""
    base = name.split("[", 1)[0]
    if base == "sigma_country":
        return "sigma"
    return base if base in GROUPS else None


@dataclass(frozen=True)
class ParameterDiagnostic:
    name: str
    group: str | None
    rhat: float
    ess: float
    zero_variance: bool = False

    @property
    def excluded(self) -> bool:
        return self.zero_variance


@dataclass(frozen=True)
class GroupRange:
    rhat_min: float
    rhat_max: float
    ess_min: float
    ess_max: float


@dataclass
class ConvergenceReport:
    """Per-parameter and per-group R-hat / ESS with an overall verdict.

    Parameters whose draws never vary (held fixed, or collapsed) carry
    ``nan`` values and ``zero_variance=True``; they are reported but do
    not enter the group ranges or the verdict.
    """

    parameters: list[ParameterDiagnostic]
    rhat_max: float = RHAT_MAX
    ess_min: float = ESS_MIN
    groups: dict[str, GroupRange] = field(default_factory=dict)

    def __post_init__(self):
        if not self.groups:
            self.groups = self._group_ranges()

    def _group_ranges(self) -> dict[str, GroupRange]:
        out = {}
        for g in GROUPS:
            ps = [p for p in self.parameters if p.group == g and not p.excluded]
            if ps:
                r = [p.rhat for p in ps]
                e = [p.ess for p in ps]
                out[g] = GroupRange(min(r), max(r), min(e), max(e))
        return out

    @property
    def failing(self) -> list[str]:
        return [p.name for p in self.parameters
                if not p.excluded and not (p.rhat <= self.rhat_max and p.ess >= self.ess_min)]

    @property
    def flagged(self) -> list[str]:
        return [p.name for p in self.parameters if p.zero_variance]

    @property
    def passed(self) -> bool:
        return not self.failing

    def __getitem__(self, name: str) -> ParameterDiagnostic:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "thresholds": {"rhat_max": self.rhat_max, "ess_min": self.ess_min},
            "failing": self.failing,
            "zero_variance": self.flagged,
            "groups": {g: vars(r) for g, r in self.groups.items()},
        }


def convergence_report(draws, thresholds=None) -> ConvergenceReport:
    """R-hat and ESS of every constrained parameter of ``draws``.

    Parameters
    ----------
    draws : PosteriorDraws
    thresholds : dict, optional
        ``rhat_max`` (default 1.01) and ``ess_min`` (default 1000).

    Raises
    ------
    NoDraws
        If ``draws`` holds no samples.
    """
    t = {"rhat_max": RHAT_MAX, "ess_min": ESS_MIN, **(thresholds or {})}
    x = None if draws is None else np.asarray(draws.constrained)
    if x is None or x.size == 0 or x.shape[1] == 0:
        raise NoDraws("no posterior draws to diagnose")
    params = []
    for k, name in enumerate(draws.names):
        col = x[:, :, k]
        try:
            params.append(ParameterDiagnostic(name, parameter_group(name), split_rhat(col), ess(col)))
        except ZeroVariance:
            params.append(ParameterDiagnostic(name, parameter_group(name), math.nan, math.nan, True))
    return ConvergenceReport(params, float(t["rhat_max"]), float(t["ess_min"]))


def reversed_tests(draws) -> list[str]:
    """Tests for which some chain has a median ``sens + spec`` of at most 1.

    Positivity is affine in prevalence with slope ``sens + spec - 1``, so
    the likelihood has a second mode with the slope reversed.  Chains that
    all settle there agree with each other and pass R-hat; this check
    catches that case as well as a single stray chain.
    """
    out = []
    for name in draws.names:
        if name.startswith("sens["):
            test = name[len("sens["):-1]
            total = np.asarray(draws[name]) + np.asarray(draws[f"spec[{test}]"])
            if np.any(np.median(total, axis=-1) <= 1.0):
                out.append(test)
    return out


# ---------------------------------------------------------------------------
# csv

def write_diagnostics_csv(report: ConvergenceReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("parameter", "rhat", "ess", "group"))
        for p in report.parameters:
            w.writerow((p.name, repr(p.rhat), repr(p.ess), p.group or ""))
    return path


def read_diagnostics_csv(path) -> dict[str, tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["parameter"]: (float(r["rhat"]), float(r["ess"])) for r in csv.DictReader(fh)}


def trace_filename(name: str) -> str:
    """``trace_<param>.csv`` with characters outside ``[A-Za-z0-9_.-]`` replaced."""
    return f"trace_{re.sub(r'[^A-Za-z0-9_.-]+', '_', name).strip('_')}.csv"


def write_trace_csv(draws, name: str, directory) -> Path:
    path = Path(directory) / trace_filename(name)
    values = draws[name]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("chain", "iteration", "value"))
        for c in range(values.shape[0]):
            for s in range(values.shape[1]):
                w.writerow((c + 1, s + 1, repr(float(values[c, s]))))
    return path
