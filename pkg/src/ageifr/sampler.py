"""Multinomial No-U-Turn sampler with windowed warmup adaptation.

Each transition grows a trajectory by doubling, alternating direction at
random, and draws the next state from the trajectory with probability
proportional to ``exp(-H)`` (biased progressive sampling between
subtrees).  Termination uses the generalised U-turn criterion, checked on
the merged tree and across the boundary of the two halves.

Warmup adapts the step size by dual averaging towards ``target_accept`` and
a diagonal inverse metric from the draws of expanding windows.  After every
window the step size is re-initialised and dual averaging restarts.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._nuts import STEPSIZE_OK, get_core
from .errors import AllDivergent, ConfigError, InitializationFailure, InsufficientChains

STAT_NAMES = ("accept_stat", "treedepth", "n_leapfrog", "divergent", "energy", "stepsize")
DIVERGENCE_LIMIT = 0.9
EBFMI_THRESHOLD = 0.3


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 3
    warmup: int = 2500
    samples: int = 3000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int | None = None
    init_jitter: float = 2.0
    init_retries: int = 100
    orient_tests: bool = True
    parallel: bool = False

    def __post_init__(self):
        checks = (
            ("chains", self.chains >= 1, "must be at least 1"),
            ("warmup", self.warmup >= 100, "must be at least 100"),
            ("samples", self.samples >= 1, "must be at least 1"),
            ("target_accept", 0.0 < self.target_accept < 1.0, "must lie in (0, 1)"),
            ("max_tree_depth", self.max_tree_depth >= 1, "must be at least 1"),
            ("init_jitter", self.init_jitter >= 0.0, "must be non-negative"),
            ("init_retries", self.init_retries >= 1, "must be at least 1"),
        )
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg}, got {getattr(self, name)!r}", field=f"sampler.{name}")
        if self.seed is None:
            raise ConfigError("a seed is required", field="sampler.seed")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.seed!r}", field="sampler.seed")

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown key(s) {sorted(bad)}", field="sampler")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class FunctionTarget:
    """Wrap a plain ``theta -> (log density, gradient)`` function."""

    def __init__(self, fn: Callable, dim: int, names: Sequence[str] | None = None):
        self.fn = fn
        self.dim = int(dim)
        self.free_names = tuple(names) if names is not None else tuple(f"theta[{i}]" for i in range(dim))
        self.constrained_names = self.free_names

    def __call__(self, theta):
        return self.fn(theta)

    def constrain(self, theta):
        return np.asarray(theta, dtype=float)


class JitTarget(FunctionTarget):
    """A numba-compiled ``fn(theta, args) -> (log density, gradient)``.

    Sampled in compiled code; ``args`` is passed through unchanged.
    """

    def __init__(self, fn, args, dim: int, names: Sequence[str] | None = None):
        super().__init__(fn, dim, names)
        self.args = args
        self.jit_kernel = (fn, args)

    def __call__(self, theta):
        return self.fn(np.asarray(theta, dtype=float), self.args)


# ---------------------------------------------------------------------------
# warmup schedule

class WarmupSchedule:
    """Expanding metric-adaptation windows inside the warmup phase.

    Defaults: 75 step-size-only iterations, windows of 25, 50, 100, ...
    (the last one stretched to the terminal buffer), 50 step-size-only
    iterations at the end.  Short warmups fall back to 15% / 75% / 10%.
    """

    def __init__(self, num_warmup, init_buffer=75, term_buffer=50, base_window=25):
        self.num_warmup = num_warmup
        if init_buffer + base_window + term_buffer > num_warmup:
            init_buffer = int(0.15 * num_warmup)
            term_buffer = int(0.1 * num_warmup)
            base_window = num_warmup - (init_buffer + term_buffer)
        self.init_buffer, self.term_buffer, self.base_window = init_buffer, term_buffer, base_window
        self.windows = self._windows()

    def _windows(self) -> list[tuple[int, int]]:
        """``(first, last)`` iteration indices (0-based, inclusive) per window."""
        end = self.num_warmup - self.term_buffer - 1
        size = self.base_window
        nxt = self.init_buffer + size - 1
        out = []
        start = self.init_buffer
        while True:
            out.append((start, nxt))
            if nxt == end:
                return out
            start = nxt + 1
            size *= 2
            nxt = start - 1 + size
            if nxt + 2 * size >= self.num_warmup - self.term_buffer:
                nxt = end

    def describe(self) -> dict:
        return {"init_buffer": self.init_buffer, "term_buffer": self.term_buffer,
                "base_window": self.base_window, "windows": [list(w) for w in self.windows]}


# ---------------------------------------------------------------------------
# chains

def _initial_point(target, rng, config: SamplerConfig):
    """Jittered initial point with a finite log density and gradient.

    With ``config.orient_tests``, a target exposing ``orient_init`` maps
    each draw through it first.
    """
    dim = target.dim
    orient = getattr(target, "orient_init", None) if config.orient_tests else None
    for _ in range(config.init_retries):
        q = rng.uniform(-config.init_jitter, config.init_jitter, size=dim)
        if orient is not None:
            q = orient(q)
        lp, g = target(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return q, float(lp), np.asarray(g, dtype=float)
    raise InitializationFailure(
        f"no finite log density and gradient in {config.init_retries} initial points "
        f"drawn from uniform(-{config.init_jitter}, {config.init_jitter})")


def _python_logp(theta, args):
    value, grad = args[0](theta)
    return float(value), np.asarray(grad, dtype=float)


def run_chain(target, config: SamplerConfig, seed_seq: np.random.SeedSequence) -> dict:
    """One chain: warmup with adaptation, then ``config.samples`` kept draws.

    Targets exposing ``jit_kernel`` run in compiled code; any other
    callable runs the same algorithm in Python.
    """
    rng = np.random.default_rng(seed_seq)
    q, lp, g = _initial_point(target, rng, config)
    kernel = getattr(target, "jit_kernel", None)
    if kernel is not None:
        core = get_core(jit=True)
        logp, args = kernel
    else:
        core = get_core(jit=False)
        logp, args = _python_logp, (target,)
    schedule = WarmupSchedule(config.warmup)
    first = np.array([w[0] for w in schedule.windows], dtype=np.int64)
    last = np.array([w[1] for w in schedule.windows], dtype=np.int64)
    draws, stats, eps, inv_metric, status = core(
        logp, args, q, lp, g, rng, config.warmup, config.samples, first, last,
        float(config.target_accept), config.max_tree_depth)
    if status != STEPSIZE_OK:
        raise InitializationFailure(
            f"step-size search diverged (stepsize={eps}); the posterior may be improper")
    return {"draws": draws, "stats": stats, "stepsize": float(eps),
            "inv_metric": np.asarray(inv_metric), "schedule": schedule.describe()}


@dataclass
class PosteriorDraws:
    """Post-warmup draws of every chain.

    ``unconstrained`` has shape ``(chains, samples, dim)`` and may be
    ``None`` when draws were loaded from ``draws.csv``.  ``constrained``
    has shape ``(chains, samples, len(names))``.
    """

    names: tuple[str, ...]
    constrained: np.ndarray
    unconstrained: np.ndarray | None = None
    unconstrained_names: tuple[str, ...] = ()
    stats: dict = field(default_factory=dict)
    stepsize: np.ndarray | None = None
    inv_metric: np.ndarray | None = None
    config: SamplerConfig | None = None
    schedule: dict | None = None

    def __post_init__(self):
        self.constrained = np.asarray(self.constrained, dtype=float)
        if self.constrained.ndim != 3 or self.constrained.shape[2] != len(self.names):
            raise ValueError(f"constrained draws of shape {self.constrained.shape} do not match "
                             f"{len(self.names)} names")

    @property
    def n_chains(self) -> int:
        return self.constrained.shape[0]

    @property
    def n_samples(self) -> int:
        return self.constrained.shape[1]

    def __getitem__(self, name) -> np.ndarray:
        """``(chains, samples)`` constrained draws of one parameter."""
        return self.constrained[:, :, self.names.index(name)]

    def flat(self) -> np.ndarray:
        """Constrained draws with chains concatenated, ``(chains * samples, K)``."""
        return self.constrained.reshape(-1, len(self.names))


def sample(target, config: SamplerConfig) -> PosteriorDraws:
    """Run ``config.chains`` independent chains on ``target``.

    ``target(theta)`` returns ``(log density, gradient)`` and ``target.dim``
    gives the dimension; a ``constrain`` method and ``constrained_names``
    are used for the constrained view when present.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    if config.parallel and config.chains > 1:
        with ProcessPoolExecutor(max_workers=config.chains) as pool:
            results = list(pool.map(run_chain, [target] * config.chains,
                                    [config] * config.chains, seeds))
    else:
        results = [run_chain(target, config, s) for s in seeds]

    unc = np.stack([r["draws"] for r in results])
    stats = np.stack([r["stats"] for r in results])
    constrain = getattr(target, "constrain", None)
    free_names = tuple(getattr(target, "free_names", [f"theta[{i}]" for i in range(target.dim)]))
    if constrain is not None:
        con = np.stack([constrain(u) for u in unc])
        names = tuple(target.constrained_names)
    else:
        con, names = unc.copy(), free_names
    stat_dict = {n: stats[:, :, i] for i, n in enumerate(STAT_NAMES)}
    for key in ("treedepth", "n_leapfrog", "divergent"):
        stat_dict[key] = stat_dict[key].astype(int)
    draws = PosteriorDraws(names, con, unc, free_names, stat_dict,
                           np.array([r["stepsize"] for r in results]),
                           np.stack([r["inv_metric"] for r in results]), config, results[0]["schedule"])

    frac = stat_dict["divergent"].mean(axis=1)
    if np.any(frac > DIVERGENCE_LIMIT):
        err = AllDivergent(f"divergent fraction per chain {np.round(frac, 3).tolist()} exceeds "
                           f"{DIVERGENCE_LIMIT}; check the model geometry or gradient")
        err.draws = draws
        raise err
    return draws


# ---------------------------------------------------------------------------
# run report

@dataclass(frozen=True)
class RunReport:
    divergences: tuple[int, ...]
    treedepth_saturations: tuple[int, ...]
    ebfmi: tuple[float, ...]
    low_ebfmi_chains: tuple[int, ...]
    max_tree_depth: int
    schedule: dict | None = None

    @property
    def total_divergences(self) -> int:
        return int(sum(self.divergences))

    def to_dict(self) -> dict:
        return asdict(self)


def ebfmi(energy) -> float:
    """Energy Bayesian fraction of missing information of one chain."""
    e = np.asarray(energy, dtype=float)
    denom = float(np.sum((e - e.mean()) ** 2))
    return float(np.sum(np.diff(e) ** 2) / denom) if denom > 0 else math.nan


def diagnose_run(draws: PosteriorDraws) -> RunReport:
    """Divergences, tree-depth saturation and E-BFMI per chain."""
    if draws.n_chains < 2:
        raise InsufficientChains(f"need at least 2 chains, got {draws.n_chains}")
    if not draws.stats:
        raise ValueError("draws carry no sampler statistics")
    max_depth = draws.config.max_tree_depth if draws.config else int(draws.stats["treedepth"].max())
    div = tuple(int(x) for x in draws.stats["divergent"].sum(axis=1))
    sat = tuple(int(x) for x in (draws.stats["treedepth"] >= max_depth).sum(axis=1))
    bfmi = tuple(ebfmi(e) for e in draws.stats["energy"])
    low = tuple(i for i, b in enumerate(bfmi) if b < EBFMI_THRESHOLD)
    return RunReport(div, sat, bfmi, low, max_depth, draws.schedule)


# ---------------------------------------------------------------------------
# csv

def _fmt(x) -> str:
    return repr(float(x))


def write_draws_csv(draws: PosteriorDraws, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("chain", "iteration") + tuple(draws.names))
        for c in range(draws.n_chains):
            for s in range(draws.n_samples):
                w.writerow([c + 1, s + 1] + [_fmt(v) for v in draws.constrained[c, s]])
    return path


def write_stats_csv(draws: PosteriorDraws, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("chain", "iteration") + STAT_NAMES)
        for c in range(draws.n_chains):
            for s in range(draws.n_samples):
                row = [c + 1, s + 1]
                for n in STAT_NAMES:
                    v = draws.stats[n][c, s]
                    row.append(int(v) if n in ("treedepth", "n_leapfrog", "divergent") else _fmt(v))
                w.writerow(row)
    return path


def _read_table(path, lead=("chain", "iteration")):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][:2]) != lead:
        raise ValueError(f"{path}: header must start with {','.join(lead)}")
    header = rows[0]
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no rows")
    try:
        chain = np.array([int(r[0]) for r in body])
        it = np.array([int(r[1]) for r in body])
        if any(len(r) != len(header) for r in body):
            raise ValueError("ragged rows")
        values = np.array([[float(v) for v in r[2:]] for r in body])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from None
    chains = np.unique(chain)
    counts = {int(c): int(np.sum(chain == c)) for c in chains}
    if len(set(counts.values())) != 1:
        raise ValueError(f"{path}: chains have unequal lengths {counts}")
    S = next(iter(counts.values()))
    order = np.lexsort((it, chain))
    values = values[order].reshape(chains.size, S, -1)
    expected = np.tile(np.arange(1, S + 1), chains.size)
    if not np.array_equal(it[order], expected):
        raise ValueError(f"{path}: iterations must run 1..{S} in every chain")
    return tuple(header[2:]), values


def read_draws_csv(path, stats_path=None) -> PosteriorDraws:
    """Load ``draws.csv`` (and optionally ``sampler_stats.csv``)."""
    names, values = _read_table(path)
    stats = {}
    if stats_path is not None and Path(stats_path).exists():
        snames, svalues = _read_table(stats_path)
        if svalues.shape[:2] != values.shape[:2]:
            raise ValueError(f"{stats_path}: shape does not match {path}")
        for i, n in enumerate(snames):
            v = svalues[:, :, i]
            stats[n] = v.astype(int) if n in ("treedepth", "n_leapfrog", "divergent") else v
    return PosteriorDraws(names, values, stats=stats)
