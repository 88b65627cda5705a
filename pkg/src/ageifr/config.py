"""Run configuration read from JSON.

Schema (every key optional except where noted)::

    {
      "data": "path/to/dir" | {"serology": "...", "deaths": "...", ...},
      "model": {ModelSpec keys: serology_knots, ifr_knots, priors, mesh_step,
                non_centered, loess_span, include_serology, include_deaths, fixed},
      "sampler": {"seed": 1 (required for fit), "chains": 3, "warmup": 2500,
                  "samples": 3000, "target_accept": 0.8, "max_tree_depth": 10,
                  "init_jitter": 2.0, "init_retries": 100, "orient_tests": true,
                  "parallel": false},
      "out": "results",
      "benchmark_ifr_60": 0.005,
      "loess_span": 0.75,
      "population_ifr_weighting": "infection" | "population",
      "thresholds": {"rhat_max": 1.01, "ess_min": 1000},
      "trace": ["beta_global[0]", ...]
    }

A ``run_manifest.json`` is accepted in place of a config file.
Relative paths are resolved against the directory of the config file.
A top-level ``loess_span`` is copied into ``model`` when the latter does
not set one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .diagnostics import ESS_MIN, RHAT_MAX
from .errors import ConfigError
from .model import ModelSpec
from .sampler import SamplerConfig
from .summaries import INFECTION_WEIGHTED, POPULATION_WEIGHTED

KNOWN_KEYS = {"data", "model", "sampler", "out", "benchmark_ifr_60", "loess_span",
              "population_ifr_weighting", "thresholds", "trace"}


@dataclass
class RunConfig:
    data: Any = None
    model: ModelSpec = field(default_factory=ModelSpec)
    sampler: Mapping = field(default_factory=dict)
    out: Path | None = None
    benchmark_ifr_60: float | None = None
    population_ifr_weighting: str = INFECTION_WEIGHTED
    thresholds: dict = field(default_factory=lambda: {"rhat_max": RHAT_MAX, "ess_min": ESS_MIN})
    trace: tuple[str, ...] = ()
    source: dict = field(default_factory=dict)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        d = dict(self.sampler)
        if seed is not None:
            d["seed"] = seed
        if d.get("seed") is None:
            raise ConfigError("a seed is required (config or --seed)", field="sampler.seed")
        return SamplerConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: Mapping, base: Path | None = None) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)}", field="config")
        base = (base or Path(".")).resolve()

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        data = d.get("data")
        if isinstance(data, Mapping):
            data = {k: resolve(v) for k, v in data.items()}
        elif data is not None:
            data = resolve(data)

        model = dict(d.get("model", {}))
        if "loess_span" in d:
            model.setdefault("loess_span", d["loess_span"])
        spec = ModelSpec.from_dict(model)

        sampler = dict(d.get("sampler", {}))
        if "seed" in sampler:
            SamplerConfig.from_dict(sampler)

        bench = d.get("benchmark_ifr_60")
        if bench is not None:
            try:
                bench = float(bench)
            except (TypeError, ValueError):
                raise ConfigError(f"must be a number, got {bench!r}", field="benchmark_ifr_60") from None
            if not bench > 0:
                raise ConfigError(f"must be positive, got {bench!r}", field="benchmark_ifr_60")

        weighting = d.get("population_ifr_weighting", INFECTION_WEIGHTED)
        if weighting not in (INFECTION_WEIGHTED, POPULATION_WEIGHTED):
            raise ConfigError(f"must be {INFECTION_WEIGHTED!r} or {POPULATION_WEIGHTED!r}",
                              field="population_ifr_weighting")

        thresholds = {"rhat_max": RHAT_MAX, "ess_min": ESS_MIN}
        extra = d.get("thresholds", {})
        if set(extra) - set(thresholds):
            raise ConfigError(f"unknown key(s) {sorted(set(extra) - set(thresholds))}", field="thresholds")
        thresholds.update({k: float(v) for k, v in extra.items()})

        out = d.get("out")
        return cls(data, spec, sampler, resolve(out) if out is not None else None, bench, weighting,
                   thresholds, tuple(d.get("trace", ())), dict(d))

    def to_dict(self) -> dict:
        data = self.data
        if isinstance(data, Mapping):
            data = {k: str(v) for k, v in data.items()}
        elif data is not None:
            data = str(data)
        return {
            "data": data,
            "model": self.model.to_dict(),
            "sampler": dict(self.sampler),
            "out": None if self.out is None else str(self.out),
            "benchmark_ifr_60": self.benchmark_ifr_60,
            "population_ifr_weighting": self.population_ifr_weighting,
            "thresholds": dict(self.thresholds),
            "trace": list(self.trace),
        }


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", field="config") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})", field="config") from None
    if isinstance(d, Mapping) and "config" in d and "versions" in d:
        # a run_manifest.json: rerun its recorded configuration
        d = d["config"]
    return RunConfig.from_dict(d, base=path.parent)
