"""Command-line entry point: ``ageifr {fit,simulate,diagnose,summarize}``.

Exit codes: 0 success, 2 ran but failed the convergence thresholds
(outputs are still written), 1 could not run (bad config or data).
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from importlib import metadata
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .data import crude_rates, load_dataset, write_dataset
from .diagnostics import (convergence_report, reversed_tests,
                          write_diagnostics_csv, write_trace_csv)
from .errors import AgeIfrError, AllDivergent
from .model import Model, simulate_dataset
from .sampler import (PosteriorDraws, read_draws_csv, sample, write_draws_csv,
                      write_stats_csv)
from .summaries import (IFR, OWN, SERO, STANDARDIZED, curve_summary,
                        ifr_at_age, population_ifr, rogan_gladen,
                        standardized_density, write_age_ifr_csv,
                        write_curves_csv, write_population_ifr_csv,
                        write_rogan_gladen_csv)

EXIT_OK, EXIT_ERROR, EXIT_UNCONVERGED = 0, 1, 2

FIT_OUTPUTS = ("draws.csv", "sampler_stats.csv", "diagnostics.csv", "curves.csv",
               "population_ifr.csv", "age60_ifr.csv", "rogan_gladen.csv", "run_manifest.json")


def versions() -> dict:
    out = {"ageifr": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = args.out or (cfg.out if cfg is not None else None)
    if out is None:
        raise AgeIfrError("no output directory: pass --out or set 'out' in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig):
    if cfg.data is None:
        raise AgeIfrError("config has no 'data' entry")
    return load_dataset(cfg.data)


def write_summaries(draws: PosteriorDraws, model: Model, cfg: RunConfig, out: Path) -> list[Path]:
    """The four summary tables of a fit."""
    spec = model.spec
    ids = model.location_ids
    curves = [curve_summary(draws, l, kind, spec) for l in ids for kind in (SERO, IFR)]
    std = standardized_density(model.densities)
    pop = []
    for l in ids:
        pop.append(population_ifr(draws, l, model.densities[l], OWN, spec, cfg.population_ifr_weighting))
        pop.append(population_ifr(draws, l, std, STANDARDIZED, spec, cfg.population_ifr_weighting))
    age60 = [ifr_at_age(draws, l, 60.0, cfg.benchmark_ifr_60, spec) for l in ids]
    rg = []
    for loc in model.dataset.locations:
        sens, specificity = crude_rates(model.dataset.test(loc.test_id))
        for o in loc.serology:
            rg.append((loc.location_id, o.bin, rogan_gladen(o, sens, specificity)))
    return [
        write_curves_csv(curves, out / "curves.csv"),
        write_population_ifr_csv(pop, out / "population_ifr.csv"),
        write_age_ifr_csv(age60, out / "age60_ifr.csv"),
        write_rogan_gladen_csv(rg, out / "rogan_gladen.csv"),
    ]


def _diagnose(draws: PosteriorDraws, cfg: RunConfig | None, out: Path, trace=()) -> int:
    thresholds = cfg.thresholds if cfg is not None else None
    report = convergence_report(draws, thresholds)
    write_diagnostics_csv(report, out / "diagnostics.csv")
    for name in trace:
        if name not in draws.names:
            raise AgeIfrError(f"trace: unknown parameter {name!r}")
        write_trace_csv(draws, name, out)
    flipped = reversed_tests(draws)
    if flipped:
        print(f"warning: median sens + spec is <= 1 in at least one chain for test(s) {', '.join(flipped)}; "
              "those chains are in the reversed-test mode, refit with other seeds",
              file=sys.stderr)
    if report.passed:
        return EXIT_OK
    shown = ", ".join(report.failing[:10]) + (" ..." if len(report.failing) > 10 else "")
    print(f"convergence thresholds not met for {len(report.failing)} parameter(s): {shown}",
          file=sys.stderr)
    return EXIT_UNCONVERGED


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    sc = cfg.sampler_config(args.seed)
    out = _out_dir(args, cfg)
    model = Model(_dataset(cfg), cfg.model)
    status = EXIT_OK
    try:
        draws = sample(model, sc)
    except AllDivergent as exc:
        print(f"sampler: {exc}", file=sys.stderr)
        draws = exc.draws
        status = EXIT_UNCONVERGED
    write_draws_csv(draws, out / "draws.csv")
    write_stats_csv(draws, out / "sampler_stats.csv")
    status = max(status, _diagnose(draws, cfg, out, cfg.trace))
    write_summaries(draws, model, cfg, out)

    manifest_cfg = cfg.to_dict()
    manifest_cfg["sampler"] = sc.to_dict()
    manifest_cfg["out"] = str(out)
    manifest = {
        "command": "fit",
        "seed": sc.seed,
        "config": manifest_cfg,
        "versions": versions(),
        "outputs": list(FIT_OUTPUTS),
        "exit_status": status,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return status


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.sampler.get("seed")
    if seed is None:
        raise AgeIfrError("sampler.seed: a seed is required (config or --seed)")
    out = _out_dir(args, cfg)
    template = _dataset(cfg)
    try:
        truth_d = json.loads(Path(args.truth).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise AgeIfrError(f"cannot read true parameters {args.truth}: {exc}") from None
    model = Model(template, cfg.model)
    truth = model.parameters_from_dict(truth_d)
    data = simulate_dataset(truth, template, int(seed), cfg.model)
    write_dataset(data, out)
    (out / "truth.json").write_text(json.dumps({"seed": int(seed), **truth.to_dict()}, indent=2) + "\n",
                                    encoding="utf-8")
    return EXIT_OK


def _load_draws(path) -> PosteriorDraws:
    path = Path(path)
    try:
        return read_draws_csv(path, path.with_name("sampler_stats.csv"))
    except (OSError, ValueError) as exc:
        raise AgeIfrError(f"cannot read draws: {exc}") from None


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config) if args.config else None
    draws = _load_draws(args.draws)
    out = _out_dir(args, None) if args.out else Path(args.draws).parent
    trace = tuple(args.trace or ()) or (cfg.trace if cfg is not None else ())
    return _diagnose(draws, cfg, out, trace)


def cmd_summarize(args) -> int:
    cfg = load_config(args.config)
    draws = _load_draws(args.draws)
    out = _out_dir(args, None) if args.out else Path(args.draws).parent
    model = Model(_dataset(cfg), cfg.model)
    write_summaries(draws, model, cfg, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ageifr", description="Age-specific seroprevalence and IFR estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="sample the posterior and write all outputs")
    f.add_argument("--config", required=True)
    f.add_argument("--out")
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="draw a synthetic dataset from known parameters")
    s.add_argument("--config", required=True, help="config whose 'data' is the template dataset")
    s.add_argument("--truth", required=True, help="true parameters (JSON)")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="recompute diagnostics.csv from stored draws")
    d.add_argument("--draws", required=True)
    d.add_argument("--config")
    d.add_argument("--out")
    d.add_argument("--trace", nargs="*", help="parameters to export as trace_<param>.csv")
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("summarize", help="re-derive the summary CSVs from stored draws")
    m.add_argument("--config", required=True)
    m.add_argument("--draws", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AgeIfrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
