"""Loading and validating the study tables.

Age bins arrive as integer labels ``(lo, hi)`` in completed years, with an
empty ``hi`` for an open-ended top bin.  A label maps to the continuous
interval ``[lo, hi + 1)``; an open bin maps to ``[lo, 100]``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import (
    BinOverlap,
    CountViolation,
    MissingFile,
    ReferentialIntegrity,
    SchemaViolation,
)

AGE_CEILING = 100

FILENAMES = {
    "serology": "serology.csv",
    "deaths": "deaths.csv",
    "tests": "tests.csv",
    "locations": "locations.csv",
    "population": "population.csv",
    "national_population": "national_population.csv",
}

COLUMNS = {
    "serology": ("location_id", "age_lo", "age_hi", "n_tested", "n_positive"),
    "deaths": ("location_id", "age_lo", "age_hi", "deaths"),
    "tests": ("test_id", "n_sens", "x_sens", "n_spec", "x_spec"),
    "locations": ("location_id", "country_id", "test_id"),
    "population": ("location_id", "age_lo", "age_hi", "count"),
    "national_population": ("country_id", "age_lo", "age_hi", "count"),
}


@dataclass(frozen=True, order=True)
class AgeBin:
    """Integer-labelled age group; ``hi=None`` is the open top bin."""

    lo: int
    hi: int | None = None

    def __post_init__(self):
        if self.lo < 0:
            raise ValueError(f"age_lo must be >= 0, got {self.lo}")
        if self.hi is not None and self.hi < self.lo:
            raise ValueError(f"age_hi ({self.hi}) is below age_lo ({self.lo})")
        if self.end > AGE_CEILING or self.start >= AGE_CEILING:
            raise ValueError(f"bin {self.label} extends past age {AGE_CEILING}")

    @classmethod
    def span(cls, start: int, end: int) -> "AgeBin":
        """Bin covering the continuous interval ``[start, end)``."""
        if end == AGE_CEILING:
            return cls(start, None)
        return cls(start, end - 1)

    @property
    def start(self) -> float:
        return float(self.lo)

    @property
    def end(self) -> float:
        return float(AGE_CEILING if self.hi is None else self.hi + 1)

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def label(self) -> str:
        return f"{self.lo}+" if self.hi is None else f"{self.lo}-{self.hi}"

    def contains(self, other: "AgeBin") -> bool:
        return self.start <= other.start and other.end <= self.end


@dataclass(frozen=True)
class SerologyBinObs:
    bin: AgeBin
    n_tested: int
    n_positive: int


@dataclass(frozen=True)
class DeathBinObs:
    bin: AgeBin
    deaths: int


@dataclass(frozen=True)
class TestValidation:
    test_id: str
    n_sens: int
    x_sens: int
    n_spec: int
    x_spec: int

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class LocationRecord:
    location_id: str
    country_id: str
    test_id: str
    serology: tuple[SerologyBinObs, ...]
    deaths: tuple[DeathBinObs, ...]
    population_bins: tuple[tuple[AgeBin, int], ...]

    @property
    def total_population(self) -> int:
        return sum(count for _, count in self.population_bins)


@dataclass(frozen=True)
class StudyDataset:
    locations: tuple[LocationRecord, ...]
    tests: tuple[TestValidation, ...]
    national_populations: Mapping[str, tuple[tuple[AgeBin, int], ...]] = field(
        default_factory=dict
    )

    @property
    def location_ids(self) -> tuple[str, ...]:
        return tuple(loc.location_id for loc in self.locations)

    @property
    def test_ids(self) -> tuple[str, ...]:
        return tuple(t.test_id for t in self.tests)

    @property
    def country_ids(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for loc in self.locations:
            seen.setdefault(loc.country_id, None)
        return tuple(seen)

    def location(self, location_id: str) -> LocationRecord:
        for loc in self.locations:
            if loc.location_id == location_id:
                return loc
        raise KeyError(location_id)

    def test(self, test_id: str) -> TestValidation:
        for t in self.tests:
            if t.test_id == test_id:
                return t
        raise KeyError(test_id)


def crude_rates(v: TestValidation) -> tuple[float, float]:
    """Naive (sensitivity, specificity) point estimates from control counts."""
    return v.x_sens / v.n_sens, v.x_spec / v.n_spec


# ---------------------------------------------------------------------------
# parsing

def _resolve_paths(paths) -> dict[str, Path]:
    if isinstance(paths, (str, os.PathLike)):
        root = Path(paths)
        return {key: root / name for key, name in FILENAMES.items()}
    resolved = {}
    for key in FILENAMES:
        if key not in paths:
            raise MissingFile(f"no path given for the {key} table", rule="required-table")
        resolved[key] = Path(paths[key])
    return resolved


def _read_table(path: Path, kind: str) -> list[tuple[int, dict[str, str]]]:
    if not path.is_file():
        raise MissingFile("file does not exist", file=path, rule="required-table")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaViolation("missing header row", file=path, row=1, rule="header")
        header = [name.strip() for name in reader.fieldnames]
        missing = [c for c in COLUMNS[kind] if c not in header]
        if missing:
            raise SchemaViolation(
                f"missing column(s) {', '.join(missing)}", file=path, row=1, rule="header"
            )
        reader.fieldnames = header
        rows = []
        for record in reader:
            if None in record:
                raise SchemaViolation(
                    "too many fields", file=path, row=reader.line_num, rule="field-count"
                )
            rows.append((reader.line_num, {k: (v or "").strip() for k, v in record.items()}))
    return rows


def _count(value: str, column: str, path: Path, row: int, minimum: int = 0) -> int:
    try:
        out = int(value)
    except ValueError:
        raise SchemaViolation(
            f"column {column} must be an integer, got {value!r}", file=path, row=row,
            rule="integer",
        ) from None
    if out < minimum:
        raise CountViolation(
            f"column {column} must be >= {minimum}, got {out}", file=path, row=row,
            rule=f"{column}>={minimum}",
        )
    return out


def _identifier(value: str, column: str, path: Path, row: int) -> str:
    if not value:
        raise SchemaViolation(f"column {column} is empty", file=path, row=row, rule="non-empty")
    return value


def _age_bin(rec: Mapping[str, str], path: Path, row: int) -> AgeBin:
    lo = _count(rec["age_lo"], "age_lo", path, row)
    hi = None if rec["age_hi"] == "" else _count(rec["age_hi"], "age_hi", path, row)
    try:
        return AgeBin(lo, hi)
    except ValueError as exc:
        raise SchemaViolation(str(exc), file=path, row=row, rule="age-bin") from None


def _check_disjoint(bins: Sequence[tuple[AgeBin, int]], path: Path, owner: str) -> None:
    ordered = sorted(bins, key=lambda item: item[0].start)
    for (prev, _), (cur, row) in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise BinOverlap(
                f"{owner}: bin {cur.label} overlaps bin {prev.label}", file=path, row=row,
                rule="disjoint-bins",
            )


def _check_tiling(bins: Sequence[tuple[AgeBin, int]], path: Path, owner: str) -> None:
    _check_disjoint(bins, path, owner)
    ordered = sorted(bins, key=lambda item: item[0].start)
    edge = 0.0
    for b, row in ordered:
        if b.start != edge:
            raise SchemaViolation(
                f"{owner}: ages [{edge:g}, {b.start:g}) are not covered", file=path, row=row,
                rule="bins-cover-0-100",
            )
        edge = b.end
    if edge != AGE_CEILING:
        row = ordered[-1][1] if ordered else None
        raise SchemaViolation(
            f"{owner}: ages [{edge:g}, {AGE_CEILING}] are not covered", file=path, row=row,
            rule="bins-cover-0-100",
        )


def load_dataset(paths) -> StudyDataset:
    """Read, validate and assemble the six input tables.

    ``paths`` is either a directory holding the standard file names or a
    mapping from table name (``serology``, ``deaths``, ``tests``,
    ``locations``, ``population``, ``national_population``) to a file path.
    """
    files = _resolve_paths(paths)
    tables = {kind: _read_table(path, kind) for kind, path in files.items()}

    tests: dict[str, TestValidation] = {}
    path = files["tests"]
    for row, rec in tables["tests"]:
        tid = _identifier(rec["test_id"], "test_id", path, row)
        if tid in tests:
            raise SchemaViolation(f"duplicate test_id {tid!r}", file=path, row=row, rule="unique-id")
        n_sens = _count(rec["n_sens"], "n_sens", path, row, minimum=1)
        x_sens = _count(rec["x_sens"], "x_sens", path, row)
        n_spec = _count(rec["n_spec"], "n_spec", path, row, minimum=1)
        x_spec = _count(rec["x_spec"], "x_spec", path, row)
        if x_sens > n_sens:
            raise CountViolation("x_sens exceeds n_sens", file=path, row=row, rule="x_sens<=n_sens")
        if x_spec > n_spec:
            raise CountViolation("x_spec exceeds n_spec", file=path, row=row, rule="x_spec<=n_spec")
        tests[tid] = TestValidation(tid, n_sens, x_sens, n_spec, x_spec)

    loc_meta: dict[str, tuple[str, str]] = {}
    path = files["locations"]
    for row, rec in tables["locations"]:
        lid = _identifier(rec["location_id"], "location_id", path, row)
        cid = _identifier(rec["country_id"], "country_id", path, row)
        tid = _identifier(rec["test_id"], "test_id", path, row)
        if lid in loc_meta:
            raise SchemaViolation(f"duplicate location_id {lid!r}", file=path, row=row, rule="unique-id")
        if tid not in tests:
            raise ReferentialIntegrity(
                f"unknown test_id {tid!r}", file=path, row=row, rule="test_id-exists"
            )
        loc_meta[lid] = (cid, tid)

    def grouped(kind: str, key: str, known, build):
        out: dict[str, list] = {k: [] for k in known}
        p = files[kind]
        for row, rec in tables[kind]:
            owner = _identifier(rec[key], key, p, row)
            if owner not in out:
                raise ReferentialIntegrity(
                    f"unknown {key} {owner!r}", file=p, row=row, rule=f"{key}-exists"
                )
            out[owner].append((build(rec, p, row), row))
        return out

    def sero(rec, p, row):
        b = _age_bin(rec, p, row)
        n = _count(rec["n_tested"], "n_tested", p, row, minimum=1)
        r = _count(rec["n_positive"], "n_positive", p, row)
        if r > n:
            raise CountViolation("n_positive exceeds n_tested", file=p, row=row,
                                 rule="n_positive<=n_tested")
        return SerologyBinObs(b, n, r)

    def death(rec, p, row):
        return DeathBinObs(_age_bin(rec, p, row), _count(rec["deaths"], "deaths", p, row))

    def pop(rec, p, row):
        return (_age_bin(rec, p, row), _count(rec["count"], "count", p, row))

    serology = grouped("serology", "location_id", loc_meta, sero)
    deaths = grouped("deaths", "location_id", loc_meta, death)
    population = grouped("population", "location_id", loc_meta, pop)

    countries = list(dict.fromkeys(cid for cid, _ in loc_meta.values()))
    national_rows: dict[str, list] = {}
    p = files["national_population"]
    for row, rec in tables["national_population"]:
        cid = _identifier(rec["country_id"], "country_id", p, row)
        national_rows.setdefault(cid, []).append((pop(rec, p, row), row))
    for cid in countries:
        if cid not in national_rows:
            raise ReferentialIntegrity(
                f"country {cid!r} has no national population table", file=p,
                rule="country-has-national-population",
            )

    locations = []
    for lid, (cid, tid) in loc_meta.items():
        s_rows = serology[lid]
        if not s_rows:
            raise SchemaViolation(f"location {lid!r} has no serology bins", file=files["serology"],
                                  rule="serology-present")
        _check_disjoint([(o.bin, r) for o, r in s_rows], files["serology"], f"location {lid}")
        _check_tiling([(o.bin, r) for o, r in deaths[lid]], files["deaths"], f"location {lid}")
        _check_tiling([(b, r) for (b, _), r in population[lid]], files["population"],
                      f"location {lid}")
        total = sum(c for (_, c), _ in population[lid])
        if total <= 0:
            raise CountViolation(f"location {lid!r} has zero total population",
                                 file=files["population"], rule="positive-population")
        locations.append(
            LocationRecord(
                location_id=lid,
                country_id=cid,
                test_id=tid,
                serology=tuple(sorted((o for o, _ in s_rows), key=lambda o: o.bin.start)),
                deaths=tuple(sorted((o for o, _ in deaths[lid]), key=lambda o: o.bin.start)),
                population_bins=tuple(sorted((b for b, _ in population[lid]),
                                             key=lambda item: item[0].start)),
            )
        )

    national = {}
    for cid, rows in national_rows.items():
        _check_tiling([(b, r) for (b, _), r in rows], p, f"country {cid}")
        if sum(c for (_, c), _ in rows) <= 0:
            raise CountViolation(f"country {cid!r} has zero national population", file=p,
                                 rule="positive-population")
        national[cid] = tuple(sorted((b for b, _ in rows), key=lambda item: item[0].start))

    return StudyDataset(tuple(locations), tuple(tests.values()), national)


def _hi(b: AgeBin) -> str:
    return "" if b.hi is None else str(b.hi)


def write_dataset(dataset: StudyDataset, directory) -> dict[str, Path]:
    """Write ``dataset`` back to the six CSV tables under ``directory``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rows: dict[str, list[tuple]] = {kind: [] for kind in FILENAMES}
    for t in dataset.tests:
        rows["tests"].append((t.test_id, t.n_sens, t.x_sens, t.n_spec, t.x_spec))
    for loc in dataset.locations:
        lid = loc.location_id
        rows["locations"].append((lid, loc.country_id, loc.test_id))
        for o in loc.serology:
            rows["serology"].append((lid, o.bin.lo, _hi(o.bin), o.n_tested, o.n_positive))
        for o in loc.deaths:
            rows["deaths"].append((lid, o.bin.lo, _hi(o.bin), o.deaths))
        for b, c in loc.population_bins:
            rows["population"].append((lid, b.lo, _hi(b), c))
    for cid, bins in dataset.national_populations.items():
        for b, c in bins:
            rows["national_population"].append((cid, b.lo, _hi(b), c))

    written = {}
    for kind, name in FILENAMES.items():
        path = root / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(COLUMNS[kind])
            writer.writerows(rows[kind])
        written[kind] = path
    return written
