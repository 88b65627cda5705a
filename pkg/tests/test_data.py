import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ageifr.data import (AgeBin, SerologyBinObs, TestValidation, crude_rates,
                         load_dataset, write_dataset)
from ageifr.errors import (BinOverlap, CountViolation, MissingFile,
                           ReferentialIntegrity, SchemaViolation)


def _write(root, dataset):
    write_dataset(dataset, root)
    return root


def _replace_rows(path, rows):
    lines = path.read_text().splitlines()
    path.write_text("\n".join([lines[0]] + rows) + "\n")


def test_bin_label_convention():
    b = AgeBin(9, 20)
    assert (b.start, b.end, b.width) == (9.0, 21.0, 12.0)
    top = AgeBin(81, None)
    assert (top.start, top.end) == (81.0, 100.0)


def test_serology_row_parses(tmp_path, study):
    root = _write(tmp_path, study[0])
    _replace_rows(root / "serology.csv", ["L1,9,20,220,59", "L2,9,20,220,59", "L3,9,20,220,59"])
    data = load_dataset(root)
    assert data.location("L1").serology == (SerologyBinObs(AgeBin(9, 20), 220, 59),)


def test_overlapping_bins_rejected(tmp_path, study):
    root = _write(tmp_path, study[0])
    _replace_rows(root / "serology.csv", ["L1,0,9,10,1", "L1,5,14,10,1"])
    with pytest.raises(BinOverlap) as err:
        load_dataset(root)
    assert "serology.csv" in str(err.value) and err.value.row is not None


def test_crude_rates_examples():
    s, c = crude_rates(TestValidation("t", 73, 58, 222, 222))
    assert s == pytest.approx(58 / 73) and round(s, 3) == 0.795 and c == 1.0
    assert crude_rates(TestValidation("t", 10, 10, 10, 10)) == (1.0, 1.0)
    assert crude_rates(TestValidation("t", 100, 50, 200, 190)) == (0.5, 0.95)


def test_round_trip(tmp_path, study):
    data = study[2]
    write_dataset(data, tmp_path / "a")
    again = load_dataset(tmp_path / "a")
    assert again == data
    write_dataset(again, tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_population_covers_ceiling(study):
    for loc in study[2].locations:
        bins = sorted(b for b, _ in loc.population_bins)
        assert bins[0].start == 0.0 and bins[-1].end == 100.0
        assert all(a.end == b.start for a, b in zip(bins, bins[1:]))
        assert loc.total_population == sum(c for _, c in loc.population_bins)


@pytest.mark.parametrize("table, rows, error, rule", [
    ("serology.csv", ["L1,9,20,10,11"], CountViolation, None),
    ("serology.csv", ["L1,9,20,ten,1"], SchemaViolation, None),
    ("locations.csv", ["L1,C1,T9", "L2,C2,T2", "L3,C1,T1"], ReferentialIntegrity, "test_id-exists"),
    ("population.csv", ["L1,0,49,10"], SchemaViolation, "bins-cover-0-100"),
    ("tests.csv", ["T1,10,11,10,10", "T2,10,10,10,10"], CountViolation, "x_sens<=n_sens"),
])
def test_validation_names_file_row_rule(tmp_path, study, table, rows, error, rule):
    root = _write(tmp_path, study[0])
    _replace_rows(root / table, rows)
    with pytest.raises(error) as err:
        load_dataset(root)
    assert err.value.file is not None
    assert err.value.rule is not None
    if rule:
        assert err.value.rule == rule


def test_missing_file(tmp_path, study):
    root = _write(tmp_path, study[0])
    (root / "deaths.csv").unlink()
    with pytest.raises(MissingFile):
        load_dataset(root)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 98), st.integers(0, 50))
def test_label_maps_to_half_open_interval(lo, width):
    hi = min(lo + width, 99)
    b = AgeBin(lo, hi)
    assert b.start == lo and b.end == hi + 1
