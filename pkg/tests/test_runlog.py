import json

import pytest

from meta_attack.runlog import COLUMNS, RunLog, read_csv


def test_csv_roundtrip(tmp_path):
    log = RunLog()
    log.append(iter=0, delta=1.0, train_return=-3.25, wall_ms=1.5)
    log.append(iter=1, delta=0.5, train_return=float("nan"))
    log.write_csv(tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert rows[0]["iter"] == 0 and rows[0]["train_return"] == -3.25
    assert rows[1]["train_return"] is None and rows[1]["attacked_loss"] is None
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(COLUMNS)


def test_jsonl(tmp_path):
    log = RunLog()
    log.append(iter=0, delta=1.0)
    log.write_jsonl(tmp_path / "r.jsonl")
    row = json.loads((tmp_path / "r.jsonl").read_text())
    assert row["delta"] == 1.0 and row["grad_delta"] is None


def test_unknown_column_rejected():
    with pytest.raises(KeyError):
        RunLog().append(iter=0, bogus=1)


def test_wall_clock_excluded_from_identity():
    a, b = RunLog(), RunLog()
    a.append(iter=0, delta=1.0, wall_ms=1.0)
    b.append(iter=0, delta=1.0, wall_ms=2.0)
    assert a.deterministic_rows() == b.deterministic_rows()
    assert a.to_csv() != b.to_csv()
