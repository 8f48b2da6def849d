from __future__ import annotations

import math

import numpy as np

from dividend_ratchet.io import fmt, manifest, num, read_csv, read_json, write_csv, write_json


def test_float_roundtrip(tmp_path):
    vals = [0.1, 1 / 3, 347.39530953340795, 1e-300, -2.5e17, math.inf]
    write_csv(tmp_path / "t.csv", ["v"], [(v,) for v in vals])
    back = [num(r["v"]) for r in read_csv(tmp_path / "t.csv")]
    assert back == vals


def test_fmt_spellings():
    assert fmt(math.inf) == "inf" and fmt(-math.inf) == "-inf" and fmt(math.nan) == "nan"
    assert fmt(True) == "true" and fmt(np.int64(3)) == "3" and fmt(np.float64(0.5)) == "0.5"


def test_json_handles_numpy_and_nonfinite(tmp_path):
    write_json(tmp_path / "a.json", {"x": np.float64(1.5), "y": math.inf, "z": np.arange(2), "w": (1, 2)})
    d = read_json(tmp_path / "a.json")
    assert d == {"x": 1.5, "y": "inf", "z": [0, 1], "w": [1, 2]}


def test_atomic_write_leaves_no_temp(tmp_path):
    write_json(tmp_path / "sub" / "a.json", {"k": 1})
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.json"]


def test_manifest_has_no_clock():
    m = manifest("solve", {"model": {}}, seed=4)
    assert m["seed"] == 4 and "numpy" in m["environment"]
    assert not any("time" in k for k in m)
