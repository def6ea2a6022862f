from __future__ import annotations

import csv
import struct

import numpy as np
import pytest

import zitterwalk as zw
from zitterwalk import io


def test_zwlk_round_trip(tmp_path):
    grid = zw.make_grid(1000, 2.0)
    ens = zw.simulate_ensemble(zw.builtin_field("ou_nelson", omega=1.0), 0.3, grid, 7, seed=-5)
    path = io.write_ensemble(ens, tmp_path / "e.zwlk")
    back = io.read_ensemble(path)
    assert back.grid == grid and back.seed == -5 and back.stride == 1
    assert np.array_equal(back.values, ens.values)
    assert np.array_equal(back.path_ids, ens.path_ids)
    assert zw.heisenberg_ensemble(back, 0.1, 10).to_dict() == zw.heisenberg_ensemble(ens, 0.1, 10).to_dict()


def test_zwlk_layout_is_little_endian_and_time_major(tmp_path):
    grid = zw.make_grid(4, 1.0)
    values = np.arange(10, dtype=np.float64).reshape(5, 2)
    ens = zw.Ensemble.from_values(values, grid, path_ids=[10, 20], seed=3)
    raw = io.write_ensemble(ens, tmp_path / "x.zwlk").read_bytes()
    assert raw[:4] == b"ZWLK"
    version, flags, rows, paths, steps, stride = struct.unpack_from("<HHQQQQ", raw, 4)
    assert (version, rows, paths, steps, stride) == (1, 5, 2, 4, 1)
    assert flags == 2  # seed present, Rademacher noise
    dt, horizon, seed = struct.unpack_from("<ddQ", raw, 40)
    assert (dt, horizon, seed) == (0.25, 1.0, 3)
    assert struct.unpack_from("<2q", raw, 64) == (10, 20)
    assert np.array_equal(np.frombuffer(raw, "<f8", offset=80), values.ravel())
    assert len(raw) == 80 + 80


def test_zwlk_strided_write_from_lazy_ensemble(tmp_path):
    grid = zw.make_grid(10_000)
    lazy = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 3, seed=1, storage="lazy")
    io.write_ensemble(lazy, tmp_path / "t.zwlk", stride=100)
    back = io.read_ensemble(tmp_path / "t.zwlk")
    dense = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 3, seed=1, storage="dense")
    assert back.stride == 100
    assert np.array_equal(back.values, dense.values[::100])
    with pytest.raises(zw.ConfigurationError):
        io.write_ensemble(lazy, tmp_path / "bad.zwlk", stride=7)


def test_zwlk_rejects_damaged_files(tmp_path):
    grid = zw.make_grid(10)
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 2, seed=1)
    good = io.write_ensemble(ens, tmp_path / "g.zwlk").read_bytes()
    (tmp_path / "magic.zwlk").write_bytes(b"XXXX" + good[4:])
    (tmp_path / "short.zwlk").write_bytes(good[:-8])
    (tmp_path / "tiny.zwlk").write_bytes(good[:10])
    for name in ("magic", "short", "tiny"):
        with pytest.raises(zw.ConfigurationError):
            io.read_ensemble(tmp_path / f"{name}.zwlk")


def test_csv_export(tmp_path):
    grid = zw.make_grid(3, 3.0)
    ens = zw.Ensemble.from_values(np.array([[0.0, 5.0], [1.0, 4.0], [2.0, 3.0], [3.0, 2.5]]), grid,
                                  path_ids=[7, 8])
    io.write_ensemble_csv(ens, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["path_id", "t", "x"]
    assert rows[1] == ["7", "0.0", "0.0"]
    assert rows[-1] == ["8", "3.0", "2.5"]
    assert len(rows) == 1 + 8


def test_json_cleaning_and_csv_cells(tmp_path):
    doc = {"a": np.float64(1.5), "b": np.int64(3), "c": [np.nan, np.inf, 2.0], "d": np.array([1, 2]),
           "e": np.bool_(True)}
    io.write_json(tmp_path / "r.json", doc)
    import json
    back = json.loads((tmp_path / "r.json").read_text())
    assert back == {"a": 1.5, "b": 3, "c": [None, None, 2.0], "d": [1, 2], "e": True}
    io.write_csv(tmp_path / "r.csv", ["x", "y"], [(np.nan, None), (0.1, 2)])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["x,y", ",", "0.1,2"]
