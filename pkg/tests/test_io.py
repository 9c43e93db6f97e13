import json
import os
import struct

import numpy as np
import pytest

from sctd import io as sio
from sctd.solver import SolverConfig, cp_als_baseline, sctd_decompose
from sctd.tensor_core import DenseTensor3, kruskal_to_dense


def test_st3_roundtrip(tmp_path, rng):
    for dims in ((1, 1, 1), (2, 3, 4), (5, 1, 7)):
        t = DenseTensor3(rng.standard_normal(dims))
        p = tmp_path / "t.st3"
        sio.write_st3(p, t)
        raw = p.read_bytes()
        assert raw[:4] == b"ST3\0"
        assert struct.unpack("<3Q", raw[4:28]) == dims
        assert len(raw) == 28 + 8 * int(np.prod(dims))
        assert sio.read_tensor(p) == t
    # first index fastest
    t = DenseTensor3(np.arange(8.0).reshape((2, 2, 2), order="F"))
    assert np.frombuffer(sio.st3_bytes(t), "<f8", offset=28).tolist() == list(range(8))


def test_st3_errors(tmp_path):
    p = tmp_path / "bad.st3"
    p.write_bytes(b"ST3\0" + struct.pack("<3Q", 2, 2, 2) + b"\0" * 8)
    with pytest.raises(sio.InputError, match="payload"):
        sio.read_tensor(p)
    p.write_bytes(b"ST3\0" + b"\0" * 5)
    with pytest.raises(sio.InputError, match="truncated"):
        sio.read_tensor(p)
    p.write_bytes(b"ST3\0" + struct.pack("<3Q", 0, 2, 2))
    with pytest.raises(sio.InputError):
        sio.read_tensor(p)
    with pytest.raises(sio.InputError):
        sio.read_tensor(tmp_path / "missing.st3")


def test_csv_quadruples(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("i1,i2,i3,value\n2,1,3,5.5\n1,1,1,-1\n\n")
    t = sio.read_tensor(p)
    assert t.dims == (2, 1, 3)
    assert t.data[1, 0, 2] == 5.5 and t.data[0, 0, 0] == -1
    assert np.count_nonzero(t.data) == 2
    for text, line in (("i,j,k,v\n1,1,1,1\n", 1), ("i1,i2,i3,value\n1,1,1\n", 2),
                       ("i1,i2,i3,value\n1,1,1,1\n0,1,1,2\n", 3), ("i1,i2,i3,value\n1,x,1,1\n", 2)):
        p.write_text(text)
        with pytest.raises(sio.InputError) as e:
            sio.read_tensor(p)
        assert e.value.line == line
        assert f":{line}:" in str(e.value)


def test_read_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n "a": 1,\n "b": \n}\n')
    with pytest.raises(sio.InputError) as e:
        sio.read_json(p)
    assert e.value.line == 4


def test_sctd_model_roundtrip(tmp_path, phantom, library_a):
    model, report = sctd_decompose(phantom.clean, library_a, SolverConfig(max_rank=2, restarts=2))
    doc = sio.model_json(model, phantom.clean.dims, library_a, {"stop_reason": report.stop_reason})
    p = tmp_path / "model.json"
    sio.write_json(p, doc, compact=True)
    loaded = sio.read_model(p)
    assert loaded.kind == "sctd"
    assert loaded.dims == (40, 40, 129)
    before = kruskal_to_dense(model, library_a).data
    assert np.abs(loaded.dense().data - before).max() < 1e-12
    assert np.abs(kruskal_to_dense(loaded.kruskal, library_a).data - before).max() < 1e-12
    restricted, lib = loaded.restricted()
    assert lib.size == int(np.count_nonzero(model.Z))
    assert np.abs(kruskal_to_dense(restricted, lib).data - before).max() < 1e-12
    assert loaded.doc["components"][0]["prototypes"][0]["kind"].startswith("windowed")
    assert loaded.doc["stop_reason"] == report.stop_reason


def test_cp_model_roundtrip(tmp_path, rng):
    X = rng.standard_normal((3, 4, 5))
    model = cp_als_baseline(X, 2, max_iters=20)
    p = tmp_path / "cp.json"
    sio.write_json(p, sio.model_json(model, X.shape))
    loaded = sio.read_model(p)
    assert loaded.kind == "cp" and loaded.kruskal is None
    assert loaded.restricted() == (None, None)
    dense = np.einsum("r,ir,jr,kr->ijk", model.weights, model.A, model.B, model.C)
    assert np.abs(loaded.dense().data - dense).max() < 1e-12


def test_model_parse_errors(tmp_path):
    with pytest.raises(sio.InputError):
        sio.parse_model({"format": "other"})
    with pytest.raises(sio.InputError):
        sio.parse_model({"format": "sctd-model", "kind": "cp", "dims": [2, 2, 2], "weights": [1.0],
                         "A": [[1.0, 0.0]], "B": [[1.0, 0.0]]})
    with pytest.raises(sio.InputError):
        sio.parse_model({"format": "sctd-model", "kind": "cp", "dims": [2, 2, 2], "weights": [1.0],
                         "A": [[1.0, 0.0, 0.0]], "B": [[1.0, 0.0]], "C": [[1.0, 0.0]]})


def test_json_floats_roundtrip():
    xs = [0.1, 1 / 3, 1e-300, 2.0 ** 0.5, -7.25]
    assert json.loads(sio.json_text(xs)) == xs
    assert json.loads(sio.json_text([float("inf"), float("nan")])) == ["inf", None]
    assert sio.fmt_csv(1 / 3) == "0.333333333333"
    assert sio.fmt_csv(True) == "1" and sio.fmt_csv(None) == ""


def test_atomic_write(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    sio.atomic_write(p, "one")
    sio.atomic_write(p, b"two")
    assert p.read_text() == "two"
    assert os.listdir(p.parent) == ["f.txt"]
    umask = os.umask(0)
    os.umask(umask)
    assert p.stat().st_mode & 0o777 == 0o666 & ~umask

    with pytest.raises(TypeError):
        sio.atomic_write(p, 3)
    assert p.read_text() == "two"
    assert os.listdir(p.parent) == ["f.txt"]


def test_csv_tables():
    header = "t,mode_1,mode_2"
    text = sio.time_modes_csv([0.0, 1.0], np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert text.splitlines() == [header, "0,1,2", "1,3,4"]
    assert sio.error_curve_csv([(1, 0.5, 0.25)]).splitlines() == ["rank,error_vs_clean,error_vs_noisy",
                                                                  "1,0.25,0.5"]
    rows = [{"a": 1, "b": 0.5}]
    assert sio.sweep_csv(rows, ("a", "b")) == "a,b\n1,0.5\n"
