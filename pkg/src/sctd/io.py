"""File formats: ST3 tensors, quadruple CSV, model/truth JSON and plot-ready CSVs.

Every writer goes through :func:`atomic_write`, so a crashed run never leaves a
half-written file behind. JSON floats use Python's shortest round-trip repr
(at most 17 significant digits); CSV floats use 12 significant digits.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dictionary import Dictionary, PrototypeSpec, make_time_axis
from .tensor_core import CPModel, DenseTensor3, KruskalModel, as_array, dense_from_factors

ST3_MAGIC = b"ST3\0"
CSV_HEADER = ("i1", "i2", "i3", "value")
MODEL_FORMAT = "sctd-model"

_UMASK = os.umask(0)
os.umask(_UMASK)


class InputError(ValueError):
    """Unreadable or inconsistent input file; ``line`` is 1-based when known."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt_csv(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt_csv(v) for v in row])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def json_text(obj, compact=False) -> str:
    if compact:
        return json.dumps(_json_safe(obj), separators=(",", ":"), allow_nan=False) + "\n"
    return json.dumps(_json_safe(obj), indent=1, allow_nan=False) + "\n"


def write_json(path, obj, compact=False) -> None:
    atomic_write(path, json_text(obj, compact))


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise InputError(path, e.strerror or str(e)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(path, f"column {e.colno}: {e.msg}", line=e.lineno) from None


# -- tensors -----------------------------------------------------------------

def st3_bytes(t) -> bytes:
    a = as_array(t)
    header = ST3_MAGIC + struct.pack("<3Q", *a.shape)
    return header + np.asarray(a, dtype="<f8").tobytes(order="F")


def write_st3(path, t) -> None:
    atomic_write(path, st3_bytes(t))


def _read_st3(path, raw: bytes) -> DenseTensor3:
    if len(raw) < 28:
        raise InputError(path, "truncated ST3 header")
    dims = struct.unpack("<3Q", raw[4:28])
    if min(dims) < 1:
        raise InputError(path, f"ST3 extents must be positive, got {dims}")
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != 28 + 8 * n:
        raise InputError(path, f"ST3 payload has {len(raw) - 28} bytes, expected {8 * n} for extents {dims}")
    values = np.frombuffer(raw, dtype="<f8", offset=28, count=n).astype(np.float64)
    return DenseTensor3.from_values(dims, values)


def _read_quadruples(path, text: str) -> DenseTensor3:
    lines = text.splitlines()
    head = [h.strip() for h in lines[0].split(",")] if lines else []
    if tuple(head) != CSV_HEADER:
        raise InputError(path, f"expected header {','.join(CSV_HEADER)}", line=1)
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise InputError(path, "expected 4 fields", line=lineno)
        try:
            idx = tuple(int(p) for p in parts[:3])
            value = float(parts[3])
        except ValueError:
            raise InputError(path, "malformed entry", line=lineno) from None
        if min(idx) < 1:
            raise InputError(path, "indices are 1-based", line=lineno)
        entries.append((idx, value))
    if not entries:
        raise InputError(path, "no entries")
    dims = tuple(max(e[0][m] for e in entries) for m in range(3))
    data = np.zeros(dims, dtype=np.float64, order="F")
    for (i, j, k), v in entries:
        data[i - 1, j - 1, k - 1] = v
    return DenseTensor3(data)


def read_tensor(path) -> DenseTensor3:
    """Read an ST3 file or a quadruple CSV (detected from the first bytes)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InputError(path, e.strerror or str(e)) from None
    if raw[:4] == ST3_MAGIC:
        return _read_st3(path, raw)
    try:
        text = raw.decode()
    except UnicodeDecodeError:
        raise InputError(path, "neither an ST3 file nor a text CSV") from None
    return _read_quadruples(path, text)


# -- models ------------------------------------------------------------------

def _columns(M) -> list:
    # factor matrices are stored column by column: M[r] is the r-th component
    return [list(map(float, col)) for col in np.asarray(M, dtype=np.float64).T]


def _matrix(cols, rows, name, path) -> np.ndarray:
    arr = np.asarray(cols, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((rows, 0))
    if arr.ndim != 2 or arr.shape[1] != rows:
        raise InputError(path, f"factor {name} has the wrong shape")
    return arr.T.copy()


def model_json(model, dims, dictionary=None, extra=None) -> dict:
    """JSON document for a :class:`KruskalModel` (needs ``dictionary``) or a :class:`CPModel`.

    Both variants store the dense temporal factors under ``C``; the
    shape-constrained variant adds ``Z``, the library id and the selected
    prototypes of every component.
    """
    C = model.temporal(dictionary)
    doc = {
        "format": MODEL_FORMAT,
        "kind": "sctd" if isinstance(model, KruskalModel) else "cp",
        "dims": list(map(int, dims)),
        "rank": model.rank,
        "weights": list(map(float, model.weights)),
        "A": _columns(model.A),
        "B": _columns(model.B),
        "C": _columns(C),
    }
    if isinstance(model, KruskalModel):
        t = dictionary.time_axis
        doc["dictionary_id"] = dictionary.id
        doc["library_size"] = dictionary.size
        doc["time_axis"] = {"start": float(t[0]), "step": float(t[1] - t[0]) if t.size > 1 else 1.0,
                            "count": int(t.size)}
        doc["Z"] = _columns(model.Z)
        doc["components"] = [
            {"prototypes": [dict(index=int(i), **dictionary.specs[i].to_json(model.Z[i, r]))
                            for i in sorted(np.flatnonzero(model.Z[:, r]),
                                            key=lambda i: (-abs(model.Z[i, r]), i))]}
            for r in range(model.rank)
        ]
    if extra:
        doc.update(extra)
    return doc


@dataclass(frozen=True, eq=False)
class LoadedModel:
    """A model read back from JSON; ``cp`` is always a densifiable CPModel."""

    kind: str
    dims: tuple
    cp: CPModel
    kruskal: KruskalModel | None
    doc: dict

    def dense(self) -> DenseTensor3:
        return dense_from_factors(self.cp.weights, self.cp.A, self.cp.B, self.cp.C)

    def restricted(self):
        """The model re-expressed over a library of just its selected prototypes.

        Returns ``(KruskalModel, Dictionary)``, or ``(None, None)`` for CP models
        and models without any selected prototype.
        """
        if self.kruskal is None:
            return None, None
        specs = {}
        for comp in self.doc["components"]:
            for p in comp["prototypes"]:
                specs[int(p["index"])] = PrototypeSpec.from_json(p)
        if not specs:
            return None, None
        used = sorted(specs)
        ta = self.doc["time_axis"]
        lib = Dictionary.from_specs([specs[i] for i in used],
                                    make_time_axis(ta["start"], ta["step"], ta["count"]))
        model = KruskalModel(self.kruskal.weights, self.kruskal.A, self.kruskal.B,
                             self.kruskal.Z[used, :], lib.id)
        return model, lib


def parse_model(doc: dict, path="<model>") -> LoadedModel:
    if doc.get("format") != MODEL_FORMAT or doc.get("kind") not in ("sctd", "cp"):
        raise InputError(path, f"not an {MODEL_FORMAT} document")
    try:
        I1, I2, I3 = (int(d) for d in doc["dims"])
        w = np.asarray(doc["weights"], dtype=np.float64)
        A = _matrix(doc["A"], I1, "A", path)
        B = _matrix(doc["B"], I2, "B", path)
        C = _matrix(doc["C"], I3, "C", path)
        cp = CPModel(w, A, B, C)
        kruskal = None
        if doc["kind"] == "sctd":
            Z = _matrix(doc["Z"], int(doc["library_size"]), "Z", path)
            kruskal = KruskalModel(w, A, B, Z, doc.get("dictionary_id"))
    except (KeyError, TypeError) as e:
        raise InputError(path, f"missing or malformed field {e}") from None
    except ValueError as e:
        raise InputError(path, str(e)) from None
    return LoadedModel(doc["kind"], (I1, I2, I3), cp, kruskal, doc)


def read_model(path) -> LoadedModel:
    return parse_model(read_json(path), path)


# -- plot-ready tables -------------------------------------------------------

REPORT_HEADER = ("rank", "lambda", "tau", "bic", "nnz", "residual_norm", "relative_residual")


def report_csv(report) -> str:
    return csv_text(REPORT_HEADER, [(r.rank_index, r.weight, r.tau, r.bic, r.nnz, r.residual_norm,
                                     r.relative_residual) for r in report.rounds])


def bic_trace_csv(report) -> str:
    rows = []
    for r, trace in enumerate(report.tau_traces, start=1):
        rows.extend((r, tau, b, k) for tau, b, k in trace.evaluated)
    return csv_text(("round", "tau", "bic", "nnz"), rows)


def time_modes_csv(time_axis, C) -> str:
    C = np.asarray(C, dtype=np.float64)
    header = ["t"] + [f"mode_{r + 1}" for r in range(C.shape[1])]
    return csv_text(header, ([t, *C[k]] for k, t in enumerate(time_axis)))


def error_curve_csv(curve) -> str:
    return csv_text(("rank", "error_vs_clean", "error_vs_noisy"), ((k, ec, ev) for k, ev, ec in curve))


def sweep_csv(rows, header) -> str:
    return csv_text(header, ([row[h] for h in header] for row in rows))
