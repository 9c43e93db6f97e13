"""Over-complete temporal libraries.

Every column of a :class:`Dictionary` is a unit-norm sample of an analytic
prototype (windowed sinusoid, Gaussian bump or wrapped cosine) and carries the
:class:`PrototypeSpec` that regenerates it, so fitted time factors can be
reported as formulas.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("windowed_sine", "windowed_cosine", "gaussian", "wrapped_cosine")

# Names of each kind's parameters, in PrototypeSpec.params order.
PARAM_NAMES = {
    "windowed_sine": ("frequency", "window_center", "window_width"),
    "windowed_cosine": ("frequency", "window_center", "window_width"),
    "gaussian": ("mu", "sigma"),
    "wrapped_cosine": ("period_count", "shift"),
}


@dataclass(frozen=True)
class PrototypeSpec:
    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prototype kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != len(PARAM_NAMES[self.kind]):
            raise ValueError(f"{self.kind} takes parameters {PARAM_NAMES[self.kind]}")
        object.__setattr__(self, "params", params)
        p = self.named()
        if self.kind.startswith("windowed"):
            if p["window_width"] <= 0:
                raise ValueError("window_width must be positive")
            if p["frequency"] < 0:
                raise ValueError("frequency must be nonnegative")
        elif self.kind == "gaussian":
            if p["sigma"] <= 0:
                raise ValueError("sigma must be positive")
        elif p["period_count"] < 0:
            raise ValueError("period_count must be nonnegative")

    def named(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES[self.kind], self.params))

    def to_json(self, coefficient=None) -> dict:
        out = {"kind": self.kind, "params": self.named()}
        if coefficient is not None:
            out["coefficient"] = float(coefficient)
        return out

    @classmethod
    def from_json(cls, obj) -> "PrototypeSpec":
        names = PARAM_NAMES[obj["kind"]]
        return cls(obj["kind"], tuple(obj["params"][n] for n in names))


def make_time_axis(start=0.0, step=1.0, count=129) -> np.ndarray:
    if count < 1 or step <= 0:
        raise ValueError("time axis needs count >= 1 and step > 0")
    return float(start) + float(step) * np.arange(int(count), dtype=np.float64)


def _span(time_axis: np.ndarray) -> float:
    # Length of one wrap: the sample after the last one coincides with the first.
    if time_axis.size == 1:
        return 1.0
    return float(time_axis[-1] - time_axis[0]) + float(time_axis[1] - time_axis[0])


def sample_prototype(spec: PrototypeSpec, time_axis) -> np.ndarray:
    """Raw (unnormalized) samples of ``spec`` on ``time_axis``."""
    t = np.asarray(time_axis, dtype=np.float64)
    p = spec.named()
    if spec.kind in ("windowed_sine", "windowed_cosine"):
        lo = p["window_center"] - 0.5 * p["window_width"]
        hi = p["window_center"] + 0.5 * p["window_width"]
        wave = np.sin if spec.kind == "windowed_sine" else np.cos
        return np.where((t >= lo) & (t <= hi), wave(p["frequency"] * t), 0.0)
    if spec.kind == "gaussian":
        return np.exp(-((t - p["mu"]) ** 2) / (2.0 * p["sigma"] ** 2))
    # wrapped cosine: one period of cos centred on `shift`, wrapped around the axis
    k = p["period_count"]
    if k == 0:
        return np.ones_like(t)
    span = _span(t)
    d = np.mod(t - p["shift"] + 0.5 * span, span) - 0.5 * span
    half_period = 0.5 * span / k
    return np.where(np.abs(d) <= half_period, np.cos(2.0 * np.pi * k * d / span), 0.0)


def prototype_column(spec: PrototypeSpec, time_axis):
    """Unit-normalized column for ``spec``, or None if it samples to all zeros."""
    raw = sample_prototype(spec, time_axis)
    norm = np.sqrt(np.sum(raw * raw))
    if norm == 0.0:
        return None
    return raw / norm


def _dictionary_id(matrix: np.ndarray, specs, time_axis) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(time_axis, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    h.update(json.dumps([[s.kind, list(s.params)] for s in specs]).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Dictionary:
    """I3 x P library of unit-norm prototypes with their specs."""

    matrix: np.ndarray
    specs: tuple[PrototypeSpec, ...]
    time_axis: np.ndarray
    id: str = field(default="")
    dropped: int = 0

    def __post_init__(self):
        M = np.ascontiguousarray(self.matrix, dtype=np.float64)
        t = np.array(self.time_axis, dtype=np.float64)
        specs = tuple(self.specs)
        if M.ndim != 2 or M.shape[0] != t.size or M.shape[1] != len(specs):
            raise ValueError(f"matrix {M.shape} does not match {t.size} samples x {len(specs)} specs")
        if M.shape[1] == 0:
            raise ValueError("a dictionary needs at least one prototype")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("time_axis must be strictly increasing")
        norms = np.linalg.norm(M, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("dictionary columns must have unit norm")
        M.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "time_axis", t)
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "id", _dictionary_id(M, specs, t))

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_specs(cls, specs, time_axis) -> "Dictionary":
        """Sample, normalize and keep every spec whose column is not all zeros."""
        t = np.asarray(time_axis, dtype=np.float64)
        cols, kept = [], []
        for spec in specs:
            col = prototype_column(spec, t)
            if col is not None:
                cols.append(col)
                kept.append(spec)
        dropped = len(specs) - len(kept)
        if dropped:
            logger.info("dropped %d all-zero prototypes", dropped)
        if not cols:
            raise ValueError("every prototype sampled to zero on this time axis")
        return cls(np.column_stack(cols), tuple(kept), t, dropped=dropped)


def _nonempty(name, values):
    values = [float(v) for v in np.atleast_1d(values)]
    if not values:
        raise ValueError(f"parameter grid {name!r} is empty")
    return values


def build_windowed_sinusoids(time_axis, frequencies, centers, widths,
                             include_sine=True, include_cosine=True) -> Dictionary:
    """sin(wt) / cos(wt) inside the closed window [center - width/2, center + width/2]."""
    kinds = [k for k, on in (("windowed_sine", include_sine), ("windowed_cosine", include_cosine)) if on]
    if not kinds:
        raise ValueError("at least one of include_sine / include_cosine is required")
    grids = [_nonempty(n, g) for n, g in
             (("frequencies", frequencies), ("centers", centers), ("widths", widths))]
    specs = [PrototypeSpec(kind, (w, c, d)) for kind, w, c, d in product(kinds, *grids)]
    return Dictionary.from_specs(specs, time_axis)


def build_gaussians(time_axis, mus, sigmas) -> Dictionary:
    mus = _nonempty("mus", mus)
    sigmas = _nonempty("sigmas", sigmas)
    if any(s <= 0 for s in sigmas):
        raise ValueError("sigma must be positive")
    specs = [PrototypeSpec("gaussian", (m, s)) for m, s in product(mus, sigmas)]
    return Dictionary.from_specs(specs, time_axis)


def build_wrapped_cosines(time_axis, period_counts, shifts) -> Dictionary:
    """One period of a cosine, centred at ``shift`` and wrapped around the axis.

    With ``period_count = k`` the period is span/k; k = 1 is a full-interval
    cosine, k = 0 the constant column.
    """
    ks = _nonempty("period_counts", period_counts)
    shifts = _nonempty("shifts", shifts)
    specs = [PrototypeSpec("wrapped_cosine", (k, s)) for k, s in product(ks, shifts)]
    return Dictionary.from_specs(specs, time_axis)


def concat(dicts) -> Dictionary:
    dicts = list(dicts)
    if not dicts:
        raise ValueError("concat needs at least one dictionary")
    t = dicts[0].time_axis
    for d in dicts[1:]:
        if d.time_axis.shape != t.shape or not np.array_equal(d.time_axis, t):
            raise ValueError("dictionaries have different time axes")
    return Dictionary(np.hstack([d.matrix for d in dicts]),
                      tuple(s for d in dicts for s in d.specs), t,
                      dropped=sum(d.dropped for d in dicts))


# -- configuration files -----------------------------------------------------

def _grid(value):
    """Expand a grid given as a list, a scalar or a {start, stop, count} range."""
    if isinstance(value, dict):
        return list(np.linspace(float(value["start"]), float(value["stop"]), int(value["count"])))
    return [float(v) for v in np.atleast_1d(value)]


def time_axis_from_config(obj) -> np.ndarray:
    return make_time_axis(obj.get("start", 0.0), obj.get("step", 1.0), obj["count"])


def build_family(family: dict, time_axis) -> Dictionary:
    kind = family.get("kind")
    if kind in ("windowed_sinusoid", "windowed_sine", "windowed_cosine"):
        return build_windowed_sinusoids(
            time_axis, _grid(family["frequencies"]), _grid(family["centers"]), _grid(family["widths"]),
            include_sine=family.get("include_sine", kind != "windowed_cosine"),
            include_cosine=family.get("include_cosine", kind != "windowed_sine"))
    if kind == "gaussian":
        return build_gaussians(time_axis, _grid(family["mus"]), _grid(family["sigmas"]))
    if kind == "wrapped_cosine":
        return build_wrapped_cosines(time_axis, _grid(family["period_counts"]), _grid(family["shifts"]))
    raise ValueError(f"unknown library family kind {kind!r}")


def dictionary_from_config(config: dict, time_axis=None) -> Dictionary:
    """Build a library from ``{"time_axis": {...}, "families": [...]}``.

    ``time_axis`` overrides the config's own axis when given.
    """
    if time_axis is None:
        if "time_axis" not in config:
            raise ValueError("library config needs a time_axis")
        time_axis = time_axis_from_config(config["time_axis"])
    families = config.get("families") or []
    if not families:
        raise ValueError("library config has no families")
    return concat(build_family(f, time_axis) for f in families)
