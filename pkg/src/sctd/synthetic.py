"""Planted rank-3 phantom, spectral noise model and evaluation metrics."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .dictionary import Dictionary, PrototypeSpec, dictionary_from_config, prototype_column
from .rng import derive_rng
from .solver import SolverConfig, sctd_decompose
from .tensor_core import (
    CPModel,
    DenseTensor3,
    KruskalModel,
    as_array,
    kruskal_to_dense,
)

# Temporal modes of the phantom: true dynamics with frequencies pi/32, pi/8, pi/4.
DEFAULT_MODES = (
    {"kind": "windowed_cosine", "frequency": math.pi / 32, "window_center": 64.0, "window_width": 128.0},
    {"kind": "windowed_sine", "frequency": math.pi / 8, "window_center": 31.75, "window_width": 63.5},
    {"kind": "windowed_sine", "frequency": math.pi / 4, "window_center": 81.45, "window_width": 33.3},
)


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry of the planted model.

    Spatial modes are separable Gaussian bumps: component r has x-profile
    exp(-(x - cx)^2 / 2w^2) along mode 1 and the same shape around cy along
    mode 2 (0-based pixel coordinates). Weights are rescaled so that
    ``||X||_F^2 = energy_per_fiber * I1 * I2``; with the default value,
    sigma = 3 spectral noise gives an SNR of about 0.137.
    """

    spatial_dims: tuple = (40, 40)
    time_axis: dict = field(default_factory=lambda: {"start": 0.0, "step": 1.0, "count": 129})
    modes: tuple = DEFAULT_MODES
    centers: tuple = ((10.0, 12.0), (28.0, 14.0), (20.0, 30.0))
    widths: tuple = (4.0, 4.0, 4.0)
    relative_weights: tuple = (1.2, 1.0, 0.8)
    energy_per_fiber: float = 1.2366

    def to_json(self) -> dict:
        return {
            "spatial_dims": list(self.spatial_dims),
            "time_axis": dict(self.time_axis),
            "modes": [dict(m) for m in self.modes],
            "centers": [list(c) for c in self.centers],
            "widths": list(self.widths),
            "relative_weights": list(self.relative_weights),
            "energy_per_fiber": self.energy_per_fiber,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomConfig":
        obj = dict(obj or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown phantom fields: {sorted(unknown)}")
        for key in ("spatial_dims", "widths", "relative_weights"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "centers" in obj:
            obj["centers"] = tuple(tuple(c) for c in obj["centers"])
        if "modes" in obj:
            obj["modes"] = tuple(dict(m) for m in obj["modes"])
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class PlantedModel:
    model: KruskalModel
    dictionary: Dictionary
    clean: DenseTensor3
    specs: tuple

    @property
    def temporal(self) -> np.ndarray:
        return self.dictionary.matrix @ self.model.Z


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass
class EvalReport:
    relative_error_clean: float | None
    relative_error_noisy: float | None
    factor_accuracy: float | None
    prototypes_chosen: int
    top_mode_frequencies: list
    snr: float | None

    def to_json(self) -> dict:
        def num(x):
            if x is None or (isinstance(x, float) and math.isnan(x)):
                return None
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            return x
        return {
            "relative_error_clean": num(self.relative_error_clean),
            "relative_error_noisy": num(self.relative_error_noisy),
            "factor_accuracy": num(self.factor_accuracy),
            "prototypes_chosen": self.prototypes_chosen,
            "top_mode_frequencies": [num(f) for f in self.top_mode_frequencies],
            "snr": num(self.snr),
        }


def _bump(n, center, width):
    x = np.arange(n, dtype=np.float64)
    v = np.exp(-((x - center) ** 2) / (2.0 * width ** 2))
    return v / np.linalg.norm(v)


def make_phantom(spatial_dims=None, time_axis=None, config: PhantomConfig | None = None) -> PlantedModel:
    """Rank-3 planted model: separable spatial bumps times windowed sinusoids."""
    config = config or PhantomConfig()
    I1, I2 = spatial_dims if spatial_dims is not None else config.spatial_dims
    if time_axis is None:
        ta = config.time_axis
        time_axis = float(ta.get("start", 0.0)) + float(ta.get("step", 1.0)) * np.arange(int(ta["count"]))
    t = np.asarray(time_axis, dtype=np.float64)
    specs = []
    for m in config.modes:
        spec = PrototypeSpec(m["kind"], (m["frequency"], m["window_center"], m["window_width"]))
        hi = m["window_center"] + 0.5 * m["window_width"]
        if t[0] > m["window_center"] - 0.5 * m["window_width"] + 1e-9 or t[-1] < hi - 1e-9:
            raise ValueError(f"time axis [{t[0]}, {t[-1]}] does not cover the window of {m}")
        if prototype_column(spec, t) is None:
            raise ValueError(f"mode {m} samples to zero")
        specs.append(spec)
    R = len(specs)
    if len(config.centers) != R or len(config.widths) != R or len(config.relative_weights) != R:
        raise ValueError("centers, widths and relative_weights need one entry per mode")
    dictionary = Dictionary.from_specs(specs, t)
    A = np.column_stack([_bump(I1, c[0], w) for c, w in zip(config.centers, config.widths)])
    B = np.column_stack([_bump(I2, c[1], w) for c, w in zip(config.centers, config.widths)])
    Z = np.eye(R)
    w = np.asarray(config.relative_weights, dtype=np.float64)
    unit = kruskal_to_dense(KruskalModel(w, A, B, Z, dictionary.id), dictionary)
    scale = math.sqrt(config.energy_per_fiber * I1 * I2) / float(np.sqrt(np.sum(unit.data ** 2)))
    model = KruskalModel(w * scale, A, B, Z, dictionary.id)
    return PlantedModel(model, dictionary, kruskal_to_dense(model, dictionary), tuple(specs))


def _hermitian_noise(rng, shape):
    """Complex standard normals along the last axis with w[n-k] = conj(w[k])."""
    n = shape[-1]
    w = np.zeros(shape, dtype=np.complex128)
    w[..., 0] = rng.standard_normal(shape[:-1])
    m = (n - 1) // 2
    if m:
        half = (rng.standard_normal(shape[:-1] + (m,)) + 1j * rng.standard_normal(shape[:-1] + (m,))) / math.sqrt(2.0)
        w[..., 1:m + 1] = half
        w[..., n - m:] = np.conj(half[..., ::-1])
    if n % 2 == 0:
        w[..., n // 2] = rng.standard_normal(shape[:-1])
    return w


def add_spectral_noise(series, spec: NoiseSpec, rng=None) -> np.ndarray:
    """ifft(fft(x) + sigma * w) with Hermitian white noise w, real part of the result.

    Operates along the last axis, so a 3-way array gets independent noise in
    every (i1, i2) fiber.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("series must have at least one sample")
    if rng is None:
        rng = derive_rng(spec.seed, "spectral_noise")
    spectrum = np.fft.fft(x, axis=-1)
    if spec.sigma > 0:
        spectrum = spectrum + spec.sigma * _hermitian_noise(rng, x.shape)
    return np.fft.ifft(spectrum, axis=-1).real


def add_noise(X, spec: NoiseSpec) -> DenseTensor3:
    """Tensor-level wrapper of :func:`add_spectral_noise` along the time mode."""
    if spec.sigma == 0:
        return X if isinstance(X, DenseTensor3) else DenseTensor3(X)
    return DenseTensor3(add_spectral_noise(as_array(X), spec))


def snr(signal, noise) -> float:
    s = as_array(signal)
    n = as_array(noise, s.shape)
    nn = float(np.sum(n * n))
    if nn == 0.0:
        return math.inf
    return float(np.sum(s * s)) / nn


def relative_error(X_ref, model_dense) -> float:
    ref = as_array(X_ref)
    m = as_array(model_dense, ref.shape)
    den = float(np.sqrt(np.sum(ref * ref)))
    if den == 0.0:
        raise ValueError("reference tensor is zero")
    return float(np.sqrt(np.sum((ref - m) ** 2))) / den


def _abs_cos(x, y):
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0
    return float(abs(x @ y) / (nx * ny))


def _match(truth_C, fit_C):
    """Greedy matching of fitted to true components by |cos| of the time factors."""
    R, K = truth_C.shape[1], fit_C.shape[1]
    S = np.array([[_abs_cos(fit_C[:, k], truth_C[:, r]) for r in range(R)] for k in range(K)])
    pairs = []
    free_k, free_r = set(range(K)), set(range(R))
    while free_k and free_r:
        k, r = max(((k, r) for k in free_k for r in free_r), key=lambda kr: (S[kr], -kr[0], -kr[1]))
        pairs.append((k, r))
        free_k.discard(k)
        free_r.discard(r)
    return pairs


def factor_accuracy(truth: PlantedModel, fitted, dictionary=None) -> float:
    """Mean |cosine| over matched components and over the (a, b, c) factors.

    Fitted components beyond the true rank are dropped (deflation order);
    unmatched true components score 0.
    """
    R = truth.model.rank
    fitted = fitted.truncate(R)
    if fitted.rank == 0 or R == 0:
        return 0.0
    C_true = truth.temporal
    C_fit = fitted.temporal(dictionary)
    total = 0.0
    for k, r in _match(C_true, C_fit):
        total += (_abs_cos(fitted.A[:, k], truth.model.A[:, r])
                  + _abs_cos(fitted.B[:, k], truth.model.B[:, r])
                  + _abs_cos(C_fit[:, k], C_true[:, r])) / 3.0
    return min(1.0, total / R)


def top_mode(z, dictionary):
    """(index, spec) of the prototype with the largest |coefficient|, or None."""
    z = np.asarray(z, dtype=np.float64)
    if not np.any(z):
        return None
    i = int(np.argmax(np.abs(z)))
    return i, dictionary.specs[i]


def top_mode_frequency(z, dictionary):
    """``(kind, value)`` for the top prototype of ``z``; None when z = 0.

    value is the angular frequency for windowed sinusoids, 2 pi k / span for
    wrapped cosines, and the centre mu for Gaussians.
    """
    top = top_mode(z, dictionary)
    if top is None:
        return None
    _, spec = top
    p = spec.named()
    if spec.kind.startswith("windowed"):
        return spec.kind, p["frequency"]
    if spec.kind == "wrapped_cosine":
        t = dictionary.time_axis
        span = float(t[-1] - t[0]) + (float(t[1] - t[0]) if t.size > 1 else 1.0)
        return spec.kind, 2 * math.pi * p["period_count"] / span
    return spec.kind, p["mu"]


def reconstruction_error_curve(X, model, dictionary=None, clean=None, upto=None):
    """[(k, error vs X, error vs clean or None)] for truncations k = 1..R.

    With ``upto`` > R the curve continues flat to k = upto: a deflation that
    stopped early adds nothing beyond its last component.
    """
    Xa = as_array(X)
    clean_a = as_array(clean, Xa.shape) if clean is not None else None
    C = model.temporal(dictionary)
    approx = np.zeros_like(Xa)
    out = []
    for k in range(max(model.rank, upto or 0)):
        if k < model.rank:
            approx += model.weights[k] * np.einsum("i,j,k->ijk", model.A[:, k], model.B[:, k], C[:, k])
        ev = relative_error(Xa, approx)
        ec = relative_error(clean_a, approx) if clean_a is not None else None
        out.append((k + 1, ev, ec))
    return out


def evaluate(model, dictionary, planted: PlantedModel | None = None, noisy=None,
             reference=None) -> EvalReport:
    """Table-style metrics of a fitted model against ground truth and/or data.

    ``reference`` stands in for the clean tensor when no planted model is known.
    Errors are None for a rank-0 model.
    """
    dense = kruskal_to_dense(model, dictionary) if model.rank else None
    err_clean = err_noisy = acc = snr_val = None
    if planted is not None:
        reference = planted.clean
        acc = factor_accuracy(planted, model, dictionary) if model.rank else None
    if reference is not None and dense is not None:
        err_clean = relative_error(reference, dense)
    if noisy is not None:
        err_noisy = relative_error(noisy, dense) if dense is not None else None
        if planted is not None:
            snr_val = snr(planted.clean, as_array(noisy) - planted.clean.data)
    tops, nnz = [], 0
    if isinstance(model, KruskalModel):
        nnz = int(np.count_nonzero(np.abs(model.Z) > 1e-12))
        for r in range(model.rank):
            tm = top_mode_frequency(model.Z[:, r], dictionary)
            tops.append(None if tm is None else tm[1])
    return EvalReport(err_clean, err_noisy, acc, nnz, tops, snr_val)


# -- experiment pipeline and sweeps -------------------------------------------

SWEEP_HEADER = ("param", "relative_error_clean", "relative_error_noisy", "factor_accuracy",
                "nnz_total", "snr", "seed")


def run_pipeline(phantom: PlantedModel, dictionary, sigma, seed, solver_config: SolverConfig,
                 tau_policy=None):
    """Noise -> decomposition -> metrics. Returns (model, report, EvalReport, noisy)."""
    noisy = add_noise(phantom.clean, NoiseSpec(sigma, seed))
    config = SolverConfig(**{**solver_config.to_json(), "seed": seed})
    model, report = sctd_decompose(noisy, dictionary, config, tau_policy)
    ev = evaluate(model, dictionary, phantom, noisy)
    return model, report, ev, noisy


def _scaled_grid_counts(config: dict, factor: float) -> dict:
    cfg = copy.deepcopy(config)
    for fam in cfg["families"]:
        ranges = [k for k, v in fam.items()
                  if isinstance(v, dict) and "count" in v and not v.get("fixed", False)]
        if not ranges:
            continue
        per = factor ** (1.0 / len(ranges))
        for k in ranges:
            fam[k]["count"] = max(1, int(round(fam[k]["count"] * per)))
    return cfg


def _estimated_size(config: dict) -> int:
    total = 0
    for fam in config["families"]:
        sizes = [v["count"] if isinstance(v, dict) else len(np.atleast_1d(v))
                 for k, v in fam.items() if k not in ("kind", "include_sine", "include_cosine")]
        n = int(np.prod(sizes)) if sizes else 0
        if fam["kind"] == "windowed_sinusoid":
            n *= int(fam.get("include_sine", True)) + int(fam.get("include_cosine", True))
        total += n
    return total


def library_config_for_size(config: dict, target_size: int) -> dict:
    """Scale the ``{start, stop, count}`` ranges of a library config towards ``target_size``.

    Ranges marked ``"fixed": true`` keep their count.
    """
    base = _estimated_size(config)
    if base == 0:
        raise ValueError("library config has no prototypes")
    lo, hi = 1e-3, 1e3
    best = config
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        cand = _scaled_grid_counts(config, mid * target_size / base)
        n = _estimated_size(cand)
        if abs(n - target_size) < abs(_estimated_size(best) - target_size):
            best = cand
        if n < target_size:
            lo = mid
        else:
            hi = mid
    return best


def run_sweep(kind, grid, base_config: dict, threads=1):
    """One pipeline run per grid point; rows follow :data:`SWEEP_HEADER`.

    ``kind`` is ``"noise"`` (grid of sigma values) or ``"library_size"`` (grid
    of target library sizes). Point i uses seed ``base_seed ^ i``.
    """
    from .solver import _run_parallel
    from .model_selection import TauPolicy

    if kind == "library":
        kind = "library_size"
    if kind not in ("noise", "library_size"):
        raise ValueError(f"unknown sweep kind {kind!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    phantom = make_phantom(config=PhantomConfig.from_json(base_config.get("phantom", {})))
    solver_cfg = SolverConfig.from_json(base_config.get("solver", {}))
    policy = TauPolicy.from_json(base_config.get("tau_policy", {}))
    base_seed = int(base_config.get("seed", 0))
    lib_cfg = base_config["library"]
    shared = None
    if kind == "noise":
        if base_config.get("library_size"):
            lib_cfg = library_config_for_size(lib_cfg, int(base_config["library_size"]))
        shared = dictionary_from_config(lib_cfg, phantom.dictionary.time_axis)

    def point(item):
        i, value = item
        seed = base_seed ^ i
        if kind == "noise":
            dictionary, sigma = shared, float(value)
        else:
            sized = library_config_for_size(lib_cfg, int(value))
            dictionary = dictionary_from_config(sized, phantom.dictionary.time_axis)
            sigma = float(base_config.get("sigma", 0.0))
        model, report, ev, _ = run_pipeline(phantom, dictionary, sigma, seed, solver_cfg, policy)
        return {
            "param": float(value),
            "relative_error_clean": ev.relative_error_clean,
            "relative_error_noisy": ev.relative_error_noisy,
            "factor_accuracy": ev.factor_accuracy,
            "nnz_total": ev.prototypes_chosen,
            "snr": ev.snr if ev.snr is not None else math.inf,
            "seed": seed,
            "library_size": dictionary.size,
            "max_ascent_violation": report.max_ascent_violation,
            "residual_norms": report.residual_norms,
        }

    return _run_parallel(point, list(enumerate(grid)), threads)
