"""``sctd simulate|decompose|evaluate|baseline|sweep``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .dictionary import dictionary_from_config
from .model_selection import TauPolicy
from .solver import SolverConfig, cp_als_baseline, sctd_decompose
from .synthetic import (
    SWEEP_HEADER,
    NoiseSpec,
    PhantomConfig,
    add_noise,
    evaluate,
    make_phantom,
    reconstruction_error_curve,
    run_sweep,
)

logger = logging.getLogger("sctd")

CONFIG_DIR = Path(__file__).with_name("configs")
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class NumericFailure(RuntimeError):
    pass


class Config:
    """A JSON config file with line lookup for error messages."""

    def __init__(self, name):
        self.path = resolve_config(name)
        self.data = sio.read_json(self.path)
        if not isinstance(self.data, dict):
            raise sio.InputError(self.path, "top level must be a JSON object", line=1)
        self.text = self.path.read_text()

    def line_of(self, key) -> int:
        needle = f'"{key}"'
        for n, line in enumerate(self.text.splitlines(), start=1):
            if needle in line:
                return n
        return 1

    def error(self, key, message) -> sio.InputError:
        return sio.InputError(self.path, message, line=self.line_of(key))

    def section(self, key, build):
        """``build(self.data[key])`` with errors anchored at the key's line."""
        section = self.data.get(key) or {}
        try:
            return build(section)
        except (ValueError, TypeError, KeyError) as e:
            # point at the offending field when the message names one
            named = [k for k in section if isinstance(section, dict) and f"'{k}'" in str(e)]
            raise self.error(named[0] if named else key, f"{key}: {e}") from None


def resolve_config(name) -> Path:
    """A path, or the name of a bundled config (with or without ``.json``)."""
    p = Path(name)
    if p.exists():
        return p
    for cand in (CONFIG_DIR / name, CONFIG_DIR / f"{name}.json"):
        if cand.exists():
            return cand
    raise sio.InputError(name, "no such file or bundled config")


def _threads(default: int) -> int:
    env = os.environ.get("SCTD_THREADS")
    if env is None or env == "":
        return default
    try:
        n = int(env)
    except ValueError:
        raise sio.InputError("SCTD_THREADS", f"expected an integer, got {env!r}") from None
    if n < 0:
        raise sio.InputError("SCTD_THREADS", "must be >= 0")
    return n


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, []):
            raise sio.InputError(args.command, f"--{n} is required")


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=np.float64))):
            raise NumericFailure(f"{name} produced non-finite values")


class Outputs:
    """Collects the files of one run and writes the manifest last."""

    def __init__(self, out_dir, command):
        self.dir = Path(out_dir)
        self.command = command
        self.files = []
        self.inputs = {}
        self.start = time.perf_counter()

    def text(self, name, content):
        sio.atomic_write(self.dir / name, content)
        self.files.append(name)

    def raw(self, name, data: bytes):
        sio.atomic_write(self.dir / name, data)
        self.files.append(name)

    def input(self, path):
        self.inputs[str(path)] = sio.sha256_file(path)

    def manifest(self, config, seed, dictionary_id=None):
        doc = {
            "command": self.command,
            "artifact_version": __version__,
            "seed": seed,
            "dictionary_id": dictionary_id,
            "inputs": [{"path": p, "sha256": d} for p, d in self.inputs.items()],
            "config": config,
            "outputs": [{"name": n, "sha256": sio.sha256_file(self.dir / n)} for n in self.files],
            "wall_clock_seconds": round(time.perf_counter() - self.start, 3),
        }
        sio.write_json(self.dir / "manifest.json", doc)


# -- commands ----------------------------------------------------------------

def cmd_simulate(args):
    _require(args, "out")
    cfg = Config(args.config or "simulate_default")
    phantom_cfg = cfg.section("phantom", PhantomConfig.from_json)
    try:
        sigma = float(cfg.data.get("sigma", 0.0))
        seed = int(args.seed if args.seed is not None else cfg.data.get("seed", 0))
        noise = NoiseSpec(sigma, seed)
    except (TypeError, ValueError) as e:
        raise cfg.error("sigma", str(e)) from None
    planted = cfg.section("phantom", lambda _: make_phantom(config=phantom_cfg))
    noisy = add_noise(planted.clean, noise)
    _check_finite("simulate", noisy.data)

    out = Outputs(args.out, "simulate")
    out.input(cfg.path)
    out.raw("clean.st3", sio.st3_bytes(planted.clean))
    out.raw("noisy.st3", sio.st3_bytes(noisy))
    truth = {
        "format": "sctd-truth",
        "phantom": phantom_cfg.to_json(),
        "noise": {"sigma": noise.sigma, "seed": noise.seed},
        "model": sio.model_json(planted.model, planted.clean.dims, planted.dictionary),
    }
    out.text("truth.json", sio.json_text(truth))
    out.manifest({"phantom": phantom_cfg.to_json(), "sigma": sigma, "seed": seed}, seed,
                 planted.dictionary.id)


def _solver_settings(cfg: Config, args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.rank is not None:
        overrides["max_rank"] = args.rank
    solver = cfg.section("solver", lambda d: SolverConfig.from_json({**d, **overrides}))
    solver = SolverConfig.from_json({**solver.to_json(), "threads": _threads(solver.threads)})
    if "tau" in cfg.data:
        try:
            policy = float(cfg.data["tau"])
            if not np.isfinite(policy) or policy < 0:
                raise ValueError("must be a finite nonnegative number")
        except (TypeError, ValueError) as e:
            raise cfg.error("tau", f"tau: {e}") from None
    else:
        policy = cfg.section("tau_policy", TauPolicy.from_json)
    return solver, policy


def _library(name, time_axis=None):
    cfg = Config(name)
    try:
        return cfg, dictionary_from_config(cfg.data, time_axis)
    except (ValueError, TypeError, KeyError) as e:
        raise cfg.error("families", str(e)) from None


def cmd_decompose(args):
    _require(args, "input", "library", "out")
    tensor_path = args.input[0]
    X = sio.read_tensor(tensor_path)
    if not np.all(np.isfinite(X.data)):
        raise sio.InputError(tensor_path, "tensor has non-finite entries")
    lib_cfg, dictionary = _library(args.library)
    if dictionary.matrix.shape[0] != X.dims[2]:
        raise sio.InputError(tensor_path, f"library has {dictionary.matrix.shape[0]} time samples, "
                                          f"tensor has I3 = {X.dims[2]}")
    cfg = Config(args.config or "solver_default")
    solver, policy = _solver_settings(cfg, args)

    model, report = sctd_decompose(X, dictionary, solver, policy)
    _check_finite("decompose", model.weights, model.A, model.B, model.Z)

    out = Outputs(args.out, "decompose")
    for p in (tensor_path, lib_cfg.path, cfg.path):
        out.input(p)
    extra = {"stop_reason": report.stop_reason, "initial_norm": report.initial_norm,
             "max_ascent_violation": report.max_ascent_violation}
    out.text("model.json", sio.json_text(sio.model_json(model, X.dims, dictionary, extra), compact=True))
    out.text("report.csv", sio.report_csv(report))
    out.text("time_modes.csv", sio.time_modes_csv(dictionary.time_axis, model.temporal(dictionary)))
    out.text("bic_trace.csv", sio.bic_trace_csv(report))
    config = {"solver": solver.to_json(),
              "tau": policy if isinstance(policy, float) else None,
              "tau_policy": policy.to_json() if isinstance(policy, TauPolicy) else None,
              "library": lib_cfg.data}
    config["solver"].pop("threads")  # scheduling only; results do not depend on it
    out.manifest(config, solver.seed, dictionary.id)


def cmd_baseline(args):
    _require(args, "input", "out")
    tensor_path = args.input[0]
    X = sio.read_tensor(tensor_path)
    if not np.all(np.isfinite(X.data)):
        raise sio.InputError(tensor_path, "tensor has non-finite entries")
    opts = {}
    if args.config:
        cfg = Config(args.config)
        opts = cfg.data.get("baseline", cfg.data)
    R = args.rank if args.rank is not None else int(opts.get("rank", 3))
    if R < 1:
        raise sio.InputError("--rank", "baseline needs R >= 1")
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    tol, iters = float(opts.get("tol", 1e-6)), int(opts.get("max_iters", 500))
    model, fits = cp_als_baseline(X, R, tol=tol, max_iters=iters, seed=seed, full_output=True)
    _check_finite("baseline", model.weights, model.A, model.B, model.C)

    out = Outputs(args.out, "baseline")
    out.input(tensor_path)
    out.text("model.json", sio.json_text(sio.model_json(model, X.dims), compact=True))
    out.text("report.csv", sio.csv_text(("sweep", "fit"), enumerate(fits, start=1)))
    out.text("time_modes.csv", sio.time_modes_csv(np.arange(X.dims[2], dtype=np.float64), model.C))
    out.manifest({"rank": R, "tol": tol, "max_iters": iters}, seed)


def _load_truth(path):
    doc = sio.read_json(path)
    if doc.get("format") != "sctd-truth":
        raise sio.InputError(path, "not a truth file written by `sctd simulate`")
    try:
        planted = make_phantom(config=PhantomConfig.from_json(doc["phantom"]))
        noise = NoiseSpec(float(doc["noise"]["sigma"]), int(doc["noise"]["seed"]))
    except (KeyError, TypeError, ValueError) as e:
        raise sio.InputError(path, f"bad truth file: {e}") from None
    return planted, noise


def cmd_evaluate(args):
    _require(args, "input", "config", "out")
    loaded = sio.read_model(args.input[0])
    model, lib = loaded.restricted()
    if model is None:
        model = loaded.cp if loaded.kruskal is None else loaded.kruskal.truncate(0)
    noisy = sio.read_tensor(args.input[1]) if len(args.input) > 1 else None

    ref_path = resolve_config(args.config)
    planted = reference = None
    if ref_path.read_bytes()[:4] == sio.ST3_MAGIC or ref_path.suffix == ".csv":
        reference = sio.read_tensor(ref_path)
        dims = reference.dims
    else:
        planted, noise = _load_truth(ref_path)
        dims = planted.clean.dims
        if noisy is None:
            noisy = add_noise(planted.clean, noise)
    for name, shape in (("model", loaded.dims), ("tensor", noisy.dims if noisy is not None else dims)):
        if tuple(shape) != tuple(dims):
            raise sio.InputError(args.input[0], f"{name} dims {tuple(shape)} do not match reference {dims}")

    ev = evaluate(model, lib, planted, noisy, reference=reference)
    out = Outputs(args.out, "evaluate")
    out.input(args.input[0])
    out.input(ref_path)
    if len(args.input) > 1:
        out.input(args.input[1])
    out.text("eval.json", sio.json_text(ev.to_json()))
    curve = []
    if model.rank:
        target = noisy if noisy is not None else (planted.clean if planted is not None else reference)
        clean = planted.clean if planted is not None else reference
        curve = reconstruction_error_curve(target, model, lib, clean,
                                           upto=args.rank if args.rank else None)
        if noisy is None:
            curve = [(k, None, ec) for k, _, ec in curve]
    out.text("error_curve.csv", sio.error_curve_csv(curve))
    out.manifest({"upto": args.rank}, None, loaded.doc.get("dictionary_id"))


def _parse_grid(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise sio.InputError("--grid", f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args):
    _require(args, "kind", "out")
    if args.kind not in ("noise", "library"):
        raise sio.InputError("--kind", f"unknown sweep kind {args.kind!r} (noise or library)")
    cfg = Config(args.config or f"sweep_{args.kind}")
    base = dict(cfg.data)
    if "library" not in base:
        raise cfg.error("library", "sweep config needs a library")
    if isinstance(base["library"], str):
        base["library"] = Config(base["library"]).data
    if args.seed is not None:
        base["seed"] = args.seed
    if args.rank is not None:
        base["solver"] = {**base.get("solver", {}), "max_rank": args.rank}
    grid = _parse_grid(args.grid) if args.grid else base.get("grid")
    if not grid:
        raise cfg.error("grid", "sweep grid is empty")
    try:
        rows = run_sweep(args.kind, grid, base, threads=_threads(1))
    except (ValueError, TypeError, KeyError) as e:
        raise cfg.error("solver", str(e)) from None
    out = Outputs(args.out, "sweep")
    out.input(cfg.path)
    out.text("sweep.csv", sio.sweep_csv(rows, SWEEP_HEADER))
    out.manifest({**base, "kind": args.kind, "grid": grid}, base.get("seed", 0))


COMMANDS = {
    "simulate": cmd_simulate,
    "decompose": cmd_decompose,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sctd", description="Shape constrained tensor decomposition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "write a planted phantom (clean.st3, noisy.st3, truth.json)",
        "decompose": "fit a shape-constrained decomposition to a tensor",
        "evaluate": "score a model against truth.json or a reference tensor",
        "baseline": "fit an unconstrained CP model by ALS",
        "sweep": "noise or library-size sweep (sweep.csv)",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--input", action="append", default=[],
                       help="input file; evaluate takes the model and optionally the fitted tensor")
        s.add_argument("--library", help="library config (path or bundled name)")
        s.add_argument("--config", help="config file (path or bundled name); truth or reference for evaluate")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--rank", type=int, help="max rank (decompose), R (baseline), curve length (evaluate)")
        s.add_argument("--kind", help="sweep kind: noise or library")
        s.add_argument("--grid", help="comma-separated sweep grid, overrides the config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (NumericFailure, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"sctd {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError) as e:
        print(f"sctd {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
