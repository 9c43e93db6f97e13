"""BIC selection of the sparsity parameter tau for one deflation round."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import solver
from .tensor_core import as_array, rank_one_contract


@dataclass(frozen=True)
class TauPolicy:
    """Search settings for :func:`select_tau`.

    ``lower_bound_rule`` decides what happens when the previous round's tau
    exceeds the current upper bound: ``"reset"`` drops the lower bound to 0,
    ``"clamp"`` pins the search to the upper bound.
    """

    grid_size: int = 20
    refine_rounds: int = 3
    refine_shrink: float = 0.25
    flat_tol: float = 1e-4
    previous_tau: float = 0.0
    probe_iters: int = 50
    lower_bound_rule: str = "reset"

    def __post_init__(self):
        if self.grid_size < 3:
            raise ValueError("grid_size must be at least 3")
        if not 0 < self.refine_shrink < 1:
            raise ValueError("refine_shrink must lie in (0, 1)")
        if self.refine_rounds < 0 or self.probe_iters < 1:
            raise ValueError("refine_rounds must be >= 0 and probe_iters >= 1")
        if self.previous_tau < 0:
            raise ValueError("previous_tau must be nonnegative")
        if self.lower_bound_rule not in ("reset", "clamp"):
            raise ValueError("lower_bound_rule must be 'reset' or 'clamp'")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "TauPolicy":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown tau policy fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TauTrace:
    evaluated: list = field(default_factory=list)  # (tau, bic, nnz) in evaluation order
    selected_tau: float = 0.0
    selected_bic: float = float("nan")
    upper_bound: float = 0.0
    lower_bound: float = 0.0
    warm_nnz: list = field(default_factory=list)  # (tau, nnz) of the z-update at the warm start
    incumbent: tuple | None = None  # (a, b) of the selected evaluation
    max_ascent_violation: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "bic", "nnz"])
        for tau, b, k in self.evaluated:
            w.writerow([f"{tau:.12g}", f"{b:.12g}", k])
        return buf.getvalue()


def bic_from_residual(residual, nnz: int) -> float:
    """log(RSS / N) + log(N) / N * nnz; -inf when the residual is exactly zero."""
    r = as_array(residual)
    n = r.size
    rss = float(np.sum(r * r))
    if rss == 0.0:
        return -math.inf
    return math.log(rss / n) + math.log(n) / n * nnz


def bic(Y, weight, a, b, z, dictionary, dims=None) -> float:
    Ya = as_array(Y, dims)
    z = np.asarray(z, dtype=np.float64)
    c = dictionary.matrix @ z
    resid = Ya - weight * np.einsum("i,j,k->ijk", a, b, c)
    return bic_from_residual(resid, int(np.count_nonzero(np.abs(z) > solver.NNZ_TOL)))


def tau_upper_bound(f):
    """Smallest tau that zeroes the z-update: max |f_i|. Returns (bound, degenerate)."""
    f = np.asarray(f, dtype=np.float64)
    bound = float(np.max(np.abs(f), initial=0.0))
    return bound, bound == 0.0


def _evaluate(Y, dictionary, tau, start, policy, config):
    D = dictionary.matrix
    state = solver.bca(Y, D, tau, start[0], start[1], max_iters=policy.probe_iters, tol=config.bca_tol)
    fit = solver._finalize(Y, D, state, tau, 1)
    if fit.degenerate:
        score = bic_from_residual(Y, 0)
    else:
        score = bic_from_residual(Y - solver.rank_one_dense(fit, dictionary), fit.nnz)
    return score, fit


def select_tau(Y, dictionary, policy: TauPolicy, solver_config, round_index=0):
    """Grid-and-refine BIC search for tau on [lo, max|f|].

    Returns ``(tau, TauTrace)``; ``trace.incumbent`` holds the (a, b) of the
    winning evaluation for warm-starting the final fit.
    """
    Ya = as_array(Y)
    probe = solver.fit_rank_one(Ya, dictionary, 0.0, solver_config, round_index=round_index,
                                max_iters=policy.probe_iters)
    f = probe.f if probe.f is not None else np.zeros(dictionary.size)
    hi, degenerate = tau_upper_bound(f)
    trace = TauTrace(upper_bound=hi, max_ascent_violation=probe.max_ascent_violation)
    if degenerate:
        return 0.0, trace

    prev = policy.previous_tau
    if prev <= hi:
        lo = prev
    else:
        lo = hi if policy.lower_bound_rule == "clamp" else 0.0
    trace.lower_bound = lo

    start = (probe.a, probe.b)
    results = {}  # tau -> (bic, fit)

    def run_grid(taus, start):
        todo = [t for t in taus if t not in results]
        outs = solver._run_parallel(
            lambda t: _evaluate(Ya, dictionary, t, start, policy, solver_config), todo,
            solver_config.threads)
        for t, (score, fit) in zip(todo, outs):
            results[t] = (score, fit)
            trace.evaluated.append((float(t), float(score), fit.nnz))
            trace.max_ascent_violation = max(trace.max_ascent_violation, fit.max_ascent_violation)

    def incumbent():
        return min(results, key=lambda t: (results[t][0], t))

    grid = np.unique(np.linspace(lo, hi, policy.grid_size))
    trace.warm_nnz = [(float(t), int(np.count_nonzero(solver.shrink_to_sphere(f, t)))) for t in grid]
    run_grid(grid, start)

    width = hi - lo
    for _ in range(policy.refine_rounds):
        best = incumbent()
        # neighbourhood of the incumbent on the latest grid
        k = int(np.searchsorted(grid, best))
        near = [results[t][0] for t in grid[max(k - 1, 0):k + 2] if t in results]
        if np.isfinite(near).all() and max(near) - min(near) < policy.flat_tol:
            break
        width *= policy.refine_shrink
        if width <= 1e-12 * max(hi, 1.0):
            break
        a_best, b_best = results[best][1].a, results[best][1].b
        grid = np.unique(np.clip(np.linspace(best - width / 2, best + width / 2, policy.grid_size), lo, hi))
        run_grid(grid, (a_best, b_best))

    best = incumbent()
    trace.selected_tau = float(best)
    trace.selected_bic = float(results[best][0])
    trace.incumbent = (results[best][1].a, results[best][1].b)
    return float(best), trace
