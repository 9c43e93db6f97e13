"""Shape-constrained CP by greedy deflation.

Each round maximizes the penalized correlation
``<Y, a o b o D z> - tau * ||z||_1`` over unit-ball a, b, z by block
coordinate ascent, sets the weight by least squares and subtracts the
component from the residual.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import derive_rng
from .tensor_core import (
    CPModel,
    DenseTensor3,
    KruskalModel,
    as_array,
    khatri_rao,
    rank_one_contract,
    unfold,
)

logger = logging.getLogger(__name__)

NNZ_TOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    max_rank: int = 3
    bca_tol: float = 1e-6
    bca_max_iters: int = 500
    restarts: int = 5
    seed: int = 0
    min_lambda: float = 1e-3
    power_iters: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.max_rank < 0:
            raise ValueError("max_rank must be nonnegative")
        if not 0 < self.bca_tol < 1:
            raise ValueError("bca_tol must lie in (0, 1)")
        if self.bca_max_iters < 1 or self.restarts < 1 or self.power_iters < 1:
            raise ValueError("iteration counts and restarts must be positive")
        if self.min_lambda < 0:
            raise ValueError("min_lambda must be nonnegative")
        if self.threads < 0:
            raise ValueError("threads must be >= 0 (0 = auto)")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "SolverConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver config fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class BcaState:
    """Iterates of one block-coordinate-ascent run.

    ``u``, ``v`` and ``f`` are the last correlation vectors used by the a, b
    and z updates. ``objective_trace`` holds one value per sweep (index 0 is
    the initial point); ``max_ascent_violation`` is the largest drop seen
    across individual block updates, relative to max(|objective|, tau ||z||_1),
    and 0 for a monotone run.
    """

    a: np.ndarray
    b: np.ndarray
    z: np.ndarray
    u: np.ndarray = None
    v: np.ndarray = None
    f: np.ndarray = None
    objective_trace: list = field(default_factory=list)
    max_ascent_violation: float = 0.0
    sweeps: int = 0
    degenerate: bool = False

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


@dataclass
class ComponentFit:
    weight: float
    a: np.ndarray
    b: np.ndarray
    z: np.ndarray
    tau: float
    bic: float = float("nan")
    objective_trace: list = field(default_factory=list)
    restarts_tried: int = 0
    degenerate: bool = False
    f: np.ndarray | None = None
    max_ascent_violation: float = 0.0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.z) > NNZ_TOL)

    @property
    def nnz(self) -> int:
        return int(self.support.size)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else 0.0


@dataclass(frozen=True)
class RoundRecord:
    rank_index: int
    weight: float
    tau: float
    bic: float
    nnz: int
    residual_norm: float
    relative_residual: float


@dataclass
class DecompositionReport:
    """Per-round diagnostics of one decomposition run."""

    initial_norm: float
    rounds: list = field(default_factory=list)
    components: list = field(default_factory=list)
    tau_traces: list = field(default_factory=list)
    stop_reason: str = ""
    seed: int = 0
    dictionary_id: str = ""
    max_ascent_violation: float = 0.0

    @property
    def residual_norms(self) -> list[float]:
        return [self.initial_norm] + [r.residual_norm for r in self.rounds]

    def selected_prototypes(self, dictionary) -> list[list[dict]]:
        """Per component, the nonzero prototypes ordered by |coefficient|."""
        out = []
        for comp in self.components:
            idx = comp.support[np.argsort(-np.abs(comp.z[comp.support]), kind="stable")]
            out.append([dictionary.specs[i].to_json(comp.z[i]) for i in idx])
        return out


# -- block updates -----------------------------------------------------------

def soft_threshold(f, tau) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return np.sign(f) * np.maximum(np.abs(f) - tau, 0.0)


def shrink_to_sphere(f, tau) -> np.ndarray:
    """Soft-threshold ``f`` at ``tau`` and project onto the unit sphere (or return 0)."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    zt = soft_threshold(f, tau)
    n = np.sqrt(np.sum(zt * zt))
    return zt / n if n > 0 else np.zeros_like(zt)


def _normalize(u, previous):
    n = np.sqrt(np.sum(u * u))
    if n > 0:
        return u / n, False
    if previous is None:
        previous = np.zeros_like(u)
        previous[0] = 1.0
    return np.array(previous, dtype=np.float64), True


def update_a(Y, b, c, previous=None):
    """Maximizer of <Y, a o b o c> over the unit ball; returns (a, degenerate)."""
    return _normalize(rank_one_contract(Y, 1, c, b), previous)


def update_b(Y, a, c, previous=None):
    return _normalize(rank_one_contract(Y, 2, c, a), previous)


def correlation(Y, a, b, dictionary) -> np.ndarray:
    """f = D^T Y_(3) (b kron a)."""
    return dictionary.matrix.T @ rank_one_contract(Y, 3, b, a)


def update_z(Y, a, b, dictionary, tau) -> np.ndarray:
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    return shrink_to_sphere(correlation(Y, a, b, dictionary), tau)


def verify_z_kkt(f, tau, z, tol=1e-8) -> bool:
    """Check the KKT system of max <f, z> - tau ||z||_1 s.t. ||z||_2 <= 1.

    The multiplier is recovered from ``z`` itself, so the check does not
    re-run the soft-threshold it is meant to certify.
    """
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    scale = tol * max(1.0, float(np.max(np.abs(f), initial=0.0)), tau)
    nz = np.abs(z) > NNZ_TOL
    if not nz.any():
        return bool(np.all(np.abs(f) <= tau + scale))
    sq = float(z @ z)
    if sq > 1 + tol:
        return False
    gamma = 0.5 * (float(f @ z) - tau * float(np.abs(z).sum())) / sq
    if gamma < -scale:
        return False
    if abs(gamma * (sq - 1.0)) > scale:
        return False
    resid = f[nz] - 2 * gamma * z[nz] - tau * np.sign(z[nz])
    if np.any(np.abs(resid) > scale):
        return False
    return bool(np.all(np.abs(f[~nz]) <= tau + scale))


def compute_lambda(Y, a, b, c) -> float:
    """Least-squares weight <Y, M> / ||M||_F^2 for M = a o b o c (0 if M = 0)."""
    a, b, c = (np.asarray(x, dtype=np.float64) for x in (a, b, c))
    m2 = float(a @ a) * float(b @ b) * float(c @ c)
    if m2 == 0.0:
        return 0.0
    return float(c @ rank_one_contract(Y, 3, b, a)) / m2


def objective(Y, a, b, z, dictionary, tau) -> float:
    z = np.asarray(z, dtype=np.float64)
    c = dictionary.matrix @ z
    return float(c @ rank_one_contract(Y, 3, b, a)) - tau * float(np.abs(z).sum())


# -- rank-one fit ------------------------------------------------------------

def _dz(D, z):
    idx = np.flatnonzero(z)
    if idx.size == 0:
        return np.zeros(D.shape[0])
    if idx.size * 4 < z.size:
        return D[:, idx] @ z[idx]
    return D @ z


def bca(Y, D, tau, a, b, z=None, max_iters=500, tol=1e-6) -> BcaState:
    """Block coordinate ascent on (a, b, z) from the given starting point.

    ``Y`` is a 3-way ndarray and ``D`` the library matrix. The starting (a, b)
    are normalized first; if ``z`` is None it is initialized by one z-update
    at that point.
    """
    a, _ = _normalize(np.array(a, dtype=np.float64), None)
    b, _ = _normalize(np.array(b, dtype=np.float64), None)
    f = D.T @ rank_one_contract(Y, 3, b, a)
    if z is None:
        z = shrink_to_sphere(f, tau)
    z = np.array(z, dtype=np.float64)
    obj = float(_dz(D, z) @ rank_one_contract(Y, 3, b, a)) - tau * float(np.abs(z).sum())
    state = BcaState(a, b, z, f=f, objective_trace=[obj])
    worst = 0.0
    idle = 0
    u = v = None

    def step(prev, cur, pen):
        # drops are measured against the size of the evaluated terms: near the
        # total-shrinkage point the objective is a tiny difference of two large ones
        nonlocal worst
        drop = prev - cur
        if drop > 0:
            worst = max(worst, drop / max(abs(prev), abs(cur), pen, 1e-300))
        return cur

    for it in range(max_iters):
        pen = tau * float(np.abs(z).sum())
        c = _dz(D, z)
        u = rank_one_contract(Y, 1, c, b)
        a, deg_a = _normalize(u, a)
        obj = step(obj, float(a @ u) - pen, pen)
        v = rank_one_contract(Y, 2, c, a)
        b, deg_b = _normalize(v, b)
        obj = step(obj, float(b @ v) - pen, pen)
        f = D.T @ rank_one_contract(Y, 3, b, a)
        z = shrink_to_sphere(f, tau)
        deg_z = not z.any()
        new_pen = tau * float(np.abs(z).sum())
        obj = step(obj, float(f @ z) - new_pen, max(pen, new_pen))
        prev = state.objective_trace[-1]
        state.objective_trace.append(obj)
        state.sweeps = it + 1
        idle = idle + 1 if (deg_a and deg_b and deg_z) else 0
        if idle >= 2:
            break
        if abs(obj - prev) / max(1.0, abs(obj)) < tol:
            break
    state.a, state.b, state.z, state.u, state.v, state.f = a, b, z, u, v, f
    state.max_ascent_violation = worst
    state.degenerate = not z.any()
    return state


def _power_vector(M, iters, rng):
    """Dominant left singular vector of M by power iteration on M M^T."""
    G = M @ M.T
    x = rng.standard_normal(G.shape[0])
    x /= np.linalg.norm(x)
    for _ in range(iters):
        y = G @ x
        n = np.linalg.norm(y)
        if n == 0:
            break
        x = y / n
    return x


def _unit_random(rng, n):
    x = rng.standard_normal(n)
    return x / np.linalg.norm(x)


def _starts(Y, config, round_index):
    """Deterministic (a, b) starting points: SVD warm start, then random."""
    I1, I2, _ = Y.shape
    starts = []
    for k in range(config.restarts):
        rng = derive_rng(config.seed, "restart", round_index, k)
        if k == 0:
            starts.append((_power_vector(unfold(Y, 1), config.power_iters, rng),
                           _power_vector(unfold(Y, 2), config.power_iters, rng)))
        else:
            starts.append((_unit_random(rng, I1), _unit_random(rng, I2)))
    return starts


def _run_parallel(fn, items, threads):
    if threads == 1 or len(items) == 1:
        return [fn(x) for x in items]
    workers = None if threads == 0 else threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _finalize(Y, D, state: BcaState, tau, tried) -> ComponentFit:
    a, b, z = state.a, state.b, state.z
    if state.degenerate:
        return ComponentFit(0.0, a, b, np.zeros_like(z), tau, objective_trace=state.objective_trace,
                            restarts_tried=tried, degenerate=True, f=state.f,
                            max_ascent_violation=state.max_ascent_violation)
    c = _dz(D, z)
    weight = compute_lambda(Y, a, b, c)
    if weight < 0:
        weight, a = -weight, -a
    if c[np.argmax(np.abs(c))] < 0:
        z, a = -z, -a
    return ComponentFit(weight, a, b, z, tau, objective_trace=state.objective_trace,
                        restarts_tried=tried, f=state.f,
                        max_ascent_violation=state.max_ascent_violation)


def fit_rank_one(Y, dictionary, tau, config: SolverConfig, round_index=0, warm_start=None,
                 max_iters=None) -> ComponentFit:
    """Best of several BCA runs for one deflation round.

    Candidates are the optional ``warm_start`` (a, b) pair followed by
    ``config.restarts`` seeded starts; the highest final objective wins, ties
    going to the earliest candidate.
    """
    Y = as_array(Y)
    D = dictionary.matrix
    if D.shape[0] != Y.shape[2]:
        raise ValueError(f"dictionary has {D.shape[0]} rows, tensor has I3={Y.shape[2]}")
    starts = _starts(Y, config, round_index)
    if warm_start is not None:
        starts.insert(0, warm_start)
    iters = config.bca_max_iters if max_iters is None else max_iters
    states = _run_parallel(
        lambda ab: bca(Y, D, tau, ab[0], ab[1], max_iters=iters, tol=config.bca_tol),
        starts, config.threads)
    best = max(range(len(states)), key=lambda k: (states[k].objective, -k))
    state = states[best]
    fit = _finalize(Y, D, state, tau, len(states))
    fit.max_ascent_violation = max(s.max_ascent_violation for s in states)
    return fit


def rank_one_dense(fit: ComponentFit, dictionary) -> np.ndarray:
    c = _dz(dictionary.matrix, fit.z)
    return fit.weight * np.einsum("i,j,k->ijk", fit.a, fit.b, c)


# -- deflation ---------------------------------------------------------------

def sctd_decompose(X, dictionary, config: SolverConfig, tau_policy=None):
    """Greedy deflation with per-round tau selection.

    ``tau_policy`` is a :class:`~sctd.model_selection.TauPolicy` (BIC search,
    the default) or a plain number used as a fixed tau for every round.
    Returns ``(KruskalModel, DecompositionReport)``.
    """
    from . import model_selection as ms

    Xa = as_array(X)
    if not np.all(np.isfinite(Xa)):
        raise ValueError("input tensor has non-finite entries")
    D = dictionary.matrix
    if D.shape[0] != Xa.shape[2]:
        raise ValueError(f"dictionary has {D.shape[0]} rows, tensor has I3={Xa.shape[2]}")
    if tau_policy is None:
        tau_policy = ms.TauPolicy()
    fixed_tau = None if isinstance(tau_policy, ms.TauPolicy) else float(tau_policy)
    policy = tau_policy if fixed_tau is None else None

    Y = np.array(Xa, dtype=np.float64, order="F")
    x_norm = float(np.sqrt(np.sum(Y * Y)))
    report = DecompositionReport(initial_norm=x_norm, seed=config.seed, dictionary_id=dictionary.id)
    fits = []
    report.stop_reason = "max_rank"
    for r in range(config.max_rank):
        if not np.any(Y):
            report.stop_reason = "zero_residual"
            break
        if fixed_tau is None:
            tau, trace = ms.select_tau(Y, dictionary, policy, config, round_index=r)
            warm = trace.incumbent
            report.tau_traces.append(trace)
        else:
            tau, trace, warm = fixed_tau, None, None
        fit = fit_rank_one(Y, dictionary, tau, config, round_index=r, warm_start=warm)
        report.max_ascent_violation = max(report.max_ascent_violation, fit.max_ascent_violation,
                                          trace.max_ascent_violation if trace else 0.0)
        if fit.degenerate or fit.weight == 0.0:
            report.stop_reason = "degenerate"
            break
        if fits and fit.weight < config.min_lambda * fits[0].weight:
            report.stop_reason = "min_lambda"
            break
        comp = rank_one_dense(fit, dictionary)
        fit.bic = ms.bic_from_residual(Y - comp, fit.nnz)
        Y -= comp
        res = float(np.sqrt(np.sum(Y * Y)))
        fits.append(fit)
        report.components.append(fit)
        report.rounds.append(RoundRecord(r + 1, fit.weight, tau, fit.bic, fit.nnz, res,
                                         res / x_norm if x_norm > 0 else 0.0))
        if policy is not None:
            policy = replace(policy, previous_tau=tau)
        logger.info("round %d: lambda=%.6g tau=%.6g nnz=%d rel.residual=%.4g",
                    r + 1, fit.weight, tau, fit.nnz, report.rounds[-1].relative_residual)

    P = D.shape[1]
    I1, I2 = Xa.shape[:2]
    model = KruskalModel(
        np.array([f.weight for f in fits]),
        np.column_stack([f.a for f in fits]) if fits else np.zeros((I1, 0)),
        np.column_stack([f.b for f in fits]) if fits else np.zeros((I2, 0)),
        np.column_stack([f.z for f in fits]) if fits else np.zeros((P, 0)),
        dictionary.id,
    )
    return model, report


# -- unconstrained baseline --------------------------------------------------

def cp_als_baseline(X, R, tol=1e-6, max_iters=500, seed=0, full_output=False):
    """Plain CP by alternating least squares (normal equations, 1e-10 ridge).

    Factors are column-normalized into the weights after every update.
    Convergence: change in fit ``1 - ||X - M|| / ||X||`` below ``tol``. With
    ``full_output`` the per-sweep fit history is returned as well.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    Xa = as_array(X)
    dims = Xa.shape
    rng = derive_rng(seed, "cp_als")
    factors = [rng.standard_normal((n, R)) for n in dims]
    unfolded = [unfold(Xa, n + 1) for n in range(3)]
    x_norm = float(np.sqrt(np.sum(Xa * Xa)))
    weights = np.ones(R)
    fits = []
    for _ in range(max_iters):
        for n in range(3):
            others = [factors[m] for m in range(3) if m != n]
            # rows of the design follow the unfolding: later mode is the slow index
            design = khatri_rao(others[1], others[0])
            gram = (others[0].T @ others[0]) * (others[1].T @ others[1])
            rhs = unfolded[n] @ design
            sol = np.linalg.solve(gram + 1e-10 * np.eye(R), rhs.T).T
            weights = np.linalg.norm(sol, axis=0)
            weights[weights == 0] = 1.0
            factors[n] = sol / weights
        M = np.einsum("r,ir,jr,kr->ijk", weights, *factors, optimize=True)
        fit = 1.0 - float(np.sqrt(np.sum((Xa - M) ** 2))) / x_norm if x_norm > 0 else 1.0
        fits.append(fit)
        if len(fits) > 1 and abs(fits[-1] - fits[-2]) < tol:
            break
    order = np.argsort(-weights, kind="stable")
    model = CPModel(weights[order], *(F[:, order] for F in factors))
    return (model, fits) if full_output else model
