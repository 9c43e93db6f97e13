"""Dense 3-way tensors and the multilinear primitives used by the solver.

Tensors are stored first-index-fastest (Fortran order), so the mode-1
unfolding is a zero-copy reshape. Indices are 0-based everywhere in code;
the docstrings quote the 1-based unfolding map only where it helps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DenseTensor3",
    "KruskalModel",
    "CPModel",
    "as_array",
    "unfold",
    "fold",
    "khatri_rao",
    "inner_product",
    "frobenius_norm",
    "kruskal_to_dense",
    "dense_from_factors",
    "rank_one_contract",
]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DenseTensor3:
    """Immutable dense I1 x I2 x I3 array of finite doubles.

    ``data`` is a read-only Fortran-ordered ndarray of shape ``dims``; ``values``
    is the flat first-index-fastest view of the same buffer.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="F", copy=True)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3-way array, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"all extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        object.__setattr__(self, "data", _readonly(arr))

    @classmethod
    def from_values(cls, dims, values) -> "DenseTensor3":
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values, dtype=np.float64).ravel()
        if len(dims) != 3 or values.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"{values.size} values do not fill dims {dims}")
        return cls(values.reshape(dims, order="F"))

    @classmethod
    def zeros(cls, dims) -> "DenseTensor3":
        return cls(np.zeros(tuple(dims), order="F"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @property
    def size(self) -> int:
        return self.data.size

    def __add__(self, other):
        return DenseTensor3(self.data + as_array(other, self.dims))

    def __sub__(self, other):
        return DenseTensor3(self.data - as_array(other, self.dims))

    def __mul__(self, scalar):
        return DenseTensor3(self.data * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return DenseTensor3(-self.data)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor3):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"DenseTensor3(dims={self.dims})"


def as_array(t, dims=None) -> np.ndarray:
    """Return the ndarray behind ``t`` (a DenseTensor3 or array-like)."""
    arr = t.data if isinstance(t, DenseTensor3) else np.asarray(t, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got ndim={arr.ndim}")
    if dims is not None and tuple(arr.shape) != tuple(dims):
        raise ValueError(f"dimension mismatch: {arr.shape} vs {tuple(dims)}")
    return arr


def _check_mode(mode) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization.

    Entry (i1, i2, i3) lands in row i_n and column
    ``1 + sum_{k != n} (i_k - 1) prod_{m < k, m != n} I_m`` (1-based), i.e. the
    remaining indices vary first-index-fastest along the columns.
    """
    n = _check_mode(mode)
    arr = as_array(t)
    return np.moveaxis(arr, n, 0).reshape(arr.shape[n], -1, order="F")


def fold(m, mode: int, dims) -> DenseTensor3:
    """Inverse of :func:`unfold`."""
    n = _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    m = np.asarray(m, dtype=np.float64)
    rest = [d for k, d in enumerate(dims) if k != n]
    if m.shape != (dims[n], rest[0] * rest[1]):
        raise ValueError(f"matrix of shape {m.shape} cannot fold into mode {mode} of {dims}")
    arr = m.reshape((dims[n], rest[0], rest[1]), order="F")
    return DenseTensor3(np.moveaxis(arr, 0, n))


def khatri_rao(A, B) -> np.ndarray:
    """Column-wise Kronecker product; row ``i*J + j`` of column k is A[i,k]*B[j,k]."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    I, K = A.shape
    J = B.shape[0]
    return (A[:, None, :] * B[None, :, :]).reshape(I * J, K)


def inner_product(s, t) -> float:
    """Sum of elementwise products (pairwise summation via ``np.sum``)."""
    a = as_array(s)
    b = as_array(t, a.shape)
    return float(np.sum(a * b))


def frobenius_norm(t) -> float:
    a = as_array(t)
    return float(np.sqrt(np.sum(a * a)))


def dense_from_factors(weights, A, B, C) -> DenseTensor3:
    """Densify sum_r w_r a_r o b_r o c_r."""
    weights = np.asarray(weights, dtype=np.float64)
    A, B, C = (np.asarray(M, dtype=np.float64) for M in (A, B, C))
    if weights.size == 0:
        return DenseTensor3.zeros((A.shape[0], B.shape[0], C.shape[0]))
    return DenseTensor3(np.einsum("r,ir,jr,kr->ijk", weights, A, B, C, optimize=True))


@dataclass(frozen=True, eq=False)
class KruskalModel:
    """Shape-constrained CP model ``[[weights; A, B, D Z]]``.

    Columns of A and B are unit vectors, columns of Z are unit vectors or exactly
    zero. ``dictionary_id`` ties Z to the library whose columns it combines.
    """

    weights: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Z: np.ndarray
    dictionary_id: str | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mats = [np.asarray(M, dtype=np.float64) for M in (self.A, self.B, self.Z)]
        R = w.size
        for name, M in zip("ABZ", mats):
            if M.ndim != 2 or M.shape[1] != R:
                raise ValueError(f"factor {name} must have {R} columns, got shape {M.shape}")
            norms = np.linalg.norm(M, axis=0)
            if np.any(norms > 1 + 1e-9):
                raise ValueError(f"columns of {name} must have norm <= 1")
        object.__setattr__(self, "weights", _readonly(w.copy()))
        for name, M in zip("ABZ", mats):
            object.__setattr__(self, name, _readonly(M.copy()))

    @property
    def rank(self) -> int:
        return self.weights.size

    def temporal(self, dictionary) -> np.ndarray:
        """The implied time factor C = D Z."""
        _check_dictionary(self, dictionary)
        return dictionary.matrix @ self.Z

    def truncate(self, k: int) -> "KruskalModel":
        k = max(0, min(int(k), self.rank))
        return KruskalModel(self.weights[:k], self.A[:, :k], self.B[:, :k],
                            self.Z[:, :k], self.dictionary_id)


@dataclass(frozen=True, eq=False)
class CPModel:
    """Unconstrained CP model ``[[weights; A, B, C]]`` (no dictionary)."""

    weights: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        object.__setattr__(self, "weights", _readonly(w.copy()))
        for name in "ABC":
            M = np.asarray(getattr(self, name), dtype=np.float64)
            if M.ndim != 2 or M.shape[1] != w.size:
                raise ValueError(f"factor {name} must have {w.size} columns, got shape {M.shape}")
            object.__setattr__(self, name, _readonly(M.copy()))

    dictionary_id = None

    @property
    def rank(self) -> int:
        return self.weights.size

    def temporal(self, dictionary=None) -> np.ndarray:
        return self.C

    def truncate(self, k: int) -> "CPModel":
        k = max(0, min(int(k), self.rank))
        return CPModel(self.weights[:k], self.A[:, :k], self.B[:, :k], self.C[:, :k])


def _check_dictionary(model, dictionary):
    if dictionary is None:
        raise ValueError("a dictionary is required to densify a shape-constrained model")
    if model.dictionary_id is not None and model.dictionary_id != dictionary.id:
        raise ValueError("model was fitted with a different dictionary")
    if dictionary.matrix.shape[1] != model.Z.shape[0]:
        raise ValueError("dictionary size does not match Z")


def kruskal_to_dense(model, dictionary=None) -> DenseTensor3:
    """Densify a :class:`KruskalModel` (needs its dictionary) or a :class:`CPModel`."""
    return dense_from_factors(model.weights, model.A, model.B, model.temporal(dictionary))


def rank_one_contract(t, mode: int, u, v) -> np.ndarray:
    """``unfold(t, mode) @ kron(u, v)`` without forming the Kronecker product.

    ``u`` indexes the slower of the two remaining modes and ``v`` the faster one:
    mode 1 takes (c, b), mode 2 takes (c, a), mode 3 takes (b, a).
    """
    n = _check_mode(mode)
    arr = as_array(t)
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    slow, fast = [arr.shape[k] for k in range(3) if k != n][::-1]
    if u.size != slow or v.size != fast:
        raise ValueError(f"vector lengths ({u.size}, {v.size}) do not match ({slow}, {fast})")
    if n == 0:
        return (arr @ u) @ v
    if n == 1:
        return v @ (arr @ u)
    # mode 3: sum_ij t[i,j,:] v_i u_j
    return np.tensordot(np.outer(v, u), arr, axes=([0, 1], [0, 1]))
