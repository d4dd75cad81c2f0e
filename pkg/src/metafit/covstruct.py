"""Parameterized covariance-structure families used by both engines.

Each structure describes a q x q positive-semidefinite matrix family
``G(theta)`` over an unconstrained parameter vector.  Variance parameters
live on the log-SD scale, so the optimizer never sees a boundary; the
``unstructured`` kind uses a log-Cholesky parameterization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

KINDS = ("iid", "diag", "unstructured", "equalto", "propto")

# log-SD below this is treated as a boundary (variance reported as zero)
BOUNDARY_LOG_SD = -10.0


@dataclass(frozen=True)
class CovarianceStructure:
    """Descriptor of one random-effect covariance family.

    Attributes
    ----------
    kind : str
        One of ``iid``, ``diag``, ``unstructured``, ``equalto``, ``propto``.
    dim : int
        Per-group block size q.
    fixed_matrix : ndarray or None
        The fixed q x q matrix for ``equalto`` (used verbatim) and
        ``propto`` (scaled by one free variance).
    """

    kind: str
    dim: int
    fixed_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown covariance structure kind {self.kind!r}")
        if self.dim < 1:
            raise DataError("structure dimension must be >= 1")
        needs_matrix = self.kind in ("equalto", "propto")
        if needs_matrix != (self.fixed_matrix is not None):
            raise DataError(
                f"{self.kind} structure "
                + ("requires" if needs_matrix else "does not take")
                + " a fixed matrix"
            )
        if self.fixed_matrix is not None:
            m = 0.5 * (np.asarray(self.fixed_matrix, float)
                       + np.asarray(self.fixed_matrix, float).T)
            if m.shape != (self.dim, self.dim):
                raise DataError("fixed matrix dimension mismatch")
            if self.kind == "propto":
                m = _ensure_positive_definite(m)
            m.setflags(write=False)
            object.__setattr__(self, "fixed_matrix", m)

    @property
    def n_params(self) -> int:
        q = self.dim
        return {
            "iid": 1,
            "diag": q,
            "unstructured": q * (q + 1) // 2,
            "equalto": 0,
            "propto": 1,
        }[self.kind]


def _ensure_positive_definite(m: np.ndarray) -> np.ndarray:
    """propto matrices must be PD; jitter matrices sitting on the PSD boundary.

    Phylogenetic correlation matrices built from trees are often numerically
    singular, so eigenvalues in (-1e-8, 1e-10] get a small diagonal jitter;
    anything more negative is rejected.
    """
    eig = np.linalg.eigvalsh(m)
    if eig[0] > 1e-10:
        return m
    if eig[0] <= -1e-8:
        raise DataError("propto matrix is not positive semidefinite")
    jitter = 1e-8 * np.trace(m) / m.shape[0]
    warnings.warn(
        f"propto matrix is on the PSD boundary; adding diagonal jitter {jitter:.3g}"
    )
    return m + jitter * np.eye(m.shape[0])


def _chol_from_theta(theta: np.ndarray, q: int) -> np.ndarray:
    """Lower-triangular L with diagonal exp(theta[:q]) and strict lower
    triangle filled column-major from theta[q:]."""
    L = np.zeros((q, q))
    L[np.diag_indices(q)] = np.exp(theta[:q])
    if q > 1:
        rows, cols = np.tril_indices(q, k=-1)
        order = np.lexsort((rows, cols))  # column-major
        L[rows[order], cols[order]] = theta[q:]
    return L


def materialize(s: CovarianceStructure, theta) -> np.ndarray:
    """Evaluate the family at an unconstrained parameter vector.

    iid -> exp(2 theta) I; diag -> diag(exp(2 theta_i)); unstructured ->
    L L' from the log-Cholesky factor; equalto -> the fixed matrix;
    propto -> exp(2 theta) times the fixed matrix.  Total for every finite
    theta: the result is always symmetric PSD.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (s.n_params,):
        raise DataError(
            f"{s.kind} structure expects {s.n_params} parameters, got {theta.shape[0]}"
        )
    q = s.dim
    if s.kind == "iid":
        return np.exp(2.0 * theta[0]) * np.eye(q)
    if s.kind == "diag":
        return np.diag(np.exp(2.0 * theta))
    if s.kind == "unstructured":
        L = _chol_from_theta(theta, q)
        return L @ L.T
    if s.kind == "equalto":
        return np.array(s.fixed_matrix)
    # propto
    return np.exp(2.0 * theta[0]) * s.fixed_matrix


def theta_from_matrix(s: CovarianceStructure, G) -> np.ndarray:
    """Inverse of :func:`materialize` where one exists (test oracle).

    Only defined for the free-form kinds; ``G`` must be symmetric positive
    definite for ``unstructured``.
    """
    G = np.asarray(G, dtype=float)
    if s.kind == "iid":
        return np.array([0.5 * np.log(G[0, 0])])
    if s.kind == "diag":
        return 0.5 * np.log(np.diag(G))
    if s.kind == "unstructured":
        L = np.linalg.cholesky(G)
        q = s.dim
        rows, cols = np.tril_indices(q, k=-1)
        order = np.lexsort((rows, cols))
        return np.concatenate([np.log(np.diag(L)), L[rows[order], cols[order]]])
    if s.kind == "propto":
        scale = np.trace(G) / np.trace(s.fixed_matrix)
        return np.array([0.5 * np.log(scale)])
    raise DataError("equalto has no free parameters")


def initial_theta(s: CovarianceStructure, data_scale: float) -> np.ndarray:
    """Starting values: variance parameters begin at log(data_scale / 2),
    unstructured off-diagonals at zero."""
    if data_scale <= 0:
        raise DataError("data_scale must be > 0")
    start = np.log(data_scale / 2.0)
    if s.kind == "equalto":
        return np.zeros(0)
    if s.kind in ("iid", "propto"):
        return np.array([start])
    if s.kind == "diag":
        return np.full(s.dim, start)
    theta = np.zeros(s.n_params)
    theta[: s.dim] = start
    return theta


def d_materialize(s: CovarianceStructure, theta) -> list[np.ndarray]:
    """Partial derivatives dG/dtheta_k, one q x q matrix per parameter."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    q = s.dim
    if s.kind == "equalto":
        return []
    if s.kind == "iid":
        return [2.0 * np.exp(2.0 * theta[0]) * np.eye(q)]
    if s.kind == "propto":
        return [2.0 * np.exp(2.0 * theta[0]) * s.fixed_matrix]
    if s.kind == "diag":
        out = []
        for i in range(q):
            D = np.zeros((q, q))
            D[i, i] = 2.0 * np.exp(2.0 * theta[i])
            out.append(D)
        return out
    # unstructured: dG = dL L' + L dL'
    L = _chol_from_theta(theta, q)
    out = []
    for i in range(q):
        dL = np.zeros((q, q))
        dL[i, i] = np.exp(theta[i])
        out.append(dL @ L.T + L @ dL.T)
    rows, cols = np.tril_indices(q, k=-1)
    order = np.lexsort((rows, cols))
    for r, c in zip(rows[order], cols[order]):
        dL = np.zeros((q, q))
        dL[r, c] = 1.0
        out.append(dL @ L.T + L @ dL.T)
    return out


def component_variances(s: CovarianceStructure, theta, level_names=None):
    """Named variance entries of the materialized block, for reporting.

    Returns a list of (suffix, variance) pairs; the suffix is empty for
    1-parameter kinds and the level name for per-level entries.
    """
    G = materialize(s, theta)
    q = s.dim
    names = list(level_names) if level_names is not None else [str(i) for i in range(q)]
    if s.kind in ("iid", "propto"):
        return [("", float(G[0, 0]))]
    if s.kind in ("diag", "unstructured"):
        return [(names[i], float(G[i, i])) for i in range(q)]
    return []
