"""Label diffusion: seed matrix, sparse linear solve, pseudo-label assignment.

Labels spread by solving (I - alpha*S) Z = Y column by column, where S is
the normalized affinity matrix and Y holds one-hot rows for labeled items.
A dense factorization of the same system serves as the reference oracle at
small n. The iterative path uses the conjugate-residual scheme - the
minimum-residual member of the conjugate-direction family for symmetric
positive definite systems - because it makes the recorded residual norms
non-increasing by construction, which the plain conjugate-gradient
recurrence does not guarantee.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest, ROLE_LABELED
from .errors import ConvergenceWarning, DataError, ParamError, SolverError
from .graph import SparseAffinity

UNASSIGNED = -1

_DENSE_ORACLE_LIMIT = 2000
_ASSIGN_EPS = 1e-12


@dataclass(frozen=True)
class PropagationConfig:
    """Diffusion strength and solver stopping parameters."""

    alpha: float = 0.99
    tol: float = 1e-6
    max_iter: int = 200
    class_mass_norm: bool = False

    def validate(self) -> None:
        if not 0 <= self.alpha < 1:
            raise ParamError(f"alpha must be in [0, 1), got {self.alpha}")
        if not self.tol > 0:
            raise ParamError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ParamError(f"max_iter must be positive, got {self.max_iter}")


@dataclass
class ClassSolveStats:
    """Iteration count and residual record for one class-column solve."""

    class_index: int
    iterations: int
    final_residual: float
    converged: bool
    residual_trace: tuple[float, ...]


@dataclass
class PropagationResult:
    """Propagated scores plus derived pseudo-labels and confidences."""

    P: np.ndarray                  # (n, c) float64
    pseudo_labels: np.ndarray      # (n,) int64, UNASSIGNED where no mass arrived
    confidence: np.ndarray         # (n,) float64 in [0, 1]
    cg_stats: list[ClassSolveStats] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def c(self) -> int:
        return self.P.shape[1]


def build_label_matrix(manifest: DatasetManifest) -> np.ndarray:
    """One-hot rows for labeled items, zero rows everywhere else.

    Items with role "eval" keep zero rows: their truth is withheld and they
    participate exactly like unlabeled nodes.
    """
    y = np.zeros((manifest.n, manifest.c), dtype=np.float64)
    for i, item in enumerate(manifest.items):
        if item.role == ROLE_LABELED:
            y[i, item.label] = 1.0
    return y


def propagate_dense_oracle(s: SparseAffinity, y: np.ndarray, cfg: PropagationConfig) -> np.ndarray:
    """Exact dense solve of (I - alpha*S) P = Y; reference path for tests.

    Materializing and factorizing the dense system is only viable at small
    n, so the size is guarded.
    """
    cfg.validate()
    if s.n > _DENSE_ORACLE_LIMIT:
        raise ParamError(f"dense oracle limited to n <= {_DENSE_ORACLE_LIMIT}, got n={s.n}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != s.n:
        raise ParamError(f"label matrix has {y.shape[0]} rows, graph has {s.n} nodes")
    a = np.eye(s.n) - cfg.alpha * s.to_scipy().toarray()
    return np.linalg.solve(a, y)


def _min_residual_solve(matvec, b: np.ndarray, tol: float, max_iter: int):
    """Conjugate-residual iteration for a symmetric positive definite system.

    Each step minimizes ||b - A x||_2 over the expanding Krylov subspace,
    so the recorded residual norms never increase. Returns
    (x, residual_norms, converged); residual_norms[0] is ||b||.
    """
    x = np.zeros_like(b)
    r = b.copy()
    norm_r = float(np.linalg.norm(r))
    trace = [norm_r]
    threshold = tol * max(1.0, float(np.linalg.norm(b)))
    if norm_r <= threshold:
        return x, trace, True
    p = r.copy()
    ar = matvec(r)
    ap = ar.copy()
    r_dot_ar = float(r @ ar)
    for _ in range(max_iter):
        denom = float(ap @ ap)
        if denom == 0.0:
            break  # search direction vanished; residual cannot improve
        step = r_dot_ar / denom
        x = x + step * p
        r = r - step * ap
        norm_r = float(np.linalg.norm(r))
        if not math.isfinite(norm_r):
            raise SolverError("non-finite residual during linear solve")
        trace.append(norm_r)
        if norm_r <= threshold:
            return x, trace, True
        ar = matvec(r)
        next_r_dot_ar = float(r @ ar)
        if r_dot_ar == 0.0:
            break
        beta = next_r_dot_ar / r_dot_ar
        p = r + beta * p
        ap = ar + beta * ap
        r_dot_ar = next_r_dot_ar
    return x, trace, norm_r <= threshold


def propagate_cg(
    s: SparseAffinity,
    y: np.ndarray,
    cfg: PropagationConfig,
    threads: int = 1,
) -> PropagationResult:
    """Iterative solve of (I - alpha*S) Z = Y, one independent solve per class.

    Stops each column when the residual 2-norm drops below
    tol * max(1, ||y_j||); hitting max_iter first raises ConvergenceWarning
    (the partial result is still returned). Labeled rows keep their true
    class in `pseudo_labels` regardless of the propagated argmax.
    """
    cfg.validate()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != s.n:
        raise ParamError(f"label matrix shape {y.shape} does not match graph n={s.n}")
    mat = s.to_scipy()
    alpha = cfg.alpha
    n, c = y.shape
    p_out = np.zeros((n, c), dtype=np.float64)
    stats: list[ClassSolveStats] = [None] * c  # type: ignore[list-item]

    def matvec(v: np.ndarray) -> np.ndarray:
        return v - alpha * (mat @ v)

    def solve_class(j: int) -> None:
        x, trace, converged = _min_residual_solve(matvec, y[:, j], cfg.tol, cfg.max_iter)
        p_out[:, j] = x
        stats[j] = ClassSolveStats(
            class_index=j,
            iterations=len(trace) - 1,
            final_residual=trace[-1],
            converged=converged,
            residual_trace=tuple(trace),
        )

    columns = range(c)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve_class, columns))
    else:
        for j in columns:
            solve_class(j)

    for st in stats:
        if not st.converged:
            warnings.warn(
                ConvergenceWarning(
                    f"class {st.class_index} solve stopped at residual "
                    f"{st.final_residual:.3e} after {st.iterations} iterations",
                    final_residual=st.final_residual,
                )
            )

    scores = p_out
    if cfg.class_mass_norm:
        seed_counts = y.sum(axis=0)
        scale = np.where(seed_counts > 0, seed_counts, 1.0)
        scores = p_out / scale[None, :]

    pseudo, confidence = assign_pseudo_labels(scores)
    seeded = y.sum(axis=1) > 0
    pseudo[seeded] = y[seeded].argmax(axis=1)
    return PropagationResult(P=p_out, pseudo_labels=pseudo, confidence=confidence, cg_stats=stats)


def assign_pseudo_labels(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels plus entropy-based confidence for every row of P.

    Rows whose maximum score is at or below 1e-12 (nodes no seed can reach)
    get UNASSIGNED with confidence 0. Otherwise the row is clamped to be
    nonnegative, L1-normalized, and scored as 1 - H(row)/log(c): 1 for a
    point mass, 0 for a uniform row. Argmax ties break toward the smaller
    class index.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ParamError(f"score matrix must be 2-D, got {p.ndim}-D")
    if not np.isfinite(p).all():
        raise DataError("score matrix contains non-finite values")
    n, c = p.shape
    row_max = p.max(axis=1)
    assigned = row_max > _ASSIGN_EPS
    labels = np.where(assigned, p.argmax(axis=1), UNASSIGNED).astype(np.int64)

    confidence = np.zeros(n, dtype=np.float64)
    if c == 1:
        confidence[assigned] = 1.0
        return labels, confidence
    clamped = np.maximum(p, 0.0)
    sums = clamped.sum(axis=1)
    safe = np.where(assigned, sums, 1.0)
    probs = clamped / safe[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropy = -plogp.sum(axis=1)
    confidence = np.where(assigned, 1.0 - entropy / math.log(c), 0.0)
    return labels, np.clip(confidence, 0.0, 1.0)
