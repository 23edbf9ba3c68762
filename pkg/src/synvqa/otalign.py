"""Cross-modal alignment by inexact proximal point optimal transport.

Hyperedge and visual features are projected into a shared space, paired by
cosine cost, and aligned with a fixed number of proximal point iterations.
The plan is differentiable end to end because the iterations are unrolled
on the tape. A dot-product attention baseline and row-entropy diagnostics
live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, as_tensor, row_softmax

COSINE_EPS = 1e-8
DEGENERATE_FLOOR = 1e-30


@dataclass
class ProjectionParams:
    """Maps text (d_w) and visual (d_v) features to a shared width d."""

    T_x: Tensor
    T_f: Tensor

    @property
    def d(self) -> int:
        return self.T_x.shape[1]


class SolverError(RuntimeError):
    pass


def cost_matrix(X, F, proj: ProjectionParams) -> Tensor:
    """Cosine distance between projected rows: 1 minus normalized inner product.

    Costs land in [0, 2]. A small epsilon in the denominator keeps zero-norm
    rows finite and differentiable.
    """
    u = as_tensor(X) @ proj.T_x
    v = as_tensor(F) @ proj.T_f
    nu = ((u * u).sum(axis=1, keepdims=True)) ** 0.5
    nv = ((v * v).sum(axis=1, keepdims=True)) ** 0.5
    return 1.0 - (u @ v.T) / (nu @ nv.T + COSINE_EPS)


def ipot(C, iters: int = 10) -> Tensor:
    """Proximal point iteration toward the optimal transport plan.

    kernel K = exp(-C); plan starts all-ones; per iteration
    G = K * plan, a = 1/(N_s G b), b = 1/(N_f G^T a), plan = diag(a) G diag(b).
    Marginals are uniform (1/N_s rows, 1/N_f columns). The final plan is
    returned exactly as produced, no renormalization.
    """
    C = as_tensor(C)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(C.data)):
        raise ValueError("cost matrix has non-finite entries")
    ns, nf = C.shape
    K = (-C).exp()
    plan = as_tensor(np.ones((ns, nf)))
    b = as_tensor(np.full((nf, 1), 1.0 / nf))
    for _ in range(iters):
        G = K * plan
        Gb = G @ b
        if Gb.data.min() < DEGENERATE_FLOOR:
            raise SolverError("degenerate kernel")
        a = (float(ns) * Gb) ** -1.0
        Ga = G.T @ a
        if Ga.data.min() < DEGENERATE_FLOOR:
            raise SolverError("degenerate kernel")
        b = (float(nf) * Ga) ** -1.0
        plan = a * G * b.T
    return plan


def align(X, F, proj: ProjectionParams, iters: int = 10) -> Tensor:
    """Transport plan over projected features, used directly as alignment."""
    return ipot(cost_matrix(X, F, proj), iters=iters)


def dot_align(X, F, proj: ProjectionParams) -> Tensor:
    """Attention baseline: row softmax of projected dot products."""
    u = as_tensor(X) @ proj.T_x
    v = as_tensor(F) @ proj.T_f
    return row_softmax(u @ v.T)


def row_entropy(G) -> np.ndarray:
    """Shannon entropy of each row after normalizing it to a distribution.

    Zero entries contribute nothing; an all-zero row has no distribution
    and is an error.
    """
    A = G.data if isinstance(G, Tensor) else np.asarray(G, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("expected a matrix")
    if np.any(A < 0):
        raise ValueError("negative entries")
    sums = A.sum(axis=1)
    if np.any(sums <= 0):
        raise ValueError("all-zero row has no entropy")
    P = A / sums[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P), 0.0)
    return -terms.sum(axis=1)


def marginal_deviation(plan: np.ndarray) -> float:
    """Max absolute gap between the plan's marginals and uniform targets."""
    ns, nf = plan.shape
    row = np.abs(plan.sum(axis=1) - 1.0 / ns).max()
    col = np.abs(plan.sum(axis=0) - 1.0 / nf).max()
    return max(row, col)


def transport_cost(plan: np.ndarray, C: np.ndarray) -> float:
    return float((plan * C).sum())
