"""Chebyshev-Lagrange interpolation of far interactions, with ACA on the transfer.

A far pair is applied as ``L_X^T (A (B^T (L_Y u)))`` where ``L`` are tensor
Lagrange bases on ``r1**3`` Chebyshev control points and ``A B^T`` is the
cross approximation of the kernel sampled at control-point pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import KernelSpec

__all__ = [
    "ChebGrid",
    "LowRankFactor",
    "chebyshev_points",
    "chebyshev_nodes",
    "lagrange_1d",
    "lagrange_matrix",
    "tensor_weights",
    "transfer_matrix",
    "aca",
    "aca_matrix",
    "apply_lowrank",
    "choose_order",
]


def chebyshev_points(r1: int) -> np.ndarray:
    """Roots of T_r1 on [-1, 1], in the order cos((2i - 1) pi / (2 r1)), i = 1..r1."""
    if r1 < 1:
        raise ValueError("interpolation order must be >= 1")
    i = np.arange(1, r1 + 1)
    x = np.cos((2 * i - 1) * np.pi / (2 * r1))
    # cos(pi/2) is 6e-17, not 0
    x[np.abs(x) < 1e-15] = 0.0
    return x


@dataclass(frozen=True)
class ChebGrid:
    center: np.ndarray
    edge: float
    order: int

    @property
    def axis_nodes(self) -> np.ndarray:
        return chebyshev_points(self.order)

    @property
    def nodes(self) -> np.ndarray:
        """``order**3`` control points, z index fastest."""
        t = self.axis_nodes
        a, b, c = np.meshgrid(t, t, t, indexing="ij")
        ref = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
        return self.center + 0.5 * self.edge * ref

    @property
    def size(self) -> int:
        return self.order**3


def chebyshev_nodes(center, edge: float, r1: int) -> ChebGrid:
    chebyshev_points(r1)
    return ChebGrid(np.asarray(center, dtype=np.float64), float(edge), int(r1))


def lagrange_1d(t: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Values ``(len(t), len(nodes))`` of the 1D Lagrange basis on ``nodes``."""
    t = np.asarray(t, dtype=np.float64)
    r1 = len(nodes)
    out = np.ones(t.shape + (r1,))
    for a in range(r1):
        for b in range(r1):
            if a != b:
                out[..., a] *= (t - nodes[b]) / (nodes[a] - nodes[b])
    return out


def tensor_weights(ref: np.ndarray, r1: int) -> np.ndarray:
    """Tensor Lagrange weights ``(n, r1**3)`` of reference points in [-1, 1]^3."""
    w = lagrange_1d(ref, chebyshev_points(r1))  # (n, 3, r1)
    n = len(ref)
    return (w[:, 0, :, None, None] * w[:, 1, None, :, None] * w[:, 2, None, None, :]).reshape(n, -1)


def lagrange_matrix(grid: ChebGrid, points) -> np.ndarray:
    """``(r, n)`` matrix of tensor Lagrange basis functions at ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ref = 2.0 * (pts - grid.center) / grid.edge
    return tensor_weights(ref, grid.order).T


def transfer_matrix(kernel: KernelSpec, target_grid: ChebGrid, source_grid: ChebGrid) -> np.ndarray:
    x = target_grid.nodes
    y = source_grid.nodes
    return np.asarray(kernel(x[:, None, :], y[None, :, :]))


@dataclass(frozen=True)
class LowRankFactor:
    """``T ~ A @ B.T`` with ``A, B`` of shape ``(r, rank)``."""

    A: np.ndarray
    B: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def dense(self) -> np.ndarray:
        return self.A @ self.B.T

    @property
    def nbytes(self) -> int:
        return self.A.nbytes + self.B.nbytes


def aca(
    entry: Callable[[np.ndarray, np.ndarray], np.ndarray],
    rows: int,
    cols: int,
    tol: float,
    max_rank: int | None = None,
    dtype=None,
) -> LowRankFactor:
    """Partially pivoted adaptive cross approximation.

    ``entry(I, J)`` returns matrix entries for broadcastable index arrays, so a
    row is ``entry(i, arange(cols))``. The first pivot row is the row of the
    largest entry of column 0; each later pivot row is the largest entry of the
    last residual column among unused rows. Stops once two consecutive crosses
    satisfy ``|a_k| |b_k| <= tol * |sum of crosses|_F`` (a single small cross
    is often a lucky pivot) or the rank is exhausted.
    """
    if not tol > 0:
        raise ValueError("ACA tolerance must be positive")
    max_rank = min(rows, cols) if max_rank is None else min(max_rank, rows, cols)
    all_cols = np.arange(cols)
    all_rows = np.arange(rows)
    col0 = np.asarray(entry(all_rows, np.zeros(rows, dtype=np.int64)))
    if dtype is None:
        dtype = np.result_type(col0.dtype, np.float64)
    A = np.zeros((rows, max_rank), dtype=dtype)
    B = np.zeros((cols, max_rank), dtype=dtype)
    used_rows = np.zeros(rows, dtype=bool)
    i = int(np.argmax(np.abs(col0)))
    # residual entries below this are rounding noise of earlier crosses
    zero = 0.0
    norm2 = 0.0
    small = 0
    k = 0
    while k < max_rank:
        row = np.asarray(entry(np.full(cols, i), all_cols), dtype=dtype)
        if k:
            row = row - B[:, :k] @ A[i, :k]
        used_rows[i] = True
        j = int(np.argmax(np.abs(row)))
        pivot = row[j]
        if abs(pivot) <= zero:
            # residual row vanished: try the remaining rows
            free = np.flatnonzero(~used_rows)
            if free.size == 0:
                break
            ref = np.abs(A[free, k - 1]) if k else np.abs(col0[free])
            i = int(free[np.argmax(ref)])
            continue
        if k == 0:
            zero = 64 * np.finfo(np.float64).eps * abs(pivot)
        b = row / pivot
        a = np.asarray(entry(all_rows, np.full(rows, j)), dtype=dtype)
        if k:
            a = a - A[:, :k] @ B[j, :k]
        A[:, k] = a
        B[:, k] = b
        na2 = float(np.vdot(a, a).real)
        nb2 = float(np.vdot(b, b).real)
        if k:
            cross = (A[:, :k].conj().T @ a) * (B[:, :k].conj().T @ b)
            norm2 += 2.0 * float(np.sum(cross).real)
        norm2 += na2 * nb2
        k += 1
        small = small + 1 if math.sqrt(na2 * nb2) <= tol * math.sqrt(max(norm2, 0.0)) else 0
        if small == 2:
            break
        cand = np.abs(a)
        cand[used_rows] = -1.0
        if cand.max() < 0:
            break
        i = int(np.argmax(cand))
    return LowRankFactor(A[:, :k].copy(), B[:, :k].copy())


def aca_matrix(T: np.ndarray, tol: float, max_rank: int | None = None) -> LowRankFactor:
    """ACA on an explicitly stored matrix."""
    T = np.asarray(T)
    return aca(lambda I, J: T[I, J], T.shape[0], T.shape[1], tol, max_rank, dtype=np.result_type(T, np.float64))


def apply_lowrank(L_X: np.ndarray, factor: LowRankFactor, L_Y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``L_X.T @ (A @ (B.T @ (L_Y @ u)))``; no m x n matrix is formed."""
    if factor.rank == 0:
        dt = np.result_type(L_X, factor.A, u)
        return np.zeros(L_X.shape[1], dtype=dt)
    return L_X.T @ (factor.A @ (factor.B.T @ (L_Y @ u)))


def choose_order(tol: float) -> int:
    """Chebyshev points per axis for a target accuracy.

    Calibrated on Laplace far pairs with random-sign charges: 4 points per
    axis leave a 95th-percentile pair error of 1e-3, 5 points bring it to
    9e-5, so the middle band uses 5.
    """
    if not 0 < tol < 1:
        raise ValueError("tolerance must lie in (0, 1)")
    if tol >= 1e-2:
        return 3
    if tol >= 1e-4:
        return 5
    return 5 + math.ceil(math.log10(1e-4 / tol) - 1e-12)
