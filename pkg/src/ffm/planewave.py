"""Plane-wave (Gegenbauer) far-pair product for the Helmholtz kernel.

For a far pair with center offset ``r0 = c_X - c_Y`` and box-local coordinates
``x' = x - c_X``, ``y' = y - c_Y``::

    exp(ik|x - y|) / (4 pi |x - y|)
        ~ sum_q exp(ik s_q.x') D_q exp(-ik s_q.y')
    D_q = (ik / 4pi) w_q sum_{p=0}^{L} (2p + 1) i^p / (4pi) h_p(k r0) P_p(s_q . r0/|r0|)

so the pair reduces to a forward transform of the source charges, a diagonal
multiply and a backward transform to the targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nufft

__all__ = [
    "SphericalQuadrature",
    "TransferDiagonal",
    "truncation_rank",
    "spherical_quadrature",
    "legendre_eval",
    "spherical_hankel",
    "gegenbauer_series",
    "gegenbauer_transfer",
    "apply_planewave",
]

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class SphericalQuadrature:
    L: int
    directions: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class TransferDiagonal:
    values: np.ndarray
    offset_key: tuple | None = None
    level: int | None = None

    @property
    def nbytes(self) -> int:
        return self.values.nbytes


def truncation_rank(k: float, d_l: float, tol: float) -> int:
    """``floor(k sqrt(3) d_l - ln(tol))``, at least 1."""
    if not (k > 0 and d_l > 0 and 0 < tol <= 1):
        raise ValueError("need k > 0, d_l > 0 and 0 < tol <= 1")
    return max(1, int(math.floor(k * math.sqrt(3.0) * d_l - math.log(tol))))


def spherical_quadrature(L: int) -> SphericalQuadrature:
    """Gauss-Legendre in cos(theta) (L+1 nodes) times 2L uniform azimuths."""
    if L < 1:
        raise ValueError("quadrature rank must be >= 1")
    t, wt = np.polynomial.legendre.leggauss(L + 1)
    phi = np.arange(2 * L) * (np.pi / L)
    ct = np.repeat(t, 2 * L)
    st = np.sqrt(1.0 - ct**2)
    ph = np.tile(phi, L + 1)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=1)
    weights = np.repeat(wt, 2 * L) * (np.pi / L)
    return SphericalQuadrature(L, dirs, weights)


def legendre_eval(L: int, t) -> np.ndarray:
    """``P_0(t) .. P_L(t)`` stacked on a new leading axis."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty((L + 1,) + t.shape)
    out[0] = 1.0
    if L >= 1:
        out[1] = t
    for p in range(1, L):
        out[p + 1] = ((2 * p + 1) * t * out[p] - p * out[p - 1]) / (p + 1)
    return out


def spherical_hankel(L: int, x: float) -> np.ndarray:
    """``h_0^(1)(x) .. h_L^(1)(x)`` by upward recurrence."""
    x = float(x)
    if not x > 0:
        raise ValueError("spherical Hankel functions are singular at x = 0")
    out = np.empty(L + 1, dtype=np.complex128)
    e = np.exp(1j * x)
    out[0] = -1j * e / x
    if L >= 1:
        out[1] = -e * (x + 1j) / x**2
    for p in range(1, L):
        out[p + 1] = (2 * p + 1) / x * out[p] - out[p - 1]
    return out


def gegenbauer_series(k: float, r0, directions, L: int, include_p0: bool = True) -> np.ndarray:
    """Truncated series ``T_{L,r0}`` evaluated at the given unit directions."""
    r0 = np.asarray(r0, dtype=np.float64)
    dist = float(np.linalg.norm(r0))
    if dist == 0:
        raise ValueError("transfer offset r0 must be nonzero")
    h = spherical_hankel(L, k * dist)
    cos = np.clip(directions @ (r0 / dist), -1.0, 1.0)
    p = np.arange(L + 1)
    coef = (2 * p + 1) * (1j**p) * h / FOUR_PI
    if not include_p0:
        coef[0] = 0.0
    # Clenshaw-free: accumulate with the three-term recurrence
    total = np.zeros(cos.shape, dtype=np.complex128)
    Pm, Pc = np.ones_like(cos), cos
    total += coef[0] * Pm
    if L >= 1:
        total += coef[1] * Pc
    for n in range(1, L):
        Pm, Pc = Pc, ((2 * n + 1) * cos * Pc - n * Pm) / (n + 1)
        total += coef[n + 1] * Pc
    return total


def gegenbauer_transfer(
    k: float,
    r0,
    quad: SphericalQuadrature,
    L: int | None = None,
    *,
    include_p0: bool = True,
    offset_key=None,
    level=None,
) -> TransferDiagonal:
    """Diagonal ``(ik/4pi) w_q T_{L,r0}(s_q)`` acting on box-centered transforms."""
    L = quad.L if L is None else L
    T = gegenbauer_series(k, r0, quad.directions, L, include_p0)
    values = (1j * k / FOUR_PI) * quad.weights * T
    return TransferDiagonal(values, offset_key, level)


def apply_planewave(
    targets,
    sources,
    u,
    transfer: TransferDiagonal,
    quad: SphericalQuadrature,
    k: float,
    *,
    target_center=None,
    source_center=None,
    tol: float = 1e-4,
    force_direct: bool = False,
) -> np.ndarray:
    """Far-pair product through forward transform, diagonal, backward transform."""
    x = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    y = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    if target_center is not None:
        x = x - np.asarray(target_center)
    if source_center is not None:
        y = y - np.asarray(source_center)
    freq = k * quad.directions
    half = max(float(np.abs(x).max()), float(np.abs(y).max()), 1e-300)
    plan_y = nufft.make_plan(len(y), freq, tol, half_width=half, force_direct=force_direct)
    plan_x = nufft.make_plan(len(x), freq, tol, half_width=half, force_direct=force_direct)
    u_hat = nufft.forward(plan_y, y, np.asarray(u, dtype=np.complex128))
    return nufft.backward(plan_x, x, transfer.values * u_hat)
