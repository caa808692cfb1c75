"""3D type-3 non-uniform Fourier sums between box-local points and frequencies.

forward:   F[q] = sum_j exp(-i w_q . x_j) u_j
backward:  v[j] = sum_q exp(+i w_q . x_j) F[q]      (the exact adjoint)

The gridded path follows the Gaussian-gridding construction: the point
charges are spread with a Gaussian onto a uniform grid (spacing ``h``), the
grid sum ``sum_m c_m exp(-i w . x_m)`` is evaluated by a second Gaussian
gridding step on an oversampled FFT grid, and both Gaussians are divided out
in the frequency domain. ``backward`` on the gridded path applies the exact
transpose of every forward stage, so the adjoint identity holds to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft
import scipy.sparse as sp

__all__ = [
    "NufftPlan",
    "make_plan",
    "forward",
    "backward",
    "forward_boxes",
    "backward_boxes",
    "spread_width",
    "DEFAULT_CROSSOVER",
]

DEFAULT_CROSSOVER = 1_000_000
# w = ceil(SPREAD_C * (|ln tol| + SPREAD_SHIFT)) grid points on each side
SPREAD_C = 0.45
SPREAD_SHIFT = 0.0
_CHUNK = 1 << 22


def spread_width(tol: float) -> int:
    """Gaussian spreading half-width (in grid points) for a target accuracy."""
    if not tol > 0:
        raise ValueError("NUFFT tolerance must be positive")
    return max(2, math.ceil(SPREAD_C * (abs(math.log(tol)) + SPREAD_SHIFT)))


@dataclass(frozen=True)
class NufftPlan:
    frequencies: np.ndarray
    tolerance: float
    mode: str
    half_width: float
    grid_spread: int
    oversampling: float = 2.0
    # gridded-path constants (derived in make_plan)
    h: float = 0.0
    tau1: float = 0.0
    tau2: float = 0.0
    n_grid: int = 0
    n_fine: int = 0
    # direct path: float32 cos/sin of range-reduced phases (about 1e-6 relative)
    fast_trig: bool = False
    _interp: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _scale: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_freq(self) -> int:
        return len(self.frequencies)

    def with_mode(self, mode: str) -> "NufftPlan":
        return replace(self, mode=mode)

    def mode_for(self, n_points: int, crossover: float = DEFAULT_CROSSOVER) -> str:
        return "direct" if n_points * self.n_freq <= crossover else "gridded"

    @property
    def nbytes(self) -> int:
        n = self.frequencies.nbytes
        if self._interp is not None:
            n += self._interp.data.nbytes + self._interp.indices.nbytes + self._interp.indptr.nbytes
        if self._scale is not None:
            n += self._scale.nbytes
        return n


def make_plan(
    n_points: int,
    frequencies,
    tol: float,
    *,
    half_width: float = 0.5,
    crossover: float = DEFAULT_CROSSOVER,
    force_direct: bool = False,
    oversampling: float = 2.0,
    fast_trig: bool = False,
) -> NufftPlan:
    """Choose direct or gridded evaluation and derive the gridding constants.

    ``half_width`` bounds the point coordinates: every point must satisfy
    ``|x_d| <= half_width``. The gridded constants are always derived so that
    the same plan can serve boxes of either mode.
    """
    if not tol > 0:
        raise ValueError("NUFFT tolerance must be positive")
    freq = np.atleast_2d(np.asarray(frequencies, dtype=np.float64))
    n_q = len(freq)
    mode = "direct" if (force_direct or n_points * n_q <= crossover) else "gridded"
    w = spread_width(tol)
    S = float(np.abs(freq).max()) if n_q else 0.0
    S = max(S, 1e-300)
    X = float(half_width)
    beta = 2.0 * oversampling
    h = 2.0 * np.pi / (beta * S)
    # balance truncation exp(-(wh)^2/4tau) against aliasing exp(-tau S^2 beta(beta-2))
    tau1 = w * h / (2.0 * S * math.sqrt(beta * (beta - 2.0)))
    c = math.ceil(X / h) + w
    M1 = 2 * c + 1
    Mr = scipy.fft.next_fast_len(int(math.ceil(oversampling * M1)))
    R = Mr / M1
    tau2 = np.pi * w / (M1 * M1 * R * (R - 0.5))
    plan = NufftPlan(
        frequencies=freq,
        tolerance=float(tol),
        mode=mode,
        half_width=X,
        grid_spread=w,
        oversampling=oversampling,
        h=h,
        tau1=tau1,
        tau2=tau2,
        n_grid=M1,
        n_fine=Mr,
        fast_trig=fast_trig,
    )
    return plan


def _gridded_constants(plan: NufftPlan) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse fine-grid interpolation matrix and per-frequency scale (cached)."""
    if plan._interp is not None:
        return plan._interp, plan._scale
    w, Mr, h, tau2, tau1 = plan.grid_spread, plan.n_fine, plan.h, plan.tau2, plan.tau1
    theta = plan.frequencies * h  # (nq, 3), within (-pi, pi)
    pos = theta * (Mr / (2.0 * np.pi))
    l0 = np.floor(pos).astype(np.int64)
    offs = np.arange(-w + 1, w + 1)
    lidx = l0[:, :, None] + offs  # (nq, 3, 2w)
    dth = theta[:, :, None] - lidx * (2.0 * np.pi / Mr)
    g = np.exp(-(dth**2) / (4.0 * tau2))
    lidx %= Mr
    n_q = len(theta)
    flat = (lidx[:, 0, :, None, None] * Mr + lidx[:, 1, None, :, None]) * Mr + lidx[:, 2, None, None, :]
    vals = g[:, 0, :, None, None] * g[:, 1, None, :, None] * g[:, 2, None, None, :]
    rows = np.repeat(np.arange(n_q), (2 * w) ** 3)
    interp = sp.csr_matrix(
        (vals.ravel() / Mr**3, (rows, flat.ravel())), shape=(n_q, Mr**3)
    )
    s2 = np.einsum("ij,ij->i", plan.frequencies, plan.frequencies)
    scale = h**3 * np.exp(tau1 * s2) / (4.0 * np.pi * tau1) ** 1.5
    object.__setattr__(plan, "_interp", interp)
    object.__setattr__(plan, "_scale", scale)
    return interp, scale


def _stage2_deconv(plan: NufftPlan) -> tuple[np.ndarray, np.ndarray]:
    M1, Mr, tau2 = plan.n_grid, plan.n_fine, plan.tau2
    c = (M1 - 1) // 2
    m = np.arange(M1) - c
    ghat = math.sqrt(tau2 / np.pi) * np.exp(-tau2 * m.astype(np.float64) ** 2)
    return 1.0 / ghat, m % Mr


def _stencil(plan: NufftPlan, pts: np.ndarray):
    """Per-axis grid indices ``(n, 3, 2w)`` and Gaussian weights for points."""
    w, h, M1 = plan.grid_spread, plan.h, plan.n_grid
    c = (M1 - 1) // 2
    g = pts / h + c
    i0 = np.floor(g).astype(np.int64)
    idx = i0[:, :, None] + np.arange(-w + 1, w + 1)
    dist = (g[:, :, None] - idx) * h
    wts = np.exp(-(dist**2) / (4.0 * plan.tau1))
    return idx, wts


def _check_points(plan: NufftPlan, pts: np.ndarray):
    if len(pts) and np.abs(pts).max() > plan.half_width * (1 + 1e-9) + 1e-300:
        raise ValueError("points exceed the plan's half width")


def _spread(plan: NufftPlan, pts, vals, slot, n_slots) -> np.ndarray:
    M1, w = plan.n_grid, plan.grid_spread
    size = n_slots * M1**3
    out_re = np.zeros(size)
    out_im = np.zeros(size)
    step = max(1, _CHUNK // (2 * w) ** 3)
    for a in range(0, len(pts), step):
        b = a + step
        idx, wts = _stencil(plan, pts[a:b])
        flat = ((slot[a:b, None, None, None] * M1 + idx[:, 0, :, None, None]) * M1
                + idx[:, 1, None, :, None]) * M1 + idx[:, 2, None, None, :]
        contrib = wts[:, 0, :, None, None] * wts[:, 1, None, :, None] * wts[:, 2, None, None, :]
        v = vals[a:b, None, None, None]
        out_re += np.bincount(flat.ravel(), weights=(contrib * v.real).ravel(), minlength=size)
        if np.iscomplexobj(vals):
            out_im += np.bincount(flat.ravel(), weights=(contrib * v.imag).ravel(), minlength=size)
    return (out_re + 1j * out_im).reshape(n_slots, M1, M1, M1)


def _gather(plan: NufftPlan, grid: np.ndarray, pts, slot) -> np.ndarray:
    M1, w = plan.n_grid, plan.grid_spread
    flatgrid = grid.reshape(-1)
    out = np.empty(len(pts), dtype=np.complex128)
    step = max(1, _CHUNK // (2 * w) ** 3)
    for a in range(0, len(pts), step):
        b = a + step
        idx, wts = _stencil(plan, pts[a:b])
        flat = ((slot[a:b, None, None, None] * M1 + idx[:, 0, :, None, None]) * M1
                + idx[:, 1, None, :, None]) * M1 + idx[:, 2, None, None, :]
        vals = flatgrid[flat]
        out[a:b] = np.einsum("nabc,na,nb,nc->n", vals, wts[:, 0], wts[:, 1], wts[:, 2], optimize=True)
    return out


def _gridded_forward(plan: NufftPlan, pts, u, offsets) -> np.ndarray:
    """Forward sums for a batch of boxes whose points are contiguous by ``offsets``."""
    interp, scale = _gridded_constants(plan)
    n_box = len(offsets) - 1
    slot = _slots(offsets)
    grid = _spread(plan, pts, u, slot, n_box)
    inv_ghat, wrap = _stage2_deconv(plan)
    grid *= inv_ghat[:, None, None] * inv_ghat[None, :, None] * inv_ghat[None, None, :]
    Mr = plan.n_fine
    fine = np.zeros((n_box, Mr, Mr, Mr), dtype=np.complex128)
    fine[:, wrap[:, None, None], wrap[None, :, None], wrap[None, None, :]] = grid
    del grid
    fine = scipy.fft.fftn(fine, axes=(1, 2, 3), overwrite_x=True)
    out = (interp @ fine.reshape(n_box, -1).T).T
    return out * scale


def _gridded_backward(plan: NufftPlan, vhat, pts, offsets) -> np.ndarray:
    interp, scale = _gridded_constants(plan)
    n_box = len(offsets) - 1
    Mr, M1 = plan.n_fine, plan.n_grid
    b = np.asarray(vhat) * np.conj(scale)
    fine = (interp.T @ b.T).T.reshape(n_box, Mr, Mr, Mr)
    fine = scipy.fft.ifftn(fine, axes=(1, 2, 3), overwrite_x=True) * Mr**3
    inv_ghat, wrap = _stage2_deconv(plan)
    grid = fine[:, wrap[:, None, None], wrap[None, :, None], wrap[None, None, :]]
    del fine
    grid *= inv_ghat[:, None, None] * inv_ghat[None, :, None] * inv_ghat[None, None, :]
    slot = _slots(offsets)
    return _gather(plan, grid, pts, slot)


_ROUND = 1.5 * 2.0**52  # x + _ROUND - _ROUND rounds a double to an integer


def _trig(pts, freq) -> tuple[np.ndarray, np.ndarray]:
    """cos and sin of ``pts @ freq.T`` in float32 after reduction to [-pi, pi]."""
    turns = pts @ (freq.T * (0.5 / np.pi))
    whole = turns + _ROUND
    whole -= _ROUND
    turns -= whole
    del whole
    ph = turns.astype(np.float32)
    del turns
    ph *= np.float32(2.0 * np.pi)
    return np.cos(ph).astype(np.float64), np.sin(ph).astype(np.float64)


def _slots(offsets) -> np.ndarray:
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def _direct_forward(plan: NufftPlan, pts, u, offsets) -> np.ndarray:
    n_box = len(offsets) - 1
    n_q = plan.n_freq
    out = np.zeros((n_box, n_q), dtype=np.complex128)
    step = max(1, _CHUNK // max(n_q, 1))
    slot = _slots(offsets)
    for a in range(0, len(pts), step):
        b = min(a + step, len(pts))
        s = slot[a:b]
        starts = np.flatnonzero(np.concatenate(([True], s[1:] != s[:-1])))
        if plan.fast_trig:
            C, S = _trig(pts[a:b], plan.frequencies)
            # per-box sums as a sparse (boxes x points) product
            cols = np.arange(b - a)
            rows = np.searchsorted(starts, cols, side="right") - 1
            shape = (len(starts), b - a)
            ur = sp.csr_matrix((np.real(u[a:b]).astype(np.float64), (rows, cols)), shape=shape)
            part = ur @ C - 1j * (ur @ S)
            if np.iscomplexobj(u):
                ui = sp.csr_matrix((np.imag(u[a:b]), (rows, cols)), shape=shape)
                part += 1j * (ui @ C) + ui @ S
            out[s[starts]] += part
            continue
        E = np.exp(-1j * (pts[a:b] @ plan.frequencies.T))
        E *= u[a:b, None]
        out[s[starts]] += np.add.reduceat(E, starts, axis=0)
    return out


def _direct_backward(plan: NufftPlan, vhat, pts, offsets) -> np.ndarray:
    n_q = plan.n_freq
    out = np.empty(len(pts), dtype=np.complex128)
    step = max(1, _CHUNK // max(n_q, 1))
    slot = _slots(offsets)
    vhat = np.asarray(vhat)
    if plan.fast_trig:
        vr = np.ascontiguousarray(vhat.real)
        vi = np.ascontiguousarray(vhat.imag)
    for a in range(0, len(pts), step):
        b = min(a + step, len(pts))
        s = slot[a:b]
        if plan.fast_trig:
            C, S = _trig(pts[a:b], plan.frequencies)
            gr, gi = vr[s], vi[s]
            re = np.einsum("nq,nq->n", C, gr) - np.einsum("nq,nq->n", S, gi)
            im = np.einsum("nq,nq->n", C, gi) + np.einsum("nq,nq->n", S, gr)
            out[a:b] = re + 1j * im
            continue
        E = np.exp(1j * (pts[a:b] @ plan.frequencies.T))
        out[a:b] = np.einsum("nq,nq->n", E, vhat[s])
    return out


def forward_boxes(plan: NufftPlan, points, u, offsets) -> np.ndarray:
    """Forward sums for several point sets at once, ``(n_boxes, n_freq)``.

    ``points[offsets[b]:offsets[b + 1]]`` are the (box-centered) points of set
    ``b``. The plan's mode decides the path for the whole batch.
    """
    pts = np.asarray(points, dtype=np.float64)
    u = np.asarray(u)
    offsets = np.asarray(offsets, dtype=np.int64)
    if plan.mode == "gridded":
        _check_points(plan, pts)
        return _gridded_forward(plan, pts, u, offsets)
    return _direct_forward(plan, pts, u, offsets)


def backward_boxes(plan: NufftPlan, vhat, points, offsets) -> np.ndarray:
    """Backward sums for several point sets; ``vhat`` has one row per set."""
    pts = np.asarray(points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    vhat = np.atleast_2d(vhat)
    if plan.mode == "gridded":
        _check_points(plan, pts)
        return _gridded_backward(plan, vhat, pts, offsets)
    return _direct_backward(plan, vhat, pts, offsets)


def forward(plan: NufftPlan, points, u) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return forward_boxes(plan, pts, np.asarray(u), [0, len(pts)])[0]


def backward(plan: NufftPlan, points, v_hat) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return backward_boxes(plan, np.asarray(v_hat)[None, :], pts, [0, len(pts)])
