"""Descent-only driver of the fast convolution product.

Level ``l`` refines the boxes of the pairs that were near at level ``l - 1``,
computes every far child pair at once (Chebyshev-Lagrange or plane-wave path)
and keeps only the near child pairs. Nothing built for a level survives it.
When the stopping rule fires the remaining near pairs are summed densely.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import interp, nufft, planewave
from .geometry import (
    InteractionPair,
    LevelGrid,
    PointCloud,
    bounding_cubes,
    child_pairs,
    child_ranges,
    classify,
    offset_vectors,
    restrict,
    subdivide,
)
from .kernels import KernelSpec, dense_block, is_oscillatory

__all__ = [
    "FfmConfig",
    "ProductReport",
    "LevelState",
    "MemoryTracker",
    "ffm_product",
    "product",
    "near_field",
    "stop_check",
    "transfer_key",
    "auto_max_depth",
]

log = logging.getLogger(__name__)

# scratch arrays are processed in chunks of about this many scalars
_CHUNK = 1 << 21
# cap on the fine FFT grids of one batch of gridded boxes (bytes)
_GRID_BATCH_BYTES = 64 << 20


@dataclass(frozen=True)
class FfmConfig:
    tol: float = 1e-3
    leaf_avg: float = 64
    max_depth: int = 0
    osc_threshold: float = 1.0
    force_direct_nufft: bool = False
    cheb_order_override: int | None = None
    aca_tol_factor: float = 0.1
    nufft_tol_factor: float = 0.1
    nufft_crossover: float = nufft.DEFAULT_CROSSOVER
    include_p0: bool = True
    include_diagonal: bool = False
    diagonal_value: complex = 0.0
    threads: int = 1
    precision: str = "double"
    trace: bool = False
    deadline: float | None = None

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if not self.leaf_avg >= 1:
            raise ValueError("leaf_avg must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 1 when set (0 selects the automatic cap)")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        if self.cheb_order_override is not None and self.cheb_order_override < 1:
            raise ValueError("cheb_order_override must be >= 1")


@dataclass
class ProductReport:
    v: np.ndarray
    levels_used: int
    far_pairs_per_level: dict[int, int] = field(default_factory=dict)
    near_pairs_final: int = 0
    transfer_cache_sizes: dict[int, int] = field(default_factory=dict)
    level_paths: dict[int, str] = field(default_factory=dict)
    peak_aux_bytes: int = 0
    trace: list | None = None


@dataclass(frozen=True)
class LevelState:
    level: int
    n_near: int
    target_nodes: int
    target_boxes: int
    source_nodes: int
    source_boxes: int
    max_depth: int

    @property
    def mean_nodes(self) -> float:
        mt = self.target_nodes / max(self.target_boxes, 1)
        ms = self.source_nodes / max(self.source_boxes, 1)
        return min(mt, ms)


class MemoryTracker:
    """High-water mark of named auxiliary allocations (bytes)."""

    def __init__(self):
        self.live: dict[str, int] = {}
        self.current = 0
        self.peak = 0

    def hold(self, name: str, *arrays) -> None:
        nbytes = 0
        for a in arrays:
            if a is None:
                continue
            nbytes += a if isinstance(a, (int, np.integer)) else int(getattr(a, "nbytes", 0))
        self.current += nbytes - self.live.get(name, 0)
        self.live[name] = nbytes
        self.peak = max(self.peak, self.current)

    def drop(self, *names: str) -> None:
        for name in names:
            self.current -= self.live.pop(name, 0)

    def transient(self, nbytes: int) -> None:
        """Account for scratch that lives only inside one step."""
        self.peak = max(self.peak, self.current + int(nbytes))


def auto_max_depth(n: int) -> int:
    """``floor(log_8 n)``, at least 1."""
    d = 0
    while 8 ** (d + 1) <= n:
        d += 1
    return max(1, d)


def stop_check(state: LevelState, config: FfmConfig) -> bool:
    if state.n_near == 0:
        return True
    if state.mean_nodes < config.leaf_avg:
        return True
    return state.level >= state.max_depth


def transfer_key(pair: InteractionPair, level: int) -> tuple[int, tuple[int, int, int]]:
    """``(level, lattice delta)``; equal keys mean bitwise-equal center offsets."""
    return int(level), tuple(int(v) for v in pair.offset)


def _check_deadline(cfg: FfmConfig) -> None:
    if cfg.deadline is not None and time.monotonic() > cfg.deadline:
        raise TimeoutError("product exceeded its time budget")


def _expand(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + c)`` over the given ranges."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    base = np.repeat(starts - (np.cumsum(counts) - counts), counts)
    return base + np.arange(total, dtype=np.int64)


def _key_codes(delta: np.ndarray) -> np.ndarray:
    off = 1 << 20
    d = delta + off
    return (d[:, 0] << 42) | (d[:, 1] << 21) | d[:, 2]


def _group_by_key(delta: np.ndarray):
    """Sort order and group boundaries of pairs sharing a lattice delta."""
    codes = _key_codes(delta)
    order = np.argsort(codes, kind="stable")
    sc = codes[order]
    starts = np.flatnonzero(np.concatenate(([True], sc[1:] != sc[:-1])))
    bounds = np.append(starts, len(sc))
    return order, bounds


# -- near field ------------------------------------------------------------------


def _near_sources(pairs_t, pairs_s, s_cloud: PointCloud):
    """Per-pair source node ranges in the sorted source permutation."""
    starts = s_cloud.box_offsets[pairs_s]
    counts = s_cloud.box_offsets[pairs_s + 1] - starts
    return starts, counts


def near_field(
    kernel: KernelSpec,
    t_cloud: PointCloud,
    s_cloud: PointCloud,
    pairs_t: np.ndarray,
    pairs_s: np.ndarray,
    q: np.ndarray,
    v: np.ndarray,
    *,
    same_cloud: bool = False,
    threads: int = 1,
    dtype=None,
    tracker: MemoryTracker | None = None,
    trace: list | None = None,
    level: int = 0,
    deadline: float | None = None,
) -> np.ndarray:
    """Add the dense products of the given box pairs into ``v`` (in place).

    Pairs are grouped by target box; each target box is summed against the
    concatenation of its near source boxes. With ``same_cloud`` the node
    pair ``(i, i)`` contributes nothing.
    """
    pairs_t = np.asarray(pairs_t, dtype=np.int64)
    pairs_s = np.asarray(pairs_s, dtype=np.int64)
    if len(pairs_t) == 0:
        return v
    order = np.argsort(pairs_t, kind="stable")
    pairs_t, pairs_s = pairs_t[order], pairs_s[order]
    tb_starts = np.flatnonzero(np.concatenate(([True], pairs_t[1:] != pairs_t[:-1])))
    tb_bounds = np.append(tb_starts, len(pairs_t))
    s_start, s_count = _near_sources(pairs_t, pairs_s, s_cloud)
    per_box = np.add.reduceat(s_count, tb_starts)
    t_counts = t_cloud.counts[pairs_t[tb_starts]]

    # chunks of target boxes with bounded expanded source lists
    cost = np.cumsum(per_box)
    chunks = []
    a = 0
    while a < len(tb_starts):
        limit = (cost[a - 1] if a else 0) + _CHUNK // 8
        b = max(a + 1, int(np.searchsorted(cost, limit, side="right")))
        chunks.append((a, min(b, len(tb_starts))))
        a = b
    pos_t, pos_s = t_cloud.positions, s_cloud.positions
    s_perm = s_cloud.permutation

    def run(chunk):
        a, b = chunk
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError("product exceeded its time budget")
        pa, pb = tb_bounds[a], tb_bounds[b]
        src_sorted = _expand(s_start[pa:pb], s_count[pa:pb])
        src = s_perm[src_sorted]
        local = np.concatenate(([0], np.cumsum(per_box[a:b])))
        out = []
        for i in range(a, b):
            tb = pairs_t[tb_bounds[i]]
            tn = t_cloud.nodes(tb)
            sn = src[local[i - a]:local[i - a + 1]]
            ids = (tn, sn) if same_cloud else (None, None)
            block = dense_block(kernel, pos_t[tn], pos_s[sn], target_ids=ids[0], source_ids=ids[1])
            if dtype is not None:
                block = block.astype(dtype, copy=False)
                out.append((tn, block @ q[sn].astype(dtype, copy=False)))
            else:
                out.append((tn, block @ q[sn]))
            if trace is not None:
                for j in range(tb_bounds[i], tb_bounds[i + 1]):
                    trace.append((level, "near", tn.copy(), s_cloud.nodes(pairs_s[j]).copy()))
        return out, src.nbytes + src_sorted.nbytes

    if tracker is not None:
        tracker.hold("near:index", pairs_t, pairs_s, s_start, s_count, per_box, tb_bounds)
        tracker.transient(int(t_counts.max()) * int(per_box.max()) * 16 * threads + 16 * _CHUNK // 8 * threads)
    if threads > 1 and len(chunks) > 1 and trace is None:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for out, _ in results:
        for tn, vals in out:
            v[tn] += vals
    if tracker is not None:
        tracker.drop("near:index")
    return v


# -- far field: Chebyshev-Lagrange path ------------------------------------------


def _axis_weights(cloud: PointCloud, grid: LevelGrid, sel, r1: int):
    """Per-axis Lagrange weights ``(n, 3, r1)`` of the sorted nodes in ``sel``."""
    nodes = cloud.permutation[sel]
    box = np.searchsorted(cloud.box_offsets, sel, side="right") - 1
    ref = 2.0 * (cloud.positions[nodes] - grid.centers[box]) / grid.edge
    return interp.lagrange_1d(ref, interp.chebyshev_points(r1)), box, nodes


def _moments(cloud: PointCloud, grid: LevelGrid, q, r1: int, dtype, tracker) -> np.ndarray:
    """``L_Y q`` for every box: ``(n_boxes, r1**3)``."""
    r = r1**3
    W = np.zeros((len(grid), r), dtype=dtype)
    n = cloud.n_active
    step = max(1, _CHUNK // r)
    tracker.transient(step * r * np.dtype(dtype).itemsize * 2)
    for a in range(0, n, step):
        sel = np.arange(a, min(a + step, n))
        w, box, nodes = _axis_weights(cloud, grid, sel, r1)
        qa = q[nodes].astype(dtype, copy=False)
        contrib = ((qa[:, None] * w[:, 0])[:, :, None, None] * w[:, 1, None, :, None] * w[:, 2, None, None, :])
        starts = np.flatnonzero(np.concatenate(([True], box[1:] != box[:-1])))
        W[box[starts]] += np.add.reduceat(contrib.reshape(len(sel), r), starts, axis=0)
    return W


def _evaluate(cloud: PointCloud, grid: LevelGrid, F: np.ndarray, r1: int, v: np.ndarray, tracker) -> None:
    """``v += L_X^T F`` box by box."""
    r = r1**3
    n = cloud.n_active
    step = max(1, _CHUNK // r)
    tracker.transient(step * r * F.itemsize * 2)
    for a in range(0, n, step):
        sel = np.arange(a, min(a + step, n))
        w, box, nodes = _axis_weights(cloud, grid, sel, r1)
        Fb = F[box].reshape(len(sel), r1, r1, r1)
        v[nodes] += np.einsum("nabc,na,nb,nc->n", Fb, w[:, 0], w[:, 1], w[:, 2], optimize=True)


def _lagrange_level(kernel, tg, sg, tc, sc, ft, fs, delta, q, v, cfg, tracker, work_dtype):
    r1 = cfg.cheb_order_override or interp.choose_order(cfg.tol)
    r = r1**3
    aca_tol = cfg.tol * cfg.aca_tol_factor
    W = _moments(sc, sg, q, r1, work_dtype, tracker)
    tracker.hold("lagrange:W", W)
    F = np.zeros((len(tg), r), dtype=work_dtype)
    tracker.hold("lagrange:F", F)
    order, bounds = _group_by_key(delta)
    ref = interp.chebyshev_nodes(np.zeros(3), tg.edge, r1).nodes
    cache_bytes = 0
    for g in range(len(bounds) - 1):
        idx = order[bounds[g]:bounds[g + 1]]
        r0 = offset_vectors(tg, sg, delta[idx[0]])
        xn = ref + r0
        factor = interp.aca(lambda I, J: kernel(xn[I], ref[J]), r, r, aca_tol)
        cache_bytes += factor.nbytes
        tracker.hold("lagrange:cache", cache_bytes)
        if factor.rank == 0:
            continue
        # target boxes are distinct within one key
        F[ft[idx]] += (W[fs[idx]] @ factor.B.astype(work_dtype, copy=False)) @ factor.A.T.astype(work_dtype, copy=False)
    tracker.drop("lagrange:W")
    _evaluate(tc, tg, F, r1, v, tracker)
    tracker.drop("lagrange:F", "lagrange:cache")
    return len(bounds) - 1


# -- far field: plane-wave path --------------------------------------------------


def _box_points(cloud: PointCloud, grid: LevelGrid, boxes: np.ndarray):
    """Box-centered coordinates of the nodes of ``boxes``, contiguous per box."""
    starts = cloud.box_offsets[boxes]
    counts = cloud.box_offsets[boxes + 1] - starts
    sel = _expand(starts, counts)
    nodes = cloud.permutation[sel]
    centers = np.repeat(grid.centers[boxes], counts, axis=0)
    pts = cloud.positions[nodes] - centers
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return pts, nodes, offsets


def _batches(plan: nufft.NufftPlan, counts: np.ndarray, crossover: float):
    """Split boxes into the direct set and bounded batches of gridded boxes."""
    direct = counts * plan.n_freq <= crossover
    d_idx = np.flatnonzero(direct)
    g_idx = np.flatnonzero(~direct)
    out = []
    if len(d_idx):
        out.append(("direct", d_idx))
    per = max(1, _GRID_BATCH_BYTES // max(plan.n_fine**3 * 16, 1))
    for a in range(0, len(g_idx), per):
        out.append(("gridded", g_idx[a:a + per]))
    return out


def _planewave_level(kernel, tg, sg, tc, sc, ft, fs, delta, q, v, cfg, tracker):
    k = kernel.wavenumber
    L = planewave.truncation_rank(k, tg.edge, cfg.tol)
    quad = planewave.spherical_quadrature(L)
    freq = k * quad.directions
    eps_f = cfg.tol * cfg.nufft_tol_factor
    crossover = math.inf if cfg.force_direct_nufft else cfg.nufft_crossover
    plan = nufft.make_plan(
        1,
        freq,
        eps_f,
        half_width=0.5 * tg.edge * (1 + 1e-12),
        crossover=crossover,
        force_direct=cfg.force_direct_nufft,
        fast_trig=not cfg.force_direct_nufft,
    )
    gridded = plan.with_mode("gridded")
    direct = plan.with_mode("direct")
    n_q = quad.size

    s_used = np.unique(fs)
    t_used = np.unique(ft)
    s_slot = np.full(len(sg), -1, dtype=np.int64)
    s_slot[s_used] = np.arange(len(s_used))
    t_slot = np.full(len(tg), -1, dtype=np.int64)
    t_slot[t_used] = np.arange(len(t_used))

    U = np.zeros((len(s_used), n_q), dtype=np.complex128)
    tracker.hold("pw:U", U)
    qc = np.asarray(q, dtype=np.complex128)
    counts = sc.counts[s_used]
    for mode, idx in _batches(plan, counts, crossover):
        pts, nodes, offs = _box_points(sc, sg, s_used[idx])
        p = direct if mode == "direct" else gridded
        tracker.transient(pts.nbytes * 3 + p.nbytes + len(idx) * p.n_fine**3 * 16 * (mode == "gridded"))
        U[idx] = nufft.forward_boxes(p, pts, qc[nodes], offs)
        _check_deadline(cfg)

    V = np.zeros((len(t_used), n_q), dtype=np.complex128)
    tracker.hold("pw:V", V)
    order, bounds = _group_by_key(delta)
    cache_bytes = 0
    for g in range(len(bounds) - 1):
        idx = order[bounds[g]:bounds[g + 1]]
        r0 = offset_vectors(tg, sg, delta[idx[0]])
        diag = planewave.gegenbauer_transfer(k, r0, quad, L, include_p0=cfg.include_p0)
        cache_bytes += diag.nbytes
        tracker.hold("pw:cache", cache_bytes)
        V[t_slot[ft[idx]]] += U[s_slot[fs[idx]]] * diag.values
    tracker.drop("pw:U", "pw:cache")

    counts = tc.counts[t_used]
    for mode, idx in _batches(plan, counts, crossover):
        pts, nodes, offs = _box_points(tc, tg, t_used[idx])
        p = direct if mode == "direct" else gridded
        tracker.transient(pts.nbytes * 3 + p.nbytes + len(idx) * p.n_fine**3 * 16 * (mode == "gridded"))
        v[nodes] += nufft.backward_boxes(p, V[idx], pts, offs)
        _check_deadline(cfg)
    tracker.drop("pw:V")
    return len(bounds) - 1


# -- driver ------------------------------------------------------------------


def _as_cloud(points) -> PointCloud:
    if isinstance(points, PointCloud):
        return PointCloud.from_positions(points.positions)
    return PointCloud.from_positions(points)


def ffm_product(
    kernel: KernelSpec,
    targets,
    sources,
    q,
    config: FfmConfig | None = None,
) -> ProductReport:
    """Approximate ``v_i = sum_j G(x_i, y_j) q_j``.

    ``targets`` and ``sources`` are ``(n, 3)`` arrays or :class:`PointCloud`
    objects. Passing the same object for both marks a same-cloud product,
    in which ``i == j`` terms are skipped.
    """
    cfg = config or FfmConfig()
    same_cloud = sources is targets or sources is None
    X = _as_cloud(targets)
    Y = X if same_cloud else _as_cloud(sources)
    q = np.asarray(q)
    if q.shape != (len(Y),):
        raise ValueError(f"charge vector has shape {q.shape}, expected ({len(Y)},)")
    if not np.all(np.isfinite(q)):
        raise ValueError("charges must be finite")
    complex_out = kernel.field == "complex" or np.iscomplexobj(q)
    out_dtype = np.complex128 if complex_out else np.float64
    single = cfg.precision == "single"
    work_dtype = (np.complex64 if complex_out else np.float32) if single else out_dtype
    q = q.astype(out_dtype, copy=False)

    tracker = MemoryTracker()
    trace = [] if cfg.trace else None
    v = np.zeros(len(X), dtype=out_dtype)
    n = max(len(X), len(Y))
    max_depth = cfg.max_depth or auto_max_depth(n)

    tg, sg, _ = bounding_cubes(X, Y)
    tc, sc = X, Y
    near_t = np.zeros(1, dtype=np.int64)
    near_s = np.zeros(1, dtype=np.int64)
    report = ProductReport(v=v, levels_used=0, trace=trace)
    level = 0
    tracker.hold("tree", tc, sc, tg, sg)

    while True:
        state = LevelState(level, len(near_t), tc.n_active, tc.n_boxes, sc.n_active, sc.n_boxes, max_depth)
        if stop_check(state, cfg):
            break
        _check_deadline(cfg)
        # refine both trees
        t_ranges_parent = len(tg)
        s_ranges_parent = len(sg)
        ctg, ctc = subdivide(tg, tc)
        csg, csc = subdivide(sg, sc) if not same_cloud else (ctg, ctc)
        tracker.hold("tree:child", ctc, csc, ctg, csg)
        t_ranges = child_ranges(ctg, t_ranges_parent)
        s_ranges = child_ranges(csg, s_ranges_parent)
        ct, cs = child_pairs(near_t, near_s, t_ranges, s_ranges)
        tracker.hold("pairs", ct, cs, ct.nbytes * 3)
        far, delta = classify(ctg, csg, ct, cs)
        level += 1
        tracker.drop("tree")

        ft, fs, fdelta = ct[far], cs[far], delta[far]
        nt, ns = ct[~far], cs[~far]
        del ct, cs, delta, far
        tracker.hold("pairs", ft, fs, fdelta, nt, ns)
        report.far_pairs_per_level[level] = len(ft)
        if len(ft):
            if trace is not None:
                for a, b in zip(ft, fs):
                    trace.append((level, "far", ctc.nodes(a).copy(), csc.nodes(b).copy()))
            oscill = kernel.supports_planewave and is_oscillatory(kernel, ctg.edge, cfg.osc_threshold)
            if oscill:
                n_keys = _planewave_level(kernel, ctg, csg, ctc, csc, ft, fs, fdelta, q, v, cfg, tracker)
                report.level_paths[level] = "planewave"
            else:
                n_keys = _lagrange_level(kernel, ctg, csg, ctc, csc, ft, fs, fdelta, q, v, cfg, tracker, work_dtype)
                report.level_paths[level] = "lagrange"
            report.transfer_cache_sizes[level] = n_keys
            log.debug("level %d: %d far pairs, %d keys, %d near", level, len(ft), n_keys, len(nt))
        del ft, fs, fdelta

        # keep only boxes that still take part in near pairs
        keep_t = np.zeros(len(ctg), dtype=bool)
        keep_t[nt] = True
        tg, tc, remap_t = restrict(ctg, ctc, keep_t)
        if same_cloud:
            sg, sc, remap_s = tg, tc, remap_t
        else:
            keep_s = np.zeros(len(csg), dtype=bool)
            keep_s[ns] = True
            sg, sc, remap_s = restrict(csg, csc, keep_s)
        near_t, near_s = remap_t[nt], remap_s[ns]
        del nt, ns, ctg, ctc, csg, csc
        tracker.drop("tree:child")
        tracker.hold("tree", tc, sc, tg, sg)
        tracker.hold("pairs", near_t, near_s)

    report.levels_used = level
    report.near_pairs_final = len(near_t)
    near_field(
        kernel,
        tc,
        sc,
        near_t,
        near_s,
        q,
        v,
        same_cloud=same_cloud,
        threads=cfg.threads,
        dtype=work_dtype if single else None,
        tracker=tracker,
        trace=trace,
        level=level,
        deadline=cfg.deadline,
    )
    if same_cloud and cfg.include_diagonal:
        v += cfg.diagonal_value * q
    report.peak_aux_bytes = tracker.peak
    return report


def product(kernel: KernelSpec, targets, sources, charges, config: FfmConfig | None = None):
    """``(values, report)`` convenience wrapper around :func:`ffm_product`."""
    report = ffm_product(kernel, targets, sources, charges, config)
    return report.v, report
