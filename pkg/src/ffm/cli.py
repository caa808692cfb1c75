"""Benchmark harness: sphere clouds, timed products, sampled errors, CSV/markdown."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import FfmConfig, ffm_product
from .geometry import PointCloud, load_points
from .kernels import KernelSpec, dense_block, kernel_by_name

__all__ = [
    "BenchRow",
    "BenchReport",
    "sphere_cloud",
    "sample_error",
    "benchmark_wavenumber",
    "run_benchmark",
    "build_parser",
    "main",
]

log = logging.getLogger("ffm.cli")

COLUMNS = ["N", "kernel", "k", "threads", "time_s", "peak_mem_bytes", "rel_err", "tol"]
FAIL_PREFIX = "FAILED:"
# Helmholtz runs are anchored at k * r_max = 20 for N = 1e4 and scale as sqrt(N)
ANCHOR_KR = 20.0
ANCHOR_N = 1e4


def sphere_cloud(n: int, seed: int) -> PointCloud:
    """``n`` points uniform on the unit sphere (normalized Gaussians)."""
    if n < 1:
        raise ValueError("need at least one point")
    g = np.random.default_rng(seed).standard_normal((n, 3))
    norms = np.linalg.norm(g, axis=1)
    zero = norms == 0
    g[zero] = (1.0, 0.0, 0.0)
    norms[zero] = 1.0
    return PointCloud.from_positions(g / norms[:, None])


def _positions(cloud) -> np.ndarray:
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def sample_error(
    v_ffm,
    kernel: KernelSpec,
    targets,
    sources,
    q,
    m_samples: int = 100,
    seed: int = 0,
    *,
    same_cloud: bool = False,
) -> float:
    """Relative l2 error of ``v_ffm`` on ``m_samples`` exactly computed rows.

    Rows are drawn uniformly without replacement; ``m_samples`` is clamped to
    the number of targets.
    """
    x = _positions(targets)
    y = _positions(sources)
    v_ffm = np.asarray(v_ffm)
    m = min(int(m_samples), len(x))
    if m < 1:
        raise ValueError("need at least one sample row")
    rows = np.sort(np.random.default_rng(seed).choice(len(x), m, replace=False))
    exact = np.empty(m, dtype=np.result_type(v_ffm.dtype, kernel.dtype, np.asarray(q).dtype))
    step = max(1, (1 << 22) // max(len(y), 1))
    ids_y = np.arange(len(y)) if same_cloud else None
    for a in range(0, m, step):
        r = rows[a:a + step]
        block = dense_block(kernel, x[r], y, target_ids=r if same_cloud else None, source_ids=ids_y)
        exact[a:a + step] = block @ q
    norm = float(np.linalg.norm(exact))
    if norm == 0.0:
        raise ValueError(
            f"exact values vanish on all {m} sampled rows; relative error is undefined "
            "(zero charges or a cancelling configuration)"
        )
    return float(np.linalg.norm(v_ffm[rows] - exact)) / norm


def benchmark_wavenumber(n: int, r_max: float) -> float:
    """``k`` with ``k * r_max = 20 * sqrt(n / 1e4)``."""
    return ANCHOR_KR * math.sqrt(n / ANCHOR_N) / r_max


def cloud_diameter(points) -> float:
    """Twice the largest distance from the centroid."""
    p = _positions(points)
    return 2.0 * float(np.linalg.norm(p - p.mean(axis=0), axis=1).max())


@dataclass(frozen=True)
class BenchRow:
    n: int
    kernel: str
    k: float
    threads: int
    time_s: float
    peak_mem_bytes: int
    rel_err: float
    tol: float
    failure: str | None = None

    def __post_init__(self):
        if self.failure is None:
            if not self.rel_err >= 0:
                raise ValueError("rel_err must be non-negative")
            if not self.time_s > 0:
                raise ValueError("time_s must be positive")

    @property
    def ok(self) -> bool:
        return self.failure is None

    def cells(self) -> list[str]:
        err = FAIL_PREFIX + self.failure if self.failure else repr(float(self.rel_err))
        return [
            str(self.n),
            self.kernel,
            repr(float(self.k)),
            str(self.threads),
            repr(float(self.time_s)),
            str(int(self.peak_mem_bytes)),
            err,
            repr(float(self.tol)),
        ]


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def add(self, row: BenchRow) -> None:
        self.rows.append(row)
        self.rows.sort(key=lambda r: r.n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        rows = []
        for cells in reader:
            if not cells:
                continue
            n, kernel, k, threads, t, mem, err, tol = cells
            failure = err[len(FAIL_PREFIX):] if err.startswith(FAIL_PREFIX) else None
            rows.append(
                BenchRow(
                    n=int(n),
                    kernel=kernel,
                    k=float(k),
                    threads=int(threads),
                    time_s=float(t),
                    peak_mem_bytes=int(mem),
                    rel_err=math.nan if failure else float(err),
                    tol=float(tol),
                    failure=failure,
                )
            )
        return cls(sorted(rows, key=lambda r: r.n))

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        for r in self.rows:
            c = r.cells()
            if r.ok:
                c[2] = f"{r.k:.4g}"
                c[4] = f"{r.time_s:.3f}"
                c[6] = f"{r.rel_err:.3e}"
                c[7] = f"{r.tol:g}"
            lines.append("| " + " | ".join(c) + " |")
        return "\n".join(lines) + "\n"

    def __eq__(self, other) -> bool:
        if not isinstance(other, BenchReport) or len(self.rows) != len(other.rows):
            return False
        for a, b in zip(self.rows, other.rows):
            if a.cells() != b.cells():
                return False
        return True


def _count(text: str) -> int:
    """Integer flag that also accepts forms like ``1e5``."""
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if value != int(value) or value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return int(value)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ffm-bench",
        description="Time fast convolution products on random sphere clouds and estimate their error.",
    )
    p.add_argument("--kernel", choices=["laplace", "helmholtz"], default="laplace")
    p.add_argument("--n", type=_count, action="append", dest="n", metavar="N",
                   help="problem size (repeatable; default 10000)")
    p.add_argument("--wavenumber", type=float, default=None,
                   help="fixed Helmholtz wavenumber (default: scale with sqrt(N), k*r_max = 20 at N = 1e4)")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--leaf-avg", type=int, default=64)
    p.add_argument("--max-depth", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--check-full", action="store_true", help="compare against every row of the dense product")
    p.add_argument("--force-direct-nufft", action="store_true")
    p.add_argument("--points", default=None,
                   help="binary little-endian float64 x,y,z triples used as both targets and sources")
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--timeout", type=float, default=None, help="per-row time budget in seconds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _run_row(args, n: int, targets, sources, same_cloud: bool) -> BenchRow:
    kernel_name = args.kernel
    k = 0.0
    if kernel_name == "helmholtz":
        k = args.wavenumber if args.wavenumber is not None else benchmark_wavenumber(n, cloud_diameter(targets))
    kernel = kernel_by_name(kernel_name, k if kernel_name == "helmholtz" else None)
    start = time.perf_counter()
    deadline = time.monotonic() + args.timeout if args.timeout else None
    cfg = FfmConfig(
        tol=args.tol,
        leaf_avg=args.leaf_avg,
        max_depth=args.max_depth,
        threads=args.threads,
        force_direct_nufft=args.force_direct_nufft,
        deadline=deadline,
    )
    q = np.random.default_rng(args.seed + 2).standard_normal(len(sources.positions))
    common = dict(n=n, kernel=kernel_name, k=k, threads=args.threads, tol=args.tol)
    try:
        report = ffm_product(kernel, targets, targets if same_cloud else sources, q, cfg)
    except TimeoutError:
        return BenchRow(time_s=time.perf_counter() - start, peak_mem_bytes=0, rel_err=math.nan,
                        failure="timeout", **common)
    except MemoryError:
        return BenchRow(time_s=time.perf_counter() - start, peak_mem_bytes=0, rel_err=math.nan,
                        failure="out-of-memory", **common)
    elapsed = time.perf_counter() - start
    m = len(targets.positions) if args.check_full else args.samples
    err = sample_error(report.v, kernel, targets, sources, q, m, args.seed + 3, same_cloud=same_cloud)
    log.info("N=%d k=%.4g: %.3f s, %d bytes peak, error %.3e", n, k, elapsed, report.peak_aux_bytes, err)
    return BenchRow(time_s=elapsed, peak_mem_bytes=report.peak_aux_bytes, rel_err=err, **common)


def run_benchmark(args) -> BenchReport:
    report = BenchReport()
    if args.points:
        cloud = PointCloud.from_positions(load_points(args.points))
        report.add(_run_row(args, len(cloud), cloud, cloud, same_cloud=True))
        return report
    for n in sorted(args.n or [10_000]):
        targets = sphere_cloud(n, args.seed)
        sources = sphere_cloud(n, args.seed + 1)
        report.add(_run_row(args, n, targets, sources, same_cloud=False))
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not 0 < args.tol < 1:
        print("error: --tol must lie in (0, 1)", file=sys.stderr)
        return 2
    try:
        report = run_benchmark(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = report.to_csv() if args.format == "csv" else report.to_markdown()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0 if all(r.ok for r in report.rows) else 3


if __name__ == "__main__":
    sys.exit(main())
