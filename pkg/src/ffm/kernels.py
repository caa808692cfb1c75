"""Convolution kernels G(x, y) = G(x - y)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "KernelSpec",
    "SingularInteractionError",
    "laplace_kernel",
    "helmholtz_kernel",
    "kernel_by_name",
    "is_oscillatory",
    "dense_block",
]

FOUR_PI = 4.0 * np.pi


class SingularInteractionError(ArithmeticError):
    """A kernel evaluation produced a non-finite value for a distinct node pair."""

    def __init__(self, target: int, source: int):
        super().__init__(
            f"kernel is singular for target node {target} and source node {source} "
            "(coincident coordinates)"
        )
        self.target = target
        self.source = source


@dataclass(frozen=True)
class KernelSpec:
    """A translation-invariant kernel.

    ``evaluator(x, y)`` must broadcast over leading axes of two ``(..., 3)``
    arrays. ``radial``, when given, is the same kernel written as a function of
    ``|x - y|`` and lets dense blocks use a fast distance matrix.
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    field: str = "real"
    wavenumber: float = 0.0
    name: str = "custom"
    radial: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.field not in ("real", "complex"):
            raise ValueError(f"field must be 'real' or 'complex', got {self.field!r}")
        if self.wavenumber < 0:
            raise ValueError("wavenumber must be non-negative")
        if self.wavenumber > 0 and self.field != "complex":
            raise ValueError("an oscillatory kernel must be complex-valued")

    def __call__(self, x, y):
        return self.evaluator(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))

    @property
    def dtype(self):
        return np.complex128 if self.field == "complex" else np.float64

    @property
    def supports_planewave(self) -> bool:
        return self.name == "helmholtz" and self.wavenumber > 0


def _dist(x, y):
    d = x - y
    return np.sqrt(np.einsum("...i,...i->...", d, d))


def _laplace_radial(r):
    with np.errstate(divide="ignore"):
        return 1.0 / (FOUR_PI * r)


def laplace_kernel() -> KernelSpec:
    """``1 / (4 pi |x - y|)``."""
    return KernelSpec(
        evaluator=lambda x, y: _laplace_radial(_dist(x, y)),
        field="real",
        name="laplace",
        radial=_laplace_radial,
    )


def helmholtz_kernel(k: float) -> KernelSpec:
    """``exp(i k |x - y|) / (4 pi |x - y|)``."""
    k = float(k)
    if not k > 0:
        raise ValueError(f"Helmholtz wavenumber must be positive, got {k}")

    def radial(r):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(1j * k * r) / (FOUR_PI * r)

    return KernelSpec(
        evaluator=lambda x, y: radial(_dist(x, y)),
        field="complex",
        wavenumber=k,
        name="helmholtz",
        radial=radial,
    )


def kernel_by_name(name: str, wavenumber: float | None = None) -> KernelSpec:
    name = name.lower()
    if name == "laplace":
        return laplace_kernel()
    if name == "helmholtz":
        if wavenumber is None:
            raise ValueError("the Helmholtz kernel needs a wavenumber")
        return helmholtz_kernel(wavenumber)
    raise ValueError(f"unknown kernel {name!r} (expected 'laplace' or 'helmholtz')")


def is_oscillatory(kernel: KernelSpec, d_l: float, threshold: float = 1.0) -> bool:
    if kernel.field != "complex":
        return False
    return kernel.wavenumber * d_l > threshold


def dense_block(
    kernel: KernelSpec,
    targets,
    sources,
    *,
    target_ids=None,
    source_ids=None,
) -> np.ndarray:
    """Kernel matrix ``K[i, j] = G(x_i, y_j)``.

    When node ids are supplied, entries whose target and source ids coincide
    are self-interactions and are set to zero. Any other non-finite entry
    raises :class:`SingularInteractionError`.
    """
    x = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    y = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    if kernel.radial is not None:
        block = kernel.radial(cdist(x, y))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            block = kernel.evaluator(x[:, None, :], y[None, :, :])
    block = np.asarray(block)
    if target_ids is not None and source_ids is not None:
        same = np.asarray(target_ids)[:, None] == np.asarray(source_ids)[None, :]
        if same.any():
            block[same] = 0.0
    bad = ~np.isfinite(block)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        ti = int(target_ids[i]) if target_ids is not None else int(i)
        sj = int(source_ids[j]) if source_ids is not None else int(j)
        raise SingularInteractionError(ti, sj)
    return block
