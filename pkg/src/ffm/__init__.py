"""Fast kernel convolution products with linear auxiliary memory."""

from .engine import FfmConfig, ProductReport, ffm_product, product
from .geometry import DegenerateGeometryError, PointCloud
from .kernels import KernelSpec, SingularInteractionError, helmholtz_kernel, kernel_by_name, laplace_kernel

__all__ = [
    "FfmConfig",
    "ProductReport",
    "ffm_product",
    "product",
    "PointCloud",
    "DegenerateGeometryError",
    "KernelSpec",
    "SingularInteractionError",
    "laplace_kernel",
    "helmholtz_kernel",
    "kernel_by_name",
]

__version__ = "0.1.0"
